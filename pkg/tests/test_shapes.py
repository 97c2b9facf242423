import numpy as np
import pytest

from blind_aid.errors import DatasetInvalidError, InvalidInputError
from blind_aid.evaluate import GroundTruth
from blind_aid.shapes import (
    ANNOTATIONS_FILE,
    FRAME_SIZE,
    SHAPE_CLASSES,
    Dataset,
    generate_shapes,
    load_dataset,
    shape_mask,
    validate_dataset,
)
from blind_aid.vision import load_frame


def _contents(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_same_seed_gives_identical_bytes(tmp_path):
    generate_shapes(tmp_path / "a", 10, 42)
    generate_shapes(tmp_path / "b", 10, 42)
    generate_shapes(tmp_path / "c", 10, 43)
    assert _contents(tmp_path / "a") == _contents(tmp_path / "b")
    assert _contents(tmp_path / "a") != _contents(tmp_path / "c")


def test_frames_hold_one_to_three_shapes(tmp_path):
    truths = generate_shapes(tmp_path, 30, 0)
    dataset = load_dataset(tmp_path)
    assert len(dataset.frames) == 30
    assert [(t.frame_id, t.class_id) for t in dataset.truths] == [
        (t.frame_id, t.class_id) for t in truths
    ]
    for loaded, t in zip(dataset.truths, truths):
        assert loaded.box == pytest.approx(t.box, abs=1e-6)
    per_frame = {}
    for t in truths:
        per_frame[t.frame_id] = per_frame.get(t.frame_id, 0) + 1
        assert all(0.0 <= v <= 1.0 for v in t.box)
        assert t.box[2] > 0 and t.box[3] > 0
        assert 0 <= t.class_id < len(SHAPE_CLASSES)
    assert set(per_frame) == set(dataset.frames)
    assert all(1 <= n <= 3 for n in per_frame.values())
    validate_dataset(dataset, len(SHAPE_CLASSES))


def test_square_annotation_matches_painted_extent(tmp_path):
    truths = generate_shapes(tmp_path, 40, 5)
    squares = [t for t in truths if t.class_id == 0]
    assert squares
    for t in squares:
        pixels = load_frame(tmp_path / f"{t.frame_id}.ppm").pixels
        bright = np.all(pixels >= 128, axis=2)
        cx, cy, w, h = (v * FRAME_SIZE for v in t.box)
        x0, x1 = int(round(cx - w / 2)), int(round(cx + w / 2))
        y0, y1 = int(round(cy - h / 2)), int(round(cy + h / 2))
        # 1 画素広げた範囲で塗られた画素の外接矩形を測り直す
        lo_x, lo_y = max(0, x0 - 1), max(0, y0 - 1)
        region = bright[lo_y : y1 + 1, lo_x : x1 + 1]
        ys, xs = np.nonzero(region)
        measured = (
            (xs.min() + lo_x) / FRAME_SIZE,
            (ys.min() + lo_y) / FRAME_SIZE,
            (xs.max() + lo_x + 1) / FRAME_SIZE,
            (ys.max() + lo_y + 1) / FRAME_SIZE,
        )
        expected = (x0 / FRAME_SIZE, y0 / FRAME_SIZE)
        expected += (x1 / FRAME_SIZE, y1 / FRAME_SIZE)
        assert measured == pytest.approx(expected, abs=1 / FRAME_SIZE)


def test_masks_fit_their_squares():
    for kind in range(len(SHAPE_CLASSES)):
        mask = shape_mask(kind, 10, 20, 16)
        ys, xs = np.nonzero(mask)
        assert xs.min() >= 10 and xs.max() < 26
        assert ys.min() >= 20 and ys.max() < 36
    assert shape_mask(0, 10, 20, 16).sum() == 16 * 16


@pytest.mark.parametrize("count, objects", [(0, 3), (5, 0)])
def test_rejects_empty_requests(tmp_path, count, objects):
    with pytest.raises(InvalidInputError):
        generate_shapes(tmp_path, count, 0, objects)


def test_missing_annotations_are_invalid_input(tmp_path):
    with pytest.raises(InvalidInputError):
        load_dataset(tmp_path)


def test_validation_catches_inconsistencies(tmp_path):
    generate_shapes(tmp_path, 3, 1)
    dataset = load_dataset(tmp_path)
    box = (0.5, 0.5, 0.2, 0.2)
    with pytest.raises(DatasetInvalidError):
        validate_dataset(Dataset(frames={}, truths=[]), 3)
    first = next(iter(dataset.frames))
    stray = dataset.truths + [GroundTruth(first, 3, box)]
    with pytest.raises(DatasetInvalidError):
        validate_dataset(Dataset(dataset.frames, stray), 3)
    ghost = dataset.truths + [GroundTruth("ghost", 0, box)]
    with pytest.raises(DatasetInvalidError):
        validate_dataset(Dataset(dataset.frames, ghost), 3)
    rest = [t for t in dataset.truths if t.frame_id != first]
    with pytest.raises(DatasetInvalidError):
        validate_dataset(Dataset(dataset.frames, rest), 3)
    (tmp_path / ANNOTATIONS_FILE).unlink()
    with pytest.raises(InvalidInputError):
        load_dataset(tmp_path)
