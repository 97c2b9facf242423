"""合成データセット (正方形・円・三角形) の生成と読み込み

生成したディレクトリには shape_00000.ppm ... と annotations.txt が入る。
アノテーションは塗った画素の外接矩形から測る。
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from blind_aid.errors import DatasetInvalidError, InvalidInputError
from blind_aid.evaluate import GroundTruth, dump_annotations, load_annotations
from blind_aid.vision import ImageBuffer, encode_ppm

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("square", "disk", "triangle")
FRAME_SIZE = 64
MIN_SIDE = 12
MAX_SIDE = 28
ANNOTATIONS_FILE = "annotations.txt"
# 重ならない配置を探す試行回数
_PLACEMENT_ATTEMPTS = 50


def frame_name(index: int) -> str:
    return f"shape_{index:05d}"


def shape_mask(kind: int, x0: int, y0: int, side: int) -> np.ndarray:
    """frame 全体の bool マスク (画素中心で内外を判定する)"""
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE] + 0.5
    inside = (xx >= x0) & (xx < x0 + side) & (yy >= y0) & (yy < y0 + side)
    if kind == 0:
        return inside
    if kind == 1:
        r = side / 2
        cx, cy = x0 + r, y0 + r
        return inside & ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r)
    # 頂点が上、底辺が下の二等辺三角形
    half = (yy - y0) / side * (side / 2)
    return inside & (np.abs(xx - (x0 + side / 2)) <= half + 0.5)


def _measured_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    x_min, x_max = xs.min(), xs.max() + 1
    y_min, y_max = ys.min(), ys.max() + 1
    return (
        float((x_min + x_max) / 2 / FRAME_SIZE),
        float((y_min + y_max) / 2 / FRAME_SIZE),
        float((x_max - x_min) / FRAME_SIZE),
        float((y_max - y_min) / FRAME_SIZE),
    )


def _overlaps(a: tuple[int, int, int], b: tuple[int, int, int]) -> bool:
    # 1 画素の余白を取る
    ax, ay, aside = a
    bx, by, bside = b
    return not (
        ax + aside + 1 <= bx
        or bx + bside + 1 <= ax
        or ay + aside + 1 <= by
        or by + bside + 1 <= ay
    )


def render_frame(
    rng: np.random.Generator, frame_id: str, max_objects: int
) -> tuple[ImageBuffer, list[GroundTruth]]:
    """ノイズ背景に 1〜max_objects 個の図形を描いた 1 フレーム"""
    pixels = rng.integers(0, 64, size=(FRAME_SIZE, FRAME_SIZE, 3))
    pixels = pixels.astype(np.uint8)
    count = int(rng.integers(1, max_objects + 1))
    placed: list[tuple[int, int, int]] = []
    truths = []
    for _ in range(count):
        for _ in range(_PLACEMENT_ATTEMPTS):
            side = int(rng.integers(MIN_SIDE, MAX_SIDE + 1))
            x0 = int(rng.integers(0, FRAME_SIZE - side + 1))
            y0 = int(rng.integers(0, FRAME_SIZE - side + 1))
            if not any(_overlaps((x0, y0, side), p) for p in placed):
                break
        else:
            continue
        kind = int(rng.integers(0, len(SHAPE_CLASSES)))
        color = rng.integers(128, 256, size=3).astype(np.uint8)
        mask = shape_mask(kind, x0, y0, side)
        pixels[mask] = color
        placed.append((x0, y0, side))
        truths.append(GroundTruth(frame_id, kind, _measured_box(mask)))
    return ImageBuffer(pixels=pixels), truths


def generate_shapes(
    directory: str | Path,
    count: int,
    seed: int,
    max_objects: int = 3,
) -> list[GroundTruth]:
    """count 枚のフレームとアノテーションを書き出す

    同じ seed なら同じバイト列になる。

    Raises:
        InvalidInputError: count か max_objects が 1 未満の場合。
    """
    if count < 1:
        raise InvalidInputError(f"count は 1 以上です: {count}")
    if max_objects < 1:
        raise InvalidInputError(f"max_objects は 1 以上です: {max_objects}")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    truths: list[GroundTruth] = []
    for index in range(count):
        frame_id = frame_name(index)
        img, frame_truths = render_frame(rng, frame_id, max_objects)
        (out / f"{frame_id}.ppm").write_bytes(encode_ppm(img))
        truths.extend(frame_truths)
    (out / ANNOTATIONS_FILE).write_text(
        dump_annotations(truths), encoding="utf-8"
    )
    logger.info("%d フレームを %s に生成しました", count, out)
    return truths


@dataclass(frozen=True)
class Dataset:
    """フレームのパスと正解の組

    Attributes:
        frames (dict[str, Path]): frame_id → PPM のパス (名前順)。
        truths (list[GroundTruth]): アノテーションの全行。
    """

    frames: dict[str, Path]
    truths: list[GroundTruth]


def load_dataset(directory: str | Path) -> Dataset:
    """データセットのディレクトリを読み込む

    Raises:
        InvalidInputError: annotations.txt がない場合。
    """
    root = Path(directory)
    annotations = root / ANNOTATIONS_FILE
    if not annotations.is_file():
        raise InvalidInputError(
            f"アノテーションが見つかりません: {annotations}"
        )
    truths = load_annotations(annotations)
    frames = {p.stem: p for p in sorted(root.glob("*.ppm"))}
    return Dataset(frames=frames, truths=truths)


def validate_dataset(dataset: Dataset, num_classes: int) -> None:
    """学習前の整合性チェック

    Raises:
        DatasetInvalidError: 画像のないアノテーション、範囲外のクラス、
            正解のないフレームがある場合。
    """
    if not dataset.frames:
        raise DatasetInvalidError("フレームがありません")
    annotated = set()
    for t in dataset.truths:
        if t.frame_id not in dataset.frames:
            raise DatasetInvalidError(
                f"フレーム {t.frame_id} の画像がありません"
            )
        if t.class_id >= num_classes:
            raise DatasetInvalidError(
                f"クラス ID {t.class_id} がクラス数 {num_classes} を超えています"
            )
        annotated.add(t.frame_id)
    missing = sorted(set(dataset.frames) - annotated)
    if missing:
        raise DatasetInvalidError(
            f"正解のないフレームがあります: {', '.join(missing[:5])}"
        )
