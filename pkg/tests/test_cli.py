import json

import pytest
from click.testing import CliRunner

from blind_aid.assist import FrameResult, LabeledDetection, to_json
from blind_aid.cli import main
from blind_aid.shapes import SHAPE_CLASSES, load_dataset

TOY_DETECTOR = ["--config", "pipeline-toy-detector"]


@pytest.fixture
def runner(monkeypatch) -> CliRunner:
    monkeypatch.setenv("BLIND_AID_LOG_LEVEL", "WARNING")
    return CliRunner()


def error_records(stderr: str) -> list[dict]:
    return [
        json.loads(line)
        for line in stderr.splitlines()
        if line.startswith('{"error"')
    ]


@pytest.fixture
def dataset(runner, tmp_path):
    directory = tmp_path / "shapes"
    result = runner.invoke(
        main, ["generate-shapes", str(directory), "--count", "8"]
    )
    assert result.exit_code == 0, result.output
    return directory


def test_generate_shapes_is_deterministic(runner, tmp_path):
    for name in ("a", "b"):
        args = ["generate-shapes", str(tmp_path / name), "--count", "10"]
        assert runner.invoke(main, args + ["--seed", "42"]).exit_code == 0
    a = sorted((tmp_path / "a").iterdir())
    b = sorted((tmp_path / "b").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


def test_generate_shapes_rejects_zero_count(runner, tmp_path):
    result = runner.invoke(
        main, ["generate-shapes", str(tmp_path), "--count", "0"]
    )
    assert result.exit_code == 1
    assert error_records(result.stderr)[0]["error"] == "invalid-input"


def test_detect_emits_one_json_line_per_frame(runner, frame_dir):
    paths = [str(p) for p in sorted(frame_dir.glob("*.ppm"))]
    result = runner.invoke(main, ["detect", *paths, *TOY_DETECTOR])
    assert result.exit_code == 0, result.stderr
    lines = result.stdout.splitlines()
    assert [json.loads(line)["frame_id"] for line in lines] == [
        "frame_000",
        "frame_001",
        "frame_002",
    ]
    again = runner.invoke(main, ["detect", *paths, *TOY_DETECTOR])
    assert again.stdout == result.stdout


def test_zero_weights_recognize_nothing(
    runner, frame_dir, zero_detector_weights
):
    result = runner.invoke(
        main,
        [
            "detect",
            str(frame_dir / "frame_000.ppm"),
            *TOY_DETECTOR,
            "--weights",
            str(zero_detector_weights),
            "--out",
            "phrase",
            "--conf",
            "0.6",
        ],
    )
    assert result.exit_code == 0, result.stderr
    assert result.stdout == "nothing recognized\n"


def test_detect_continues_past_unreadable_files(runner, frame_dir):
    paths = [
        frame_dir / "frame_000.ppm",
        frame_dir / "missing.ppm",
        frame_dir / "frame_002.ppm",
    ]
    result = runner.invoke(
        main, ["detect", *map(str, paths), *TOY_DETECTOR]
    )
    assert result.exit_code == 1
    assert len(result.stdout.splitlines()) == 2
    errors = error_records(result.stderr)
    assert len(errors) == 1
    assert errors[0]["error"] == "invalid-input"
    assert errors[0]["path"].endswith("missing.ppm")


def test_weights_for_another_network_fail(
    runner, frame_dir, zero_detector_weights
):
    result = runner.invoke(
        main,
        [
            "detect",
            str(frame_dir / "frame_000.ppm"),
            "--config",
            "pipeline-toy-classifier",
            "--weights",
            str(zero_detector_weights),
        ],
    )
    assert result.exit_code == 1
    assert error_records(result.stderr)[0]["error"] == (
        "weights-shape-mismatch"
    )


def test_unknown_output_mode_is_a_usage_error(runner, frame_dir):
    result = runner.invoke(
        main, ["detect", str(frame_dir / "frame_000.ppm"), "--out", "audio"]
    )
    assert result.exit_code == 2


def test_watch_processes_frames_in_name_order(runner, frame_dir):
    result = runner.invoke(
        main,
        [
            "watch",
            str(frame_dir),
            *TOY_DETECTOR,
            "--poll-interval",
            "0.01",
            "--max-frames",
            "3",
        ],
    )
    assert result.exit_code == 0, result.stderr
    ids = [json.loads(line)["frame_id"] for line in result.stdout.split()]
    assert ids == ["frame_000", "frame_001", "frame_002"]


def _truth_records(directory) -> bytes:
    data = load_dataset(directory)
    records = []
    for frame_id in data.frames:
        dets = tuple(
            LabeledDetection(SHAPE_CLASSES[t.class_id], 1.0, t.box)
            for t in data.truths
            if t.frame_id == frame_id
        )
        records.append(
            to_json(FrameResult(frame_id, "toy-detector", 64, 64, dets))
        )
    return b"".join(records)


def test_truths_as_detections_score_full_map(runner, dataset, tmp_path):
    detections = tmp_path / "truths.jsonl"
    detections.write_bytes(_truth_records(dataset))
    result = runner.invoke(
        main,
        ["eval", str(dataset), *TOY_DETECTOR, "--detections", str(detections)],
    )
    assert result.exit_code == 0, result.stderr
    report = json.loads(result.stdout)
    assert report["map"] == 1.0
    assert report["frames"] == 8


def test_dumped_detections_reproduce_the_report(runner, dataset, tmp_path):
    dump = tmp_path / "dets.jsonl"
    online = runner.invoke(
        main,
        ["eval", str(dataset), *TOY_DETECTOR, "--conf", "0.1"]
        + ["--dump", str(dump)],
    )
    assert online.exit_code == 0, online.stderr
    offline = runner.invoke(
        main,
        ["eval", str(dataset), *TOY_DETECTOR, "--detections", str(dump)],
    )
    assert offline.exit_code == 0, offline.stderr
    assert offline.stdout == online.stdout
    assert len(dump.read_text().splitlines()) == 8


def test_classifier_eval_reports_top1(runner, dataset):
    result = runner.invoke(
        main, ["eval", str(dataset), "--config", "pipeline-toy-classifier"]
    )
    assert result.exit_code == 0, result.stderr
    report = json.loads(result.stdout)
    assert 0.0 <= report["top1"] <= 1.0
    assert report["map"] is None


def test_eval_without_annotations_is_invalid_input(runner, frame_dir):
    result = runner.invoke(main, ["eval", str(frame_dir), *TOY_DETECTOR])
    assert result.exit_code == 1
    assert error_records(result.stderr)[0]["error"] == "invalid-input"


def test_train_toy_rejects_zero_learning_rate(runner, dataset, tmp_path):
    config = tmp_path / "zero-lr.json"
    config.write_text(
        json.dumps(
            {"network": "toy-classifier", "train": {"learning_rate": 0}}
        )
    )
    weights = tmp_path / "w.cnwb"
    result = runner.invoke(
        main,
        [
            "train-toy",
            str(dataset),
            "--config",
            str(config),
            "--weights",
            str(weights),
        ],
    )
    assert result.exit_code == 1
    errors = error_records(result.stderr)
    assert errors[0]["error"] == "invalid-hyperparameter"
    assert not weights.exists()


def test_train_toy_needs_a_destination(runner, dataset):
    result = runner.invoke(main, ["train-toy", str(dataset)])
    assert result.exit_code == 2


def test_train_toy_prints_summary(runner, dataset, tmp_path):
    config = tmp_path / "short.json"
    config.write_text(
        json.dumps(
            {
                "network": "toy-classifier",
                "train": {"learning_rate": 0.001, "epochs": 1},
            }
        )
    )
    weights = tmp_path / "w.cnwb"
    result = runner.invoke(
        main,
        [
            "train-toy",
            str(dataset),
            "--config",
            str(config),
            "--weights",
            str(weights),
        ],
    )
    assert result.exit_code == 0, result.stderr
    summary = json.loads(result.stdout)
    assert summary["final_loss"] <= summary["initial_loss"]
    assert 0.0 <= summary["top1"] <= 1.0
    assert weights.is_file()


def test_bench_reports_every_stage(runner, frame_dir):
    result = runner.invoke(
        main,
        [
            "bench",
            str(frame_dir / "frame_000.ppm"),
            *TOY_DETECTOR,
            "--iterations",
            "2",
            "--format",
            "json",
        ],
    )
    assert result.exit_code == 0, result.stderr
    report = json.loads(result.stdout)
    assert report["iterations"] == 2
    assert list(report["stages"]) == [
        "decode",
        "resize",
        "forward",
        "decode+nms",
        "output",
    ]
    assert all(s["p95_ms"] >= 0 for s in report["stages"].values())


def test_bench_rejects_zero_iterations(runner, frame_dir):
    result = runner.invoke(
        main,
        ["bench", str(frame_dir / "frame_000.ppm"), *TOY_DETECTOR]
        + ["--iterations", "0"],
    )
    assert result.exit_code == 1
    assert error_records(result.stderr)[0]["error"] == "invalid-input"
