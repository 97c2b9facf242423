"""blind-aid コマンド

結果は stdout、ログと 1 行 JSON のエラーは stderr に出す。
終了コードは成功 0、失敗 1、使い方の誤り 2。
"""

import asyncio
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import click
from dotenv import load_dotenv
from rich.console import Console

from blind_aid.assist import FrameResult, from_json, to_json
from blind_aid.bench import run_bench
from blind_aid.config import (
    OUTPUT_ORDER,
    PipelineConfig,
    load_pipeline_config,
)
from blind_aid.errors import BlindAidError, InvalidInputError
from blind_aid.evaluate import evaluate_results
from blind_aid.logs import error_line, setup_logging
from blind_aid.network import SoftmaxHeadSpec, load_config
from blind_aid.pipeline import (
    FrameFailure,
    FrameOutcome,
    FramePipeline,
    FrameProcessor,
    iterate_paths,
    load_network,
    watch_directory,
)
from blind_aid.shapes import generate_shapes, load_dataset
from blind_aid.train import train_toy
from blind_aid.weights import load_weights

logger = logging.getLogger(__name__)


def report_error(error: Exception, path: Path | str | None = None) -> None:
    code = (
        error.code
        if isinstance(error, BlindAidError)
        else InvalidInputError.code
    )
    where = None if path is None else str(path)
    click.echo(error_line(code, str(error), where), err=True)


def reports_errors(command: Callable[..., Any]) -> Callable[..., Any]:
    """BlindAidError と OSError をエラー行にして終了コード 1 で終える"""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except (BlindAidError, OSError) as e:
            report_error(e, getattr(e, "filename", None))
            sys.exit(1)

    return wrapper


def pipeline_options(command: Callable[..., Any]) -> Callable[..., Any]:
    """--config / --weights / --out / --conf / --iou / --seed"""
    options = [
        click.option(
            "--config",
            "config_path",
            help="パイプライン設定 (JSON のパスまたは同梱の設定名)",
        ),
        click.option(
            "--weights",
            type=click.Path(path_type=Path),
            help="重みファイル",
        ),
        click.option(
            "--out",
            "outputs",
            type=click.Choice(OUTPUT_ORDER),
            multiple=True,
            help="出力モード (複数指定可)",
        ),
        click.option("--conf", type=float, help="信頼度の閾値"),
        click.option("--iou", type=float, help="NMS の IoU 閾値"),
        click.option("--seed", type=int, help="乱数シード"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _pipeline_config(
    config_path: str | None,
    weights: Path | None,
    outputs: tuple[str, ...],
    conf: float | None,
    iou: float | None,
    seed: int | None,
) -> PipelineConfig:
    return load_pipeline_config(
        config_path,
        seed=seed,
        weights=weights,
        outputs=list(outputs) or None,
        conf_threshold=conf,
        iou_threshold=iou,
    )


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="DEBUG ログを出す")
def main(verbose: bool) -> None:
    """視覚障がい者向けの物体認識パイプライン"""
    load_dotenv()
    setup_logging(verbose)


def _write_outcome(outcome: FrameOutcome | FrameFailure) -> None:
    if isinstance(outcome, FrameFailure):
        report_error(outcome.error, outcome.path)
        return
    stdout = click.get_binary_stream("stdout")
    stdout.write(outcome.payload)
    stdout.flush()


@main.command()
@click.argument(
    "images", nargs=-1, required=True, type=click.Path(path_type=Path)
)
@pipeline_options
@reports_errors
def detect(images: tuple[Path, ...], **options: Any) -> None:
    """フレームを認識して結果を出力する (分類構成では分類)"""
    pipeline = _pipeline_config(**options)
    processor = FrameProcessor(load_network(pipeline), pipeline)
    runner = FramePipeline(processor, _write_outcome)
    _, failed = asyncio.run(runner.run(iterate_paths(images)))
    if failed:
        sys.exit(1)


@main.command()
@click.argument(
    "directory",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--poll-interval", type=float, help="ポーリング間隔 (秒)")
@click.option("--max-frames", type=int, help="N フレーム処理したら終わる")
@pipeline_options
@reports_errors
def watch(
    directory: Path,
    poll_interval: float | None,
    max_frames: int | None,
    **options: Any,
) -> None:
    """ディレクトリに現れたフレームを名前順に認識し続ける"""
    pipeline = _pipeline_config(**options)
    processor = FrameProcessor(load_network(pipeline), pipeline)

    def write(outcome: FrameOutcome | FrameFailure) -> None:
        if isinstance(outcome, FrameFailure):
            logger.warning(
                "%s をスキップしました: %s", outcome.path.name, outcome.error
            )
            return
        _write_outcome(outcome)

    interval = poll_interval or pipeline.watch.poll_interval
    logger.info("%s を監視します (%.2f 秒間隔)", directory, interval)
    paths = watch_directory(directory, interval, max_frames=max_frames)
    try:
        asyncio.run(FramePipeline(processor, write).run(paths))
    except KeyboardInterrupt:
        logger.info("監視を終了しました")


@main.command("generate-shapes")
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--count", type=int, default=300, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-objects", type=int, default=3, show_default=True)
@reports_errors
def generate_shapes_command(
    out_dir: Path, count: int, seed: int, max_objects: int
) -> None:
    """合成データセット (正方形・円・三角形) を生成する"""
    generate_shapes(out_dir, count, seed, max_objects)


@main.command("train-toy")
@click.argument(
    "dataset",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option(
    "--init-from",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="先頭のレイヤーに移す事前学習の重み",
)
@click.option(
    "--init-network",
    help="--init-from の重みのネットワーク構成",
)
@pipeline_options
@reports_errors
def train_toy_command(
    dataset: Path,
    init_from: Path | None,
    init_network: str | None,
    **options: Any,
) -> None:
    """合成データセットで学習し、--weights に重みを保存する"""
    pipeline = _pipeline_config(**options)
    if pipeline.weights is None:
        raise click.UsageError("--weights で保存先を指定してください")
    pretrained = None
    if init_from is not None:
        if init_network is None:
            raise click.UsageError("--init-from には --init-network が必要です")
        pretrained = load_weights(load_config(init_network), init_from)
    result = train_toy(dataset, pipeline, pipeline.weights, pretrained)
    summary: dict[str, Any] = {
        "initial_loss": round(result.initial_loss, 6),
        "final_loss": round(result.final_loss, 6),
    }
    if result.top1 is not None:
        summary["top1"] = round(result.top1, 6)
    if result.map_score is not None:
        summary["map"] = round(result.map_score, 6)
    click.echo(json.dumps(summary, separators=(",", ":")))


def _read_records(path: Path) -> list[FrameResult]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return [from_json(line) for line in lines if line.strip()]


@main.command("eval")
@click.argument(
    "dataset",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option(
    "--detections",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="出力済みの JSON 行を評価する (推論しない)",
)
@click.option(
    "--dump",
    type=click.Path(dir_okay=False, path_type=Path),
    help="推論した JSON 行の保存先",
)
@pipeline_options
@reports_errors
def eval_command(
    dataset: Path,
    detections: Path | None,
    dump: Path | None,
    **options: Any,
) -> None:
    """データセットで mAP (検出構成) または top-1 (分類構成) を求める"""
    pipeline = _pipeline_config(**options)
    data = load_dataset(dataset)
    config = pipeline.network_config()
    failed = 0
    if detections is not None:
        results = _read_records(detections)
    else:
        processor = FrameProcessor(load_network(pipeline), pipeline)
        results = []

        def collect(outcome: FrameOutcome | FrameFailure) -> None:
            nonlocal failed
            if isinstance(outcome, FrameFailure):
                report_error(outcome.error, outcome.path)
                failed += 1
                return
            # 出力と同じ桁に丸めてから評価する
            results.append(from_json(to_json(outcome.result)))

        runner = FramePipeline(processor, collect)
        asyncio.run(runner.run(iterate_paths(data.frames.values())))
        if dump is not None:
            dump.write_bytes(b"".join(to_json(r) for r in results))
    report = evaluate_results(
        results,
        data.truths,
        config.class_labels,
        classifier=isinstance(config.head, SoftmaxHeadSpec),
    )
    click.echo(report.to_canonical_json(), nl=False)
    if failed:
        sys.exit(1)


@main.command()
@click.argument(
    "image", type=click.Path(exists=True, dir_okay=False, path_type=Path)
)
@click.option("--iterations", type=int, default=10, show_default=True)
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["table", "json"]),
    default="table",
    show_default=True,
)
@pipeline_options
@reports_errors
def bench(image: Path, iterations: int, fmt: str, **options: Any) -> None:
    """段階ごとの処理時間 (平均と p95) を測る"""
    pipeline = _pipeline_config(**options)
    processor = FrameProcessor(load_network(pipeline), pipeline)
    report = run_bench(processor, image, iterations)
    if fmt == "json":
        click.echo(report.to_json())
    else:
        Console().print(report.to_table())


if __name__ == "__main__":
    main()
