"""パイプラインの段階ごとの処理時間を測る"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from rich.table import Table

from blind_aid.assist import frame_result
from blind_aid.errors import InvalidInputError
from blind_aid.network import forward
from blind_aid.pipeline import FrameProcessor
from blind_aid.vision import decode_ppm, resize_bilinear, to_input_tensor

logger = logging.getLogger(__name__)

STAGES = ("decode", "resize", "forward", "decode+nms", "output")


@dataclass
class BenchReport:
    """段階ごとの計測値 (秒)"""

    iterations: int
    samples: dict[str, list[float]] = field(
        default_factory=lambda: {stage: [] for stage in STAGES}
    )

    def summary(self) -> dict[str, dict[str, float]]:
        """段階ごとの平均と p95 (ミリ秒)"""
        return {
            stage: {
                "mean_ms": float(np.mean(values) * 1000),
                "p95_ms": float(np.percentile(values, 95) * 1000),
            }
            for stage, values in self.samples.items()
        }

    def to_json(self) -> str:
        record = {"iterations": self.iterations, "stages": self.summary()}
        return json.dumps(record, separators=(",", ":"))

    def to_table(self) -> Table:
        table = Table(title=f"latency ({self.iterations} iterations)")
        table.add_column("stage")
        table.add_column("mean [ms]", justify="right")
        table.add_column("p95 [ms]", justify="right")
        for stage, stats in self.summary().items():
            table.add_row(
                stage, f"{stats['mean_ms']:.3f}", f"{stats['p95_ms']:.3f}"
            )
        return table


def run_bench(
    processor: FrameProcessor, image: Path, iterations: int
) -> BenchReport:
    """1 枚の画像で各段階を iterations 回ずつ計測する

    段階は独立に計測するので、合計は段階の平均の和と一致しない。

    Raises:
        InvalidInputError: iterations が 1 未満の場合。
    """
    if iterations < 1:
        raise InvalidInputError(f"iterations は 1 以上です: {iterations}")
    data = image.read_bytes()
    config = processor.network.config
    _, height, width = config.input_shape
    report = BenchReport(iterations=iterations)

    def timed(stage: str, fn: Callable[..., Any], *args: Any) -> Any:
        start = time.perf_counter()
        value = fn(*args)
        report.samples[stage].append(time.perf_counter() - start)
        return value

    for _ in range(iterations):
        img = timed("decode", decode_ppm, data)
        resized = timed("resize", resize_bilinear, img, width, height)
        tensor = to_input_tensor(resized, processor.network.dtype)
        output, _ = timed("forward", forward, processor.network, tensor)
        dets = timed(
            "decode+nms", processor.recognizer.postprocess, output
        )
        result = frame_result(image.stem, config, dets)
        timed("output", processor.render, result)
    logger.debug("計測が終わりました: %s", image)
    return report
