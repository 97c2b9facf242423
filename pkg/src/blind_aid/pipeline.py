"""フレームの読み込みと推論を重ねて実行するパイプラインと、ディレクトリ監視

デコードと推論は別々のタスクで動き、深さ 1 のキューで受け渡す。
処理中のフレームは最大 2 つ (推論中 1 + デコード済み 1) で、
結果は入力順に 1 つの書き込み口から出力する。
"""

import asyncio
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import AsyncIterator, Callable, Iterable, Sequence, Union

from blind_aid.assist import (
    FrameResult,
    describe_scene,
    frame_result,
    to_braille,
    to_json,
)
from blind_aid.config import OUTPUT_ORDER, OutputMode, PipelineConfig
from blind_aid.detect import Recognizer
from blind_aid.errors import BlindAidError
from blind_aid.network import Network, build_network
from blind_aid.tensor import Tensor
from blind_aid.vision import decode_ppm, prepare_frame
from blind_aid.weights import load_weights

logger = logging.getLogger(__name__)

MAX_IN_FLIGHT = 2


class EndOfFrames:
    """フレーム列の終わりを示すマーカー"""

    pass


@dataclass(frozen=True)
class DecodedFrame:
    frame_id: str
    path: Path
    tensor: Tensor
    started: float


@dataclass(frozen=True)
class FrameFailure:
    """読み込み・デコード・出力に失敗したフレーム"""

    path: Path
    error: Exception


@dataclass(frozen=True)
class FrameOutcome:
    """1 フレームぶんの出力

    Attributes:
        path (Path): 入力ファイル。
        result (FrameResult): 認識結果。
        payload (bytes): 選択した出力モードを順に連結したバイト列。
        latency (float): デコード開始から出力までの秒数。
    """

    path: Path
    result: FrameResult
    payload: bytes
    latency: float


QueueItem = Union[DecodedFrame, FrameFailure, EndOfFrames]
OutcomeFunc = Callable[[Union[FrameOutcome, FrameFailure]], None]


def render_outputs(
    result: FrameResult, outputs: Sequence[OutputMode]
) -> bytes:
    """json / braille / phrase をこの順で連結する (いずれも改行終端)

    braille は読み上げ用フレーズを点字にしたもの。
    """
    chunks = []
    for mode in OUTPUT_ORDER:
        if mode not in outputs:
            continue
        if mode == "json":
            chunks.append(to_json(result))
        elif mode == "braille":
            chunks.append((to_braille(describe_scene(result)) + "\n").encode())
        else:
            chunks.append((describe_scene(result) + "\n").encode())
    return b"".join(chunks)


def load_network(pipeline: PipelineConfig) -> Network:
    """設定の重みを読み込む (なければ train.seed で初期化する)"""
    config = pipeline.network_config()
    if pipeline.weights is None:
        logger.warning(
            "重みが指定されていないため seed=%d で初期化します",
            pipeline.train.seed,
        )
        return build_network(config, seed=pipeline.train.seed)
    pipeline.check_files()
    return load_weights(config, pipeline.weights)


class FrameProcessor:
    """1 フレームをデコードし、認識して出力のバイト列にする

    Attributes:
        network (Network): 推論に使うネットワーク。
        recognizer (Recognizer): 閾値付きの推論器。
        outputs (list[OutputMode]): 出力モード。
    """

    def __init__(self, network: Network, pipeline: PipelineConfig) -> None:
        self.network = network
        self.recognizer = Recognizer(
            network, pipeline.conf_threshold, pipeline.iou_threshold
        )
        self.outputs = list(pipeline.outputs)

    def decode(self, path: Path) -> Tensor:
        img = decode_ppm(path.read_bytes())
        config = self.network.config
        return prepare_frame(img, config.input_shape, self.network.dtype)

    def recognize(self, frame_id: str, tensor: Tensor) -> FrameResult:
        detections = self.recognizer.recognize(tensor)
        return frame_result(frame_id, self.network.config, detections)

    def render(self, result: FrameResult) -> bytes:
        return render_outputs(result, self.outputs)

    def process(self, path: Path) -> bytes:
        """同期的に 1 フレームを処理する"""
        tensor = self.decode(path)
        return self.render(self.recognize(path.stem, tensor))


class FramePipeline:
    """デコードと推論を別タスクで重ねて実行するパイプライン

    Attributes:
        processor (FrameProcessor): フレームの処理。
        on_outcome (OutcomeFunc): 結果 (または失敗) を受け取るコールバック。
            入力順に 1 つのタスクからだけ呼ばれる。
    """

    def __init__(
        self, processor: FrameProcessor, on_outcome: OutcomeFunc
    ) -> None:
        self.processor = processor
        self.on_outcome = on_outcome
        self.queue: asyncio.Queue[QueueItem] = asyncio.Queue(maxsize=1)
        self.in_flight = asyncio.Semaphore(MAX_IN_FLIGHT)

    async def _decode_frames(self, paths: AsyncIterator[Path]) -> None:
        try:
            async for path in paths:
                await self.in_flight.acquire()
                started = time.perf_counter()
                try:
                    tensor = await asyncio.to_thread(
                        self.processor.decode, path
                    )
                    item: QueueItem = DecodedFrame(
                        path.stem, path, tensor, started
                    )
                except (BlindAidError, OSError) as e:
                    item = FrameFailure(path, e)
                await self.queue.put(item)
        finally:
            # 失敗しても受信側を止めるため必ず送る
            await self.queue.put(EndOfFrames())

    async def _infer_frames(self) -> tuple[int, int]:
        succeeded = failed = 0
        while True:
            item = await self.queue.get()
            self.queue.task_done()
            if isinstance(item, EndOfFrames):
                return succeeded, failed
            try:
                if isinstance(item, FrameFailure):
                    self.on_outcome(item)
                    failed += 1
                    continue
                try:
                    result = await asyncio.to_thread(
                        self.processor.recognize, item.frame_id, item.tensor
                    )
                    payload = self.processor.render(result)
                except BlindAidError as e:
                    self.on_outcome(FrameFailure(item.path, e))
                    failed += 1
                    continue
                latency = time.perf_counter() - item.started
                logger.info(
                    "%s: %d 件検出 (%.1f ms)",
                    item.frame_id,
                    len(result.detections),
                    latency * 1000,
                )
                self.on_outcome(
                    FrameOutcome(item.path, result, payload, latency)
                )
                succeeded += 1
            finally:
                self.in_flight.release()

    async def run(self, paths: AsyncIterator[Path]) -> tuple[int, int]:
        """すべてのフレームを処理し、(成功数, 失敗数) を返す"""
        decoder = asyncio.create_task(self._decode_frames(paths))
        try:
            succeeded, failed = await self._infer_frames()
        except BaseException:
            decoder.cancel()
            raise
        await decoder
        return succeeded, failed


async def iterate_paths(paths: Iterable[Path]) -> AsyncIterator[Path]:
    for path in paths:
        yield path


async def watch_directory(
    directory: Path,
    poll_interval: float,
    max_frames: int | None = None,
    max_polls: int | None = None,
) -> AsyncIterator[Path]:
    """ディレクトリに現れた PPM ファイルを名前順に返す

    2 回続けて同じサイズだったファイルを書き込み完了とみなす。
    max_frames 個返すか max_polls 回ポーリングしたら終わる
    (どちらも None なら中断されるまで続ける)。
    消えたファイルは記録から外すので、同じ名前で置き直されたら再び返す。
    """
    seen: set[Path] = set()
    sizes: dict[Path, int] = {}
    emitted = polls = 0
    while True:
        listing = sorted(directory.glob("*.ppm"))
        # 消えたファイルは忘れる
        seen &= set(listing)
        current = {}
        for path in listing:
            if path in seen:
                continue
            try:
                current[path] = path.stat().st_size
            except OSError:
                # 監視中に消えたファイル
                continue
        ready = sorted(
            p for p, size in current.items() if sizes.get(p) == size
        )
        for path in ready:
            seen.add(path)
            logger.debug("新しいフレーム: %s", path.name)
            yield path
            emitted += 1
            if max_frames is not None and emitted >= max_frames:
                return
        sizes = {p: s for p, s in current.items() if p not in seen}
        polls += 1
        if max_polls is not None and polls >= max_polls:
            return
        await asyncio.sleep(poll_interval)
