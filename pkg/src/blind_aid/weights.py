"""重みファイル (リトルエンディアンのバイナリ) の読み書き

フォーマット:
    magic "CNWB" (4 bytes), version u32 = 1, 構成フィンガープリント (32 bytes),
    テンソル数 u32, 各テンソルごとに rank u32, dims u32×rank,
    float32 のデータ。レコード間にパディングはない。
"""

import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from blind_aid.errors import (
    BadMagicError,
    TruncatedPayloadError,
    VersionMismatchError,
    WeightsShapeMismatchError,
)
from blind_aid.network import (
    LayerParams,
    Network,
    NetworkConfig,
    parameter_shapes,
)
from blind_aid.tensor import DEFAULT_DTYPE, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"CNWB"
FORMAT_VERSION = 1
FINGERPRINT_SIZE = 32
_U32 = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


def save_weights(net: Network, sink: BinaryIO | str | Path) -> None:
    """ネットワークの重みを書き出す (データは float32 に変換する)"""
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as f:
            save_weights(net, f)
        logger.info("重みを保存しました: %s", sink)
        return
    tensors = net.tensors()
    sink.write(MAGIC)
    sink.write(_U32.pack(FORMAT_VERSION))
    sink.write(net.config.fingerprint())
    sink.write(_U32.pack(len(tensors)))
    for t in tensors:
        sink.write(_U32.pack(t.rank))
        for d in t.shape:
            sink.write(_U32.pack(d))
        sink.write(t.array.astype(_FLOAT).tobytes(order="C"))


def weights_bytes(net: Network) -> bytes:
    buffer = io.BytesIO()
    save_weights(net, buffer)
    return buffer.getvalue()


class _Reader:
    def __init__(self, source: BinaryIO) -> None:
        self.source = source

    def read(self, n: int, what: str) -> bytes:
        data = self.source.read(n)
        if len(data) != n:
            raise TruncatedPayloadError(
                f"{what} の途中でファイルが終わっています "
                f"({len(data)}/{n} bytes)"
            )
        return data

    def u32(self, what: str) -> int:
        return _U32.unpack(self.read(_U32.size, what))[0]


def load_weights(
    config: NetworkConfig,
    source: BinaryIO | str | Path,
    dtype: object = DEFAULT_DTYPE,
) -> Network:
    """重みファイルを読み込み、構成と組み合わせてネットワークを作る

    Raises:
        BadMagicError: 先頭 4 バイトが "CNWB" でない場合。
        VersionMismatchError: フォーマットバージョンが異なる場合。
        WeightsShapeMismatchError: フィンガープリントやテンソル形状が
            構成と一致しない場合。
        TruncatedPayloadError: ファイルが途中で終わっている場合。
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as f:
            return load_weights(config, f, dtype)

    reader = _Reader(source)
    magic = source.read(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"重みファイルのマジックが不正です: {magic!r}")
    version = reader.u32("バージョン")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"未対応のバージョンです: {version} (対応: {FORMAT_VERSION})"
        )
    fingerprint = reader.read(FINGERPRINT_SIZE, "フィンガープリント")
    if fingerprint != config.fingerprint():
        raise WeightsShapeMismatchError(
            f"重みファイルは構成 {config.name} のものではありません"
        )

    expected = parameter_shapes(config)
    expected_tensors = [s for pair in expected if pair for s in pair]
    count = reader.u32("テンソル数")
    if count != len(expected_tensors):
        raise WeightsShapeMismatchError(
            f"テンソル数 {count} が構成の {len(expected_tensors)} と異なります"
        )

    tensors = []
    for index, shape in enumerate(expected_tensors):
        rank = reader.u32("rank")
        dims = tuple(reader.u32("dims") for _ in range(rank))
        if dims != shape:
            raise WeightsShapeMismatchError(
                f"テンソル {index} の形状 {dims} が構成の {shape} と異なります"
            )
        size = int(np.prod(dims)) * _FLOAT.itemsize
        payload = reader.read(size, f"テンソル {index}")
        array = np.frombuffer(payload, dtype=_FLOAT).reshape(dims)
        tensors.append(Tensor.wrap(array.astype(dtype)))

    params: list[LayerParams | None] = []
    it = iter(tensors)
    for pair in expected:
        params.append(
            None if pair is None else LayerParams(next(it), next(it))
        )
    return Network(config=config, parameters=tuple(params))
