"""カメラフレーム (バイナリ PPM) のデコード・リサイズ・テンソル化"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from blind_aid.errors import (
    InvalidInputError,
    PpmBadMagicError,
    PpmMalformedHeaderError,
    PpmTruncatedError,
    PpmUnsupportedMaxvalError,
)
from blind_aid.tensor import DEFAULT_DTYPE, Tensor

# 既定の作業解像度
WORK_SIZE = 416

_WHITESPACE = b" \t\n\r\v\f"


@dataclass(frozen=True)
class ImageBuffer:
    """デコード済みの RGB ラスタ

    Attributes:
        pixels (np.ndarray): [height, width, 3] の uint8 配列 (行優先)。
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise InvalidInputError(
                f"画素は [H, W, 3] の uint8 にしてください: {p.shape}"
            )
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidInputError("画像の幅と高さは 1 以上です")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """PPM ヘッダから count 個のトークンを読み、画素データの開始位置を返す

    '#' から行末まではコメント。最後のトークンの後には空白が 1 文字だけ入る。
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord(
            "#"
        ):
            pos += 1
        if start == pos:
            raise PpmMalformedHeaderError("PPM ヘッダが途中で終わっています")
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in _WHITESPACE:
        raise PpmMalformedHeaderError("ヘッダの後に空白がありません")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> ImageBuffer:
    """バイナリ PPM (P6, maxval 255) をデコードする

    Raises:
        PpmBadMagicError: マジックが P6 でない場合。
        PpmUnsupportedMaxvalError: maxval が 255 でない場合。
        PpmTruncatedError: 画素データが足りない場合。
        PpmMalformedHeaderError: ヘッダが解釈できない場合。
    """
    if data[:2] != b"P6":
        raise PpmBadMagicError(f"P6 ではありません: {data[:2]!r}")
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise PpmBadMagicError(f"P6 ではありません: {tokens[0]!r}")
    if not all(re.fullmatch(rb"[0-9]+", t) for t in tokens[1:]):
        raise PpmMalformedHeaderError(f"数値ではありません: {tokens[1:]}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise PpmUnsupportedMaxvalError(
            f"maxval は 255 のみ対応しています: {maxval}"
        )
    if width < 1 or height < 1:
        raise PpmMalformedHeaderError(f"画像サイズが不正です: {width}x{height}")
    size = width * height * 3
    payload = data[offset : offset + size]
    if len(payload) < size:
        raise PpmTruncatedError(
            f"画素データが足りません ({len(payload)}/{size} bytes)"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(pixels=pixels.copy())


def encode_ppm(img: ImageBuffer) -> bytes:
    """バイナリ PPM (P6) にエンコードする"""
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes(order="C")


def load_frame(path: str | Path) -> ImageBuffer:
    return decode_ppm(Path(path).read_bytes())


def _axis_weights(
    src: int, dst: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """1 軸ぶんのサンプリング位置 (下側インデックス, 上側インデックス, 重み)"""
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(
    img: ImageBuffer, out_w: int = WORK_SIZE, out_h: int = WORK_SIZE
) -> ImageBuffer:
    """半画素中心のバイリニア補間でリサイズする

    src = (dst + 0.5)·scale − 0.5 をソースの範囲にクランプし、
    チャネルごとに補間して最も近い整数に丸める。
    """
    if out_w < 1 or out_h < 1:
        raise InvalidInputError(f"出力サイズが不正です: {out_w}x{out_h}")
    if (img.width, img.height) == (out_w, out_h):
        return img
    y0, y1, fy = _axis_weights(img.height, out_h)
    x0, x1, fx = _axis_weights(img.width, out_w)
    src = img.pixels.astype(np.float64)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bottom * fy
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return ImageBuffer(pixels=out)


def to_input_tensor(img: ImageBuffer, dtype: object = DEFAULT_DTYPE) -> Tensor:
    """[3, H, W] のチャネル優先テンソル (値は /255 で [0, 1])"""
    chw = img.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
    return Tensor.wrap(chw.astype(dtype))


def prepare_frame(
    img: ImageBuffer, input_shape: Sequence[int], dtype: object = DEFAULT_DTYPE
) -> Tensor:
    """ネットワークの入力サイズにリサイズしてテンソル化する"""
    _, height, width = input_shape
    return to_input_tensor(resize_bilinear(img, width, height), dtype)
