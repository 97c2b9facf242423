"""畳み込み・プーリング・ELU・全結合・損失関数の順伝播と逆伝播

勾配はレイヤーごとに手書きしている (自動微分は使わない)。
畳み込みは im2col + 行列積で計算する。
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from blind_aid.errors import (
    InvalidAnnotationError,
    InvalidGeometryError,
    InvalidHyperparameterError,
    InvalidLabelError,
    ShapeMismatchError,
)
from blind_aid.tensor import Tensor

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class ConvParams:
    """畳み込み層のパラメータ

    Attributes:
        weights (Tensor): [out_channels, in_channels, kh, kw] の重み。
        bias (Tensor): [out_channels] のバイアス。
        stride (int): ストライド (1 以上)。
        padding (int): 上下左右のゼロパディング幅。
    """

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weights.rank != 4:
            raise ShapeMismatchError(
                f"畳み込みの重みは 4 階テンソルです: {self.weights.shape}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"バイアスの形状が不正です: {self.bias.shape}"
            )
        if self.stride < 1 or self.padding < 0:
            raise InvalidGeometryError(
                f"stride={self.stride}, padding={self.padding} は不正です"
            )


@dataclass(frozen=True)
class PoolRecord:
    """最大値プーリングの出力と、各出力要素の入力側インデックス

    argmax は入力テンソル全体 [C, H, W] に対するフラットなインデックス。
    """

    output: Tensor
    argmax: np.ndarray


# --- 畳み込み ---


def _conv_geometry(
    shape: tuple[int, ...], p: ConvParams
) -> tuple[int, int, int, int]:
    if len(shape) != 3:
        raise ShapeMismatchError(f"入力は [C, H, W] にしてください: {shape}")
    channels, height, width = shape
    _, in_channels, kh, kw = p.weights.shape
    if channels != in_channels:
        raise ShapeMismatchError(
            f"入力チャネル数 {channels} と重みの {in_channels} が一致しません"
        )
    padded_h = height + 2 * p.padding
    padded_w = width + 2 * p.padding
    if padded_h < kh or padded_w < kw:
        raise InvalidGeometryError(
            f"カーネル {kh}x{kw} がパディング後の入力 "
            f"{padded_h}x{padded_w} より大きいです"
        )
    out_h = (padded_h - kh) // p.stride + 1
    out_w = (padded_w - kw) // p.stride + 1
    return kh, kw, out_h, out_w


def _im2col(x: np.ndarray, kh: int, kw: int, p: ConvParams) -> np.ndarray:
    """[C, H, W] を [H'·W', C·kh·kw] の列行列に展開する"""
    pad = p.padding
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, :: p.stride, :: p.stride]
    channels, out_h, out_w = windows.shape[:3]
    return windows.transpose(1, 2, 0, 3, 4).reshape(
        out_h * out_w, channels * kh * kw
    )


def conv2d_forward(input: Tensor, p: ConvParams) -> Tensor:
    """2 次元畳み込み

    out[o][i][j] = bias[o] + Σ w[o][c][u][v]·in_padded[c][i·s+u][j·s+v]

    Args:
        input (Tensor): [C, H, W] の入力。
        p (ConvParams): 重み・バイアス・ストライド・パディング。

    Returns:
        Tensor: [O, H', W'] の特徴マップ。

    Raises:
        ShapeMismatchError: チャネル数が一致しない場合。
        InvalidGeometryError: カーネルがパディング後の入力より大きい場合。
    """
    kh, kw, out_h, out_w = _conv_geometry(input.shape, p)
    out_channels = p.weights.shape[0]
    cols = _im2col(input.array, kh, kw, p)
    kernel = p.weights.array.reshape(out_channels, -1)
    out = (cols @ kernel.T).T.reshape(out_channels, out_h, out_w)
    out = out + p.bias.array[:, None, None]
    return Tensor.wrap(out)


def conv2d_backward(
    input: Tensor, p: ConvParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """畳み込みの逆伝播

    Returns:
        tuple[Tensor, Tensor, Tensor]: (grad_input, grad_weights, grad_bias)
    """
    kh, kw, out_h, out_w = _conv_geometry(input.shape, p)
    out_channels = p.weights.shape[0]
    if grad_out.shape != (out_channels, out_h, out_w):
        raise ShapeMismatchError(
            f"grad_out の形状 {grad_out.shape} が出力 "
            f"{(out_channels, out_h, out_w)} と一致しません"
        )
    x = input.array
    g = grad_out.array.reshape(out_channels, -1)
    cols = _im2col(x, kh, kw, p)
    kernel = p.weights.array.reshape(out_channels, -1)

    grad_w = (g @ cols).reshape(p.weights.shape)
    grad_b = g.sum(axis=1)

    # col2im: 各カーネル位置ごとにストライド付きスライスへ足し込む
    channels, height, width = x.shape
    pad, s = p.padding, p.stride
    dcols = (g.T @ kernel).reshape(out_h, out_w, channels, kh, kw)
    padded = np.zeros(
        (channels, height + 2 * pad, width + 2 * pad),
        dtype=np.result_type(x, g),
    )
    for u in range(kh):
        for v in range(kw):
            padded[
                :,
                u : u + s * (out_h - 1) + 1 : s,
                v : v + s * (out_w - 1) + 1 : s,
            ] += dcols[:, :, :, u, v].transpose(2, 0, 1)
    grad_x = padded[:, pad : pad + height, pad : pad + width]
    return Tensor.wrap(grad_x), Tensor.wrap(grad_w), Tensor.wrap(grad_b)


# --- 最大値プーリング ---


def maxpool2d_forward(
    input: Tensor, k: int, stride: int, padding: int = 0
) -> PoolRecord:
    """k×k 窓の最大値プーリング

    同値の場合は入力側のフラットインデックスが最も小さい要素を選ぶ。
    パディング位置 (-inf) が最大値になることはない。
    """
    if input.rank != 3:
        raise ShapeMismatchError(
            f"入力は [C, H, W] にしてください: {input.shape}"
        )
    if k < 1 or stride < 1 or padding < 0 or padding >= k:
        raise InvalidGeometryError(
            f"k={k}, stride={stride}, padding={padding} は不正です"
        )
    channels, height, width = input.shape
    if height + 2 * padding < k or width + 2 * padding < k:
        raise InvalidGeometryError(
            f"窓 {k}x{k} が入力 {height}x{width} より大きいです"
        )
    padded = np.pad(
        input.array,
        ((0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1:3]
    flat = windows.reshape(channels, out_h, out_w, k * k)
    local = flat.argmax(axis=-1)
    output = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    # 窓内の位置を入力全体のフラットインデックスに変換する
    rows = np.arange(out_h)[:, None] * stride + local // k - padding
    cols = np.arange(out_w)[None, :] * stride + local % k - padding
    chans = np.arange(channels)[:, None, None]
    argmax = (chans * height + rows) * width + cols
    return PoolRecord(output=Tensor.wrap(output), argmax=argmax)


def maxpool2d_backward(
    record: PoolRecord, grad_out: Tensor, input_shape: Sequence[int]
) -> Tensor:
    """各勾配を argmax の位置へ振り分ける (衝突した場合は加算)"""
    if grad_out.shape != record.output.shape:
        raise ShapeMismatchError(
            f"grad_out の形状 {grad_out.shape} がプーリング出力 "
            f"{record.output.shape} と一致しません"
        )
    grad = np.zeros(int(np.prod(input_shape)), dtype=grad_out.dtype)
    np.add.at(grad, record.argmax.reshape(-1), grad_out.data)
    return Tensor.wrap(grad.reshape(tuple(input_shape)))


# --- ELU ---


def _check_elu_a(a: float) -> None:
    if not a >= 0:
        raise InvalidHyperparameterError(
            f"ELU の a は 0 以上にしてください: {a}"
        )


def elu(x: Tensor, a: float) -> Tensor:
    """f(x) = x (x >= 0), a·(exp(x) − 1) (それ以外)"""
    _check_elu_a(a)
    v = x.array
    negative = a * np.expm1(np.minimum(v, 0))
    return Tensor.wrap(np.where(v >= 0, v, negative).astype(v.dtype))


def elu_backward(x: Tensor, a: float, grad_out: Tensor) -> Tensor:
    _check_elu_a(a)
    if grad_out.shape != x.shape:
        raise ShapeMismatchError(
            f"grad_out の形状 {grad_out.shape} が入力 {x.shape} と異なります"
        )
    v = x.array
    # x = 0 は x >= 0 側 (傾き 1)
    slope = np.where(v >= 0, 1.0, a * np.exp(np.minimum(v, 0)))
    return Tensor.wrap((grad_out.array * slope).astype(grad_out.dtype))


# --- 全結合 ---


def _check_fc(x: Tensor, weights: Tensor, bias: Tensor | None) -> None:
    if x.rank != 1 or weights.rank != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeMismatchError(
            f"全結合の形状が一致しません: x {x.shape}, W {weights.shape}"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeMismatchError(
            f"バイアスの形状が不正です: {bias.shape}"
        )


def fc_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """W·x + b"""
    _check_fc(x, weights, bias)
    return Tensor.wrap(weights.array @ x.array + bias.array)


def fc_backward(
    x: Tensor, weights: Tensor, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    _check_fc(x, weights, None)
    if grad_out.shape != (weights.shape[0],):
        raise ShapeMismatchError(
            f"grad_out の形状 {grad_out.shape} が不正です"
        )
    g = grad_out.array
    grad_x = weights.array.T @ g
    grad_w = np.outer(g, x.array)
    return Tensor.wrap(grad_x), Tensor.wrap(grad_w), Tensor.wrap(g.copy())


# --- 活性化の補助関数 ---


def sigmoid(x: np.ndarray) -> np.ndarray:
    """オーバーフローしないロジスティック関数"""
    x = np.asarray(x)
    positive = x >= 0
    z = np.exp(np.where(positive, -x, x))
    return np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """最大値を引いて安定化した softmax"""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, label: int
) -> tuple[float, Tensor, Tensor]:
    """softmax + 交差エントロピー

    Returns:
        tuple[float, Tensor, Tensor]: (loss, probs, grad_logits)

    Raises:
        InvalidLabelError: label が [0, m) の範囲外の場合。
    """
    if logits.rank != 1:
        raise ShapeMismatchError(
            f"logits は 1 階テンソルです: {logits.shape}"
        )
    m = logits.shape[0]
    if not 0 <= label < m:
        raise InvalidLabelError(f"ラベル {label} は [0, {m}) の範囲外です")
    z = logits.array
    shifted = z - z.max()
    log_sum = np.log(np.sum(np.exp(shifted)))
    loss = float(log_sum - shifted[label])
    probs = np.exp(shifted - log_sum)
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, Tensor.wrap(probs), Tensor.wrap(grad)


# --- 検出損失 ---


def box_iou(a: Box, b: Box) -> float:
    """中心形式 (cx, cy, w, h) の 2 つのボックスの IoU"""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # 同じボックスの IoU はちょうど 1.0
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def responsible_cell(box: Box, grid: int) -> tuple[int, int]:
    """正解ボックスの中心が入るセル (行, 列)"""
    row = min(int(box[1] * grid), grid - 1)
    col = min(int(box[0] * grid), grid - 1)
    return row, col


def detection_loss(
    pred_grid: Tensor,
    truths: Sequence[tuple[int, Box]],
    boxes: int,
    classes: int,
) -> tuple[float, Tensor]:
    """単一スケールの二乗誤差による検出損失

    予測は decode_grid と同じ活性化 (x, y, w, h, 信頼度はロジスティック、
    クラスは softmax) を通してから目標値と比較する。

    Args:
        pred_grid (Tensor): [S, S, B·5 + C] の生出力。
        truths (Sequence[tuple[int, Box]]): (クラス, 中心形式ボックス) のリスト。
        boxes (int): セルあたりのボックス数 B。
        classes (int): クラス数 C。

    Returns:
        tuple[float, Tensor]: (loss, pred_grid に対する勾配)
    """
    if (
        pred_grid.rank != 3
        or pred_grid.shape[0] != pred_grid.shape[1]
        or pred_grid.shape[2] != boxes * 5 + classes
    ):
        raise ShapeMismatchError(
            f"検出グリッドの形状 {pred_grid.shape} が "
            f"B={boxes}, C={classes} と一致しません"
        )
    grid = pred_grid.shape[0]
    for cls, box in truths:
        if not all(0.0 <= v <= 1.0 for v in box):
            raise InvalidAnnotationError(
                f"ボックス座標は [0, 1] にしてください: {box}"
            )
        if not 0 <= cls < classes:
            raise InvalidAnnotationError(f"クラス {cls} は範囲外です")

    raw = pred_grid.array
    box_raw = raw[..., : boxes * 5].reshape(grid, grid, boxes, 5)
    act = sigmoid(box_raw)
    probs = softmax(raw[..., boxes * 5 :])

    # 目標値: 責任ボックスの (x, y, w, h, 1)、それ以外は信頼度 0
    responsible = np.zeros((grid, grid, boxes), dtype=bool)
    box_target = np.zeros((grid, grid, boxes, 5))
    class_target: dict[tuple[int, int], int] = {}
    for cls, box in truths:
        row, col = responsible_cell(box, grid)
        best, best_iou = -1, -1.0
        for b in range(boxes):
            if responsible[row, col, b]:
                continue
            ax, ay, aw, ah = act[row, col, b, :4]
            pred_box = ((col + ax) / grid, (row + ay) / grid, aw, ah)
            overlap = box_iou(pred_box, box)
            if overlap > best_iou:
                best, best_iou = b, overlap
        if best < 0:
            continue
        responsible[row, col, best] = True
        box_target[row, col, best] = (
            box[0] * grid - col,
            box[1] * grid - row,
            box[2],
            box[3],
            1.0,
        )
        class_target.setdefault((row, col), cls)

    # d loss / d activation
    d_act = np.zeros_like(act)
    diff = act - box_target
    d_act[responsible] = 2.0 * diff[responsible]
    d_act[~responsible, 4] = 2.0 * act[~responsible, 4]
    loss = float(np.sum(diff[responsible] ** 2))
    loss += float(np.sum(act[~responsible, 4] ** 2))

    d_probs = np.zeros_like(probs)
    for (row, col), cls in class_target.items():
        target = np.zeros(classes)
        target[cls] = 1.0
        delta = probs[row, col] - target
        loss += float(np.sum(delta**2))
        d_probs[row, col] = 2.0 * delta

    # 活性化の微分を通して生出力に戻す
    grad_box = d_act * act * (1.0 - act)
    dot = np.sum(d_probs * probs, axis=-1, keepdims=True)
    grad_cls = probs * (d_probs - dot)
    grad = np.concatenate(
        [grad_box.reshape(grid, grid, boxes * 5), grad_cls], axis=-1
    )
    return loss, Tensor.wrap(grad.astype(pred_grid.dtype))
