"""ネットワーク構成の宣言・構築・順伝播・逆伝播・SGD

構成 (NetworkConfig) は JSON で記述し、パッケージ同梱の configs/ に
名前付きで置いている。構築時に入力形状からすべてのレイヤーの形状を
静的に伝播させ、失敗したレイヤーの番号をエラーに含める。
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Annotated, Any, Iterator, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from blind_aid import layers
from blind_aid.errors import (
    InvalidConfigError,
    InvalidHyperparameterError,
    ShapeMismatchError,
)
from blind_aid.layers import Box, ConvParams, PoolRecord
from blind_aid.tensor import DEFAULT_DTYPE, Tensor

logger = logging.getLogger(__name__)

CONFIG_PACKAGE = "blind_aid.configs"


# --- レイヤー定義 ---


class ConvSpec(BaseModel):
    kind: Literal["conv"] = "conv"
    out_channels: int = Field(ge=1)
    in_channels: int | None = Field(default=None, ge=1)
    kernel: int = Field(default=3, ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)


class MaxPoolSpec(BaseModel):
    kind: Literal["maxpool"] = "maxpool"
    kernel: int = Field(default=2, ge=1)
    stride: int = Field(default=2, ge=1)
    padding: int = Field(default=0, ge=0)


class EluSpec(BaseModel):
    kind: Literal["elu"] = "elu"
    a: float = 1.0


class FlattenSpec(BaseModel):
    kind: Literal["flatten"] = "flatten"


class FcSpec(BaseModel):
    kind: Literal["fc"] = "fc"
    units: int = Field(ge=1)


class SoftmaxHeadSpec(BaseModel):
    kind: Literal["softmax_head"] = "softmax_head"


class DetectHeadSpec(BaseModel):
    kind: Literal["detect_head"] = "detect_head"
    grid: int = Field(ge=1)
    boxes: int = Field(default=2, ge=1)
    classes: int = Field(ge=1)

    @property
    def cell_size(self) -> int:
        return self.boxes * 5 + self.classes


LayerSpec = Annotated[
    Union[
        ConvSpec,
        MaxPoolSpec,
        EluSpec,
        FlattenSpec,
        FcSpec,
        SoftmaxHeadSpec,
        DetectHeadSpec,
    ],
    Field(discriminator="kind"),
]


class NetworkConfig(BaseModel):
    """ネットワーク構成

    Attributes:
        name (str): 構成名 (出力 JSON の model にも使う)。
        input_shape (list[int]): 入力形状 [C, H, W]。
        layers (list[LayerSpec]): レイヤーの並び。
        class_labels (list[str]): クラス名 (クラス ID の順)。
    """

    name: str
    input_shape: list[int] = Field(default_factory=lambda: [3, 416, 416])
    layers: list[LayerSpec]
    class_labels: list[str]

    @model_validator(mode="after")
    def _has_conv(self) -> "NetworkConfig":
        if not any(isinstance(s, ConvSpec) for s in self.layers):
            raise ValueError("畳み込み層が 1 つ以上必要です")
        if len(self.class_labels) == 0:
            raise ValueError("class_labels が空です")
        return self

    @property
    def head(self) -> Any:
        return self.layers[-1]

    @property
    def is_detector(self) -> bool:
        return isinstance(self.head, DetectHeadSpec)

    def canonical_json(self) -> str:
        return json.dumps(
            self.model_dump(mode="json"),
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )

    def fingerprint(self) -> bytes:
        """正規化した構成の SHA-256 (重みファイルに記録する)"""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()


def load_config(name_or_path: str | Path) -> NetworkConfig:
    """同梱の構成名、または JSON ファイルのパスから構成を読み込む"""
    path = Path(name_or_path)
    try:
        if path.suffix == ".json" or path.exists():
            text = path.read_text(encoding="utf-8")
        else:
            resource = resources.files(CONFIG_PACKAGE) / f"{name_or_path}.json"
            text = resource.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InvalidConfigError(
            f"ネットワーク構成が見つかりません: {name_or_path}"
        )
    try:
        config = NetworkConfig.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfigError(
            f"ネットワーク構成が不正です: {e.errors()[0]['msg']}"
        )
    logger.debug("ネットワーク構成 %s を読み込みました", config.name)
    return config


def with_elu_a(config: NetworkConfig, a: float) -> NetworkConfig:
    """すべての ELU 層の a を置き換えた構成を返す"""
    layers_ = [
        EluSpec(a=a) if isinstance(s, EluSpec) else s for s in config.layers
    ]
    return config.model_copy(update={"layers": layers_})


# --- 形状伝播 ---


def _layer_output_shape(
    spec: Any, shape: tuple[int, ...], config: NetworkConfig
) -> tuple[int, ...]:
    if isinstance(spec, ConvSpec):
        if len(shape) != 3:
            raise ValueError(f"畳み込みの入力は [C, H, W] です: {shape}")
        channels, height, width = shape
        if spec.in_channels is not None and spec.in_channels != channels:
            raise ValueError(
                f"入力チャネル {spec.in_channels} を期待していますが "
                f"{channels} チャネルが来ます"
            )
        size_h = height + 2 * spec.padding
        size_w = width + 2 * spec.padding
        if size_h < spec.kernel or size_w < spec.kernel:
            raise ValueError(
                f"カーネル {spec.kernel} がパディング後の入力 "
                f"{size_h}x{size_w} より大きいです"
            )
        return (
            spec.out_channels,
            (size_h - spec.kernel) // spec.stride + 1,
            (size_w - spec.kernel) // spec.stride + 1,
        )
    if isinstance(spec, MaxPoolSpec):
        if len(shape) != 3:
            raise ValueError(f"プーリングの入力は [C, H, W] です: {shape}")
        if spec.padding >= spec.kernel:
            raise ValueError("プーリングの padding は kernel 未満です")
        channels, height, width = shape
        size_h = height + 2 * spec.padding
        size_w = width + 2 * spec.padding
        if size_h < spec.kernel or size_w < spec.kernel:
            raise ValueError(
                f"窓 {spec.kernel} が入力 {height}x{width} より大きいです"
            )
        return (
            channels,
            (size_h - spec.kernel) // spec.stride + 1,
            (size_w - spec.kernel) // spec.stride + 1,
        )
    if isinstance(spec, EluSpec):
        if spec.a < 0:
            raise ValueError(f"ELU の a は 0 以上です: {spec.a}")
        return shape
    if isinstance(spec, FlattenSpec):
        return (int(np.prod(shape)),)
    if isinstance(spec, FcSpec):
        if len(shape) != 1:
            raise ValueError(f"全結合の入力はベクトルです: {shape}")
        return (spec.units,)
    if isinstance(spec, SoftmaxHeadSpec):
        if shape != (len(config.class_labels),):
            raise ValueError(
                f"softmax_head の入力 {shape} がクラス数 "
                f"{len(config.class_labels)} と一致しません"
            )
        return shape
    if isinstance(spec, DetectHeadSpec):
        if spec.classes != len(config.class_labels):
            raise ValueError("detect_head の classes がクラス数と異なります")
        expected = spec.grid * spec.grid * spec.cell_size
        if shape != (expected,):
            raise ValueError(
                f"detect_head には長さ {expected} のベクトルが必要です: "
                f"{shape}"
            )
        return (spec.grid, spec.grid, spec.cell_size)
    raise ValueError(f"未知のレイヤーです: {spec}")


def propagate_shapes(config: NetworkConfig) -> list[tuple[int, ...]]:
    """入力形状を全レイヤーに伝播させ、各レイヤーの出力形状を返す

    Raises:
        InvalidConfigError: 前提を満たさないレイヤーがあった場合 (番号付き)。
    """
    shape = tuple(config.input_shape)
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise InvalidConfigError(f"input_shape が不正です: {shape}")
    shapes = []
    last = len(config.layers) - 1
    for index, spec in enumerate(config.layers):
        is_head = isinstance(spec, (SoftmaxHeadSpec, DetectHeadSpec))
        if is_head and index != last:
            raise InvalidConfigError("ヘッドは最後のレイヤーです", index)
        try:
            shape = _layer_output_shape(spec, shape, config)
        except ValueError as e:
            raise InvalidConfigError(str(e), index)
        shapes.append(shape)
    return shapes


# --- ネットワーク ---


@dataclass(frozen=True)
class LayerParams:
    weights: Tensor
    bias: Tensor


Parameters = tuple[LayerParams | None, ...]


@dataclass(frozen=True)
class Network:
    """構成とパラメータの組 (不変)

    Attributes:
        config (NetworkConfig): 構成。
        parameters (Parameters): レイヤーごとのパラメータ
            (conv / fc 以外は None)。
    """

    config: NetworkConfig
    parameters: Parameters

    @property
    def dtype(self) -> np.dtype:
        for p in self.parameters:
            if p is not None:
                return p.weights.dtype
        return np.dtype(DEFAULT_DTYPE)

    def tensors(self) -> list[Tensor]:
        """重みファイルに書き出す順 (レイヤー順に weights, bias)"""
        out = []
        for p in self.parameters:
            if p is not None:
                out.extend([p.weights, p.bias])
        return out


def parameter_shapes(
    config: NetworkConfig,
) -> list[tuple[tuple[int, ...], tuple[int, ...]] | None]:
    """各レイヤーの (weights, bias) の形状"""
    shapes = propagate_shapes(config)
    inputs = [tuple(config.input_shape)] + shapes[:-1]
    out: list[tuple[tuple[int, ...], tuple[int, ...]] | None] = []
    for spec, in_shape in zip(config.layers, inputs):
        if isinstance(spec, ConvSpec):
            out.append(
                (
                    (spec.out_channels, in_shape[0], spec.kernel, spec.kernel),
                    (spec.out_channels,),
                )
            )
        elif isinstance(spec, FcSpec):
            out.append(((spec.units, in_shape[0]), (spec.units,)))
        else:
            out.append(None)
    return out


class SplitMix64:
    """シード付きの 64 bit 決定的乱数 (splitmix64) をベクトル化したもの"""

    GAMMA = np.uint64(0x9E3779B97F4A7C15)
    CHUNK = 1 << 20

    def __init__(self, seed: int) -> None:
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def _next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(
            self.counter + 1, self.counter + n + 1, dtype=np.uint64
        )
        self.counter += n
        z = self.state + steps * self.GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform_chunks(self, n: int) -> Iterator[tuple[int, np.ndarray]]:
        """[0, 1) の一様乱数 (float64) を CHUNK 個ずつ (開始位置, 値) で返す"""
        for start in range(0, n, self.CHUNK):
            stop = min(n, start + self.CHUNK)
            bits = self._next_u64(stop - start) >> np.uint64(11)
            yield start, bits.astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, n: int) -> np.ndarray:
        """[0, 1) の一様乱数を n 個 (float64)"""
        out = np.empty(n, dtype=np.float64)
        for start, values in self.uniform_chunks(n):
            out[start : start + values.size] = values
        return out


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    return shape[1], shape[0]


def build_network(
    config: NetworkConfig,
    seed: int = 0,
    dtype: Any = DEFAULT_DTYPE,
    init: Literal["uniform", "zeros"] = "uniform",
) -> Network:
    """構成からネットワークを構築する

    重みは ±sqrt(6 / (fan_in + fan_out)) の一様分布 (splitmix64)、
    バイアスは 0 で初期化する。同じ (config, seed) からはビット単位で
    同一のネットワークができる。

    Raises:
        InvalidConfigError: 形状伝播に失敗した場合。
    """
    rng = SplitMix64(seed)
    params: list[LayerParams | None] = []
    for shapes in parameter_shapes(config):
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        if init == "zeros":
            weights = np.zeros(w_shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(w_shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights = np.empty(int(np.prod(w_shape)), dtype=dtype)
            for start, u in rng.uniform_chunks(weights.size):
                weights[start : start + u.size] = (2.0 * u - 1.0) * limit
            weights = weights.reshape(w_shape)
        params.append(
            LayerParams(
                weights=Tensor.wrap(weights),
                bias=Tensor.wrap(np.zeros(b_shape, dtype=dtype)),
            )
        )
    logger.debug(
        "ネットワーク %s を構築しました (seed=%d, init=%s)",
        config.name,
        seed,
        init,
    )
    return Network(config=config, parameters=tuple(params))


# --- 順伝播 ---


@dataclass
class ForwardTrace:
    """逆伝播のために保持する各レイヤーの入力

    activations[i] はレイヤー i の入力、activations[-1] は最終出力。
    """

    activations: list[Tensor] = field(default_factory=list)
    pool_records: dict[int, PoolRecord] = field(default_factory=dict)


def _conv_params(spec: ConvSpec, p: LayerParams) -> ConvParams:
    return ConvParams(
        weights=p.weights,
        bias=p.bias,
        stride=spec.stride,
        padding=spec.padding,
    )


def forward(net: Network, input: Tensor) -> tuple[Tensor, ForwardTrace]:
    """ネットワークの順伝播

    Returns:
        tuple[Tensor, ForwardTrace]: 最終出力と逆伝播用のトレース。

    Raises:
        ShapeMismatchError: 入力形状が構成と異なる場合。
    """
    if list(input.shape) != list(net.config.input_shape):
        raise ShapeMismatchError(
            f"入力形状 {list(input.shape)} が構成の "
            f"{net.config.input_shape} と一致しません"
        )
    trace = ForwardTrace()
    x = input.astype(net.dtype)
    for index, spec in enumerate(net.config.layers):
        trace.activations.append(x)
        p = net.parameters[index]
        if isinstance(spec, ConvSpec):
            x = layers.conv2d_forward(x, _conv_params(spec, p))
        elif isinstance(spec, MaxPoolSpec):
            record = layers.maxpool2d_forward(
                x, spec.kernel, spec.stride, spec.padding
            )
            trace.pool_records[index] = record
            x = record.output
        elif isinstance(spec, EluSpec):
            x = layers.elu(x, spec.a)
        elif isinstance(spec, FlattenSpec):
            x = Tensor.wrap(x.array.reshape(-1))
        elif isinstance(spec, FcSpec):
            x = layers.fc_forward(x, p.weights, p.bias)
        elif isinstance(spec, SoftmaxHeadSpec):
            x = Tensor.wrap(layers.softmax(x.array))
        elif isinstance(spec, DetectHeadSpec):
            x = Tensor.wrap(
                x.array.reshape(spec.grid, spec.grid, spec.cell_size)
            )
    trace.activations.append(x)
    return x, trace


# --- 逆伝播 ---


def backward(
    net: Network,
    trace: ForwardTrace,
    grad_output: Tensor,
    stop: int | None = None,
) -> tuple[Tensor, Parameters]:
    """レイヤー stop - 1 から先頭まで勾配を逆伝播する

    Args:
        net (Network): 順伝播に使ったネットワーク。
        trace (ForwardTrace): forward が返したトレース。
        grad_output (Tensor): レイヤー stop - 1 の出力に対する勾配
            (stop が None なら最終出力に対する勾配)。
        stop (int | None): 逆伝播を始めるレイヤー番号の上限 (排他的)。

    Returns:
        tuple[Tensor, Parameters]: 入力に対する勾配とパラメータの勾配。
    """
    specs = net.config.layers
    stop = len(specs) if stop is None else stop
    grads: list[LayerParams | None] = [None] * len(specs)
    g = grad_output
    for index in reversed(range(stop)):
        spec = specs[index]
        x = trace.activations[index]
        p = net.parameters[index]
        if isinstance(spec, ConvSpec):
            g, gw, gb = layers.conv2d_backward(x, _conv_params(spec, p), g)
            grads[index] = LayerParams(weights=gw, bias=gb)
        elif isinstance(spec, MaxPoolSpec):
            g = layers.maxpool2d_backward(
                trace.pool_records[index], g, x.shape
            )
        elif isinstance(spec, EluSpec):
            g = layers.elu_backward(x, spec.a, g)
        elif isinstance(spec, FcSpec):
            g, gw, gb = layers.fc_backward(x, p.weights, g)
            grads[index] = LayerParams(weights=gw, bias=gb)
        elif isinstance(spec, SoftmaxHeadSpec):
            probs = trace.activations[index + 1].array
            ga = g.array
            g = Tensor.wrap(probs * (ga - np.dot(ga, probs)))
        else:
            # flatten / detect_head は形状を戻すだけ
            g = Tensor.wrap(g.array.reshape(x.shape))
    for index, p in enumerate(net.parameters):
        if p is not None and grads[index] is None:
            grads[index] = LayerParams(
                weights=Tensor.wrap(np.zeros_like(p.weights.array)),
                bias=Tensor.wrap(np.zeros_like(p.bias.array)),
            )
    return g, tuple(grads)


def classification_loss(
    net: Network, input: Tensor, label: int
) -> tuple[float, Parameters, Tensor]:
    """分類ネットワークの交差エントロピー損失と勾配

    softmax_head の手前の logits に softmax_cross_entropy を適用する。

    Returns:
        tuple[float, Parameters, Tensor]: (loss, 勾配, クラス確率)
    """
    if not isinstance(net.config.head, SoftmaxHeadSpec):
        raise InvalidConfigError("分類には softmax_head が必要です")
    _, trace = forward(net, input)
    head = len(net.config.layers) - 1
    logits = trace.activations[head]
    loss, probs, grad = layers.softmax_cross_entropy(logits, label)
    _, grads = backward(net, trace, grad, stop=head)
    return loss, grads, probs


def detection_objective(
    net: Network, input: Tensor, truths: Sequence[tuple[int, Box]]
) -> tuple[float, Parameters, Tensor]:
    """検出ネットワークの検出損失と勾配

    Returns:
        tuple[float, Parameters, Tensor]: (loss, 勾配, 検出グリッド)
    """
    head = net.config.head
    if not isinstance(head, DetectHeadSpec):
        raise InvalidConfigError("検出には detect_head が必要です")
    output, trace = forward(net, input)
    loss, grad = layers.detection_loss(
        output, truths, head.boxes, head.classes
    )
    _, grads = backward(net, trace, grad)
    return loss, grads, output


# --- 学習 ---


def sgd_step(
    net: Network, grads: Parameters, learning_rate: float
) -> Network:
    """p ← p − lr·g をすべてのパラメータに適用した新しいネットワークを返す"""
    if not learning_rate > 0:
        raise InvalidHyperparameterError(
            f"学習率は正の値にしてください: {learning_rate}"
        )
    if len(grads) != len(net.parameters):
        raise ShapeMismatchError("勾配の数がパラメータと一致しません")
    updated: list[LayerParams | None] = []
    for p, g in zip(net.parameters, grads):
        if p is None:
            updated.append(None)
            continue
        if (
            g is None
            or g.weights.shape != p.weights.shape
            or g.bias.shape != p.bias.shape
        ):
            raise ShapeMismatchError("勾配の形状がパラメータと一致しません")
        dtype = p.weights.dtype
        updated.append(
            LayerParams(
                weights=Tensor.wrap(
                    (p.weights.array - learning_rate * g.weights.array)
                    .astype(dtype)
                ),
                bias=Tensor.wrap(
                    (p.bias.array - learning_rate * g.bias.array).astype(
                        dtype
                    )
                ),
            )
        )
    return Network(config=net.config, parameters=tuple(updated))


def average_gradients(batch: Sequence[Parameters]) -> Parameters:
    """ミニバッチ内の勾配を平均する"""
    n = len(batch)
    out: list[LayerParams | None] = []
    for per_layer in zip(*batch):
        if per_layer[0] is None:
            out.append(None)
            continue
        out.append(
            LayerParams(
                weights=Tensor.wrap(
                    sum(g.weights.array for g in per_layer) / n
                ),
                bias=Tensor.wrap(sum(g.bias.array for g in per_layer) / n),
            )
        )
    return tuple(out)


def transfer_prefix(source: Network, target: Network) -> tuple[Network, int]:
    """先頭から仕様と形状が一致するレイヤーのパラメータを移す

    分類で事前学習した重みを検出構成に流用するためのもの。
    どのレイヤーも凍結しない。

    Returns:
        tuple[Network, int]: 新しいネットワークと移したレイヤー数。
    """
    if source.config.input_shape != target.config.input_shape:
        return target, 0
    params = list(target.parameters)
    copied = 0
    for index, (s_spec, t_spec) in enumerate(
        zip(source.config.layers, target.config.layers)
    ):
        if s_spec != t_spec:
            break
        s_param, t_param = source.parameters[index], params[index]
        if t_param is not None:
            if s_param.weights.shape != t_param.weights.shape:
                break
            dtype = t_param.weights.dtype
            params[index] = LayerParams(
                weights=s_param.weights.astype(dtype),
                bias=s_param.bias.astype(dtype),
            )
        copied = index + 1
    logger.info("先頭 %d レイヤーの重みを移しました", copied)
    return Network(config=target.config, parameters=tuple(params)), copied
