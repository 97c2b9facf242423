"""合成データセットでの toy 学習 (シード付き SGD)"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import mlflow
import numpy as np

from blind_aid import layers
from blind_aid.config import PipelineConfig
from blind_aid.detect import Recognizer
from blind_aid.errors import (
    DatasetInvalidError,
    InvalidConfigError,
    InvalidHyperparameterError,
    InvalidInputError,
    TrainingDivergedError,
)
from blind_aid.evaluate import (
    FrameDetection,
    GroundTruth,
    frame_labels,
    mean_ap,
    top1_accuracy,
)
from blind_aid.network import (
    DetectHeadSpec,
    Network,
    NetworkConfig,
    SoftmaxHeadSpec,
    average_gradients,
    build_network,
    classification_loss,
    detection_objective,
    forward,
    sgd_step,
    transfer_prefix,
)
from blind_aid.shapes import load_dataset, validate_dataset
from blind_aid.tensor import Tensor
from blind_aid.vision import load_frame, prepare_frame
from blind_aid.weights import save_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    """学習サンプル 1 件

    Attributes:
        frame_id (str): フレーム ID。
        tensor (Tensor): 入力テンソル。
        label (int): 分類ラベル (面積最大の正解のクラス)。
        truths (tuple[GroundTruth, ...]): フレーム内の正解。
    """

    frame_id: str
    tensor: Tensor
    label: int
    truths: tuple[GroundTruth, ...]

    @property
    def targets(self) -> list[tuple[int, tuple[float, ...]]]:
        return [(t.class_id, t.box) for t in self.truths]


@dataclass
class TrainResult:
    """学習の結果

    top1 は classifier モード、map_score は detector モードのときだけ入る。
    """

    network: Network
    initial_loss: float
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    top1: float | None = None
    map_score: float | None = None


def metrics_path(weights_path: Path) -> Path:
    """<weights>.metrics.jsonl"""
    return weights_path.with_name(weights_path.name + ".metrics.jsonl")


def load_samples(
    dataset_dir: str | Path, config: NetworkConfig
) -> list[Sample]:
    """データセットを検証し、全フレームをテンソルにして読み込む

    Raises:
        DatasetInvalidError: データセットが学習に使えない場合。
    """
    try:
        dataset = load_dataset(dataset_dir)
    except InvalidInputError as e:
        raise DatasetInvalidError(str(e))
    validate_dataset(dataset, len(config.class_labels))

    by_frame: dict[str, list[GroundTruth]] = defaultdict(list)
    for t in dataset.truths:
        by_frame[t.frame_id].append(t)
    labels = frame_labels(dataset.truths)
    samples = [
        Sample(
            frame_id=frame_id,
            tensor=prepare_frame(load_frame(path), config.input_shape),
            label=labels[frame_id],
            truths=tuple(by_frame[frame_id]),
        )
        for frame_id, path in dataset.frames.items()
    ]
    logger.info("%d サンプルを読み込みました", len(samples))
    return samples


def sample_loss(net: Network, sample: Sample) -> float:
    """勾配を計算せずに 1 サンプルの損失を求める"""
    output, trace = forward(net, sample.tensor)
    head = net.config.head
    if isinstance(head, DetectHeadSpec):
        loss, _ = layers.detection_loss(
            output, sample.targets, head.boxes, head.classes
        )
        return loss
    logits = trace.activations[len(net.config.layers) - 1]
    loss, _, _ = layers.softmax_cross_entropy(logits, sample.label)
    return loss


def mean_loss(net: Network, samples: Sequence[Sample]) -> float:
    return float(np.mean([sample_loss(net, s) for s in samples]))


def training_top1(net: Network, samples: Sequence[Sample]) -> float:
    predictions = [
        int(np.argmax(forward(net, s.tensor)[0].array)) for s in samples
    ]
    return top1_accuracy(predictions, [s.label for s in samples])


def training_map(
    net: Network, samples: Sequence[Sample], pipeline: PipelineConfig
) -> float | None:
    recognizer = Recognizer(
        net, pipeline.conf_threshold, pipeline.iou_threshold
    )
    dets = [
        FrameDetection(s.frame_id, d)
        for s in samples
        for d in recognizer.recognize(s.tensor)
    ]
    truths = [t for s in samples for t in s.truths]
    return mean_ap(dets, truths).map_score


def _check_mode(config: NetworkConfig, mode: str) -> None:
    head = config.head
    if mode == "classifier" and not isinstance(head, SoftmaxHeadSpec):
        raise InvalidConfigError(
            f"classifier モードには softmax_head が必要です: {config.name}"
        )
    if mode == "detector" and not isinstance(head, DetectHeadSpec):
        raise InvalidConfigError(
            f"detector モードには detect_head が必要です: {config.name}"
        )


class Trainer:
    """シード付きミニバッチ SGD

    Attributes:
        pipeline (PipelineConfig): 学習率・エポック数・シードなど。
        config (NetworkConfig): 学習するネットワークの構成。
    """

    def __init__(self, pipeline: PipelineConfig) -> None:
        train = pipeline.train
        if not train.learning_rate > 0:
            raise InvalidHyperparameterError(
                f"学習率は正の値にしてください: {train.learning_rate}"
            )
        self.pipeline = pipeline
        self.config = pipeline.network_config()
        _check_mode(self.config, train.mode)

    def step(
        self, net: Network, batch: Sequence[Sample]
    ) -> tuple[Network, list[float], list[int]]:
        """1 ミニバッチぶん更新し、更新前の損失と予測を返す"""
        losses, predictions, grads = [], [], []
        for s in batch:
            if self.pipeline.train.mode == "classifier":
                loss, g, probs = classification_loss(net, s.tensor, s.label)
                predictions.append(int(np.argmax(probs.array)))
            else:
                loss, g, _ = detection_objective(net, s.tensor, s.targets)
            losses.append(loss)
            grads.append(g)
        net = sgd_step(
            net, average_gradients(grads), self.pipeline.train.learning_rate
        )
        return net, losses, predictions

    def run(
        self,
        samples: Sequence[Sample],
        weights_path: Path,
        pretrained: Network | None = None,
    ) -> TrainResult:
        """学習して重みとエポックごとのメトリクスを書き出す

        Raises:
            TrainingDivergedError: 最終損失が初期損失を上回った場合
                (重みは保存される)。
        """
        train = self.pipeline.train
        net = build_network(self.config, seed=train.seed)
        if pretrained is not None:
            net, _ = transfer_prefix(pretrained, net)
        rng = np.random.default_rng(train.seed)
        initial = mean_loss(net, samples)
        logger.info("初期損失: %.6f", initial)

        experiment = self.pipeline.mlflow_experiment
        tracker = _MlflowTracker(experiment, self.pipeline)
        epoch_losses: list[float] = []
        records = []
        with tracker:
            for epoch in range(1, train.epochs + 1):
                order = rng.permutation(len(samples))
                losses: list[float] = []
                hits = 0
                for start in range(0, len(order), train.batch_size):
                    batch = [
                        samples[k]
                        for k in order[start : start + train.batch_size]
                    ]
                    net, batch_losses, predictions = self.step(net, batch)
                    losses.extend(batch_losses)
                    hits += sum(
                        int(p == s.label) for p, s in zip(predictions, batch)
                    )
                epoch_loss = float(np.mean(losses))
                epoch_losses.append(epoch_loss)
                record: dict[str, float | int] = {
                    "epoch": epoch,
                    "loss": epoch_loss,
                }
                if train.mode == "classifier":
                    record["top1"] = hits / len(samples)
                records.append(record)
                tracker.log(record, epoch)
                logger.info("epoch %d: loss %.6f", epoch, epoch_loss)

            final = mean_loss(net, samples)
            result = TrainResult(
                network=net,
                initial_loss=initial,
                final_loss=final,
                epoch_losses=epoch_losses,
            )
            if train.mode == "classifier":
                result.top1 = training_top1(net, samples)
            else:
                result.map_score = training_map(net, samples, self.pipeline)
            tracker.log_summary(result)

        save_weights(net, weights_path)
        with open(metrics_path(weights_path), "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, separators=(",", ":")) + "\n")
        logger.info("最終損失: %.6f (初期 %.6f)", final, initial)
        if final > initial:
            raise TrainingDivergedError(
                f"最終損失 {final:.6f} が初期損失 {initial:.6f} を"
                "上回りました"
            )
        return result


class _MlflowTracker:
    """実験名が設定されているときだけ mlflow に記録する"""

    def __init__(
        self, experiment: str | None, pipeline: PipelineConfig
    ) -> None:
        self.experiment = experiment
        self.pipeline = pipeline

    def __enter__(self) -> "_MlflowTracker":
        if self.experiment:
            mlflow.set_experiment(self.experiment)
            mlflow.start_run()
            train = self.pipeline.train
            mlflow.log_params(
                {
                    "network": self.pipeline.network,
                    "mode": train.mode,
                    "learning_rate": train.learning_rate,
                    "epochs": train.epochs,
                    "batch_size": train.batch_size,
                    "seed": train.seed,
                }
            )
        return self

    def log(self, record: dict[str, float | int], epoch: int) -> None:
        if self.experiment:
            metrics = {k: float(v) for k, v in record.items() if k != "epoch"}
            mlflow.log_metrics(metrics, step=epoch)

    def log_summary(self, result: TrainResult) -> None:
        if not self.experiment:
            return
        summary = {
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
        }
        if result.top1 is not None:
            summary["final_top1"] = result.top1
        if result.map_score is not None:
            summary["final_map"] = result.map_score
        mlflow.log_metrics(summary)

    def __exit__(self, *exc: object) -> None:
        if self.experiment:
            mlflow.end_run()


def train_toy(
    dataset_dir: str | Path,
    pipeline: PipelineConfig,
    weights_path: str | Path,
    pretrained: Network | None = None,
) -> TrainResult:
    """データセットを読み込んで Trainer を実行する"""
    trainer = Trainer(pipeline)
    samples = load_samples(dataset_dir, trainer.config)
    return trainer.run(samples, Path(weights_path), pretrained)
