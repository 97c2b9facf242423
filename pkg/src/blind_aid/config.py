"""パイプライン全体の設定 (JSON) と環境変数の読み込み"""

import logging
import os
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, ValidationError, field_validator

from blind_aid.errors import InvalidInputError
from blind_aid.network import (
    CONFIG_PACKAGE,
    NetworkConfig,
    load_config,
    with_elu_a,
)

logger = logging.getLogger(__name__)

DEFAULT_PIPELINE = "pipeline"

ENV_CONFIG = "BLIND_AID_CONFIG"
ENV_LOG_LEVEL = "BLIND_AID_LOG_LEVEL"
ENV_MLFLOW_EXPERIMENT = "BLIND_AID_MLFLOW_EXPERIMENT"

OutputMode = Literal["json", "braille", "phrase"]
# 出力モードは常にこの順で書き出す
OUTPUT_ORDER: tuple[OutputMode, ...] = ("json", "braille", "phrase")


class TrainConfig(BaseModel):
    """toy 学習のハイパーパラメータ"""

    mode: Literal["classifier", "detector"] = "classifier"
    learning_rate: float = 0.01
    epochs: int = Field(default=15, ge=1)
    seed: int = 0
    batch_size: int = Field(default=1, ge=1)
    mlflow_experiment: str | None = None


class WatchConfig(BaseModel):
    poll_interval: float = Field(default=0.5, gt=0)


class PipelineConfig(BaseModel):
    """パイプライン設定

    Attributes:
        network (str): 同梱のネットワーク構成名、または JSON のパス。
        weights (Path | None): 重みファイル。None なら seed で初期化する。
        conf_threshold (float): 検出を残す信頼度の下限。
        iou_threshold (float): NMS の IoU 閾値。
        outputs (list[OutputMode]): 出力モード。
        elu_a (float | None): すべての ELU 層の a を上書きする値。
        train (TrainConfig): toy 学習の設定。
        watch (WatchConfig): ディレクトリ監視の設定。
    """

    network: str = "paper-7conv"
    weights: Path | None = None
    conf_threshold: float = Field(default=0.25, ge=0.0, le=1.0)
    iou_threshold: float = Field(default=0.45, ge=0.0, le=1.0)
    outputs: list[OutputMode] = ["json"]
    elu_a: float | None = Field(default=None, ge=0.0)
    train: TrainConfig = TrainConfig()
    watch: WatchConfig = WatchConfig()

    @field_validator("outputs")
    @classmethod
    def _dedupe_outputs(cls, v: list[OutputMode]) -> list[OutputMode]:
        if not v:
            raise ValueError("出力モードを 1 つ以上指定してください")
        return [m for m in OUTPUT_ORDER if m in v]

    def check_files(self) -> None:
        """参照しているファイルが存在するか確認する"""
        if self.weights is not None and not self.weights.is_file():
            raise InvalidInputError(
                f"重みファイルが見つかりません: {self.weights}"
            )

    def network_config(self) -> NetworkConfig:
        """network が指す構成 (elu_a の上書き込み)"""
        config = load_config(self.network)
        if self.elu_a is not None:
            config = with_elu_a(config, self.elu_a)
        return config

    @property
    def mlflow_experiment(self) -> str | None:
        return self.train.mlflow_experiment or os.getenv(
            ENV_MLFLOW_EXPERIMENT
        )


def _read_config_text(source: str | Path | None) -> tuple[str, str]:
    if source is None:
        source = os.getenv(ENV_CONFIG) or DEFAULT_PIPELINE
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        try:
            return path.read_text(encoding="utf-8"), str(path)
        except OSError as e:
            raise InvalidInputError(f"設定ファイルを読めません: {e}")
    resource = resources.files(CONFIG_PACKAGE) / f"{source}.json"
    try:
        return resource.read_text(encoding="utf-8"), f"{source} (同梱)"
    except FileNotFoundError:
        raise InvalidInputError(f"設定が見つかりません: {source}")


def load_pipeline_config(
    source: str | Path | None = None,
    seed: int | None = None,
    **overrides: object,
) -> PipelineConfig:
    """パイプライン設定を読み込み、None でない overrides で上書きする

    seed は train.seed を上書きする。

    source が None の場合は環境変数 BLIND_AID_CONFIG、なければ同梱の
    pipeline.json を使う。相対パスの weights はカレントディレクトリから
    解決する。

    Raises:
        InvalidInputError: 設定が読めない、または不正な場合。
    """
    text, origin = _read_config_text(source)
    try:
        config = PipelineConfig.model_validate_json(text)
        updates = {k: v for k, v in overrides.items() if v is not None}
        if seed is not None:
            updates["train"] = config.train.model_dump() | {"seed": seed}
        if updates:
            config = PipelineConfig.model_validate(
                config.model_dump() | updates
            )
    except ValidationError as e:
        error = e.errors()[0]
        where = ".".join(str(p) for p in error["loc"])
        raise InvalidInputError(
            f"パイプライン設定が不正です ({where}): {error['msg']}"
        )
    logger.info("設定を読み込みました: %s", origin)
    return config
