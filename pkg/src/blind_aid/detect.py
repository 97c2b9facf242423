"""検出グリッドのデコード・IoU・NMS と、推論をまとめた Recognizer"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blind_aid import layers
from blind_aid.errors import InvalidInputError, ShapeMismatchError
from blind_aid.layers import Box
from blind_aid.network import DetectHeadSpec, Network, forward
from blind_aid.tensor import Tensor


@dataclass(frozen=True)
class Detection:
    """認識した物体 1 つ

    Attributes:
        class_id (int): class_labels のインデックス。
        confidence (float): [0, 1] のスコア。
        box (Box): 中心形式 (cx, cy, w, h)。各値はフレームに対する割合。
    """

    class_id: int
    confidence: float
    box: Box

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(
                f"confidence は [0, 1] です: {self.confidence}"
            )
        if len(self.box) != 4 or not all(0.0 <= v <= 1.0 for v in self.box):
            raise InvalidInputError(f"ボックスは [0, 1] です: {self.box}")


def decode_grid(
    raw: Tensor, conf_threshold: float, boxes: int, classes: int
) -> list[Detection]:
    """検出ヘッドの生出力 [S, S, B·5 + C] を検出結果に変換する

    cx = (j + σ(tx)) / S, cy = (i + σ(ty)) / S, w = σ(tw), h = σ(th)、
    confidence = σ(tc)·max(softmax(クラス))。クラススコアはセル内の
    B 個のボックスで共有する。出力はセル・ボックス順。
    """
    if (
        raw.rank != 3
        or raw.shape[0] != raw.shape[1]
        or raw.shape[2] != boxes * 5 + classes
    ):
        raise ShapeMismatchError(
            f"検出グリッドの形状 {raw.shape} が B={boxes}, C={classes} "
            "と一致しません"
        )
    if not 0.0 <= conf_threshold <= 1.0:
        raise InvalidInputError(
            f"conf_threshold は [0, 1] です: {conf_threshold}"
        )
    grid = raw.shape[0]
    values = raw.array.astype(np.float64)
    box_slots = values[..., : boxes * 5].reshape(grid, grid, boxes, 5)
    act = layers.sigmoid(box_slots)
    probs = layers.softmax(values[..., boxes * 5 :])
    class_ids = probs.argmax(axis=-1)
    class_probs = probs.max(axis=-1)

    out = []
    for i in range(grid):
        for j in range(grid):
            for b in range(boxes):
                tx, ty, tw, th, tc = act[i, j, b]
                confidence = float(min(1.0, tc * class_probs[i, j]))
                if confidence < conf_threshold:
                    continue
                box = (
                    float(min(1.0, (j + tx) / grid)),
                    float(min(1.0, (i + ty) / grid)),
                    float(tw),
                    float(th),
                )
                out.append(Detection(int(class_ids[i, j]), confidence, box))
    return out


def iou(a: Box, b: Box) -> float:
    """中心形式の 2 つのボックスの IoU (和集合が 0 なら 0)"""
    return layers.box_iou(a, b)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """クラスごとの貪欲な非最大値抑制

    信頼度の降順 (同値はクラス ID の昇順、次に入力順) に並べ、同じクラスで
    既に残したすべての検出との IoU が閾値未満のものだけを残す。
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidInputError(
            f"iou_threshold は [0, 1] です: {iou_threshold}"
        )
    order = sorted(
        range(len(dets)),
        key=lambda k: (-dets[k].confidence, dets[k].class_id, k),
    )
    kept: list[Detection] = []
    for k in order:
        det = dets[k]
        if all(
            iou(det.box, other.box) < iou_threshold
            for other in kept
            if other.class_id == det.class_id
        ):
            kept.append(det)
    return kept


# 分類ヘッドの結果はフレーム全体のボックスとして扱う
WHOLE_FRAME: Box = (0.5, 0.5, 1.0, 1.0)


@dataclass(frozen=True)
class Recognizer:
    """ネットワークと閾値をまとめ、入力テンソルから検出結果を得る"""

    network: Network
    conf_threshold: float
    iou_threshold: float

    def recognize(self, tensor: Tensor) -> list[Detection]:
        """信頼度の降順に並んだ検出結果を返す"""
        output, _ = forward(self.network, tensor)
        return self.postprocess(output)

    def postprocess(self, output: Tensor) -> list[Detection]:
        """ネットワークの出力を検出結果にする (検出ヘッドは decode + NMS)"""
        head = self.network.config.head
        if isinstance(head, DetectHeadSpec):
            dets = decode_grid(
                output, self.conf_threshold, head.boxes, head.classes
            )
            return nms(dets, self.iou_threshold)
        probs = output.array
        best = int(np.argmax(probs))
        confidence = float(min(1.0, probs[best]))
        if confidence < self.conf_threshold:
            return []
        return [Detection(best, confidence, WHOLE_FRAME)]
