"""top-1 精度・クラスごとの AP・mAP と正解アノテーションの読み書き

アノテーションは 1 行 1 正解のテキスト形式:
    <frame_id> <class_id> <cx> <cy> <w> <h>
'#' で始まる行はコメント。
"""

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel

from blind_aid.assist import FrameResult
from blind_aid.detect import Detection, iou
from blind_aid.errors import (
    AnnotationParseError,
    InvalidAnnotationError,
    InvalidInputError,
)
from blind_aid.layers import Box

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class GroundTruth:
    frame_id: str
    class_id: int
    box: Box

    def __post_init__(self) -> None:
        if not all(0.0 <= v <= 1.0 for v in self.box):
            raise InvalidAnnotationError(
                f"ボックス座標は [0, 1] にしてください: {self.box}"
            )
        if self.class_id < 0:
            raise InvalidAnnotationError(f"クラス ID が負です: {self.class_id}")


@dataclass(frozen=True)
class FrameDetection:
    """評価用にフレーム ID を付けた検出結果"""

    frame_id: str
    detection: Detection


class EvalReport(BaseModel):
    """評価結果

    Attributes:
        per_class_ap (dict[int, float]): 正解が 1 つ以上あるクラスの AP。
        map_score (float | None): per_class_ap の単純平均。
        top1 (float | None): top-1 精度 (分類できる場合)。
        frames (int): フレーム数。
        truths (int): 正解数。
        detections (int): 検出数。
        iou_threshold (float): マッチングの IoU 閾値。
    """

    per_class_ap: dict[int, float] = {}
    map_score: float | None = None
    top1: float | None = None
    frames: int = 0
    truths: int = 0
    detections: int = 0
    iou_threshold: float = DEFAULT_IOU_THRESHOLD

    def to_canonical_json(self) -> str:
        """キーをソートし、小数を 6 桁に固定した 1 行の JSON"""

        def fmt(value: float | None) -> str:
            return "null" if value is None else f"{value:.6f}"

        aps = ",".join(
            f'"{k}":{fmt(v)}' for k, v in sorted(self.per_class_ap.items())
        )
        return (
            "{"
            f'"detections":{self.detections},'
            f'"frames":{self.frames},'
            f'"iou_threshold":{fmt(self.iou_threshold)},'
            f'"map":{fmt(self.map_score)},'
            f'"per_class_ap":{{{aps}}},'
            f'"top1":{fmt(self.top1)},'
            f'"truths":{self.truths}'
            "}\n"
        )


def top1_accuracy(
    predictions: Sequence[int], labels: Sequence[int]
) -> float:
    """予測とラベルが一致する割合"""
    if len(predictions) != len(labels) or len(labels) == 0:
        raise InvalidInputError(
            "予測とラベルは同じ長さで 1 件以上必要です: "
            f"{len(predictions)} vs {len(labels)}"
        )
    hits = sum(int(p == t) for p, t in zip(predictions, labels))
    return hits / len(labels)


def _precision_recall(
    dets: Sequence[FrameDetection],
    truths: Sequence[GroundTruth],
    iou_thr: float,
) -> tuple[np.ndarray, np.ndarray]:
    by_frame: dict[str, list[GroundTruth]] = defaultdict(list)
    for t in truths:
        by_frame[t.frame_id].append(t)
    matched = {frame: [False] * len(ts) for frame, ts in by_frame.items()}

    tp = np.zeros(len(dets))
    order = sorted(
        range(len(dets)), key=lambda k: (-dets[k].detection.confidence, k)
    )
    for rank, k in enumerate(order):
        frame = dets[k].frame_id
        box = dets[k].detection.box
        best, best_iou = -1, -1.0
        for n, truth in enumerate(by_frame.get(frame, [])):
            if matched[frame][n]:
                continue
            overlap = iou(box, truth.box)
            if overlap > best_iou:
                best, best_iou = n, overlap
        if best >= 0 and best_iou >= iou_thr:
            matched[frame][best] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    recall = tp_cum / len(truths)
    precision = tp_cum / np.arange(1, len(dets) + 1)
    return recall, precision


def area_under_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """全点補間の AP (精度の包絡線を右から単調非増加にして面積を取る)"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    # 再現率が変化する点だけ足す
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(
    dets: Sequence[FrameDetection],
    truths: Sequence[GroundTruth],
    iou_thr: float = DEFAULT_IOU_THRESHOLD,
) -> float | None:
    """1 クラスぶんの AP

    信頼度の降順 (同値は入力順) に、同じフレームで未マッチの正解のうち
    IoU が最大のものと貪欲にマッチングする。

    Returns:
        float | None: AP。正解が 1 つもない場合は None (mAP から除外)。
    """
    if not 0.0 < iou_thr <= 1.0:
        raise InvalidInputError(f"iou_thr は (0, 1] です: {iou_thr}")
    if len(truths) == 0:
        return None
    if len(dets) == 0:
        return 0.0
    recall, precision = _precision_recall(dets, truths, iou_thr)
    return area_under_pr(recall, precision)


def mean_ap(
    all_dets: Sequence[FrameDetection],
    all_truths: Sequence[GroundTruth],
    iou_thr: float = DEFAULT_IOU_THRESHOLD,
) -> EvalReport:
    """正解のあるクラスの AP を平均した mAP

    Raises:
        InvalidInputError: 正解のあるクラスが 1 つもない場合。
    """
    classes = sorted({t.class_id for t in all_truths})
    if not classes:
        raise InvalidInputError("正解のあるクラスがありません")
    per_class: dict[int, float] = {}
    for cls in classes:
        ap = average_precision(
            [d for d in all_dets if d.detection.class_id == cls],
            [t for t in all_truths if t.class_id == cls],
            iou_thr,
        )
        if ap is not None:
            per_class[cls] = ap
    frames = {t.frame_id for t in all_truths} | {d.frame_id for d in all_dets}
    return EvalReport(
        per_class_ap=per_class,
        map_score=float(np.mean(list(per_class.values()))),
        frames=len(frames),
        truths=len(all_truths),
        detections=len(all_dets),
        iou_threshold=iou_thr,
    )


def parse_annotations(text: str) -> list[GroundTruth]:
    """アノテーションのテキストを解釈する

    Raises:
        AnnotationParseError: 行が解釈できない場合 (行番号付き)。
        InvalidAnnotationError: 座標が [0, 1] の範囲外の場合。
    """
    truths = []
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 6:
            raise AnnotationParseError(
                f"6 フィールド必要です ({len(fields)} 個): {stripped!r}",
                number,
            )
        frame_id, cls, *coords = fields
        try:
            class_id = int(cls)
            box = tuple(float(v) for v in coords)
        except ValueError:
            raise AnnotationParseError(
                f"数値ではありません: {stripped!r}", number
            )
        if class_id < 0:
            raise AnnotationParseError(f"クラス ID が負です: {cls}", number)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in box):
            raise InvalidAnnotationError(
                f"{number} 行目: 座標は [0, 1] にしてください: {box}",
                line_number=number,
            )
        truths.append(GroundTruth(frame_id, class_id, box))
    return truths


def load_annotations(source: str | Path) -> list[GroundTruth]:
    return parse_annotations(Path(source).read_text(encoding="utf-8"))


def dump_annotations(truths: Iterable[GroundTruth]) -> str:
    lines = ["# frame_id class_id cx cy w h"]
    for t in truths:
        cx, cy, w, h = t.box
        lines.append(
            f"{t.frame_id} {t.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"
        )
    return "\n".join(lines) + "\n"


def frame_labels(truths: Iterable[GroundTruth]) -> dict[str, int]:
    """各フレームの分類ラベル (面積最大の正解のクラス、同値は先の行)"""
    best: dict[str, tuple[float, int]] = {}
    for t in truths:
        area = t.box[2] * t.box[3]
        if t.frame_id not in best or area > best[t.frame_id][0]:
            best[t.frame_id] = (area, t.class_id)
    return {frame: cls for frame, (_, cls) in best.items()}


def evaluate_results(
    results: Sequence[FrameResult],
    truths: Sequence[GroundTruth],
    class_labels: Sequence[str],
    classifier: bool,
    iou_thr: float = DEFAULT_IOU_THRESHOLD,
) -> EvalReport:
    """フレームごとの認識結果を正解と照合する

    分類構成では各フレームの先頭 (最高信頼度) の検出を予測として top-1 を、
    検出構成では mAP を求める。

    Raises:
        InvalidInputError: 構成にないラベルが含まれている場合。
    """
    index = {label: i for i, label in enumerate(class_labels)}
    dets = []
    for r in results:
        for d in r.detections:
            if d.label not in index:
                raise InvalidInputError(
                    f"{r.frame_id}: 構成にないラベルです: {d.label!r}"
                )
            dets.append(
                FrameDetection(
                    r.frame_id, Detection(index[d.label], d.confidence, d.box)
                )
            )
    counts = {
        "frames": len(results),
        "truths": len(truths),
        "detections": len(dets),
        "iou_threshold": iou_thr,
    }
    if not classifier:
        return mean_ap(dets, truths, iou_thr).model_copy(update=counts)
    labels = frame_labels(truths)
    scored = [r for r in results if r.frame_id in labels]
    predictions = [
        index[r.detections[0].label] if r.detections else -1 for r in scored
    ]
    top1 = top1_accuracy(predictions, [labels[r.frame_id] for r in scored])
    return EvalReport(top1=top1, **counts)
