"""視覚障がい者向けの出力: 正規化 JSON・1 級点字・読み上げ用フレーズ"""

import json
from dataclasses import dataclass, field
from functools import cache
from importlib import resources

from blind_aid.detect import Detection
from blind_aid.errors import InvalidInputError, UnmappableCharacterError
from blind_aid.layers import Box
from blind_aid.network import NetworkConfig


@dataclass(frozen=True)
class LabeledDetection:
    """ラベル文字列を解決済みの検出結果"""

    label: str
    confidence: float
    box: Box


@dataclass(frozen=True)
class FrameResult:
    """1 フレームぶんの認識結果

    Attributes:
        frame_id (str): フレーム ID (ファイル名の拡張子を除いたもの)。
        model_name (str): ネットワーク構成名。
        frame_width (int): リサイズ後の幅。
        frame_height (int): リサイズ後の高さ。
        detections (tuple[LabeledDetection, ...]): 信頼度の降順。
    """

    frame_id: str
    model_name: str
    frame_width: int
    frame_height: int
    detections: tuple[LabeledDetection, ...] = field(default_factory=tuple)


def frame_result(
    frame_id: str, config: NetworkConfig, detections: list[Detection]
) -> FrameResult:
    """検出結果のクラス ID をラベルに解決し、信頼度の降順に並べる"""
    ordered = sorted(
        enumerate(detections), key=lambda p: (-p[1].confidence, p[0])
    )
    _, height, width = config.input_shape
    return FrameResult(
        frame_id=frame_id,
        model_name=config.name,
        frame_width=width,
        frame_height=height,
        detections=tuple(
            LabeledDetection(
                label=config.class_labels[d.class_id],
                confidence=d.confidence,
                box=d.box,
            )
            for _, d in ordered
        ),
    )


# --- JSON ---


def _string(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def to_json(r: FrameResult) -> bytes:
    """キー順と小数桁を固定した、空白なし・改行終端の UTF-8 JSON"""
    dets = ",".join(
        "{"
        f'"label":{_string(d.label)},'
        f'"confidence":{d.confidence:.4f},'
        '"box":{'
        f'"cx":{d.box[0]:.6f},"cy":{d.box[1]:.6f},'
        f'"w":{d.box[2]:.6f},"h":{d.box[3]:.6f}'
        "}}"
        for d in r.detections
    )
    text = (
        "{"
        f'"frame_id":{_string(r.frame_id)},'
        f'"model":{_string(r.model_name)},'
        f'"width":{r.frame_width},'
        f'"height":{r.frame_height},'
        f'"detections":[{dets}]'
        "}\n"
    )
    return text.encode("utf-8")


def from_json(data: bytes | str) -> FrameResult:
    """to_json の出力を FrameResult に戻す"""
    try:
        obj = json.loads(data)
        return FrameResult(
            frame_id=obj["frame_id"],
            model_name=obj["model"],
            frame_width=int(obj["width"]),
            frame_height=int(obj["height"]),
            detections=tuple(
                LabeledDetection(
                    label=d["label"],
                    confidence=float(d["confidence"]),
                    box=(
                        float(d["box"]["cx"]),
                        float(d["box"]["cy"]),
                        float(d["box"]["w"]),
                        float(d["box"]["h"]),
                    ),
                )
                for d in obj["detections"]
            ),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise InvalidInputError(f"検出結果の JSON が不正です: {e}")


# --- 点字 ---

BRAILLE_BLANK = chr(0x2800)
# 点 1〜6 をビットに割り当てる (U+2800 ブロック)
_DOT_BITS = {1: 0x01, 2: 0x02, 3: 0x04, 4: 0x08, 5: 0x10, 6: 0x20}


def _cell(*dots: int) -> str:
    return chr(0x2800 + sum(_DOT_BITS[d] for d in dots))


LETTERS = {
    "a": _cell(1),
    "b": _cell(1, 2),
    "c": _cell(1, 4),
    "d": _cell(1, 4, 5),
    "e": _cell(1, 5),
    "f": _cell(1, 2, 4),
    "g": _cell(1, 2, 4, 5),
    "h": _cell(1, 2, 5),
    "i": _cell(2, 4),
    "j": _cell(2, 4, 5),
    "k": _cell(1, 3),
    "l": _cell(1, 2, 3),
    "m": _cell(1, 3, 4),
    "n": _cell(1, 3, 4, 5),
    "o": _cell(1, 3, 5),
    "p": _cell(1, 2, 3, 4),
    "q": _cell(1, 2, 3, 4, 5),
    "r": _cell(1, 2, 3, 5),
    "s": _cell(2, 3, 4),
    "t": _cell(2, 3, 4, 5),
    "u": _cell(1, 3, 6),
    "v": _cell(1, 2, 3, 6),
    "w": _cell(2, 4, 5, 6),
    "x": _cell(1, 3, 4, 6),
    "y": _cell(1, 3, 4, 5, 6),
    "z": _cell(1, 3, 5, 6),
}

PUNCTUATION = {
    ".": _cell(2, 5, 6),
    ",": _cell(2),
    "?": _cell(2, 3, 6),
    "!": _cell(2, 3, 5),
    "'": _cell(3),
    "-": _cell(3, 6),
    ":": _cell(2, 5),
    ";": _cell(2, 3),
}

# 数字は a〜j のパターン
DIGITS = {str((n + 1) % 10): LETTERS[c] for n, c in enumerate("abcdefghij")}

CAPITAL_SIGN = _cell(6)
NUMBER_SIGN = _cell(3, 4, 5, 6)
# 数字の直後の a〜j を数字と区別する
LETTER_SIGN = _cell(5, 6)

_DECODE_LETTERS = {v: k for k, v in LETTERS.items()}
_DECODE_PUNCTUATION = {v: k for k, v in PUNCTUATION.items()}
_DECODE_DIGITS = {v: k for k, v in DIGITS.items()}


def to_braille(text: str) -> str:
    """1 級 (略字なし) 点字の Unicode 文字列に変換する

    大文字の前に大文字符 (点 6)、数字の並びの前に数符 (点 3-4-5-6) を置く。

    Raises:
        UnmappableCharacterError: 表にない文字が含まれている場合。
    """
    cells: list[str] = []
    in_number = False
    for offset, ch in enumerate(text):
        if ch in DIGITS:
            if not in_number:
                cells.append(NUMBER_SIGN)
                in_number = True
            cells.append(DIGITS[ch])
            continue
        if ch == " ":
            cells.append(BRAILLE_BLANK)
        elif ch in PUNCTUATION:
            cells.append(PUNCTUATION[ch])
        elif ch.isascii() and ch.isalpha():
            lower = ch.lower()
            if ch.isupper():
                cells.append(CAPITAL_SIGN)
            elif in_number and lower in "abcdefghij":
                cells.append(LETTER_SIGN)
            cells.append(LETTERS[lower])
        else:
            raise UnmappableCharacterError(ch, offset)
        in_number = False
    return "".join(cells)


def from_braille(cells: str) -> str:
    """to_braille の逆変換"""
    out: list[str] = []
    in_number = False
    capital = False
    pos = 0
    while pos < len(cells):
        cell = cells[pos]
        pos += 1
        if cell == NUMBER_SIGN:
            in_number = True
            continue
        if in_number and cell in _DECODE_DIGITS:
            out.append(_DECODE_DIGITS[cell])
            continue
        in_number = False
        if cell == CAPITAL_SIGN:
            capital = True
        elif cell == LETTER_SIGN:
            continue
        elif cell == BRAILLE_BLANK:
            out.append(" ")
        elif cell in _DECODE_PUNCTUATION:
            out.append(_DECODE_PUNCTUATION[cell])
        elif cell in _DECODE_LETTERS:
            letter = _DECODE_LETTERS[cell]
            out.append(letter.upper() if capital else letter)
            capital = False
        else:
            raise UnmappableCharacterError(cell, pos - 1)
    return "".join(out)


# --- 読み上げ用フレーズ ---

NOTHING_RECOGNIZED = "nothing recognized"


@cache
def irregular_plurals() -> dict[str, str]:
    """同梱の不規則複数形の表"""
    text = (
        resources.files("blind_aid.data")
        .joinpath("plurals.json")
        .read_text(encoding="utf-8")
    )
    return json.loads(text)


def pluralize(label: str) -> str:
    return irregular_plurals().get(label, label + "s")


def zone(cx: float) -> str:
    """ボックス中心の横位置: left (< 1/3)、ahead、right (> 2/3)"""
    if cx < 1 / 3:
        return "on the left"
    if cx > 2 / 3:
        return "on the right"
    return "ahead"


def _count_phrase(label: str, count: int) -> str:
    if count == 1:
        article = "an" if label[:1].lower() in tuple("aeiou") else "a"
        return f"{article} {label}"
    return f"{count} {pluralize(label)}"


def describe_scene(r: FrameResult) -> str:
    """検出結果を英語のフレーズにまとめる

    (ラベル, 横位置) ごとに数を集計し、最も高い信頼度の順に並べる。
    例: "2 cars on the left, a person on the right"
    """
    if not r.detections:
        return NOTHING_RECOGNIZED
    # 検出は信頼度の降順なので、初出順がそのまま最高信頼度の順
    counts: dict[tuple[str, str], int] = {}
    for d in r.detections:
        key = (d.label, zone(d.box[0]))
        counts[key] = counts.get(key, 0) + 1
    return ", ".join(
        f"{_count_phrase(label, n)} {where}"
        for (label, where), n in counts.items()
    )
