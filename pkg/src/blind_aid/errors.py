"""blind_aid で raise される例外の定義

すべての例外は BlindAidError を継承し、CLI のエラー行に出力する
ケバブケースの ``code`` を持つ。
"""


class BlindAidError(Exception):
    """blind_aid のすべての例外の基底クラス"""

    code = "blind-aid-error"

    def __init__(self, message: str = ""):
        super().__init__(message)


# --- テンソル・レイヤー ---


class InvalidShapeError(BlindAidError):
    """次元が 0 以下の形状が指定された場合に raise される例外"""

    code = "invalid-shape"


class ShapeMismatchError(BlindAidError):
    """テンソルの形状が演算の前提と一致しない場合に raise される例外"""

    code = "shape-mismatch"


class NonFiniteError(BlindAidError):
    """NaN や Inf を含むテンソルを作ろうとした場合に raise される例外"""

    code = "non-finite"


class InvalidGeometryError(BlindAidError):
    """カーネルやプーリング窓が入力より大きい場合に raise される例外"""

    code = "invalid-geometry"


class InvalidHyperparameterError(BlindAidError):
    """ELU の a や学習率などのハイパーパラメータが不正な場合の例外"""

    code = "invalid-hyperparameter"


class InvalidLabelError(BlindAidError):
    code = "invalid-label"


# --- アノテーション・評価 ---


class InvalidAnnotationError(BlindAidError):
    """正解ボックスの座標が [0, 1] の範囲外の場合に raise される例外"""

    code = "invalid-annotation"

    def __init__(self, message: str = "", line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class AnnotationParseError(BlindAidError):
    """アノテーションファイルの行が解釈できない場合に raise される例外"""

    code = "annotation-parse"

    def __init__(self, message: str = "", line_number: int = 0):
        super().__init__(f"{line_number} 行目: {message}")
        self.line_number = line_number


class InvalidInputError(BlindAidError):
    code = "invalid-input"


class DatasetInvalidError(BlindAidError):
    """データセットの画像とアノテーションが整合しない場合の例外"""

    code = "dataset-invalid"


# --- ネットワーク・重みファイル ---


class InvalidConfigError(BlindAidError):
    """ネットワーク構成の形状伝播に失敗した場合に raise される例外

    Attributes:
        layer_index (int | None): 問題のあったレイヤーの番号。
    """

    code = "invalid-config"

    def __init__(self, message: str = "", layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class BadMagicError(BlindAidError):
    code = "bad-magic"


class VersionMismatchError(BlindAidError):
    code = "version-mismatch"


class WeightsShapeMismatchError(BlindAidError):
    """重みファイルの構成やテンソル形状がネットワーク構成と異なる場合の例外"""

    code = "weights-shape-mismatch"


class TruncatedPayloadError(BlindAidError):
    code = "truncated-payload"


class TrainingDivergedError(BlindAidError):
    """学習後の損失が学習前より大きくなった場合に raise される例外"""

    code = "training-diverged"


# --- PPM デコード ---


class PpmDecodeError(BlindAidError):
    """PPM デコードエラーの基底クラス"""

    code = "ppm-decode"


class PpmBadMagicError(PpmDecodeError):
    code = "ppm-bad-magic"


class PpmUnsupportedMaxvalError(PpmDecodeError):
    code = "ppm-unsupported-maxval"


class PpmTruncatedError(PpmDecodeError):
    code = "ppm-truncated"


class PpmMalformedHeaderError(PpmDecodeError):
    code = "ppm-malformed-header"


# --- 出力 ---


class UnmappableCharacterError(BlindAidError):
    """点字に変換できない文字が含まれている場合に raise される例外

    Attributes:
        character (str): 変換できなかった文字。
        offset (int): 入力文字列中の位置。
    """

    code = "unmappable-character"

    def __init__(self, character: str, offset: int):
        super().__init__(
            f"点字に変換できない文字です: {character!r} (offset {offset})"
        )
        self.character = character
        self.offset = offset
