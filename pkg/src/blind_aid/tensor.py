"""各レイヤーで受け渡す最小限の n 次元テンソル

データは行優先 (row-major) で保持し、画像は [C, H, W] のチャネル優先。
生成後のテンソルは読み取り専用で、スレッド間でそのまま共有できる。
"""

from math import prod
from typing import Any, Sequence

import numpy as np

from blind_aid.errors import (
    InvalidShapeError,
    NonFiniteError,
    ShapeMismatchError,
)

# 推論と重みファイルは単精度、勾配チェックは倍精度
DEFAULT_DTYPE = np.float32


class Tensor:
    """形状と行優先のデータを持つ不変な数値配列

    Attributes:
        shape (tuple[int, ...]): 各次元の大きさ。
        data (np.ndarray): 行優先に並べた 1 次元のデータ (読み取り専用)。
    """

    __slots__ = ("_array",)

    def __init__(self, values: Any, dtype: Any = None) -> None:
        array = np.array(values, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self._array = _freeze(array)

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """計算直後の配列をコピーせずにテンソル化する (呼び出し側は以後変更しない)"""
        tensor = cls.__new__(cls)
        tensor._array = _freeze(np.ascontiguousarray(array))
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    @property
    def rank(self) -> int:
        return self._array.ndim

    def astype(self, dtype: Any) -> "Tensor":
        if self._array.dtype == np.dtype(dtype):
            return self
        return Tensor.wrap(self._array.astype(dtype))

    def tolist(self) -> list:
        return self._array.tolist()

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype})"


def _freeze(array: np.ndarray) -> np.ndarray:
    if array.ndim == 0:
        array = array.reshape(1)
    if any(d < 1 for d in array.shape):
        raise InvalidShapeError(f"次元は 1 以上にしてください: {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("テンソルに NaN または Inf が含まれています")
    array.setflags(write=False)
    return array


def _check_dims(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise InvalidShapeError(f"次元は 1 以上にしてください: {list(shape)}")
    return dims


def tensor_new(
    shape: Sequence[int], fill: float, dtype: Any = DEFAULT_DTYPE
) -> Tensor:
    """すべての要素が fill のテンソルを作る

    Args:
        shape (Sequence[int]): 次元のリスト。すべて 1 以上。
        fill (float): 埋める値。
        dtype: 要素の型。

    Returns:
        Tensor: 指定形状のテンソル。

    Raises:
        InvalidShapeError: 0 以下の次元が含まれている場合。
    """
    dims = _check_dims(shape)
    return Tensor.wrap(np.full(dims, fill, dtype=dtype))


def tensor_reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    """要素の並びを変えずに形状だけを変える"""
    dims = _check_dims(new_shape)
    if prod(dims) != prod(t.shape):
        raise ShapeMismatchError(
            f"要素数が一致しません: {list(t.shape)} -> {list(dims)}"
        )
    return Tensor.wrap(t.array.reshape(dims))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m, k] x [k, n] の行列積

    c[i][j] = Σ_p a[i][p]·b[p][j]。実装は BLAS に任せる。
    """
    if a.rank != 2 or b.rank != 2:
        raise ShapeMismatchError(
            f"matmul は 2 階テンソル同士の演算です: {a.shape} x {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"内側の次元が一致しません: {a.shape} x {b.shape}"
        )
    return Tensor.wrap(np.matmul(a.array, b.array))
