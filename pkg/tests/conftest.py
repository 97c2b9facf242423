from pathlib import Path

import numpy as np
import pytest

from blind_aid.network import build_network, load_config
from blind_aid.vision import ImageBuffer, encode_ppm
from blind_aid.weights import save_weights

GOLDEN = Path(__file__).parent / "golden"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """ノルムで測った相対誤差 (両方ほぼ 0 なら 0)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """中心差分による数値勾配 (x は float64)"""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = f(x)
        flat[i] = saved - eps
        minus = f(x)
        flat[i] = saved
        out[i] = (plus - minus) / (2 * eps)
    return grad


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def write_frame(path: Path, pixels: np.ndarray) -> Path:
    path.write_bytes(encode_ppm(ImageBuffer(pixels=pixels.astype(np.uint8))))
    return path


@pytest.fixture
def frame_dir(tmp_path: Path) -> Path:
    """64x64 のノイズ画像 3 枚"""
    directory = tmp_path / "frames"
    directory.mkdir()
    gen = np.random.default_rng(7)
    for n in range(3):
        pixels = gen.integers(0, 256, size=(64, 64, 3))
        write_frame(directory / f"frame_{n:03d}.ppm", pixels)
    return directory


@pytest.fixture
def zero_detector_weights(tmp_path: Path) -> Path:
    """toy-detector をゼロ初期化した重みファイル"""
    path = tmp_path / "zeros.cnwb"
    net = build_network(load_config("toy-detector"), init="zeros")
    save_weights(net, path)
    return path
