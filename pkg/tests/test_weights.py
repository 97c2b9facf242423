import io
import struct

import numpy as np
import pytest

from blind_aid.errors import (
    BadMagicError,
    TruncatedPayloadError,
    VersionMismatchError,
    WeightsShapeMismatchError,
)
from blind_aid.network import build_network, load_config, with_elu_a
from blind_aid.weights import (
    FINGERPRINT_SIZE,
    MAGIC,
    load_weights,
    save_weights,
    weights_bytes,
)


@pytest.fixture
def net():
    return build_network(load_config("tiny-gradcheck"), seed=3)


def test_round_trip_is_byte_identical(net, tmp_path):
    path = tmp_path / "tiny.cnwb"
    save_weights(net, path)
    loaded = load_weights(net.config, path)
    for a, b in zip(net.tensors(), loaded.tensors()):
        np.testing.assert_array_equal(a.array, b.array)
    assert weights_bytes(loaded) == path.read_bytes()


def test_header_layout(net):
    data = weights_bytes(net)
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1
    assert data[8 : 8 + FINGERPRINT_SIZE] == net.config.fingerprint()
    count = struct.unpack("<I", data[40:44])[0]
    assert count == len(net.tensors())


def test_float64_network_is_stored_as_float32():
    net = build_network(
        load_config("tiny-gradcheck"), seed=1, dtype=np.float64
    )
    loaded = load_weights(net.config, io.BytesIO(weights_bytes(net)))
    expected = net.tensors()[0].array.astype(np.float32)
    np.testing.assert_array_equal(loaded.tensors()[0].array, expected)


def test_bad_magic(net):
    data = b"XXXX" + weights_bytes(net)[4:]
    with pytest.raises(BadMagicError):
        load_weights(net.config, io.BytesIO(data))


def test_version_mismatch(net):
    data = bytearray(weights_bytes(net))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        load_weights(net.config, io.BytesIO(bytes(data)))


@pytest.mark.parametrize("cut", [6, 20, 50, -1])
def test_truncated_payload(net, cut):
    data = weights_bytes(net)[:cut]
    with pytest.raises(TruncatedPayloadError):
        load_weights(net.config, io.BytesIO(data))


def test_weights_for_another_config_are_rejected(net):
    other = with_elu_a(net.config, 0.5)
    with pytest.raises(WeightsShapeMismatchError):
        load_weights(other, io.BytesIO(weights_bytes(net)))


def test_wrong_dims_are_rejected(net):
    data = bytearray(weights_bytes(net))
    # 最初のテンソルの rank の直後が dims[0]
    offset = 44 + 4
    data[offset : offset + 4] = struct.pack("<I", 9)
    with pytest.raises(WeightsShapeMismatchError):
        load_weights(net.config, io.BytesIO(bytes(data)))
