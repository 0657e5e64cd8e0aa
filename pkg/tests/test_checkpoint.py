import struct

import numpy as np
import pytest

from evomoe.checkpoint import MAGIC, decode, encode, load, save
from evomoe.errors import CheckpointError


def _blobs():
    rng = np.random.default_rng(0)
    return {
        "embed.tokens": rng.normal(size=(5, 3)),
        "head.b": rng.normal(size=5),
        "adam.m/head.b": np.zeros(5),
        "scalar": np.array(2.5),
    }


def test_layout_is_little_endian_with_header():
    payload = encode({"w": np.array([1.0, 2.0])}, {"iteration": 3})
    assert payload[:4] == MAGIC
    assert struct.unpack_from("<II", payload, 4) == (1, 1)
    assert struct.unpack_from("<I", payload, 12) == (1,)
    assert payload[16:17] == b"w"
    assert struct.unpack_from("<IQ", payload, 17) == (1, 2)
    assert struct.unpack_from("<2d", payload, 29) == (1.0, 2.0)


def test_save_and_load_are_exact(tmp_path):
    blobs = _blobs()
    path = save(tmp_path / "run" / "ckpt.evmo", blobs, {"iteration": 7, "rngs": {"data": [1, 2]}})
    assert not (tmp_path / "run" / "ckpt.evmo.tmp").exists()
    loaded, meta = load(path)
    assert list(loaded) == list(blobs), "blob order is preserved"
    for name, array in blobs.items():
        assert loaded[name].shape == array.shape
        assert np.array_equal(loaded[name], array), name
    assert meta == {"iteration": 7, "rngs": {"data": [1, 2]}}


def test_truncation_at_every_byte_is_detected():
    payload = encode({"w": np.arange(4.0).reshape(2, 2)}, {"iteration": 1})
    for cut in range(len(payload)):
        with pytest.raises(CheckpointError):
            decode(payload[:cut])


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda p: b"EVMX" + p[4:],
        lambda p: p[:4] + struct.pack("<I", 2) + p[8:],
        lambda p: p + b"\x00",
        lambda p: p[:-2] + b"{{",
    ],
    ids=["magic", "version", "trailing", "metadata"],
)
def test_corrupt_payloads_raise(corrupt):
    payload = encode({"w": np.ones(2)}, {"iteration": 1})
    with pytest.raises(CheckpointError):
        decode(corrupt(payload))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load(tmp_path / "absent.evmo")


@pytest.mark.parametrize(
    "dims",
    [(2**63, 2), (2**32, 2**32), (0, 2**63), (1,) * 70],
    ids=["huge", "wrapping-product", "empty-but-oversized", "too-many-dims"],
)
def test_corrupt_dimensions_raise(dims):
    """A blob header whose dims disagree with the bytes present is corrupt, never an allocation attempt."""
    good = encode({"w": np.ones(2)}, {"iteration": 1})
    header_end = 12 + 4 + 1
    patched = good[:header_end] + struct.pack(f"<I{len(dims)}Q", len(dims), *dims) + good[header_end + 4 + 8:]
    with pytest.raises(CheckpointError):
        decode(patched)
