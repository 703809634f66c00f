import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnwm import checkpoint
from nnwm.errors import DataError
from nnwm.hosts import build_host
from nnwm.watermark import extract, make_key

from conftest import small_net


def test_roundtrip_is_byte_identical(tmp_path):
    m = build_host("mini-wide", 3, (8, 8, 3), 10)
    m.meta["epochs_trained"] = 7
    checkpoint.save(m, tmp_path / "a.ckpt")
    again = checkpoint.load(tmp_path / "a.ckpt")
    assert checkpoint.to_bytes(again) == (tmp_path / "a.ckpt").read_bytes()
    assert again.meta == m.meta and again.embed_layer == "conv2b"
    for p, q in zip(m.parameters(), again.parameters()):
        np.testing.assert_array_equal(p, q)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e300, 1e300, allow_nan=False))
def test_extraction_bits_survive_roundtrip(seed, scale):
    net = small_net(seed % 1000)
    W = net.layer("conv2").params["W"]
    W[...] = np.random.default_rng(seed).standard_normal(W.shape) * (scale or 1.0)
    key = make_key("random", seed, 20, 27)
    before = extract(key, W).bits
    after = extract(key, checkpoint.from_bytes(checkpoint.to_bytes(net)).layer("conv2").params["W"]).bits
    np.testing.assert_array_equal(before, after)


def test_prefix_layout():
    blob = checkpoint.to_bytes(small_net())
    magic, version, n = struct.unpack_from("<8sIQ", blob)
    assert magic == b"NNWMCKPT" and version == 1
    assert blob[20:20 + n].decode().startswith("{")


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:8] + struct.pack("<I", 2) + b[12:], "version"),
    (lambda b: b[:-8], "truncated at byte offset"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:10], "too short"),
])
def test_corrupt_checkpoints(mutate, match):
    with pytest.raises(DataError, match=match):
        checkpoint.from_bytes(mutate(checkpoint.to_bytes(small_net())))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        checkpoint.load(tmp_path / "nope.ckpt")
