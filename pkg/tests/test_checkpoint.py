import struct

import numpy as np
import pytest

from jlml import checkpoint as C
from jlml.model import build, forward, toy_config

from conftest import tiny_config


@pytest.fixture
def model():
    m = build(tiny_config(), seed=5)
    # make the running stats non-trivial
    forward(m, np.random.default_rng(0).standard_normal((4, 3, 16, 16)), training=True)
    return m


def test_save_load_save_is_byte_identical(model, tmp_path):
    a, b = tmp_path / "a.jlmc", tmp_path / "b.jlmc"
    C.save_checkpoint(model, a, {"train.seed": "5"})
    loaded = C.load_checkpoint(a)
    C.save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.meta == {"train.seed": "5"}
    assert loaded.config == model.config


def test_load_then_forward_is_bit_exact(model, tmp_path):
    C.save_checkpoint(model, tmp_path / "m.jlmc")
    loaded = C.load_checkpoint(tmp_path / "m.jlmc")
    x = np.random.default_rng(2).standard_normal((3, 3, 16, 16)).astype(np.float32)
    a, b = forward(model, x), forward(loaded, x)
    assert a.global_feature.data.tobytes() == b.global_feature.data.tobytes()
    assert a.local_logits.data.tobytes() == b.local_logits.data.tobytes()


def test_header_layout(model):
    raw = C.dumps(model)
    assert raw[:4] == b"JLMC"
    assert struct.unpack("<H", raw[4:6])[0] == C.VERSION
    n = struct.unpack("<I", raw[6:10])[0]
    kv = C.decode_kv(raw[10:10 + n])
    assert kv["m"] == "2" and kv["loss_mode"] == "multiloss"


def test_bad_magic_rejected(model):
    raw = bytearray(C.dumps(model))
    raw[0:4] = b"XXXX"
    with pytest.raises(C.FormatError, match="magic"):
        C.loads(bytes(raw))


def test_bad_version_rejected(model):
    raw = bytearray(C.dumps(model))
    raw[4:6] = struct.pack("<H", 99)
    with pytest.raises(C.FormatError, match="version"):
        C.loads(bytes(raw))


@pytest.mark.parametrize("cut", [3, 8, 40, -1])
def test_truncated_rejected(model, cut):
    raw = C.dumps(model)
    with pytest.raises(C.FormatError):
        C.loads(raw[:cut])


def test_shape_disagreement_rejected(model):
    other = build(tiny_config(feat_dim_global=4), seed=0)
    raw = C.dumps(other)
    n = struct.unpack("<I", raw[6:10])[0]
    # splice the original config in front of records that no longer fit it
    block = C.encode_kv(model.config.to_kv())
    spliced = raw[:6] + struct.pack("<I", len(block)) + block + raw[10 + n:]
    with pytest.raises(C.FormatError, match="shape"):
        C.loads(spliced)


def test_unnamespaced_meta_rejected(model):
    with pytest.raises(ValueError):
        C.dumps(model, {"seed": "1"})


def test_toy_roundtrip_size(tmp_path):
    m = build(toy_config(), seed=0)
    C.save_checkpoint(m, tmp_path / "t.jlmc")
    assert (tmp_path / "t.jlmc").stat().st_size > 4 * m.num_params()
