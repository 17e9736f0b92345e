import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from robtok import checkpoint as ck
from robtok.vit import ModelWeights, ViTConfig


def _sample():
    rng = np.random.default_rng(0)
    return ck.Checkpoint({"seed": 7, "note": "x"}, {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=(2,))})


def test_round_trip_bit_exact(tmp_path):
    c = _sample()
    ck.save_checkpoint(tmp_path / "m.ckpt", c)
    d = ck.load_checkpoint(tmp_path / "m.ckpt")
    assert d.config == c.config
    assert list(d.tensors) == list(c.tensors)
    for k in c.tensors:
        assert d.tensors[k].tobytes() == c.tensors[k].tobytes()


def test_header_layout():
    blob = ck.encode(_sample())
    assert blob[:4] == b"RTOK"
    assert struct.unpack("<I", blob[4:8])[0] == ck.VERSION


def test_bad_magic():
    blob = bytearray(ck.encode(_sample()))
    blob[0:4] = b"NOPE"
    with pytest.raises(ck.BadMagicError):
        ck.decode(bytes(blob))


def test_version_mismatch_names_both():
    blob = bytearray(ck.encode(_sample()))
    blob[4:8] = struct.pack("<I", ck.VERSION + 1)
    with pytest.raises(ck.VersionMismatchError, match=f"{ck.VERSION + 1}.*{ck.VERSION}") as info:
        ck.decode(bytes(blob))
    assert info.value.found == ck.VERSION + 1 and info.value.expected == ck.VERSION


@pytest.mark.parametrize("cut", [2, 9, 20, -1, -9])
def test_truncation(cut):
    blob = ck.encode(_sample())
    with pytest.raises(ck.TruncatedFileError):
        ck.decode(blob[:cut])


def test_extent_overflow():
    cfg = b"{}"
    blob = b"RTOK" + struct.pack("<II", ck.VERSION, len(cfg)) + cfg + struct.pack("<I", 1)
    blob += struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<2Q", 2**31, 2**31)
    with pytest.raises(ck.ExtentOverflowError):
        ck.decode(blob)


def test_errors_are_distinct():
    kinds = [ck.BadMagicError, ck.VersionMismatchError, ck.TruncatedFileError, ck.ExtentOverflowError]
    assert len(set(kinds)) == 4
    assert all(issubclass(k, ck.CheckpointError) for k in kinds)


def test_model_and_tokens_round_trip(tmp_path):
    m = ModelWeights.init(ViTConfig(), seed=1, with_head=False)
    c = ck.model_checkpoint(m, seed=1)
    ck.save_checkpoint(tmp_path / "m", c)
    back = ck.model_from_checkpoint(ck.load_checkpoint(tmp_path / "m"))
    assert back.config == m.config
    for k, p in m.params.items():
        assert back[k].data.tobytes() == p.data.tobytes()
    t = np.random.default_rng(0).normal(size=(10, 64))
    ck.save_checkpoint(tmp_path / "t", ck.tokens_checkpoint(t, c.config["config_hash"], 0))
    loaded = ck.load_checkpoint(tmp_path / "t")
    assert "rob.tokens" in loaded.tensors
    assert ck.tokens_from_checkpoint(loaded).tobytes() == t.tobytes()


def test_config_hash_is_order_independent():
    assert ck.config_hash({"a": 1, "b": 2}) == ck.config_hash({"b": 2, "a": 1})
    assert ck.config_hash({"a": 1}) != ck.config_hash({"a": 2})


names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=12)
tensors = arrays(np.float64, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4))


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(names, tensors, max_size=5), st.dictionaries(st.text(max_size=5), st.integers(), max_size=3))
def test_fuzzed_round_trip_is_bit_exact(payload, config):
    c = ck.Checkpoint(config, payload)
    d = ck.decode(ck.encode(c))
    assert d.config == config
    assert list(d.tensors) == list(payload)
    for k, v in payload.items():
        assert d.tensors[k].shape == v.shape
        assert d.tensors[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 200))
def test_any_prefix_is_rejected_cleanly(n):
    blob = ck.encode(_sample())
    if n >= len(blob):
        return
    with pytest.raises(ck.CheckpointError):
        ck.decode(blob[:n])
