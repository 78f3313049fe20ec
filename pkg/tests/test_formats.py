"""DSEQ sequence files and the model container."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalnet.errors import FormatError
from dalnet.formats import (
    MODEL_VERSION,
    decode_model,
    decode_sequence,
    encode_model,
    encode_sequence,
    load_model,
    load_sequence,
    read_model,
    save_model,
    save_sequence,
)
from dalnet.network import InferenceSession, run_sequence, toy_cnn
from dalnet.delta import DeltaLayerConfig
from dalnet.synthetic import FrameSequence
from dalnet.testing import random_params, random_spec, random_walk


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.floats(0.5, 120.0, width=32))
def test_sequence_round_trip_bytes(T, H, W, C, fps):
    frames = np.random.default_rng(T * H).random((T, H, W, C)).astype(np.float32)
    buf = encode_sequence(FrameSequence(frames, fps))
    seq = decode_sequence(buf)
    np.testing.assert_array_equal(seq.frames, frames)
    assert encode_sequence(seq) == buf


def test_sequence_header_layout():
    buf = encode_sequence(FrameSequence(np.full((2, 3, 4, 1), 0.5, np.float32), 25.0))
    assert buf[:4] == b"DSEQ"
    assert struct.unpack_from("<HIIIIf", buf, 4) == (1, 2, 3, 4, 1, 25.0)
    assert len(buf) == 26 + 4 * 24
    assert buf[26:30] == struct.pack("<f", 0.5)


def test_sequence_file_round_trip(tmp_path):
    seq = FrameSequence(np.random.default_rng(1).random((3, 4, 4, 1)), 30.0)
    save_sequence(tmp_path / "a.dseq", seq)
    save_sequence(tmp_path / "b.dseq", load_sequence(tmp_path / "a.dseq"))
    assert (tmp_path / "a.dseq").read_bytes() == (tmp_path / "b.dseq").read_bytes()


def _valid():
    return encode_sequence(FrameSequence(np.zeros((2, 2, 2, 1), np.float32)))


def test_bad_magic():
    with pytest.raises(FormatError) as err:
        decode_sequence(b"DSEX" + _valid()[4:])
    assert err.value.offset == 0


def test_truncated_payload():
    buf = _valid()
    with pytest.raises(FormatError, match="truncated") as err:
        decode_sequence(buf[:-3])
    assert err.value.offset == len(buf) - 3


def test_dimension_overflow():
    buf = struct.pack("<4sHIIIIf", b"DSEQ", 1, 2**31, 2**31, 4, 1, 30.0)
    with pytest.raises(FormatError, match="overflow"):
        decode_sequence(buf)


def test_wrong_version():
    buf = bytearray(_valid())
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError, match="version"):
        decode_sequence(bytes(buf))


# -- model container --------------------------------------------------------


@pytest.fixture
def toy():
    spec = toy_cnn((10, 10, 1), 3, lambda i: DeltaLayerConfig(max_pool=2 if i == 0 else None))
    return spec, random_params(spec, np.random.default_rng(0))


def test_model_round_trip_bit_identical(tmp_path, toy):
    spec, params = toy
    save_model(tmp_path / "m.dalm", spec, params, metadata={"note": "x"})
    spec2, params2 = load_model(tmp_path / "m.dalm")
    assert spec2 == spec
    for (k, a), (k2, b) in zip(params.named_tensors().items(), params2.named_tensors().items()):
        assert k == k2 and a.dtype == b.dtype and a.tobytes() == b.tobytes()
    save_model(tmp_path / "n.dalm", spec2, params2, metadata={"note": "x"})
    assert (tmp_path / "m.dalm").read_bytes() == (tmp_path / "n.dalm").read_bytes()


def test_model_payload_alignment(toy):
    spec, params = toy
    buf = encode_model_bundle(spec, params)
    mlen = struct.unpack_from("<Q", buf, 8)[0]
    manifest = json.loads(buf[16 : 16 + mlen])
    base = (16 + mlen + 7) // 8 * 8
    for entry in manifest["tensors"]:
        assert (base + entry["offset"]) % 8 == 0


def encode_model_bundle(spec, params, states=None):
    from dalnet.formats import ModelBundle

    return encode_model(ModelBundle(spec, params, states or {}, {}))


def test_load_then_infer_matches(tmp_path, toy):
    spec, params = toy
    frames = random_walk(np.random.default_rng(1), spec.input_shape, 8)
    before = run_sequence(spec, params, frames, "delta")
    save_model(tmp_path / "m.dalm", spec, params)
    after = run_sequence(*load_model(tmp_path / "m.dalm"), frames, "delta")
    np.testing.assert_array_equal(before, after)


def test_state_snapshot_resumes(tmp_path, toy):
    spec, params = toy
    frames = random_walk(np.random.default_rng(2), spec.input_shape, 10)
    live = InferenceSession(spec, params, "delta")
    for f in frames[:5]:
        live.step(f)
    save_model(tmp_path / "m.dalm", spec, params, states=live.snapshot())
    bundle = read_model(tmp_path / "m.dalm")
    resumed = InferenceSession(bundle.spec, bundle.params, "delta")
    resumed.restore(bundle.states)
    for f in frames[5:]:
        np.testing.assert_array_equal(live.step(f), resumed.step(f))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_specs_round_trip(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, plain_prob=0.3)
    params = random_params(spec, rng)
    buf = encode_model_bundle(spec, params)
    bundle = decode_model(buf)
    assert bundle.spec == spec
    assert encode_model_bundle(bundle.spec, bundle.params) == buf


def _rewrite_manifest(buf, edit):
    mlen = struct.unpack_from("<Q", buf, 8)[0]
    manifest = json.loads(buf[16 : 16 + mlen])
    edit(manifest)
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    payload = buf[(16 + mlen + 7) // 8 * 8 :]
    head = buf[:8] + struct.pack("<Q", len(text)) + text
    return head + b"\0" * ((-len(head)) % 8) + payload


def test_missing_q_tensor(toy):
    spec, params = toy
    buf = _rewrite_manifest(
        encode_model_bundle(spec, params), lambda m: m.update(tensors=[t for t in m["tensors"] if t["name"] != "layer1.q"])
    )
    with pytest.raises(FormatError, match="no q tensor"):
        decode_model(buf)


def test_version_mismatch(toy):
    spec, params = toy
    buf = bytearray(encode_model_bundle(spec, params))
    buf[4:6] = struct.pack("<H", MODEL_VERSION + 1)
    with pytest.raises(FormatError, match="version"):
        decode_model(bytes(buf))


def test_model_bad_magic_and_truncation(toy):
    spec, params = toy
    buf = encode_model_bundle(spec, params)
    with pytest.raises(FormatError):
        decode_model(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="truncated"):
        decode_model(buf[: len(buf) // 2])
