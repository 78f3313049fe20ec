"""On-disk formats: DSEQ frame sequences and the model container.

DSEQ layout (little-endian)::

    "DSEQ" | u16 version | u32 T | u32 H | u32 W | u32 C | f32 fps | T*H*W*C f32 values

Model container layout (little-endian)::

    "DALM" | u16 version | u16 reserved | u64 manifest length | manifest (JSON text)
    | zero padding to 8 bytes | tensor payloads, each starting 8-byte aligned

The manifest holds the network description and a directory of tensors
(name, dtype, shape, offset relative to the payload start, byte count).
Parameters are stored as ``f4``; session state snapshots as ``f8`` so that a
resumed session continues bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .network import LayerParams, NetworkSpec, ParamSet, check_params
from .synthetic import FrameSequence

DSEQ_MAGIC = b"DSEQ"
DSEQ_VERSION = 1
_DSEQ_HEADER = struct.Struct("<4sHIIIIf")

MODEL_MAGIC = b"DALM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHHQ")
_MAX_ELEMENTS = 1 << 40


def _read(path) -> bytes:
    return Path(path).read_bytes()


# --------------------------------------------------------------------------
# DSEQ
# --------------------------------------------------------------------------


def encode_sequence(seq: FrameSequence) -> bytes:
    T, H, W, C = seq.frames.shape
    header = _DSEQ_HEADER.pack(DSEQ_MAGIC, DSEQ_VERSION, T, H, W, C, seq.fps)
    return header + seq.frames.astype("<f4", copy=False).tobytes(order="C")


def decode_sequence(buf: bytes) -> FrameSequence:
    if len(buf) < 4 or buf[:4] != DSEQ_MAGIC:
        raise FormatError("bad magic, not a DSEQ file", 0)
    if len(buf) < _DSEQ_HEADER.size:
        raise FormatError("truncated DSEQ header", len(buf))
    _, version, T, H, W, C, fps = _DSEQ_HEADER.unpack_from(buf)
    if version != DSEQ_VERSION:
        raise FormatError(f"unsupported DSEQ version {version}", 4)
    for k, d in enumerate((T, H, W, C)):
        if d == 0:
            raise FormatError("zero dimension", 6 + 4 * k)
    count = T * H * W * C
    if count > _MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: {T}x{H}x{W}x{C} elements", 6)
    if not fps > 0:
        raise FormatError("fps must be positive", 22)
    expected = _DSEQ_HEADER.size + 4 * count
    if len(buf) != expected:
        kind = "truncated payload" if len(buf) < expected else "trailing bytes after payload"
        raise FormatError(f"{kind}: header promises {4 * count} payload bytes", min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_DSEQ_HEADER.size)
    return FrameSequence(data.reshape(T, H, W, C).astype(np.float32), float(fps))


def save_sequence(path, seq: FrameSequence) -> None:
    Path(path).write_bytes(encode_sequence(seq))


def load_sequence(path) -> FrameSequence:
    return decode_sequence(_read(path))


# --------------------------------------------------------------------------
# model container
# --------------------------------------------------------------------------


@dataclass
class ModelBundle:
    spec: NetworkSpec
    params: ParamSet
    states: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _align(n: int) -> int:
    return (n + 7) // 8 * 8


def encode_model(bundle: ModelBundle) -> bytes:
    tensors: list[tuple[str, str, np.ndarray]] = []
    for name, a in bundle.params.named_tensors().items():
        tensors.append((name, "f4", np.asarray(a, dtype="<f4")))
    for name in sorted(bundle.states):
        tensors.append((f"state/{name}", "f8", np.asarray(bundle.states[name], dtype="<f8")))
    directory = []
    offset = 0
    for name, dtype, a in tensors:
        directory.append({"name": name, "dtype": dtype, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset = _align(offset + a.nbytes)
    manifest = {
        "format": "dalnet-model",
        "version": MODEL_VERSION,
        "spec": bundle.spec.to_dict(),
        "tensors": directory,
        "metadata": bundle.metadata,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    head = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, 0, len(text)) + text
    out = bytearray(head + b"\0" * (_align(len(head)) - len(head)))
    base = len(out)
    for entry, (_, _, a) in zip(directory, tensors):
        out += b"\0" * (base + entry["offset"] - len(out))
        out += a.tobytes(order="C")
    out += b"\0" * (_align(len(out)) - len(out))
    return bytes(out)


def decode_model(buf: bytes) -> ModelBundle:
    if len(buf) < 4 or buf[:4] != MODEL_MAGIC:
        raise FormatError("bad magic, not a model container", 0)
    if len(buf) < _MODEL_HEADER.size:
        raise FormatError("truncated model header", len(buf))
    _, version, _, mlen = _MODEL_HEADER.unpack_from(buf)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model container version {version}", 4)
    start = _MODEL_HEADER.size
    if start + mlen > len(buf):
        raise FormatError("truncated manifest", len(buf))
    try:
        manifest = json.loads(buf[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", start) from exc
    if manifest.get("version") != MODEL_VERSION:
        raise FormatError(f"manifest version {manifest.get('version')} != {MODEL_VERSION}", start)
    base = _align(start + mlen)
    try:
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid network description: {exc}", start) from exc

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        dtype = {"f4": "<f4", "f8": "<f8"}.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"unknown dtype {entry['dtype']!r} for {entry['name']}", start)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        pos = base + entry["offset"]
        if entry["nbytes"] != count * np.dtype(dtype).itemsize:
            raise FormatError(f"byte count of {entry['name']} disagrees with its shape", start)
        if pos + entry["nbytes"] > len(buf):
            raise FormatError(f"truncated payload for {entry['name']}", len(buf))
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        arrays[entry["name"]] = a.astype(np.float32 if entry["dtype"] == "f4" else np.float64)

    layers = []
    for i, layer in enumerate(spec.layers):
        p = LayerParams(*(arrays.get(f"layer{i}.{n}") for n in ("W", "B", "q")))
        if layer.is_delta and p.q is None:
            raise FormatError(f"layer {i} is a Delta Activation Layer but has no q tensor", start)
        layers.append(p)
    params = ParamSet(layers)
    try:
        check_params(spec, params)
    except DimensionError as exc:
        raise FormatError(str(exc), start) from exc
    states = {k[len("state/") :]: v for k, v in arrays.items() if k.startswith("state/")}
    return ModelBundle(spec, params, states, manifest.get("metadata", {}))


def save_model(path, spec: NetworkSpec, params: ParamSet, states=None, metadata=None) -> None:
    Path(path).write_bytes(encode_model(ModelBundle(spec, params, dict(states or {}), dict(metadata or {}))))


def read_model(path) -> ModelBundle:
    return decode_model(_read(path))


def load_model(path) -> tuple[NetworkSpec, ParamSet]:
    bundle = read_model(path)
    return bundle.spec, bundle.params
