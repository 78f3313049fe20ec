"""Deterministic moving-shape videos.

A bright square or disc moves over a static, smoothly textured background
seen through a camera that may pan. The background is a sum of sinusoids in
world coordinates, so a pan is an exact translation of the visible window.
Pixel values are clipped to [0, 1] and snapped to the 8-bit grid ``k/255``.

The classification datasets use four motion classes: horizontal motion near
the top edge, horizontal motion near the bottom edge, vertical motion near the
left edge, vertical motion near the right edge.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError

N_CLASSES = 4
PRESETS = ("frozen-cam", "moving-cam")


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, H, W, C) float32
    fps: float = 30.0
    label: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or 0 in self.frames.shape:
            raise DomainError(f"frames must be a non-empty (T, H, W, C) array, got {self.frames.shape}")
        if not self.fps > 0:
            raise DomainError("fps must be positive")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 64
    width: int = 64
    shape: str = "square"
    size: int = 10
    # all 2-vectors are (x, y) = (column, row); rates are pixels per frame
    start: tuple[float, float] = (10.0, 10.0)  # object's top-left corner
    velocity: tuple[float, float] = (1.0, 0.0)
    camera_pan: tuple[float, float] = (0.0, 0.0)
    noise_amplitude: float = 0.0
    label: int = 0
    seed: int = 0
    fps: float = 30.0
    object_value: float = 0.95


def _background(seed: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    r = rows[:, None].astype(np.float64)
    c = cols[None, :].astype(np.float64)
    bg = np.full((len(rows), len(cols)), 0.35)
    for _ in range(4):
        fy, fx = rng.uniform(-0.25, 0.25, 2)
        phase = rng.uniform(0, 2 * np.pi)
        bg += 0.06 * np.sin(fy * r + fx * c + phase)
    return bg


def _object_mask(kind: str, size: int, top: int, left: int, h: int, w: int) -> np.ndarray:
    rr = np.arange(h)[:, None] - top
    cc = np.arange(w)[None, :] - left
    inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
    if kind == "square":
        return inside
    if kind == "disc":
        rad = size / 2.0
        return ((rr + 0.5 - rad) ** 2 + (cc + 0.5 - rad) ** 2) <= rad * rad
    raise DomainError(f"unknown shape kind {kind!r}")


def generate_sequence(spec: SyntheticSceneSpec, T: int) -> FrameSequence:
    """Render ``T`` frames of ``spec``; equal specs give bit-identical frames."""
    if T < 1:
        raise DomainError("T must be at least 1")
    h, w = spec.height, spec.width
    if h < 2 or w < 2 or spec.size < 1 or spec.size > min(h, w):
        raise DomainError(f"degenerate canvas {h}x{w} for object size {spec.size}")
    if not 0 <= spec.noise_amplitude <= 0.5:
        raise DomainError("noise amplitude must lie in [0, 0.5]")
    rng = np.random.default_rng([spec.seed, 11])
    frames = np.empty((T, h, w, 1), dtype=np.float32)
    for t in range(T):
        ox = int(round(spec.camera_pan[0] * t))
        oy = int(round(spec.camera_pan[1] * t))
        img = _background(spec.seed, np.arange(h) + oy, np.arange(w) + ox)
        left = int(round(spec.start[0] + (spec.velocity[0] - spec.camera_pan[0]) * t))
        top = int(round(spec.start[1] + (spec.velocity[1] - spec.camera_pan[1]) * t))
        top = min(max(top, 0), h - spec.size)
        left = min(max(left, 0), w - spec.size)
        img[_object_mask(spec.shape, spec.size, top, left, h, w)] = spec.object_value
        if spec.noise_amplitude > 0:
            img = img + rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, img.shape)
        frames[t, :, :, 0] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return FrameSequence(frames, spec.fps, spec.label)


def motion_class_scene(
    label: int,
    rng: np.random.Generator,
    T: int,
    height: int = 64,
    width: int = 64,
    preset: str = "frozen-cam",
    noise: float = 0.0,
    speed: tuple[float, float] = (0.75, 2.0),
) -> SyntheticSceneSpec:
    """Random scene of one of the four motion classes."""
    if preset not in PRESETS:
        raise DomainError(f"preset must be one of {PRESETS}")
    if not 0 <= label < N_CLASSES:
        raise DomainError(f"label must be in [0, {N_CLASSES})")
    size = int(rng.integers(max(3, height // 8), max(4, height // 5) + 1))
    kind = "square" if rng.random() < 0.5 else "disc"
    v = float(rng.uniform(*speed)) * (1 if rng.random() < 0.5 else -1)
    travel = abs(v) * (T - 1)
    edge = max(1, height // 32)
    band = max(edge + 1, height // 4 - size // 2)

    def along(extent: int) -> float:
        lo, hi = edge, extent - size - edge
        lo, hi = (lo + travel, hi) if v < 0 else (lo, hi - travel)
        if hi < lo:
            lo = hi = (extent - size) / 2.0
        return float(rng.uniform(lo, hi))

    def across(extent: int, near_start: bool) -> float:
        if near_start:
            return float(rng.uniform(edge, band))
        return float(rng.uniform(extent - size - band, extent - size - edge))

    if label in (0, 1):
        start = (along(width), across(height, label == 0))
        vel = (v, 0.0)
    else:
        start = (across(width, label == 2), along(height))
        vel = (0.0, v)
    pan = (0.0, 0.0)
    if preset == "moving-cam":
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.5, 1.0)
        pan = (float(mag * np.cos(ang)), float(mag * np.sin(ang)))
        # keep the object's screen trajectory the same as with a fixed camera
        vel = (vel[0] + pan[0], vel[1] + pan[1])
    return SyntheticSceneSpec(
        height=height,
        width=width,
        shape=kind,
        size=size,
        start=start,
        velocity=vel,
        camera_pan=pan,
        noise_amplitude=noise,
        label=label,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def make_dataset(
    n_per_class: int,
    T: int,
    seed: int,
    height: int = 64,
    width: int = 64,
    preset: str = "frozen-cam",
    noise: float = 0.0,
) -> list[FrameSequence]:
    """``n_per_class`` labelled sequences for each motion class, interleaved by class."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_per_class):
        for label in range(N_CLASSES):
            scene = motion_class_scene(label, rng, T, height, width, preset, noise)
            out.append(generate_sequence(scene, T))
    return out


def stack_dataset(seqs: list[FrameSequence]) -> tuple[np.ndarray, np.ndarray]:
    """``(N, T, H, W, C)`` frames and ``(N,)`` labels."""
    frames = np.stack([s.frames for s in seqs])
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    return frames, labels


def subsample(seq: FrameSequence, d: int) -> FrameSequence:
    """Keep frames 0, d, 2d, ...; the frame rate drops by ``d``."""
    if d < 1:
        raise DomainError("divisor must be at least 1")
    if len(seq) < d:
        raise DomainError(f"sequence of {len(seq)} frames is shorter than divisor {d}")
    return FrameSequence(seq.frames[::d].copy(), seq.fps / d, seq.label)


def frozen(seq_spec: SyntheticSceneSpec) -> SyntheticSceneSpec:
    """The same scene with nothing moving."""
    return replace(seq_spec, velocity=(0.0, 0.0), camera_pan=(0.0, 0.0), noise_amplitude=0.0)


__all__ = [
    "FrameSequence",
    "N_CLASSES",
    "SyntheticSceneSpec",
    "frozen",
    "generate_sequence",
    "make_dataset",
    "motion_class_scene",
    "stack_dataset",
    "subsample",
]
