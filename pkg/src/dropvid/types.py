"""Shared tensor containers for the two-stage raindrop removal pipeline.

Conventions used throughout the package:

* images are float tensors, channel-first ``(3, H, W)``, values in [0, 1]
* flow fields are ``(2, H, W)`` with channel 0 = horizontal (x) displacement
  and channel 1 = vertical (y) displacement, in pixels
* per-tap sampling offsets are ``(2*K, h, w)`` with channels ``(dx_0, dy_0,
  dx_1, dy_1, ...)`` for taps in row-major kernel order

All containers are frozen dataclasses; treat the wrapped tensors as
read-only once constructed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch


class ShapeError(ValueError):
    """Tensor shape or metadata mismatch."""


class NonFiniteError(ValueError):
    """NaN or inf where finite values are required."""


def _require_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteError(f"{what}: {bad} non-finite element(s)")


@dataclass(frozen=True)
class Frame:
    """A single video frame: ``(3, H, W)`` float pixels in [0, 1]."""

    pixels: torch.Tensor
    time_index: int = 0

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ShapeError(f"frame pixels must be (3, H, W), got {tuple(p.shape)}")
        _require_finite(p, "frame pixels")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError(
                f"frame pixels outside [0, 1]: range [{p.min():.4g}, {p.max():.4g}]; "
                "clamp_frame() at the boundary first"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def clamp_frame(pixels: torch.Tensor, time_index: int = 0) -> Frame:
    """Clamp raw pixel data into [0, 1] and wrap it as a Frame.

    Idempotent; rejects non-finite input rather than silently clamping it.
    """
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) pixels, got {tuple(pixels.shape)}")
    _require_finite(pixels, "pixels to clamp")
    return Frame(pixels.clamp(0.0, 1.0), time_index)


@dataclass(frozen=True)
class VideoClip:
    """Ordered frame sequence; ``window_radius`` is the temporal radius s."""

    frames: tuple[Frame, ...]
    window_radius: int = 2

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.window_radius < 1:
            raise ValueError(f"window_radius must be >= 1, got {self.window_radius}")
        times = [f.time_index for f in self.frames]
        for a, b in zip(times, times[1:]):
            if b != a + 1:
                raise ValueError(f"frames must be unit-spaced in time, got indices {times}")
        if len(self.frames) < self.window_size:
            raise ValueError(
                f"clip has {len(self.frames)} frames, needs >= {self.window_size} "
                f"for window_radius {self.window_radius}"
            )
        shapes = {tuple(f.pixels.shape) for f in self.frames}
        if len(shapes) > 1:
            raise ShapeError(f"frames disagree on shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius + 1

    def valid_centers(self) -> list[int]:
        """Time indices with a full temporal window inside the clip."""
        s = self.window_radius
        t0 = self.frames[0].time_index
        return list(range(t0 + s, t0 + len(self.frames) - s))

    def frame_at(self, time_index: int) -> Frame:
        offset = time_index - self.frames[0].time_index
        if not 0 <= offset < len(self.frames):
            raise IndexError(f"time index {time_index} outside clip")
        return self.frames[offset]


@dataclass(frozen=True)
class RaindropMask:
    """Per-pixel raindrop evidence and the derived non-raindrop weight.

    ``evidence`` is the channel-mean absolute difference between a rainy
    frame and its restored version, ``(1, H, W)``, >= 0.  ``nonrain_weight``
    is 1 where the pixel is trusted as background: hard mode thresholds the
    evidence at ``threshold``, soft mode ramps linearly down to 0 at the
    threshold.
    """

    evidence: torch.Tensor
    nonrain_weight: torch.Tensor
    threshold: float

    def __post_init__(self):
        e, w = self.evidence, self.nonrain_weight
        if e.ndim != 3 or e.shape[0] != 1:
            raise ShapeError(f"mask evidence must be (1, H, W), got {tuple(e.shape)}")
        if w.shape != e.shape:
            raise ShapeError(f"nonrain_weight shape {tuple(w.shape)} != evidence {tuple(e.shape)}")
        _require_finite(e, "mask evidence")
        _require_finite(w, "nonrain_weight")
        if e.min() < 0:
            raise ValueError("mask evidence must be >= 0")
        if w.min() < 0 or w.max() > 1:
            raise ValueError("nonrain_weight must lie in [0, 1]")
        if self.threshold <= 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        # zero evidence everywhere <=> unit weight everywhere
        if bool((e == 0).all()) and not bool((w == 1).all()):
            raise ValueError("zero evidence must give nonrain_weight == 1 everywhere")

    @classmethod
    def from_evidence(
        cls, evidence: torch.Tensor, threshold: float, mode: str = "hard"
    ) -> "RaindropMask":
        if mode == "hard":
            weight = (evidence < threshold).to(evidence.dtype)
        elif mode == "soft":
            weight = (1.0 - evidence / threshold).clamp(0.0, 1.0)
        else:
            raise ValueError(f"mask mode must be 'hard' or 'soft', got {mode!r}")
        return cls(evidence, weight, threshold)

    @property
    def all_masked(self) -> bool:
        """True when no pixel is trusted (nonrain_weight == 0 everywhere)."""
        return bool((self.nonrain_weight == 0).all())


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field ``(2, H, W)`` in pixels, x then y."""

    vectors: torch.Tensor
    source_index: int = 0
    target_index: int = 0

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 3 or v.shape[0] != 2:
            raise ShapeError(f"flow vectors must be (2, H, W), got {tuple(v.shape)}")
        _require_finite(v, "flow vectors")
        bound = float(max(v.shape[1], v.shape[2]))
        mag = torch.hypot(v[0], v[1]).max()
        if mag > bound:
            raise ValueError(f"flow magnitude {mag:.1f} exceeds sanity bound {bound:.0f}")

    @property
    def height(self) -> int:
        return self.vectors.shape[1]

    @property
    def width(self) -> int:
        return self.vectors.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    """Encoder activations ``(C, h, w)`` at feature-grid resolution."""

    activations: torch.Tensor
    time_index: int = 0

    def __post_init__(self):
        a = self.activations
        if a.ndim != 3:
            raise ShapeError(f"feature map must be (C, h, w), got {tuple(a.shape)}")
        _require_finite(a, "feature activations")


@dataclass(frozen=True)
class OffsetField:
    """Per-position, per-tap sampling displacements ``(2*K, h, w)``.

    Units are feature-grid pixels.  When ``bound`` is set, every offset
    component must already be clamped into [-bound, bound].
    """

    offsets: torch.Tensor
    bound: float | None = None

    def __post_init__(self):
        o = self.offsets
        if o.ndim != 3 or o.shape[0] % 2 != 0:
            raise ShapeError(f"offsets must be (2K, h, w), got {tuple(o.shape)}")
        _require_finite(o, "offsets")
        if self.bound is not None and o.abs().max() > self.bound + 1e-6:
            raise ValueError(f"offset magnitude {o.abs().max():.3f} exceeds bound {self.bound}")

    @property
    def taps(self) -> int:
        return self.offsets.shape[0] // 2


@dataclass(frozen=True)
class LossReport:
    """Named stage-2 loss terms and their weighted total."""

    flow: float
    mask_ct: float
    mask_cl: float
    temp: float
    lambda_t: float = 0.5
    total: float = field(default=math.nan)

    def __post_init__(self):
        for name in ("flow", "mask_ct", "mask_cl", "temp"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise NonFiniteError(f"loss component {name!r} is not finite: {v}")
            if v < 0:
                raise ValueError(f"loss component {name!r} must be >= 0, got {v}")
        expected = self.flow + self.mask_ct + self.mask_cl + self.lambda_t * self.temp
        if math.isnan(self.total):
            object.__setattr__(self, "total", expected)
        elif self.total != expected:
            raise ValueError(f"total {self.total!r} != recomputed {expected!r}")

    def as_json_dict(self, step: int) -> dict:
        return {
            "step": step,
            "flow": self.flow,
            "mask_ct": self.mask_ct,
            "mask_cl": self.mask_cl,
            "temp": self.temp,
            "total": self.total,
        }


def save_obj(obj, path) -> None:
    """Serialize any container from this module (torch.save round-trip)."""
    torch.save(obj, path)


def load_obj(path):
    return torch.load(path, weights_only=False)


def stack_frames(frames: Sequence[Frame]) -> torch.Tensor:
    """(N, 3, H, W) batch from a frame sequence."""
    return torch.stack([f.pixels for f in frames])
