"""Synthetic adherent-raindrop clips with ground truth.

A clip is built from one large seeded texture; each clean frame is a
bilinearly sampled window that translates across it, so scene content
moves while drops stay fixed on the virtual glass (or drift slowly).
Drops are soft-edged ellipses that refract the background: inside a drop
the scene appears minified and vertically flipped around the drop
center, which is what adherent water does to the light path.

``composite_drops`` is pure: it never mutates its inputs, and an empty
drop list returns the clean pixels bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .types import Frame, ShapeError, VideoClip

ALPHA_SUPPORT = 0.05  # alpha at or above this counts as raindrop ground truth


@dataclass(frozen=True)
class RaindropShape:
    """One elliptical drop on the glass plane.

    ``refraction`` is the minification factor of the scene seen through
    the drop; 0 collapses the view to the color under the drop center.
    """

    center: tuple[float, float]  # (x, y) pixels
    axes: tuple[float, float]  # semi-axes (ax, ay), pixels
    angle: float = 0.0  # rotation, radians
    refraction: float = 4.0
    opacity: float = 0.9
    edge_softness: float = 1.5  # rim falloff width, pixels

    def __post_init__(self):
        ax, ay = self.axes
        if ax <= 0 or ay <= 0:
            raise ValueError(f"axes must be positive, got {self.axes}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must be in [0, 1], got {self.opacity}")
        if self.refraction < 0:
            raise ValueError(f"refraction must be >= 0, got {self.refraction}")
        if self.edge_softness <= 0:
            raise ValueError(f"edge_softness must be > 0, got {self.edge_softness}")


@dataclass(frozen=True)
class DropTrajectory:
    """A drop and its per-frame motion on the glass."""

    shape: RaindropShape
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy) pixels per frame

    def at(self, t: int) -> RaindropShape:
        cx, cy = self.shape.center
        vx, vy = self.velocity
        return replace(self.shape, center=(cx + t * vx, cy + t * vy))


@dataclass(frozen=True)
class SynthSpec:
    """Everything needed to render one clip deterministically."""

    n_frames: int = 16
    height: int = 128
    width: int = 128
    n_drops: int = 6
    background_velocity: tuple[float, float] = (1.0, 0.0)  # (vx, vy) px/frame
    drop_motion: str = "static"  # "static" | "drift"
    drop_radius_range: tuple[float, float] = (5.0, 11.0)
    seed: int = 0
    window_radius: int = 2

    def __post_init__(self):
        if self.n_frames < 2 * self.window_radius + 1:
            raise ValueError("n_frames too small for the temporal window")
        if self.drop_motion not in ("static", "drift"):
            raise ValueError(f"unknown drop_motion {self.drop_motion!r}")
        if self.height < 16 or self.width < 16:
            raise ShapeError("frames must be at least 16x16")


def make_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Seeded smooth color texture, (3, height, width) float32 in [0.05, 0.95].

    Two noise octaves plus a low-frequency color wash give enough local
    structure for flow estimation without aliasing under translation.
    """
    coarse = np.stack([gaussian_filter(rng.random((height, width)), 6.0) for _ in range(3)])
    fine = np.stack([gaussian_filter(rng.random((height, width)), 1.5) for _ in range(3)])
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    wash = np.stack([0.3 * xx, 0.3 * yy, 0.15 * (xx + yy)])
    tex = 2.5 * coarse + 1.2 * fine + wash
    lo, hi = tex.min(), tex.max()
    tex = 0.05 + 0.90 * (tex - lo) / max(hi - lo, 1e-8)
    return tex.astype(np.float32)


def sample_patch(texture: torch.Tensor, top: float, left: float, height: int, width: int) -> torch.Tensor:
    """Bilinearly sample a (3, height, width) window whose origin may be fractional."""
    _, th, tw = texture.shape
    ys = torch.arange(height, dtype=texture.dtype) + top
    xs = torch.arange(width, dtype=texture.dtype) + left
    py = ys[:, None].expand(height, width).clamp(0, th - 1)
    px = xs[None, :].expand(height, width).clamp(0, tw - 1)
    y0 = py.floor().long()
    x0 = px.floor().long()
    y1 = (y0 + 1).clamp(max=th - 1)
    x1 = (x0 + 1).clamp(max=tw - 1)
    fy = (py - y0.to(texture.dtype))[None]
    fx = (px - x0.to(texture.dtype))[None]
    v00 = texture[:, y0, x0]
    v01 = texture[:, y0, x1]
    v10 = texture[:, y1, x0]
    v11 = texture[:, y1, x1]
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)


def drop_alpha(shape: RaindropShape, height: int, width: int) -> torch.Tensor:
    """Coverage map (1, height, width): opacity inside, zero outside the ellipse."""
    cx, cy = shape.center
    ax, ay = shape.axes
    ys = torch.arange(height, dtype=torch.float32) - cy
    xs = torch.arange(width, dtype=torch.float32) - cx
    dy = ys[:, None].expand(height, width)
    dx = xs[None, :].expand(height, width)
    c, s = math.cos(shape.angle), math.sin(shape.angle)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    rho = torch.sqrt(u * u + v * v)
    ramp = (1.0 - rho) * min(ax, ay) / shape.edge_softness
    return (shape.opacity * ramp.clamp(0.0, 1.0))[None]


def composite_drops(clean: Frame, drops: list[RaindropShape]) -> tuple[Frame, torch.Tensor]:
    """Render drops over a clean frame.

    Returns the rainy frame and a binary ground-truth mask (1, H, W)
    marking pixels where total drop coverage reaches ``ALPHA_SUPPORT``.
    The input frame is left untouched; with no drops the rainy pixels
    are the clean pixels bit for bit.
    """
    h, w = clean.height, clean.width
    if not drops:
        return Frame(clean.pixels.clone(), clean.time_index), torch.zeros(1, h, w)

    bg = clean.pixels
    out = bg.clone()
    alpha_total = torch.zeros(1, h, w)
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=torch.float32), torch.arange(w, dtype=torch.float32), indexing="ij"
    )
    for shape in drops:
        alpha = drop_alpha(shape, h, w)
        inside = alpha[0] > 0
        if not inside.any():
            continue
        cx, cy = shape.center
        k = shape.refraction
        if k > 0:
            # minified, vertically flipped view through the drop
            qx = cx + (gx - cx) / k
            qy = cy - (gy - cy) / k
        else:
            qx = torch.full_like(gx, cx)
            qy = torch.full_like(gy, cy)
        qx = qx.clamp(0, w - 1)
        qy = qy.clamp(0, h - 1)
        x0 = qx.floor().long()
        y0 = qy.floor().long()
        x1 = (x0 + 1).clamp(max=w - 1)
        y1 = (y0 + 1).clamp(max=h - 1)
        fx = (qx - x0.float())[None]
        fy = (qy - y0.float())[None]
        refr = (1 - fy) * ((1 - fx) * bg[:, y0, x0] + fx * bg[:, y0, x1]) + fy * (
            (1 - fx) * bg[:, y1, x0] + fx * bg[:, y1, x1]
        )
        drop_color = (0.82 * refr + 0.14).clamp(0.0, 1.0)
        out = (1 - alpha) * out + alpha * drop_color
        alpha_total = torch.maximum(alpha_total, alpha)

    mask = (alpha_total >= ALPHA_SUPPORT).to(torch.float32)
    return Frame(out.clamp(0.0, 1.0), clean.time_index), mask


def random_drops(spec: SynthSpec, rng: np.random.Generator) -> list[DropTrajectory]:
    """Draw drop shapes and motions for a clip."""
    lo, hi = spec.drop_radius_range
    drops = []
    for _ in range(spec.n_drops):
        ax = rng.uniform(lo, hi)
        ay = ax * rng.uniform(0.8, 1.3)
        margin = max(ax, ay)
        cx = rng.uniform(margin, spec.width - margin)
        cy = rng.uniform(margin, spec.height - margin)
        shape = RaindropShape(
            center=(cx, cy),
            axes=(ax, ay),
            angle=rng.uniform(-0.4, 0.4),
            refraction=rng.uniform(3.0, 6.0),
            opacity=rng.uniform(0.85, 0.98),
            edge_softness=rng.uniform(1.0, 2.0),
        )
        if spec.drop_motion == "drift":
            vel = (rng.uniform(-0.2, 0.2), rng.uniform(0.1, 0.5))
        else:
            vel = (0.0, 0.0)
        drops.append(DropTrajectory(shape=shape, velocity=vel))
    return drops


def synthesize_clip(spec: SynthSpec) -> tuple[VideoClip, VideoClip, list[torch.Tensor]]:
    """Render (rainy clip, clean clip, ground-truth masks) for one spec.

    Fully determined by ``spec``: rendering twice gives bitwise-equal
    tensors.  Masks are binary (1, H, W) float tensors, one per frame.
    """
    rng = np.random.default_rng(spec.seed)
    vx, vy = spec.background_velocity
    span_x = spec.width + int(abs(vx) * spec.n_frames) + 32
    span_y = spec.height + int(abs(vy) * spec.n_frames) + 32
    texture = torch.from_numpy(make_texture(rng, span_y, span_x))
    # start so the window stays inside the texture for either drift sign
    left0 = 16.0 if vx >= 0 else span_x - spec.width - 16.0
    top0 = 16.0 if vy >= 0 else span_y - spec.height - 16.0

    drops = random_drops(spec, rng)
    clean_frames, rain_frames, masks = [], [], []
    for t in range(spec.n_frames):
        patch = sample_patch(texture, top0 + t * vy, left0 + t * vx, spec.height, spec.width)
        clean = Frame(patch.clamp(0.0, 1.0), time_index=t)
        rain, mask = composite_drops(clean, [d.at(t) for d in drops])
        clean_frames.append(clean)
        rain_frames.append(rain)
        masks.append(mask)
    rain_clip = VideoClip(tuple(rain_frames), window_radius=spec.window_radius)
    clean_clip = VideoClip(tuple(clean_frames), window_radius=spec.window_radius)
    return rain_clip, clean_clip, masks
