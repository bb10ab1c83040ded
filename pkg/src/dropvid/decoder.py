"""Decoding the clean current frame from aligned neighbor features.

The current frame's own features never enter this decoder: the four
aligned neighbor feature maps (two before, two after) are stacked on a
temporal axis and fused by 3D convolutions whose temporal extent
shrinks 4 -> 2 -> 1, then decoded spatially back to full resolution.
Raindrop-free content for occluded pixels must therefore come from the
neighbors, which is what makes the self-supervised masks meaningful.

Two output modes: ``sigmoid`` squashes the head logits, ``residual``
adds a zero-initialized correction to a provided base image (the mean
of the flow-warped neighbor initial results) and clamps.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .types import FeatureMap, Frame, ShapeError

NEIGHBOR_COUNT = 4


class InterpolationDecoder(nn.Module):
    """(B, C, 4, h, w) aligned neighbor features -> (B, 3, 4h, 4w) frame."""

    def __init__(self, channels: int = 64, mode: str = "residual"):
        super().__init__()
        if mode not in ("residual", "sigmoid"):
            raise ValueError(f"unknown output mode {mode!r}")
        self.mode = mode
        self.channels = channels
        self.temporal1 = nn.Conv3d(channels, channels, (3, 3, 3), padding=(0, 1, 1))
        self.temporal2 = nn.Conv3d(channels, channels, (2, 3, 3), padding=(0, 1, 1))
        self.spatial = nn.Conv2d(channels, channels, 3, padding=1)
        self.up1 = nn.Conv2d(channels, channels // 2, 3, padding=1)
        self.up2 = nn.Conv2d(channels // 2, channels // 2, 3, padding=1)
        self.head = nn.Conv2d(channels // 2, 3, 3, padding=1)
        if mode == "residual":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, aligned: torch.Tensor, residual_base: torch.Tensor | None = None) -> torch.Tensor:
        if aligned.ndim != 5 or aligned.shape[2] != NEIGHBOR_COUNT:
            raise ShapeError(
                f"expected (B, C, {NEIGHBOR_COUNT}, h, w) aligned features, got {tuple(aligned.shape)}"
            )
        if aligned.shape[1] != self.channels:
            raise ShapeError(f"decoder built for {self.channels} channels, got {aligned.shape[1]}")
        # leaky activations: with few channels a plain relu layer can land
        # all-dead at init and permanently cut the gradient to the aligner
        z = F.leaky_relu(self.temporal1(aligned), 0.1)  # temporal 4 -> 2
        z = F.leaky_relu(self.temporal2(z), 0.1)  # temporal 2 -> 1
        z = z.squeeze(2)
        z = z + F.leaky_relu(self.spatial(z), 0.1)
        z = F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=False)
        z = F.leaky_relu(self.up1(z), 0.1)
        z = F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=False)
        z = F.leaky_relu(self.up2(z), 0.1)
        logits = self.head(z)
        if self.mode == "residual":
            if residual_base is None:
                raise ValueError("residual mode needs a base image")
            if residual_base.shape != logits.shape:
                raise ShapeError(
                    f"base {tuple(residual_base.shape)} does not match head {tuple(logits.shape)}"
                )
            return (residual_base + logits).clamp(0.0, 1.0)
        return torch.sigmoid(logits)


def decode_window(
    decoder: InterpolationDecoder,
    neighbors: list[FeatureMap],
    center_index: int,
    residual_base: torch.Tensor | None = None,
) -> Frame:
    """Typed decode from exactly four neighbor feature maps.

    ``neighbors`` must be time-ordered (t-2, t-1, t+1, t+2) around
    ``center_index``; the center's own features are deliberately not
    accepted.
    """
    if len(neighbors) != NEIGHBOR_COUNT:
        raise ValueError(f"need exactly {NEIGHBOR_COUNT} neighbor feature maps, got {len(neighbors)}")
    times = [n.time_index for n in neighbors]
    want = [center_index - 2, center_index - 1, center_index + 1, center_index + 2]
    if times != want:
        raise ValueError(f"neighbor time indices {times} do not match expected {want}")
    shapes = {tuple(n.activations.shape) for n in neighbors}
    if len(shapes) != 1:
        raise ShapeError(f"neighbor features disagree on shape: {sorted(shapes)}")
    stack = torch.stack([n.activations for n in neighbors], dim=1)[None]  # (1, C, 4, h, w)
    with torch.no_grad():
        base = residual_base[None] if residual_base is not None else None
        out = decoder(stack, base)[0]
    return Frame(out, center_index)
