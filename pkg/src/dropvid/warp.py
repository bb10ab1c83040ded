"""Differentiable backward warping with bilinear sampling.

``backward_warp(img, flow)`` gathers ``img`` at ``p + flow(p)`` for every
output position ``p``.  Out-of-range sample coordinates are clamped to the
image rectangle (border replication), so constant images are invariant
under any flow.  Gradients flow to both the image (through the corner
gather weights) and the flow (through the fractional sample coordinates).

Implemented as an explicit four-corner gather rather than ``grid_sample``
so that integer sample positions reproduce input values exactly: at zero
flow the fractional weights are exactly (1, 0, 0, 0) and the output equals
the input bit for bit.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F


def backward_warp(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp ``img`` by ``flow``: output(p) = img(clip(p + flow(p))).

    Parameters
    ----------
    img : (C, H, W) or (B, C, H, W)
    flow : (2, H, W) or (B, 2, H, W), channel 0 = x displacement, 1 = y

    Returns a tensor shaped like ``img``.
    """
    unbatched = img.ndim == 3
    if unbatched:
        img = img[None]
        flow = flow[None]
    if img.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"bad shapes: img {tuple(img.shape)}, flow {tuple(flow.shape)}")
    if img.shape[2:] != flow.shape[2:] or img.shape[0] != flow.shape[0]:
        raise ValueError(f"img {tuple(img.shape)} and flow {tuple(flow.shape)} disagree")

    b, _, h, w = img.shape
    dev, dtype = img.device, img.dtype
    gy, gx = torch.meshgrid(
        torch.arange(h, device=dev, dtype=dtype),
        torch.arange(w, device=dev, dtype=dtype),
        indexing="ij",
    )
    px = (gx + flow[:, 0].to(dtype)).clamp(0, w - 1)  # (B, H, W)
    py = (gy + flow[:, 1].to(dtype)).clamp(0, h - 1)

    x0 = px.floor()
    y0 = py.floor()
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    bi = torch.arange(b, device=dev)[:, None, None]
    # advanced indexing with a mid slice yields (B, H, W, C)
    v00 = img[bi, :, y0, x0]
    v01 = img[bi, :, y0, x1]
    v10 = img[bi, :, y1, x0]
    v11 = img[bi, :, y1, x1]

    fx = fx[..., None]
    fy = fy[..., None]
    # lerp form a + t*(b-a): constant images and zero flow survive bit-exactly
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    out = out.permute(0, 3, 1, 2)
    return out[0] if unbatched else out


def scale_flow_to(flow: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Resample a flow field to a new spatial size, rescaling its vectors.

    Used to carry image-level flow down to the feature grid: vectors are
    multiplied by the per-axis size ratio so displacements stay metrically
    consistent at the new resolution.
    """
    unbatched = flow.ndim == 3
    if unbatched:
        flow = flow[None]
    _, _, h, w = flow.shape
    if (h, w) == (height, width):
        out = flow
    else:
        out = F.interpolate(flow, size=(height, width), mode="bilinear", align_corners=False)
        scale = flow.new_tensor([width / w, height / h]).view(1, 2, 1, 1)
        out = out * scale
    return out[0] if unbatched else out
