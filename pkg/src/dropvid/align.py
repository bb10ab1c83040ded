"""Feature-level alignment: shared encoder, offset prediction, deformable sampling.

Flow warping fixes most of the inter-frame motion at the image level;
what remains (warp error, parallax, content revealed behind drops) is
absorbed here.  Each warped neighbor is encoded with the same encoder
as the current frame, a small CNN predicts per-tap sampling offsets by
comparing the two feature maps, and a deformable convolution gathers
neighbor features at the offset tap positions.

The deformable convolution is written out explicitly: for output
position p and tap k, it bilinearly samples the neighbor features at
``p + d_k + offset_k(p)`` (``d_k`` the usual 3x3 grid displacement)
and contracts the samples with the kernel weights.  With all offsets
zero this is exactly a 3x3 convolution with border-replicate padding.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .types import FeatureMap, OffsetField


class AlignmentEncoder(nn.Module):
    """Stride-4 feature encoder shared by the current frame and all neighbors."""

    STRIDE = 4

    def __init__(self, channels: int = 64, bias: bool = True):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(3, channels, 5, stride=2, padding=2, bias=bias)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=bias)
        self.res1 = nn.Conv2d(channels, channels, 3, padding=1, bias=bias)
        self.res2 = nn.Conv2d(channels, channels, 3, padding=1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, H, W), H and W divisible by 4 and at least 8."""
        h, w = x.shape[2], x.shape[3]
        if h % self.STRIDE or w % self.STRIDE:
            raise ValueError(f"spatial size must be divisible by {self.STRIDE}, got {(h, w)}")
        z = F.relu(self.conv1(x))
        z = F.relu(self.conv2(z))
        r = F.relu(self.res1(z))
        return z + self.res2(r)


class OffsetPredictor(nn.Module):
    """Predicts 2K tap offsets from a (neighbor, current) feature pair.

    The final layer is zero-initialized so alignment starts from the
    plain-convolution behavior; predictions are clamped to ``bound``
    feature pixels.
    """

    def __init__(self, channels: int = 64, taps: int = 9, bound: float = 8.0):
        super().__init__()
        if bound <= 0:
            raise ValueError(f"offset bound must be positive, got {bound}")
        self.taps = taps
        self.bound = bound
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, 2 * taps, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, neighbor_feats: torch.Tensor, current_feats: torch.Tensor) -> torch.Tensor:
        if neighbor_feats.shape != current_feats.shape:
            raise ValueError("neighbor and current feature shapes disagree")
        raw = self.net(torch.cat([neighbor_feats, current_feats], dim=1))
        return raw.clamp(-self.bound, self.bound)


def tap_grid(kernel_size: int, device=None, dtype=None) -> torch.Tensor:
    """Nominal (dx, dy) displacement per tap, row-major, shape (K, 2)."""
    half = (kernel_size - 1) // 2
    taps = []
    for ky in range(kernel_size):
        for kx in range(kernel_size):
            taps.append((kx - half, ky - half))
    return torch.tensor(taps, device=device, dtype=dtype)


def deform_conv(
    feats: torch.Tensor,
    offsets: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deformable 2D convolution with bilinear tap sampling.

    feats: (C_in, h, w) or (B, C_in, h, w)
    offsets: matching (2K, h, w) or (B, 2K, h, w); channel 2k is the x
        offset of tap k, channel 2k+1 the y offset (taps row-major)
    weight: (C_out, C_in, k, k); bias: (C_out,) or None

    Sample coordinates are clamped to the feature rectangle, so the
    zero-offset case reproduces a plain convolution with replicate
    padding.
    """
    unbatched = feats.ndim == 3
    if unbatched:
        feats = feats[None]
        offsets = offsets[None]
    b, c_in, h, w = feats.shape
    c_out, c_in_w, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {(kh, kw)}")
    k = kh * kw
    if c_in_w != c_in:
        raise ValueError(f"weight expects {c_in_w} input channels, features have {c_in}")
    if offsets.shape[1] != 2 * k:
        raise ValueError(f"offsets have {offsets.shape[1]} channels, kernel needs {2 * k}")
    if offsets.shape[2:] != feats.shape[2:] or offsets.shape[0] != b:
        raise ValueError("offsets and features disagree on batch or spatial size")

    dtype, dev = feats.dtype, feats.device
    taps = tap_grid(kh, device=dev, dtype=dtype)  # (K, 2)
    gy, gx = torch.meshgrid(
        torch.arange(h, device=dev, dtype=dtype),
        torch.arange(w, device=dev, dtype=dtype),
        indexing="ij",
    )
    off = offsets.to(dtype).reshape(b, k, 2, h, w)
    px = (gx + taps[:, 0].view(1, k, 1, 1) + off[:, :, 0]).clamp(0, w - 1)  # (B, K, h, w)
    py = (gy + taps[:, 1].view(1, k, 1, 1) + off[:, :, 1]).clamp(0, h - 1)

    x0 = px.floor()
    y0 = py.floor()
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    bi = torch.arange(b, device=dev).view(b, 1, 1, 1)
    # advanced indexing with the mid slice gives (B, K, h, w, C_in)
    v00 = feats[bi, :, y0, x0]
    v01 = feats[bi, :, y0, x1]
    v10 = feats[bi, :, y1, x0]
    v11 = feats[bi, :, y1, x1]
    samples = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)

    out = torch.einsum("bkhwc,ock->bohw", samples, weight.reshape(c_out, c_in, k).to(dtype))
    if bias is not None:
        out = out + bias.to(dtype).view(1, c_out, 1, 1)
    return out[0] if unbatched else out


class DeformableAligner(nn.Module):
    """Owns the deformable kernel applied to every warped neighbor."""

    def __init__(self, channels: int = 64, kernel_size: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)

    def forward(self, feats: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return deform_conv(feats, offsets, self.weight, self.bias)


class AlignModule(nn.Module):
    """Encoder + offset predictor + deformable aligner, as used per neighbor."""

    def __init__(self, channels: int = 64, taps: int = 9, offset_bound: float = 8.0):
        super().__init__()
        self.encoder = AlignmentEncoder(channels=channels)
        self.offsets = OffsetPredictor(channels=channels, taps=taps, bound=offset_bound)
        self.aligner = DeformableAligner(channels=channels)

    def align(self, neighbor_feats: torch.Tensor, current_feats: torch.Tensor) -> torch.Tensor:
        off = self.offsets(neighbor_feats, current_feats)
        return self.aligner(neighbor_feats, off)


def align_feature_map(module: AlignModule, neighbor: FeatureMap, current: FeatureMap) -> FeatureMap:
    """Typed wrapper returning the aligned neighbor features."""
    if neighbor.activations.shape != current.activations.shape:
        raise ValueError("feature shapes disagree")
    with torch.no_grad():
        off = module.offsets(neighbor.activations[None], current.activations[None])
        OffsetField(off[0], bound=module.offsets.bound)  # validates the clamp contract
        out = module.aligner(neighbor.activations[None], off)[0]
    return FeatureMap(out, neighbor.time_index)
