"""Evaluation metrics and the per-clip scoring harness.

PSNR assumes a peak of 1.0; identical images score infinity, written
as ``inf`` in the CSV.  SSIM uses an 11x11 Gaussian window (sigma 1.5,
K1 = 0.01, K2 = 0.03, population covariance) over valid window
positions only, computed per channel and averaged.

``masked_psnr`` pools squared error over raindrop-region pixels of the
whole clip before taking one PSNR, so frames with tiny masks cannot
dominate.  ``temporal_warp_error`` measures flicker: each refined frame
is warped onto its successor and compared under the successor's
raindrop-free weight map.

CSV layout: header ``video,psnr,ssim,masked_psnr,temporal_warp_error``,
one row per clip, and a final ``mean`` row averaging the clip rows.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .types import Frame, VideoClip
from .warp import backward_warp

CSV_HEADER = ["video", "psnr", "ssim", "masked_psnr", "temporal_warp_error"]


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(F.mse_loss(a.double(), b.double()))


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(1 / MSE) with peak 1.0; +inf when the images are equal."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    half = (size - 1) / 2
    xs = torch.arange(size, dtype=torch.float64) - half
    g1 = torch.exp(-(xs**2) / (2 * sigma**2))
    g1 = g1 / g1.sum()
    return torch.outer(g1, g1)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid windows, per channel averaged."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(a.shape)}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"images must be at least {window}x{window}")
    c1 = 0.01**2
    c2 = 0.03**2
    x = a.double().unsqueeze(1)  # (C, 1, H, W)
    y = b.double().unsqueeze(1)
    kernel = _gaussian_kernel(window, sigma).view(1, 1, window, window)

    def filt(t):
        return F.conv2d(t, kernel)  # valid positions only

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def masked_psnr(
    preds: Sequence[torch.Tensor], targets: Sequence[torch.Tensor], masks: Sequence[torch.Tensor]
) -> float:
    """PSNR over raindrop pixels only, pooled across the given frames.

    ``masks`` are binary (1, H, W) maps where 1 marks raindrop pixels.
    """
    if not (len(preds) == len(targets) == len(masks)):
        raise ValueError("preds, targets and masks must have equal length")
    num = 0.0
    count = 0.0
    for p, t, m in zip(preds, targets, masks):
        sel = m > 0.5
        n = float(sel.sum())
        if n == 0:
            continue
        diff = (p.double() - t.double()) ** 2
        num += float((diff * sel).sum())
        count += n * p.shape[0]
    if count == 0:
        raise ValueError("no raindrop pixels in any mask")
    err = num / count
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def temporal_warp_error(
    outputs: Sequence[torch.Tensor],
    flows: Sequence[torch.Tensor],
    weights: Sequence[torch.Tensor] | None = None,
) -> float:
    """Masked MSE between each warped frame and its successor, averaged.

    ``flows[k]`` carries frame k onto frame k+1; ``weights`` are
    per-frame non-raindrop maps aligned with ``outputs`` (the
    successor's map gates each comparison).  Without weights every
    pixel counts.
    """
    if len(outputs) < 2:
        raise ValueError("need at least two frames")
    if len(flows) != len(outputs) - 1:
        raise ValueError(f"{len(outputs)} frames need {len(outputs) - 1} flows, got {len(flows)}")
    if weights is not None and len(weights) != len(outputs):
        raise ValueError("weights must align with outputs")
    total = 0.0
    for k in range(len(outputs) - 1):
        warped = backward_warp(outputs[k].double(), flows[k].double())
        nxt = outputs[k + 1].double()
        if weights is None:
            total += float(F.mse_loss(warped, nxt))
        else:
            w = weights[k + 1].double()
            denom = float(w.sum()) * warped.shape[0]
            if denom == 0.0:
                continue
            total += float((w * (warped - nxt) ** 2).sum()) / denom
    return total / (len(outputs) - 1)


@dataclass
class ClipScores:
    """One evaluation row."""

    video: str
    psnr: float
    ssim: float
    masked_psnr: float
    temporal_warp_error: float

    def as_row(self) -> list[str]:
        return [self.video] + [repr(v) if math.isfinite(v) else "inf" for v in (
            self.psnr, self.ssim, self.masked_psnr, self.temporal_warp_error
        )]


def evaluate_clip(
    name: str,
    outputs: Sequence[Frame],
    clean: VideoClip,
    gt_masks: Sequence[torch.Tensor],
    flows: Sequence[torch.Tensor] | None = None,
    weights: Sequence[torch.Tensor] | None = None,
) -> ClipScores:
    """Score one clip's outputs against ground truth.

    ``flows`` carry each output onto its successor for the flicker
    metric; without them zero flow is assumed, which is exact only for
    a static camera.
    """
    if len(outputs) != len(clean):
        raise ValueError(f"{len(outputs)} outputs vs {len(clean)} clean frames")
    if len(gt_masks) != len(outputs):
        raise ValueError("ground-truth masks must align with outputs")
    out_px = [o.pixels for o in outputs]
    clean_px = [f.pixels for f in clean.frames]
    psnr_vals = [psnr(o, c) for o, c in zip(out_px, clean_px)]
    ssim_vals = [ssim(o, c) for o, c in zip(out_px, clean_px)]
    if flows is None:
        flows = [torch.zeros(2, *out_px[0].shape[1:]) for _ in range(len(outputs) - 1)]
    return ClipScores(
        video=name,
        psnr=_mean(psnr_vals),
        ssim=_mean(ssim_vals),
        masked_psnr=masked_psnr(out_px, clean_px, gt_masks),
        temporal_warp_error=temporal_warp_error(out_px, flows, weights),
    )


def _mean(vals: Sequence[float]) -> float:
    if any(math.isinf(v) for v in vals):
        return math.inf
    return sum(vals) / len(vals)


def write_scores_csv(path: str | Path, rows: Sequence[ClipScores]) -> None:
    """Write clip rows plus the final mean row."""
    if not rows:
        raise ValueError("nothing to write")
    mean_row = ClipScores(
        video="mean",
        psnr=_mean([r.psnr for r in rows]),
        ssim=_mean([r.ssim for r in rows]),
        masked_psnr=_mean([r.masked_psnr for r in rows]),
        temporal_warp_error=_mean([r.temporal_warp_error for r in rows]),
    )
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in list(rows) + [mean_row]:
            w.writerow(r.as_row())


def read_scores_csv(path: str | Path) -> list[ClipScores]:
    """Read every row back, the trailing mean row included."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            rows.append(
                ClipScores(rec[0], float(rec[1]), float(rec[2]), float(rec[3]), float(rec[4]))
            )
    return rows
