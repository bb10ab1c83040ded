"""Masked self-supervised losses for the multi-frame refinement stage.

Every term excludes raindrop-covered pixels through a per-frame
non-raindrop weight map and normalizes by the surviving pixel count, so
heavily occluded frames do not shrink the loss for free.  A frame whose
weight map is entirely zero contributes nothing (with a warning) rather
than dividing by zero.

All comparisons against neighbor frames first warp the current result
into the neighbor's geometry, and the neighbor's own weight map gates
the comparison there.
"""
from __future__ import annotations

import warnings
from typing import Sequence

import torch

from .types import LossReport
from .warp import backward_warp


def masked_mse(pred: torch.Tensor, target: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Squared error over pixels kept by ``weight``, count-normalized.

    pred, target: (3, H, W); weight: (1, H, W) in [0, 1].  With a unit
    weight map this equals plain mean squared error.  A fully masked
    weight map yields exactly zero.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if weight.shape != (1, *pred.shape[1:]):
        raise ValueError(f"weight shape {tuple(weight.shape)} does not match {tuple(pred.shape)}")
    denom = weight.sum() * pred.shape[0]
    if float(denom) == 0.0:
        warnings.warn("fully masked frame contributes zero loss", stacklevel=2)
        return pred.new_zeros(())
    num = (weight * (pred - target) ** 2).sum()
    return num / denom


def flow_fit_loss(
    current_restored: torch.Tensor,
    neighbor_restored: Sequence[torch.Tensor],
    flows: Sequence[torch.Tensor],
    neighbor_weights: Sequence[torch.Tensor],
) -> torch.Tensor:
    """Photometric flow loss: warp the current initial result onto each
    neighbor's initial result, masked by the neighbor's weight map,
    averaged over neighbors."""
    _check_lists(neighbor_restored, flows, neighbor_weights)
    total = current_restored.new_zeros(())
    for tgt, fl, w in zip(neighbor_restored, flows, neighbor_weights):
        total = total + masked_mse(backward_warp(current_restored, fl), tgt, w)
    return total / len(flows)


def current_consistency_loss(
    output: torch.Tensor, rainy_current: torch.Tensor, current_weight: torch.Tensor
) -> torch.Tensor:
    """The refined frame must reproduce the rainy input outside raindrops."""
    return masked_mse(output, rainy_current, current_weight)


def neighbor_consistency_loss(
    output: torch.Tensor,
    rainy_neighbors: Sequence[torch.Tensor],
    flows: Sequence[torch.Tensor],
    neighbor_weights: Sequence[torch.Tensor],
) -> torch.Tensor:
    """Warp the refined frame onto each rainy neighbor and compare where
    that neighbor is raindrop-free."""
    _check_lists(rainy_neighbors, flows, neighbor_weights)
    total = output.new_zeros(())
    for tgt, fl, w in zip(rainy_neighbors, flows, neighbor_weights):
        total = total + masked_mse(backward_warp(output, fl), tgt, w)
    return total / len(flows)


def temporal_consistency_loss(
    output: torch.Tensor,
    neighbor_outputs: Sequence[torch.Tensor],
    flows: Sequence[torch.Tensor],
    neighbor_weights: Sequence[torch.Tensor],
    stop_gradient_neighbors: bool = False,
) -> torch.Tensor:
    """Refined results of adjacent frames must agree after warping.

    ``stop_gradient_neighbors`` detaches the neighbor outputs so only
    the current frame's path receives this gradient; by default both
    sides are optimized jointly.
    """
    _check_lists(neighbor_outputs, flows, neighbor_weights)
    total = output.new_zeros(())
    for tgt, fl, w in zip(neighbor_outputs, flows, neighbor_weights):
        if stop_gradient_neighbors:
            tgt = tgt.detach()
        total = total + masked_mse(backward_warp(output, fl), tgt, w)
    return total / len(flows)


def total_refinement_loss(
    flow: torch.Tensor,
    mask_ct: torch.Tensor,
    mask_cl: torch.Tensor,
    temp: torch.Tensor,
    lambda_t: float = 0.5,
) -> torch.Tensor:
    """Weighted sum of the four refinement terms."""
    return flow + mask_ct + mask_cl + lambda_t * temp


def make_report(
    flow: torch.Tensor,
    mask_ct: torch.Tensor,
    mask_cl: torch.Tensor,
    temp: torch.Tensor,
    lambda_t: float = 0.5,
) -> LossReport:
    return LossReport(
        flow=flow.detach().item(),
        mask_ct=mask_ct.detach().item(),
        mask_cl=mask_cl.detach().item(),
        temp=temp.detach().item(),
        lambda_t=lambda_t,
    )


def _check_lists(*seqs: Sequence) -> None:
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ValueError(f"per-neighbor lists disagree on length: {sorted(lengths)}")
    if 0 in lengths:
        raise ValueError("need at least one neighbor")
