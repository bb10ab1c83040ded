"""Training loops for the two stages.

Stage 1 fits the single-image restorer on (rainy, clean) pairs with a
pixel term, a frozen-feature perceptual term, and a patch critic
trained alternately.

Stage 2 is self-supervised on rainy clips only.  The stage-1 weights
are frozen hard: parameters have gradients disabled, the module stays
in eval mode, and a state fingerprint is checked after training, so
any accidental update fails loudly.  Each step samples one 9-frame
window and refines the five inner centers in a single batched forward;
the middle frame's four losses are optimized jointly, with network
parameters at ``lr_stage2`` and the flow net at the much smaller
``lr_flow_finetune``.  Gradients are clipped to a global norm before
every update.

Per-step losses stream to JSONL, one
``{"step":, "flow":, "mask_ct":, "mask_cl":, "temp":, "total":}``
object per line.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .align import AlignModule
from .config import TrainConfig
from .decoder import InterpolationDecoder
from .flow import FlowEstimator, PyramidFlowNet
from .initial import (
    FeatureExtractor,
    InitialRestorer,
    PatchDiscriminator,
    discriminator_loss,
    single_image_loss,
)
from .losses import (
    current_consistency_loss,
    flow_fit_loss,
    make_report,
    neighbor_consistency_loss,
    temporal_consistency_loss,
    total_refinement_loss,
)
from .pipeline import RefineModels, RefineSettings, initial_pass, refine_centers, stack_weights
from .types import Frame, LossReport, VideoClip
from .warp import backward_warp


def build_models(cfg: TrainConfig) -> RefineModels:
    """Construct all networks with deterministic, seed-dependent weights."""
    torch.manual_seed(cfg.seed)
    initial = InitialRestorer(base_channels=cfg.initial_channels, attention_steps=cfg.attention_steps)
    flow = FlowEstimator(
        net=PyramidFlowNet(levels=cfg.flow_levels, channels=cfg.flow_channels),
        finetune_lr=cfg.lr_flow_finetune,
    )
    align = AlignModule(channels=cfg.feature_channels, offset_bound=cfg.offset_bound)
    decoder = InterpolationDecoder(channels=cfg.feature_channels, mode=cfg.decoder_mode)
    return RefineModels(initial=initial, flow=flow, align=align, decoder=decoder)


def settings_from_config(cfg: TrainConfig) -> RefineSettings:
    return RefineSettings(
        threshold=cfg.threshold,
        mask_mode=cfg.mask_mode,
        lambda_t=0.0 if cfg.no_temporal else cfg.lambda_t,
        no_mask=cfg.no_mask,
        no_initialnet=cfg.no_initialnet,
        no_alignment=cfg.no_alignment,
        no_temporal=cfg.no_temporal,
        stop_gradient_neighbors=cfg.stop_gradient_neighbors,
        flow_pair_initial=cfg.flow_pair_initial,
    )


def fingerprint(module: nn.Module) -> str:
    """Order-stable hash of every parameter and buffer."""
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _crop_origin(rng: np.random.Generator, h: int, w: int, size: int) -> tuple[int, int]:
    if h < size or w < size:
        raise ValueError(f"frames {h}x{w} smaller than crop {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return y, x


def train_stage1(
    pairs: Sequence[tuple[Frame, Frame]],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[InitialRestorer, PatchDiscriminator, list[dict]]:
    """Fit the single-image restorer on (rainy, clean) frame pairs."""
    if not pairs:
        raise ValueError("no training pairs")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = InitialRestorer(base_channels=cfg.initial_channels, attention_steps=cfg.attention_steps)
    disc = PatchDiscriminator()
    extractor = FeatureExtractor()
    opt_g = torch.optim.Adam(net.parameters(), lr=cfg.lr_stage1)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_stage1)

    rain_all = torch.stack([p[0].pixels for p in pairs])
    clean_all = torch.stack([p[1].pixels for p in pairs])
    _, _, h, w = rain_all.shape
    size = min(cfg.crop_size, h, w)
    size -= size % 4

    history: list[dict] = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.max_steps_stage1):
            idx = rng.integers(0, len(pairs), size=min(cfg.batch_size, len(pairs)))
            y, x = _crop_origin(rng, h, w, size)
            rain = rain_all[idx, :, y : y + size, x : x + size]
            clean = clean_all[idx, :, y : y + size, x : x + size]

            opt_g.zero_grad()
            restored = net(rain)
            score = disc.score(restored)
            terms = single_image_loss(restored, clean, score, extractor)
            terms["total"].backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt_g.step()

            opt_d.zero_grad()
            d_loss = discriminator_loss(disc, clean, restored)
            d_loss.backward()
            opt_d.step()

            rec = {
                "step": step,
                "pixel": terms["pixel"].item(),
                "perceptual": terms["perceptual"].item(),
                "adversarial": terms["adversarial"].item(),
                "total": terms["total"].item(),
                "disc": d_loss.item(),
            }
            history.append(rec)
            if log_f:
                log_f.write(json.dumps(rec) + "\n")
    finally:
        if log_f:
            log_f.close()
    return net, disc, history


def freeze_module(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _precompute_initial(
    models: RefineModels, clips: Sequence[VideoClip], settings: RefineSettings
) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Full-frame (rainy, initial, weights) stacks per clip, stage 1 frozen."""
    out = []
    for clip in clips:
        frames = torch.stack([f.pixels for f in clip.frames])
        initial = initial_pass(models, frames, settings)
        weights = stack_weights(frames, initial, settings)
        out.append((frames, initial, weights))
    return out


def stage2_step(
    models: RefineModels,
    frames: torch.Tensor,
    initial: torch.Tensor,
    weights: torch.Tensor,
    settings: RefineSettings,
) -> tuple[torch.Tensor, LossReport]:
    """Loss of one 9-frame window (center at index 4), differentiable."""
    if frames.shape[0] != 9:
        raise ValueError(f"stage-2 window must hold 9 frames, got {frames.shape[0]}")
    mid = 4
    neigh = [2, 3, 5, 6]
    centers = [mid] if settings.no_temporal else [2, 3, 4, 5, 6]
    outputs, flow_map = refine_centers(models, frames, initial, centers, settings)
    out_at = {c: outputs[k] for k, c in enumerate(centers)}

    loss_flows = [flow_map[(mid, i)] if (mid, i) in flow_map else None for i in neigh]
    if any(f is None for f in loss_flows):
        # without the neighbor centers (no_temporal) the (t -> i) flows
        # are not part of the alignment set; estimate or zero them here
        if settings.no_alignment:
            loss_flows = [torch.zeros(2, *frames.shape[2:], dtype=frames.dtype) for _ in neigh]
        else:
            src = initial[[mid] * len(neigh)]
            tgt = initial[neigh] if settings.flow_pair_initial else frames[neigh]
            est = models.flow.estimate_batch(src, tgt)
            loss_flows = [est[k] for k in range(len(neigh))]

    w_of = lambda i: weights[i]
    l_flow = flow_fit_loss(
        initial[mid], [initial[i] for i in neigh], loss_flows, [w_of(i) for i in neigh]
    )
    l_ct = current_consistency_loss(out_at[mid], frames[mid], w_of(mid))
    l_cl = neighbor_consistency_loss(
        out_at[mid], [frames[i] for i in neigh], loss_flows, [w_of(i) for i in neigh]
    )
    if settings.no_temporal:
        l_temp = out_at[mid].new_zeros(())
    else:
        l_temp = temporal_consistency_loss(
            out_at[mid],
            [out_at[i] for i in neigh],
            loss_flows,
            [w_of(i) for i in neigh],
            stop_gradient_neighbors=settings.stop_gradient_neighbors,
        )
    total = total_refinement_loss(l_flow, l_ct, l_cl, l_temp, settings.lambda_t)
    return total, make_report(l_flow, l_ct, l_cl, l_temp, settings.lambda_t)


def train_stage2(
    clips: Sequence[VideoClip],
    stage1: InitialRestorer,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    models: RefineModels | None = None,
) -> tuple[RefineModels, list[LossReport]]:
    """Self-supervised refinement training on rainy clips.

    ``stage1`` is frozen for the whole run; a fingerprint mismatch at
    the end raises.  Pass ``models`` to continue training an existing
    set of networks (its ``initial`` is replaced by ``stage1``).
    """
    if not clips:
        raise ValueError("no training clips")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if models is None:
        models = build_models(cfg)
    models.initial = stage1
    freeze_module(models.initial)
    frozen_before = fingerprint(models.initial)

    settings = settings_from_config(cfg)
    stacks = _precompute_initial(models, clips, settings)

    if cfg.flow_warmup_steps > 0 and not cfg.no_alignment:
        pairs = []
        size = min([cfg.crop_size] + [min(fr.shape[2], fr.shape[3]) for fr, _, _ in stacks])
        size -= size % 4
        for frames, initial, _ in stacks:
            y, x = _crop_origin(rng, frames.shape[2], frames.shape[3], size)
            tgt_stack = initial if settings.flow_pair_initial else frames
            t_count = frames.shape[0]
            # all four neighbor offsets around a few centers, so a constant
            # field cannot fit the warm-up set and the net has to match
            centers = sorted({2, t_count // 2, t_count - 3})
            for c in centers:
                for d in (-2, -1, 1, 2):
                    if not 0 <= c + d < t_count:
                        continue
                    src = initial[c + d, :, y : y + size, x : x + size]
                    tgt = tgt_stack[c, :, y : y + size, x : x + size]
                    pairs.append((src, tgt))
        models.flow.warm_up(pairs, steps=cfg.flow_warmup_steps, lr=cfg.flow_warmup_lr)

    param_groups = [{"params": list(models.refinement_parameters()), "lr": cfg.lr_stage2}]
    if not cfg.no_alignment:
        param_groups.append({"params": list(models.flow.net.parameters()), "lr": cfg.lr_flow_finetune})
    opt = torch.optim.Adam(param_groups)
    trainable = [p for g in param_groups for p in g["params"]]

    history: list[LossReport] = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.max_steps_stage2):
            frames_all, initial_all, weights_all = stacks[int(rng.integers(0, len(stacks)))]
            t_count, _, h, w = frames_all.shape
            mid = int(rng.integers(4, t_count - 4))
            size = min(cfg.crop_size, h, w)
            size -= size % 4
            y, x = _crop_origin(rng, h, w, size)
            sl = slice(mid - 4, mid + 5)
            frames = frames_all[sl, :, y : y + size, x : x + size]
            initial = initial_all[sl, :, y : y + size, x : x + size]
            weights = weights_all[sl, :, y : y + size, x : x + size]

            opt.zero_grad()
            total, report = stage2_step(models, frames, initial, weights, settings)
            total.backward()
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            opt.step()

            history.append(report)
            if log_f:
                log_f.write(json.dumps(report.as_json_dict(step)) + "\n")
    finally:
        if log_f:
            log_f.close()

    frozen_after = fingerprint(models.initial)
    if frozen_after != frozen_before:
        raise RuntimeError("stage-1 weights changed during stage-2 training; freeze contract broken")
    return models, history


def frame_pairs_from_clips(rain: VideoClip, clean: VideoClip) -> list[tuple[Frame, Frame]]:
    """Zip two aligned clips into stage-1 training pairs."""
    if len(rain) != len(clean):
        raise ValueError("rain and clean clips disagree on length")
    return [(r, c) for r, c in zip(rain.frames, clean.frames)]
