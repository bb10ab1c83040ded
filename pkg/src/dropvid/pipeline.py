"""Orchestration of the two-stage pipeline over a clip.

For a center frame t with temporal radius 2, the refinement forward is:

1. restore every window frame with the frozen single-image stage,
2. estimate flow from each neighbor's initial result to the rainy
   center frame and warp the neighbor onto the center,
3. encode warped neighbors and the center's initial result with the
   shared stride-4 encoder,
4. predict per-tap offsets against the center features and apply the
   deformable convolution to each warped neighbor,
5. decode the four aligned neighbor feature stacks (never the center's
   own features) into the refined frame.

``refine_centers`` runs this for several centers at once with every
network invoked a single time on a batched input; the training step
uses it with gradients enabled, inference wraps it per window.

Frames at the clip boundary have no full window.  By default that is
an error; with ``boundary="reflect"`` missing neighbors are taken from
the temporally mirrored index and the result is flagged.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .align import AlignModule
from .decoder import InterpolationDecoder
from .flow import FlowEstimator
from .initial import InitialRestorer, compute_mask
from .types import FlowField, Frame, RaindropMask, VideoClip
from .warp import backward_warp


@dataclass
class RefineSettings:
    """Knobs of the refinement forward shared by training and inference."""

    threshold: float = 0.05
    mask_mode: str = "hard"
    lambda_t: float = 0.5
    no_mask: bool = False
    no_initialnet: bool = False
    no_alignment: bool = False
    no_temporal: bool = False
    stop_gradient_neighbors: bool = False
    flow_pair_initial: bool = False  # pair (S_i, S_t) for flow instead of (S_i, I_t)


@dataclass
class RefineModels:
    """The four trainable pieces of the pipeline."""

    initial: InitialRestorer
    flow: FlowEstimator
    align: AlignModule
    decoder: InterpolationDecoder

    def refinement_parameters(self):
        """Parameters updated at the main stage-2 learning rate."""
        yield from self.align.parameters()
        yield from self.decoder.parameters()

    def eval_mode(self) -> "RefineModels":
        self.initial.eval()
        self.flow.net.eval()
        self.align.eval()
        self.decoder.eval()
        return self


@dataclass
class WindowResult:
    """Everything produced while refining one center frame."""

    output: Frame
    initial: Frame
    mask: RaindropMask
    neighbor_flows: dict[int, FlowField] = field(default_factory=dict)
    used_reflection: bool = False


def neighbor_slots(center: int) -> list[int]:
    """Temporal positions feeding the decoder, in decoder order."""
    return [center - 2, center - 1, center + 1, center + 2]


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range frame index back into [0, n)."""
    if n == 1:
        return 0
    while not 0 <= i < n:
        if i < 0:
            i = -i
        else:
            i = 2 * (n - 1) - i
    return i


def initial_pass(models: RefineModels, frames: torch.Tensor, settings: RefineSettings) -> torch.Tensor:
    """Stage-1 restoration of a (T, 3, H, W) stack; identity when ablated."""
    if settings.no_initialnet:
        return frames.clone()
    with torch.no_grad():
        return models.initial(frames)


def stack_weights(
    frames: torch.Tensor, initial: torch.Tensor, settings: RefineSettings
) -> torch.Tensor:
    """Per-frame non-raindrop weights, (T, 1, H, W)."""
    if settings.no_mask or settings.no_initialnet:
        return torch.ones(frames.shape[0], 1, *frames.shape[2:], dtype=frames.dtype)
    evidence = (frames - initial).abs().mean(dim=1, keepdim=True)
    if settings.mask_mode == "hard":
        return (evidence < settings.threshold).to(frames.dtype)
    return (1.0 - evidence / settings.threshold).clamp(0.0, 1.0)


def refine_centers(
    models: RefineModels,
    frames: torch.Tensor,
    initial: torch.Tensor,
    centers: list[int],
    settings: RefineSettings,
) -> tuple[torch.Tensor, dict[tuple[int, int], torch.Tensor]]:
    """Refine several centers of one frame stack in a single batched pass.

    frames, initial: (T, 3, H, W); every ``c`` in ``centers`` must have
    its four neighbors inside [0, T).  Returns the refined frames
    (len(centers), 3, H, W) and all estimated flows keyed by
    (source, target) frame position; alignment uses (i, c) entries.
    """
    t_count = frames.shape[0]
    pairs: list[tuple[int, int]] = []
    for c in centers:
        for i in neighbor_slots(c):
            if not 0 <= i < t_count:
                raise IndexError(f"center {c} needs neighbor {i}, stack has {t_count} frames")
            pairs.append((i, c))

    src = initial[[i for i, _ in pairs]]
    if settings.flow_pair_initial:
        tgt = initial[[c for _, c in pairs]]
    else:
        tgt = frames[[c for _, c in pairs]]

    if settings.no_alignment:
        flows = torch.zeros(len(pairs), 2, *frames.shape[2:], dtype=frames.dtype)
        warped = src
    else:
        flows = models.flow.estimate_batch(src, tgt)
        warped = backward_warp(src, flows)

    enc_in = torch.cat([warped, initial[centers]], dim=0)
    feats = models.align.encoder(enc_in)
    f_neigh = feats[: len(pairs)]
    f_cent = feats[len(pairs) :].repeat_interleave(len(neighbor_slots(0)), dim=0)

    if settings.no_alignment:
        offsets = torch.zeros(
            len(pairs), 2 * models.align.offsets.taps, *f_neigh.shape[2:], dtype=feats.dtype
        )
    else:
        offsets = models.align.offsets(f_neigh, f_cent)
    aligned = models.align.aligner(f_neigh, offsets)

    n_c = len(centers)
    c_f, fh, fw = aligned.shape[1:]
    stack = aligned.view(n_c, 4, c_f, fh, fw).permute(0, 2, 1, 3, 4)
    base = None
    if models.decoder.mode == "residual":
        base = warped.view(n_c, 4, *warped.shape[1:]).mean(dim=1)
    outputs = models.decoder(stack, base)
    flow_map = {pair: flows[p] for p, pair in enumerate(pairs)}
    return outputs, flow_map


def refine_window(
    models: RefineModels,
    clip: VideoClip,
    t: int,
    settings: RefineSettings | None = None,
    boundary: str = "strict",
) -> WindowResult:
    """Refine the single frame at time ``t`` of a rainy clip."""
    settings = settings or RefineSettings()
    if boundary not in ("strict", "reflect"):
        raise ValueError(f"unknown boundary policy {boundary!r}")
    t0 = clip.frames[0].time_index
    pos = t - t0
    if not 0 <= pos < len(clip):
        raise IndexError(f"time {t} outside clip")
    slots = [pos - 2, pos - 1, pos + 1, pos + 2]
    outside = [i for i in slots if not 0 <= i < len(clip)]
    if outside and boundary == "strict":
        raise IndexError(
            f"frame {t} has no full temporal window (radius 2) in a clip of {len(clip)} frames; "
            "use the reflecting boundary to refine edge frames"
        )
    used_reflection = bool(outside)
    resolved = [reflect_index(i, len(clip)) for i in slots]

    # window stack: the 4 resolved neighbors and the center, deduplicated
    fetch = sorted(set(resolved + [pos]))
    local = {orig: k for k, orig in enumerate(fetch)}
    frames = torch.stack([clip.frames[i].pixels for i in fetch])

    with torch.no_grad():
        initial = initial_pass(models, frames, settings)
        center_local = local[pos]
        # rebuild a contiguous stack in decoder slot order around a fresh center
        order = [local[i] for i in resolved]
        window_frames = torch.stack(
            [frames[order[0]], frames[order[1]], frames[center_local], frames[order[2]], frames[order[3]]]
        )
        window_initial = torch.stack(
            [initial[order[0]], initial[order[1]], initial[center_local], initial[order[2]], initial[order[3]]]
        )
        outputs, flow_map = refine_centers(models, window_frames, window_initial, [2], settings)

    initial_frame = Frame(initial[center_local].clamp(0.0, 1.0), t)
    mask = compute_mask(
        clip.frames[pos],
        initial_frame,
        threshold=settings.threshold,
        mode=settings.mask_mode,
    )
    neighbor_flows = {}
    # map window slots back to clip times for the flow metadata
    slot_times = {0: resolved[0] + t0, 1: resolved[1] + t0, 3: resolved[2] + t0, 4: resolved[3] + t0}
    for (i_local, c_local), vec in flow_map.items():
        neighbor_flows[slot_times[i_local]] = FlowField(
            vec, source_index=slot_times[i_local], target_index=t
        )
    return WindowResult(
        output=Frame(outputs[0].clamp(0.0, 1.0), t),
        initial=initial_frame,
        mask=mask,
        neighbor_flows=neighbor_flows,
        used_reflection=used_reflection,
    )


def refine_clip(
    models: RefineModels,
    clip: VideoClip,
    settings: RefineSettings | None = None,
    boundary: str = "reflect",
    times: list[int] | None = None,
) -> list[WindowResult]:
    """Refine every frame (or the given times) of a clip."""
    t0 = clip.frames[0].time_index
    if times is None:
        times = [t0 + k for k in range(len(clip))]
    return [refine_window(models, clip, t, settings, boundary=boundary) for t in times]
