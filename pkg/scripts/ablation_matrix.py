#!/usr/bin/env python3
"""Train the refinement stage under each ablation flag and score all
variants on a held-out clip, one CSV per variant plus a summary.

Stage 1 is trained once and shared, so the variants differ only in the
refinement configuration.
"""

import argparse
import dataclasses
from pathlib import Path

import torch

from dropvid.config import TrainConfig
from dropvid.metrics import evaluate_clip, write_scores_csv
from dropvid.pipeline import refine_clip
from dropvid.synth import SynthSpec, synthesize_clip
from dropvid.train import frame_pairs_from_clips, settings_from_config, train_stage1, train_stage2

VARIANTS = {
    "full": {},
    "no_mask": {"no_mask": True},
    "no_initialnet": {"no_initialnet": True},
    "no_alignment": {"no_alignment": True},
    "no_temporal": {"no_temporal": True},
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="ablations")
    ap.add_argument("--steps", type=int, default=200, help="stage-2 steps per variant")
    ap.add_argument("--stage1-steps", type=int, default=300)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = TrainConfig(
        crop_size=max(64, args.size - args.size % 4),
        feature_channels=24,
        initial_channels=16,
        flow_channels=12,
        flow_levels=2,
        max_steps_stage1=args.stage1_steps,
        max_steps_stage2=args.steps,
        flow_warmup_steps=min(100, args.steps),
        seed=args.seed,
    )

    def clip(seed):
        return synthesize_clip(SynthSpec(
            n_frames=16, height=args.size, width=args.size, n_drops=3,
            background_velocity=(1.5, 0.0), seed=seed,
        ))

    train_rain, train_clean, _ = clip(args.seed)
    eval_rain, eval_clean, eval_masks = clip(args.seed + 1)

    print(f"shared stage 1: {base.max_steps_stage1} steps")
    stage1, _, _ = train_stage1(frame_pairs_from_clips(train_rain, train_clean), base)

    summary = []
    for name, flags in VARIANTS.items():
        cfg = dataclasses.replace(base, **flags)
        print(f"variant {name}: {cfg.max_steps_stage2} steps")
        models, _ = train_stage2([train_rain], stage1, cfg)
        models.eval_mode()
        with torch.no_grad():
            results = refine_clip(models, eval_rain, settings_from_config(cfg), boundary="reflect")
        row = evaluate_clip(name, [r.output for r in results], eval_clean, eval_masks)
        write_scores_csv(out / f"scores_{name}.csv", [row])
        summary.append(row)
        print(f"  masked_psnr {row.masked_psnr:6.2f}  twe {row.temporal_warp_error:.6f}")

    write_scores_csv(out / "summary.csv", summary)
    print(f"wrote {out / 'summary.csv'}")


if __name__ == "__main__":
    main()
