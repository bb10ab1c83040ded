"""Command line front end.

Four subcommands cover the full loop: ``synth`` writes rainy/clean clip
directories, ``train`` fits the two stages, ``infer`` restores a rainy
clip with a trained checkpoint, ``eval`` scores restored frames against
ground truth. Every run drops a ``run_manifest.json`` next to its
outputs so results stay reproducible.

Exit codes: 0 success, 2 usage error, 3 a required input artifact is
missing, 4 frame geometry is incompatible with the models, 5 the data
itself is inconsistent.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch
import torch.nn.functional as F

from . import __version__
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import TrainConfig, _parse_value, format_config, load_config, parse_config
from .data import FRAME_PATTERN, read_clip_dir, save_frame_png, save_mask_png, write_clip_dir
from .flow import load_flow, save_flow
from .metrics import evaluate_clip, write_scores_csv
from .pipeline import refine_clip
from .synth import SynthSpec, synthesize_clip
from .train import build_models, frame_pairs_from_clips, settings_from_config, train_stage1, train_stage2
from .types import Frame, ShapeError, VideoClip

FLOW_PATTERN = "flow_{:06d}.dvfl"


def _resolve_seed(explicit: int | None) -> int | None:
    """CLI flag wins; DROPVID_SEED fills in when the flag is absent."""
    if explicit is not None:
        return explicit
    env = os.environ.get("DROPVID_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"DROPVID_SEED must be an integer, got {env!r}")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(
    out_dir: Path,
    command: str,
    argv: list[str],
    started: float,
    cfg: TrainConfig | None = None,
    inputs: dict[str, str] | None = None,
    checkpoints: dict[str, Path] | None = None,
    extra: dict | None = None,
) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime()),
        "elapsed_seconds": round(time.time() - started, 3),
    }
    if cfg is not None:
        manifest["config"] = dataclasses.asdict(cfg)
    if inputs:
        manifest["inputs"] = inputs
    if checkpoints:
        manifest["checkpoints"] = {name: _sha256_file(p) for name, p in checkpoints.items()}
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _load_cfg(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = load_config(args.config) if args.config else (base or TrainConfig())
    overrides = getattr(args, "override", None) or []
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--override expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key in updates:
            raise ValueError(f"duplicate --override for {key!r}")
        updates[key] = _parse_value(key, raw)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    seed = _resolve_seed(getattr(args, "seed", None))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


# ---------------------------------------------------------------- synth


def cmd_synth(args, argv: list[str]) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed)
    if seed is None:
        seed = 0
    out = Path(args.out)
    names = []
    for k in range(args.clips):
        spec = SynthSpec(
            n_frames=args.frames,
            height=args.height,
            width=args.width,
            n_drops=args.drops,
            background_velocity=(args.velocity_x, args.velocity_y),
            drop_motion=args.motion,
            seed=seed + k,
        )
        rain, clean, masks = synthesize_clip(spec)
        name = f"clip_{k:03d}"
        write_clip_dir(out / name, rain, clean, masks, extra={"seed": seed + k})
        names.append(name)
        print(f"wrote {out / name} ({args.frames} frames, {args.height}x{args.width})")
    _write_run_manifest(out, "synth", argv, started, extra={"seed": seed, "clips": names})
    return 0


# ---------------------------------------------------------------- train


def _save_stage1(path: Path, net, disc, cfg: TrainConfig) -> None:
    save_checkpoint(
        path,
        "stage1",
        {"initial": net, "discriminator": disc},
        extra={"config": format_config(cfg)},
    )


def _save_stage2(path: Path, models, cfg: TrainConfig) -> None:
    save_checkpoint(
        path,
        "stage2",
        {
            "initial": models.initial,
            "flow": models.flow.net,
            "align": models.align,
            "decoder": models.decoder,
        },
        extra={"config": format_config(cfg)},
    )


def cmd_train(args, argv: list[str]) -> int:
    started = time.time()
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    need_clean = args.stage in ("1", "all")
    clips = [read_clip_dir(d, need_clean=need_clean) for d in args.data]

    checkpoints: dict[str, Path] = {}
    stage1_net = None
    if args.stage in ("1", "all"):
        pairs = []
        for c in clips:
            pairs.extend(frame_pairs_from_clips(c.rain, c.clean))
        print(f"stage 1: {len(pairs)} frame pairs, {cfg.max_steps_stage1} steps")
        stage1_net, disc, _ = train_stage1(pairs, cfg, log_path=out / "stage1_log.jsonl")
        _save_stage1(out / "stage1.npz", stage1_net, disc, cfg)
        checkpoints["stage1"] = out / "stage1.npz"
        print(f"saved {out / 'stage1.npz'}")

    if args.stage in ("2", "all"):
        if stage1_net is None:
            stage1_net = build_models(cfg).initial
            if args.stage1_checkpoint:
                load_into(args.stage1_checkpoint, "stage1", {"initial": stage1_net})
            elif not cfg.no_initialnet:
                raise FileNotFoundError(
                    "stage 2 needs --stage1-checkpoint (or a config with no_initialnet)"
                )
        print(f"stage 2: {len(clips)} clips, {cfg.max_steps_stage2} steps")
        models, _ = train_stage2(
            [c.rain for c in clips], stage1_net, cfg, log_path=out / "stage2_log.jsonl"
        )
        _save_stage2(out / "stage2.npz", models, cfg)
        checkpoints["stage2"] = out / "stage2.npz"
        print(f"saved {out / 'stage2.npz'}")

    _write_run_manifest(
        out, "train", argv, started, cfg=cfg,
        inputs={f"data_{i}": str(d) for i, d in enumerate(args.data)},
        checkpoints=checkpoints,
    )
    return 0


# ---------------------------------------------------------------- infer


def _pad_clip(clip: VideoClip) -> tuple[VideoClip, tuple[int, int]]:
    """Replicate-pad frames on the bottom/right edges to a multiple of 4."""
    h, w = clip.frames[0].pixels.shape[1:]
    ph = (-h) % 4
    pw = (-w) % 4
    if ph == 0 and pw == 0:
        return clip, (0, 0)
    frames = [
        Frame(
            F.pad(f.pixels.unsqueeze(0), (0, pw, 0, ph), mode="replicate").squeeze(0),
            f.time_index,
        )
        for f in clip.frames
    ]
    return VideoClip(frames, clip.window_radius), (ph, pw)


def cmd_infer(args, argv: list[str]) -> int:
    started = time.time()
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} does not exist")

    kind, states, extra = load_checkpoint(ckpt_path)
    if kind != "stage2":
        raise ValueError(f"{ckpt_path}: checkpoint kind {kind!r}, expected 'stage2'")

    # the checkpoint's config snapshot is the base, so the rebuilt modules
    # match the stored shapes (and ablation flags) without the caller
    # repeating the training flags; --config and --override still win
    base = parse_config(extra["config"]) if extra.get("config") else None
    cfg = _load_cfg(args, base=base)
    models = build_models(cfg)
    modules = {
        "initial": models.initial,
        "flow": models.flow.net,
        "align": models.align,
        "decoder": models.decoder,
    }
    for name, module in modules.items():
        if name not in states:
            raise ValueError(f"{ckpt_path}: no state for module {name!r}")
        module.load_state_dict(states[name])
    models.eval_mode()
    settings = settings_from_config(cfg)

    data = read_clip_dir(args.input)
    clip = data.rain
    h, w = clip.frames[0].pixels.shape[1:]
    if (h % 4 or w % 4) and not args.pad:
        raise ShapeError(
            f"frames are {h}x{w}; the restorer needs multiples of 4 "
            "(rerun with --pad to replicate-pad and crop back)"
        )
    clip, (ph, pw) = _pad_clip(clip) if args.pad else (clip, (0, 0))

    results = refine_clip(models, clip, settings, boundary="reflect")
    reflected = [r for r in results if r.used_reflection]

    out = Path(args.out)
    (out / "restored").mkdir(parents=True, exist_ok=True)

    def crop(t: torch.Tensor) -> torch.Tensor:
        return t[..., : t.shape[-2] - ph, : t.shape[-1] - pw] if (ph or pw) else t

    def write_one(k: int) -> None:
        res = results[k]
        save_frame_png(crop(res.output.pixels), out / "restored" / FRAME_PATTERN.format(k))
        if args.dump_intermediates:
            save_frame_png(crop(res.initial.pixels), out / "initial" / FRAME_PATTERN.format(k))
            save_mask_png(crop(1.0 - res.mask.nonrain_weight), out / "mask" / FRAME_PATTERN.format(k))

    if args.dump_intermediates:
        (out / "initial").mkdir(exist_ok=True)
        (out / "mask").mkdir(exist_ok=True)
        (out / "flows").mkdir(exist_ok=True)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(write_one, range(len(results))))
    else:
        for k in range(len(results)):
            write_one(k)

    # successor flows: the window centred at k+1 estimated how frame k
    # moves onto k+1, which is exactly what the flicker metric consumes
    if args.dump_intermediates:
        t0 = clip.frames[0].time_index
        for k in range(len(results) - 1):
            flows = results[k + 1].neighbor_flows
            src_time = t0 + k
            if src_time in flows:
                field = flows[src_time]
                if ph or pw:
                    field = dataclasses.replace(field, vectors=crop(field.vectors))
                save_flow(field, out / "flows" / FLOW_PATTERN.format(k))

    if reflected:
        times = [r.output.time_index for r in reflected]
        print(f"boundary frames used reflection padding: {times}")
    print(f"restored {len(results)} frames -> {out / 'restored'}")
    _write_run_manifest(
        out, "infer", argv, started, cfg=cfg,
        inputs={"clip": str(args.input)},
        checkpoints={"stage2": ckpt_path},
        extra={
            "reflected_frames": [r.output.time_index for r in reflected],
            "padded": [ph, pw],
            "checkpoint_config": extra.get("config"),
        },
    )
    return 0


# ---------------------------------------------------------------- eval


def _discover_pairs(pred_root: Path, truth_root: Path) -> list[tuple[str, Path, Path]]:
    """Match prediction dirs to truth clip dirs by name.

    A prediction dir is anything holding ``restored/``; a single pair is
    accepted when the roots are the dirs themselves.
    """
    if (pred_root / "restored").is_dir():
        return [(pred_root.name, pred_root, truth_root)]
    pairs = []
    for sub in sorted(p for p in pred_root.iterdir() if (p / "restored").is_dir()):
        truth = truth_root / sub.name
        if not truth.is_dir():
            raise FileNotFoundError(f"no ground-truth clip for {sub.name} under {truth_root}")
        pairs.append((sub.name, sub, truth))
    if not pairs:
        raise FileNotFoundError(f"{pred_root} holds no restored clips")
    return pairs


def _load_outputs(pred_dir: Path, n_frames: int) -> list[Frame]:
    from .data import load_frame_png

    frames = []
    for k in range(n_frames):
        path = pred_dir / "restored" / FRAME_PATTERN.format(k)
        if not path.exists():
            raise FileNotFoundError(f"missing restored frame {path}")
        frames.append(load_frame_png(path, k))
    return frames


def _load_flow_dir(flow_dir: Path, n_frames: int, required: bool) -> list[torch.Tensor] | None:
    if not flow_dir.is_dir():
        if required:
            raise FileNotFoundError(f"flow dir {flow_dir} does not exist")
        return None
    flows = []
    for k in range(n_frames - 1):
        path = flow_dir / FLOW_PATTERN.format(k)
        if not path.exists():
            if required:
                raise FileNotFoundError(f"missing flow file {path}")
            return None
        flows.append(load_flow(path).vectors)
    return flows


def cmd_eval(args, argv: list[str]) -> int:
    started = time.time()
    pred_root = Path(args.pred)
    truth_root = Path(args.truth)
    if not pred_root.exists():
        raise FileNotFoundError(f"prediction dir {pred_root} does not exist")
    pairs = _discover_pairs(pred_root, truth_root)

    def score_one(item: tuple[str, Path, Path]):
        name, pred_dir, truth_dir = item
        truth = read_clip_dir(truth_dir, need_clean=True)
        if truth.masks is None:
            raise ValueError(f"{truth_dir}: masked metrics need a mask/ directory")
        n = len(truth.rain)
        outputs = _load_outputs(pred_dir, n)
        if args.flows:
            flow_dir = Path(args.flows) / name
            if not flow_dir.is_dir():
                flow_dir = Path(args.flows)  # single-clip flow dir
            flows = _load_flow_dir(flow_dir, n, required=True)
        else:
            flows = _load_flow_dir(pred_dir / "flows", n, required=False)
        return evaluate_clip(name, outputs, truth.clean, truth.masks, flows)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(score_one, pairs))
    else:
        rows = [score_one(p) for p in pairs]

    write_scores_csv(args.out, rows)
    for row in rows:
        print(
            f"{row.video}: psnr {row.psnr:.3f} ssim {row.ssim:.4f} "
            f"masked_psnr {row.masked_psnr:.3f} twe {row.temporal_warp_error:.6f}"
        )
    print(f"wrote {args.out}")
    _write_run_manifest(
        Path(args.out).parent, "eval", argv, started,
        inputs={"pred": str(pred_root), "truth": str(truth_root)},
        extra={"clips": [r.video for r in rows]},
    )
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dropvid",
        description="Video raindrop removal: synthesis, training, inference, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"dropvid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic rainy/clean clips")
    p.add_argument("--out", required=True, help="output directory for clip folders")
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--drops", type=int, default=6)
    p.add_argument("--velocity-x", type=float, default=1.0, help="background drift px/frame")
    p.add_argument("--velocity-y", type=float, default=0.0)
    p.add_argument("--motion", choices=("static", "drift"), default="static", help="drop motion")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the restoration stages")
    p.add_argument("--data", nargs="+", required=True, help="clip directories")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--stage1-checkpoint", default=None, help="required for --stage 2")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore a rainy clip")
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint (.npz)")
    p.add_argument("--input", required=True, help="clip directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pad", action="store_true", help="pad frames to a multiple of 4")
    p.add_argument("--dump-intermediates", action="store_true",
                   help="also write initial results, masks and successor flows")
    p.add_argument("--jobs", type=int, default=1, help="parallel frame writers")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score restored clips against ground truth")
    p.add_argument("--pred", required=True, help="inference output dir (or a root of them)")
    p.add_argument("--truth", required=True, help="clip dir with clean/ and mask/")
    p.add_argument("--out", required=True, help="scores CSV path")
    p.add_argument("--flows", default=None, help="DVFL flow dir for the flicker metric")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
