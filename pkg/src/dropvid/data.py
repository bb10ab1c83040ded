"""Frame and clip storage.

Clips live in a directory with ``rain/``, ``clean/`` and ``mask/``
subdirectories holding ``frame_000000.png`` style 8-bit PNGs, plus a
``manifest.json`` recording frame count and geometry.  Pixels are float
in [0, 1] everywhere in memory; quantization to bytes happens only
here, with round-to-nearest.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .types import Frame, VideoClip

FRAME_PATTERN = "frame_{:06d}.png"


def save_frame_png(pixels: torch.Tensor, path: str | Path) -> None:
    """(3, H, W) float [0, 1] -> 8-bit RGB file."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixels, got {tuple(pixels.shape)}")
    arr = (pixels.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path)


def load_frame_png(path: str | Path, time_index: int) -> Frame:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Frame(torch.from_numpy(np.moveaxis(arr, -1, 0).copy()), time_index)


def save_mask_png(mask: torch.Tensor, path: str | Path) -> None:
    """(1, H, W) float [0, 1] -> 8-bit grayscale file."""
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"expected (1, H, W) mask, got {tuple(mask.shape)}")
    arr = (mask.detach().cpu().numpy()[0] * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)[None]


def write_clip_dir(
    root: str | Path,
    rain: VideoClip,
    clean: VideoClip | None = None,
    masks: list[torch.Tensor] | None = None,
    extra: dict | None = None,
) -> None:
    """Write a clip directory in the standard layout."""
    root = Path(root)
    (root / "rain").mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(rain.frames):
        save_frame_png(frame.pixels, root / "rain" / FRAME_PATTERN.format(k))
    if clean is not None:
        if len(clean) != len(rain):
            raise ValueError("clean and rain clips disagree on length")
        (root / "clean").mkdir(exist_ok=True)
        for k, frame in enumerate(clean.frames):
            save_frame_png(frame.pixels, root / "clean" / FRAME_PATTERN.format(k))
    if masks is not None:
        if len(masks) != len(rain):
            raise ValueError("mask list and rain clip disagree on length")
        (root / "mask").mkdir(exist_ok=True)
        for k, m in enumerate(masks):
            save_mask_png(m, root / "mask" / FRAME_PATTERN.format(k))
    manifest = {
        "n_frames": len(rain),
        "height": rain.frames[0].height,
        "width": rain.frames[0].width,
        "window_radius": rain.window_radius,
        "has_clean": clean is not None,
        "has_mask": masks is not None,
        "frame_pattern": FRAME_PATTERN,
    }
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


class ClipData:
    """A clip directory loaded back into memory."""

    def __init__(self, rain: VideoClip, clean: VideoClip | None, masks: list[torch.Tensor] | None, manifest: dict):
        self.rain = rain
        self.clean = clean
        self.masks = masks
        self.manifest = manifest


def read_clip_dir(root: str | Path, need_clean: bool = False) -> ClipData:
    """Load a clip directory, verifying it against its manifest."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{root}: no manifest.json; not a clip directory")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    n = manifest["n_frames"]
    radius = manifest.get("window_radius", 2)

    def load_kind(kind: str) -> list[Path]:
        d = root / kind
        files = [d / FRAME_PATTERN.format(k) for k in range(n)]
        missing = [f.name for f in files if not f.exists()]
        if missing:
            raise ValueError(f"{root}: manifest promises {n} {kind} frames, missing {missing[:3]}")
        return files

    rain_frames = [load_frame_png(p, k) for k, p in enumerate(load_kind("rain"))]
    h, w = rain_frames[0].height, rain_frames[0].width
    if (h, w) != (manifest["height"], manifest["width"]):
        raise ValueError(
            f"{root}: frames are {h}x{w}, manifest says {manifest['height']}x{manifest['width']}"
        )
    rain = VideoClip(tuple(rain_frames), window_radius=radius)

    clean = None
    if manifest.get("has_clean"):
        clean = VideoClip(
            tuple(load_frame_png(p, k) for k, p in enumerate(load_kind("clean"))),
            window_radius=radius,
        )
    elif need_clean:
        raise ValueError(f"{root}: clean frames required but the clip has none")

    masks = None
    if manifest.get("has_mask"):
        masks = [load_mask_png(p) for p in load_kind("mask")]
    return ClipData(rain, clean, masks, manifest)
