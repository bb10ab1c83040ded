"""Training configuration and its flat on-disk format.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` for
comments.  Every key must be a ``TrainConfig`` field; unknown keys are
an error rather than a silent ignore, so typos surface immediately.
Values round-trip exactly through ``format_config``/``parse_config``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    """Hyperparameters for both training stages and the forward pass."""

    crop_size: int = 512
    batch_size: int = 4
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-4
    lr_flow_finetune: float = 1e-7
    max_steps_stage1: int = 2000
    max_steps_stage2: int = 2000
    seed: int = 0
    lambda_t: float = 0.5
    threshold: float = 0.05
    window_radius: int = 2
    mask_mode: str = "hard"
    feature_channels: int = 64
    initial_channels: int = 32
    flow_channels: int = 16
    flow_levels: int = 3
    attention_steps: int = 3
    offset_bound: float = 8.0
    grad_clip: float = 1.0
    decoder_mode: str = "residual"
    stop_gradient_neighbors: bool = False
    flow_pair_initial: bool = False
    flow_warmup_steps: int = 150
    flow_warmup_lr: float = 2e-3
    no_mask: bool = False
    no_initialnet: bool = False
    no_alignment: bool = False
    no_temporal: bool = False

    def __post_init__(self):
        if self.crop_size < 64 or self.crop_size % 4:
            raise ValueError(f"crop_size must be >= 64 and divisible by 4, got {self.crop_size}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.window_radius != 2:
            raise ValueError("the refinement stage is built for window_radius 2")
        if self.mask_mode not in ("hard", "soft"):
            raise ValueError(f"mask_mode must be 'hard' or 'soft', got {self.mask_mode!r}")
        if self.decoder_mode not in ("residual", "sigmoid"):
            raise ValueError(f"decoder_mode must be 'residual' or 'sigmoid', got {self.decoder_mode!r}")
        if not 0 < self.threshold:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.lambda_t < 0:
            raise ValueError(f"lambda_t must be >= 0, got {self.lambda_t}")


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    kind = _FIELDS[key]
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: cannot parse {raw!r} as bool")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> TrainConfig:
    """Parse the flat format; unknown keys and malformed lines raise."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    """Render a config in the flat format (every field, stable order)."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            rep = "true" if v else "false"
        elif isinstance(v, float):
            rep = repr(v)
        else:
            rep = str(v)
        lines.append(f"{f.name} = {rep}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
