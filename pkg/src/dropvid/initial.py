"""Supervised single-image raindrop removal (the first stage).

An attention branch runs a small convolutional recurrence for a fixed
number of steps, squashing each step's map into [0, 1]; the final map
is concatenated to the input of an encoder-decoder that predicts a
residual correction.  The output head is zero-initialized, so an
untrained restorer is the identity on its input, and the raindrop
evidence ``|input - restored|`` starts at zero.

Training uses a pixel term against the clean target, a feature-space
term from a small frozen random-projection extractor, and an
adversarial score from a patch discriminator.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .types import Frame, RaindropMask


class AttentionRecurrence(nn.Module):
    """Convolutional recurrence producing a [0, 1] attention map per step."""

    def __init__(self, steps: int = 3, hidden: int = 16):
        super().__init__()
        if steps < 1:
            raise ValueError(f"need at least one attention step, got {steps}")
        self.steps = steps
        self.hidden = hidden
        self.state = nn.Conv2d(3 + 1 + hidden, hidden, 3, padding=1)
        self.head = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        b, _, h, w = x.shape
        att = x.new_zeros(b, 1, h, w)
        hid = x.new_zeros(b, self.hidden, h, w)
        maps = []
        for _ in range(self.steps):
            hid = torch.tanh(self.state(torch.cat([x, att, hid], dim=1)))
            att = torch.sigmoid(self.head(hid))
            maps.append(att)
        return att, maps


class InitialRestorer(nn.Module):
    """Single-frame restorer: attention-gated encoder-decoder, residual output."""

    def __init__(self, base_channels: int = 32, attention_steps: int = 3):
        super().__init__()
        c = base_channels
        self.attention = AttentionRecurrence(steps=attention_steps)
        self.enc1 = nn.Conv2d(4, c, 5, padding=2)
        self.enc2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.res1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.res2 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec2 = nn.Conv2d(2 * c + 2 * c, c, 3, padding=1)
        self.head = nn.Conv2d(c + c, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, H, W) in [0, 1], H and W divisible by 4."""
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial size must be divisible by 4, got {tuple(x.shape[2:])}")
        att, _ = self.attention(x)
        e1 = F.relu(self.enc1(torch.cat([x, att], dim=1)))
        e2 = F.relu(self.enc2(e1))
        e3 = F.relu(self.enc3(e2))
        z = F.relu(self.res1(e3))
        z = F.relu(self.res2(z)) + e3
        d1 = F.relu(self.dec1(z))
        d1 = F.interpolate(d1, size=e2.shape[2:], mode="bilinear", align_corners=False)
        d2 = F.relu(self.dec2(torch.cat([d1, e2], dim=1)))
        d2 = F.interpolate(d2, size=e1.shape[2:], mode="bilinear", align_corners=False)
        delta = self.head(torch.cat([d2, e1], dim=1))
        return (x + delta).clamp(0.0, 1.0)


class PatchDiscriminator(nn.Module):
    """Small patch critic; ``score`` maps an image to a realness score in (0, 1)."""

    def __init__(self, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def score(self, x: torch.Tensor) -> torch.Tensor:
        """Mean patch logit squashed to (0, 1)."""
        return torch.sigmoid(self.net(x).mean(dim=(1, 2, 3)))


class FeatureExtractor(nn.Module):
    """Frozen random-projection conv features for the perceptual term.

    Weights are drawn from a fixed seed so the feature space is stable
    across runs without any pretrained checkpoint dependency.
    """

    def __init__(self, seed: int = 0x5EED, channels: tuple[int, ...] = (16, 32)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            w = torch.randn(c_out, c_in, 3, 3, generator=g) * (2.0 / (9 * c_in)) ** 0.5
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(w)
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


def restore_frame(net: InitialRestorer, frame: Frame) -> Frame:
    """Typed single-frame application (no gradients)."""
    with torch.no_grad():
        out = net(frame.pixels[None])[0]
    return Frame(out, frame.time_index)


def compute_mask(
    rainy: Frame, restored: Frame, threshold: float = 0.05, mode: str = "hard"
) -> RaindropMask:
    """Raindrop evidence is the channel-mean absolute restoration change."""
    if rainy.pixels.shape != restored.pixels.shape:
        raise ValueError("rainy and restored frames disagree on shape")
    evidence = (rainy.pixels - restored.pixels).abs().mean(dim=0, keepdim=True)
    return RaindropMask.from_evidence(evidence, threshold=threshold, mode=mode)


def single_image_loss(
    restored: torch.Tensor,
    clean: torch.Tensor,
    disc_score: torch.Tensor,
    extractor: FeatureExtractor,
) -> dict[str, torch.Tensor]:
    """Stage-1 training objective.

    pixel: mean squared error to the clean target over all elements.
    perceptual: mean squared error between frozen extractor features.
    adversarial: log(1 - score + 1e-6), decreasing as the critic is fooled.
    """
    if restored.shape != clean.shape:
        raise ValueError("restored and clean shapes disagree")
    pixel = F.mse_loss(restored, clean)
    perceptual = F.mse_loss(extractor(restored), extractor(clean))
    adversarial = torch.log(1.0 - disc_score.clamp(max=1.0) + 1e-6).mean()
    total = pixel + perceptual + adversarial
    return {"pixel": pixel, "perceptual": perceptual, "adversarial": adversarial, "total": total}


def discriminator_loss(
    disc: PatchDiscriminator, real: torch.Tensor, fake: torch.Tensor
) -> torch.Tensor:
    """Binary cross-entropy on patch logits, fake side detached."""
    real_logits = disc(real)
    fake_logits = disc(fake.detach())
    ones = torch.ones_like(real_logits)
    zeros = torch.zeros_like(fake_logits)
    return F.binary_cross_entropy_with_logits(real_logits, ones) + F.binary_cross_entropy_with_logits(
        fake_logits, zeros
    )
