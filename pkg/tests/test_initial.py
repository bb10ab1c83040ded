import math

import numpy as np
import pytest
import torch

from dropvid.initial import (
    AttentionRecurrence,
    FeatureExtractor,
    InitialRestorer,
    PatchDiscriminator,
    compute_mask,
    discriminator_loss,
    restore_frame,
    single_image_loss,
)
from dropvid.types import Frame


def _rand_batch(b=2, h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0, 1, (b, 3, h, w)).astype(np.float32))


class TestAttention:
    def test_every_step_in_unit_interval(self):
        torch.manual_seed(0)
        att = AttentionRecurrence(steps=3)
        with torch.no_grad():
            _, maps = att(_rand_batch())
        assert len(maps) == 3
        for m in maps:
            assert float(m.min()) >= 0.0 and float(m.max()) <= 1.0

    def test_final_map_shape(self):
        a, _ = AttentionRecurrence(steps=2)(_rand_batch(h=12, w=20))
        assert a.shape == (2, 1, 12, 20)

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            AttentionRecurrence(steps=0)


class TestRestorer:
    def test_untrained_is_identity(self):
        torch.manual_seed(0)
        net = InitialRestorer(base_channels=8)
        x = _rand_batch()
        out = net(x)
        assert torch.equal(out, x)

    def test_output_in_range_after_training_step(self):
        torch.manual_seed(0)
        net = InitialRestorer(base_channels=8)
        x = _rand_batch()
        opt = torch.optim.Adam(net.parameters(), lr=1e-2)
        (net(x) - 0.2).pow(2).mean().backward()
        opt.step()
        with torch.no_grad():
            out = net(x)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_rejects_non_divisible_size(self):
        net = InitialRestorer(base_channels=8)
        with pytest.raises(ValueError, match="divisible"):
            net(torch.rand(1, 3, 10, 16))

    def test_restore_frame_typed(self):
        net = InitialRestorer(base_channels=8)
        f = Frame(torch.rand(3, 16, 16), time_index=5)
        out = restore_frame(net, f)
        assert isinstance(out, Frame) and out.time_index == 5

    def test_can_overfit_tiny_pair(self):
        torch.manual_seed(3)
        rng = np.random.default_rng(3)
        clean = torch.from_numpy(rng.uniform(0.2, 0.8, (1, 3, 16, 16)).astype(np.float32))
        rainy = clean.clone()
        rainy[:, :, 4:10, 4:10] = 0.95  # a fake drop
        net = InitialRestorer(base_channels=16)
        opt = torch.optim.Adam(net.parameters(), lr=2e-3)
        first = None
        for _ in range(60):
            opt.zero_grad()
            loss = (net(rainy) - clean).pow(2).mean()
            if first is None:
                first = loss.item()
            loss.backward()
            opt.step()
        assert loss.item() < 0.2 * first


class TestMask:
    def test_identity_restoration_gives_zero_evidence(self):
        f = Frame(torch.rand(3, 8, 8), 0)
        m = compute_mask(f, Frame(f.pixels.clone(), 0))
        assert torch.equal(m.evidence, torch.zeros(1, 8, 8))
        assert torch.equal(m.nonrain_weight, torch.ones(1, 8, 8))

    def test_evidence_is_channel_mean_absolute_difference(self):
        a = torch.zeros(3, 4, 4)
        b = torch.zeros(3, 4, 4)
        b[0, 1, 1] = 0.3  # one channel differs
        m = compute_mask(Frame(a, 0), Frame(b, 0), threshold=0.05)
        assert float(m.evidence[0, 1, 1]) == pytest.approx(0.1, abs=1e-7)
        assert float(m.nonrain_weight[0, 1, 1]) == 0.0  # 0.1 >= 0.05

    def test_symmetric_in_arguments(self):
        x = Frame(torch.rand(3, 8, 8), 0)
        y = Frame(torch.rand(3, 8, 8), 0)
        mxy = compute_mask(x, y)
        myx = compute_mask(y, x)
        assert torch.equal(mxy.evidence, myx.evidence)

    def test_soft_mode_passthrough(self):
        a = torch.zeros(3, 4, 4)
        b = torch.full((3, 4, 4), 0.025)
        m = compute_mask(Frame(a, 0), Frame(b, 0), threshold=0.05, mode="soft")
        assert torch.allclose(m.nonrain_weight, torch.full((1, 4, 4), 0.5), atol=1e-6)


class TestDiscriminatorAndLoss:
    def test_score_in_open_unit_interval(self):
        torch.manual_seed(0)
        d = PatchDiscriminator(base_channels=8)
        with torch.no_grad():
            s = d.score(_rand_batch())
        assert s.shape == (2,)
        assert float(s.min()) > 0.0 and float(s.max()) < 1.0

    def test_single_pixel_example(self):
        h = w = 8
        clean = torch.zeros(1, 3, h, w, dtype=torch.float64)
        restored = clean.clone()
        restored[0, 0, 2, 3] = 1.0  # unit error, one pixel, one channel
        extractor = FeatureExtractor(channels=(4,))

        score = torch.tensor([0.5], dtype=torch.float64)
        out = single_image_loss(restored.float(), clean.float(), score, extractor)
        # pixel term averages over every element: 1 / (3*H*W)
        assert float(out["pixel"]) == pytest.approx(1.0 / (3 * h * w), rel=1e-5)
        assert float(out["adversarial"]) == pytest.approx(math.log(0.5 + 1e-6), rel=1e-6)

    def test_perfect_restoration_leaves_only_adversarial(self):
        clean = torch.rand(1, 3, 8, 8)
        extractor = FeatureExtractor(channels=(4,))
        score = torch.tensor([0.25])
        out = single_image_loss(clean.clone(), clean, score, extractor)
        assert float(out["pixel"]) == 0.0
        assert float(out["perceptual"]) == 0.0
        assert float(out["total"]) == pytest.approx(math.log(0.75 + 1e-6), rel=1e-5)

    def test_adversarial_guard_at_perfect_score(self):
        clean = torch.rand(1, 3, 8, 8)
        out = single_image_loss(
            clean.clone(), clean, torch.tensor([1.0]), FeatureExtractor(channels=(4,))
        )
        assert math.isfinite(float(out["adversarial"]))

    def test_adversarial_decreases_as_score_rises(self):
        clean = torch.rand(1, 3, 8, 8)
        ext = FeatureExtractor(channels=(4,))
        lo = single_image_loss(clean.clone(), clean, torch.tensor([0.1]), ext)
        hi = single_image_loss(clean.clone(), clean, torch.tensor([0.9]), ext)
        assert float(hi["adversarial"]) < float(lo["adversarial"])

    def test_discriminator_loss_trains_critic(self):
        torch.manual_seed(0)
        d = PatchDiscriminator(base_channels=8)
        real = _rand_batch(seed=1)
        fake = torch.zeros_like(real)
        opt = torch.optim.Adam(d.parameters(), lr=1e-3)
        first = None
        for _ in range(30):
            opt.zero_grad()
            loss = discriminator_loss(d, real, fake)
            if first is None:
                first = loss.item()
            loss.backward()
            opt.step()
        assert loss.item() < first
        with torch.no_grad():
            assert float(d.score(real).mean()) > float(d.score(fake).mean())


class TestFeatureExtractor:
    def test_deterministic_across_instances(self):
        x = _rand_batch()
        a = FeatureExtractor()(x)
        b = FeatureExtractor()(x)
        assert torch.equal(a, b)

    def test_frozen(self):
        ext = FeatureExtractor()
        assert all(not p.requires_grad for p in ext.parameters())

    def test_downsamples(self):
        out = FeatureExtractor(channels=(8, 16))(_rand_batch(h=32, w=32))
        assert out.shape == (2, 16, 8, 8)
