import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dropvid.types import (
    Frame,
    FlowField,
    LossReport,
    NonFiniteError,
    OffsetField,
    RaindropMask,
    ShapeError,
    VideoClip,
    clamp_frame,
)


def _frame(t=0, h=8, w=8, fill=0.5):
    return Frame(torch.full((3, h, w), fill), time_index=t)


class TestFrame:
    def test_accepts_valid(self):
        f = _frame()
        assert f.height == 8 and f.width == 8

    def test_rejects_wrong_channels(self):
        with pytest.raises(ShapeError):
            Frame(torch.zeros(1, 8, 8), time_index=0)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Frame(torch.full((3, 4, 4), 1.5), time_index=0)

    def test_rejects_nan(self):
        px = torch.zeros(3, 4, 4)
        px[0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            Frame(px, time_index=0)

    def test_clamp_frame_clamps_and_is_idempotent(self):
        px = torch.tensor([[[1.2, -0.3], [0.5, 0.0]]]).repeat(3, 1, 1)
        f = clamp_frame(px, time_index=2)
        assert f.pixels.max() <= 1.0 and f.pixels.min() >= 0.0
        again = clamp_frame(f.pixels, time_index=2)
        assert torch.equal(again.pixels, f.pixels)

    def test_clamp_frame_rejects_nan(self):
        px = torch.zeros(3, 4, 4)
        px[1, 1, 1] = float("inf")
        with pytest.raises(NonFiniteError):
            clamp_frame(px, time_index=0)


class TestVideoClip:
    def test_window_size(self):
        clip = VideoClip(tuple(_frame(t) for t in range(9)), window_radius=2)
        assert clip.window_size == 5
        assert clip.valid_centers() == list(range(2, 7))

    def test_valid_centers_range(self):
        clip = VideoClip(tuple(_frame(t) for t in range(16)), window_radius=2)
        assert clip.valid_centers() == list(range(2, 14))

    def test_rejects_nonconsecutive_times(self):
        frames = (_frame(0), _frame(2))
        with pytest.raises(ValueError):
            VideoClip(frames, window_radius=1)

    def test_rejects_mixed_sizes(self):
        with pytest.raises(ShapeError):
            VideoClip((_frame(0, h=8), _frame(1, h=16), _frame(2, h=8)), window_radius=1)

    def test_too_short_for_window(self):
        with pytest.raises(ValueError):
            VideoClip(tuple(_frame(t) for t in range(3)), window_radius=2)


class TestRaindropMask:
    def test_hard_mode_thresholds(self):
        ev = torch.tensor([[[0.0, 0.04], [0.05, 0.2]]])
        m = RaindropMask.from_evidence(ev, threshold=0.05, mode="hard")
        want = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]])
        assert torch.equal(m.nonrain_weight, want)

    def test_soft_mode_ramps(self):
        ev = torch.tensor([[[0.0, 0.025], [0.05, 0.5]]])
        m = RaindropMask.from_evidence(ev, threshold=0.05, mode="soft")
        want = torch.tensor([[[1.0, 0.5], [0.0, 0.0]]])
        assert torch.allclose(m.nonrain_weight, want)

    def test_zero_evidence_gives_unit_weight(self):
        m = RaindropMask.from_evidence(torch.zeros(1, 4, 4), threshold=0.05, mode="hard")
        assert torch.equal(m.nonrain_weight, torch.ones(1, 4, 4))
        assert not m.all_masked

    def test_all_masked_flag(self):
        m = RaindropMask.from_evidence(torch.ones(1, 4, 4), threshold=0.05, mode="hard")
        assert m.all_masked

    def test_rejects_negative_evidence(self):
        with pytest.raises(ValueError):
            RaindropMask.from_evidence(torch.full((1, 4, 4), -0.1), threshold=0.05, mode="hard")

    def test_rejects_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            RaindropMask.from_evidence(torch.zeros(1, 4, 4), threshold=0.0, mode="hard")


class TestFlowField:
    def test_accepts_moderate_flow(self):
        FlowField(torch.ones(2, 8, 8), source_index=0, target_index=1)

    def test_rejects_nan(self):
        v = torch.zeros(2, 8, 8)
        v[0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            FlowField(v, source_index=0, target_index=1)

    def test_rejects_absurd_magnitude(self):
        v = torch.zeros(2, 8, 8)
        v[0] = 100.0
        with pytest.raises(ValueError):
            FlowField(v, source_index=0, target_index=1)


class TestOffsetField:
    def test_taps(self):
        o = OffsetField(torch.zeros(18, 4, 4), bound=8.0)
        assert o.taps == 9

    def test_rejects_odd_channels(self):
        with pytest.raises(ShapeError):
            OffsetField(torch.zeros(17, 4, 4), bound=8.0)

    def test_rejects_beyond_bound(self):
        with pytest.raises(ValueError):
            OffsetField(torch.full((18, 4, 4), 9.0), bound=8.0)


class TestLossReport:
    def test_total_is_weighted_sum(self):
        r = LossReport(flow=0.1, mask_ct=0.2, mask_cl=0.3, temp=0.4, lambda_t=0.5)
        assert r.total == 0.1 + 0.2 + 0.3 + 0.5 * 0.4

    def test_inconsistent_total_rejected(self):
        with pytest.raises(ValueError):
            LossReport(flow=0.1, mask_ct=0.2, mask_cl=0.3, temp=0.4, lambda_t=0.5, total=99.0)

    def test_json_keys(self):
        r = LossReport(flow=1.0, mask_ct=2.0, mask_cl=3.0, temp=4.0, lambda_t=0.5)
        d = r.as_json_dict(step=7)
        assert list(d.keys()) == ["step", "flow", "mask_ct", "mask_cl", "temp", "total"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_soft_mask_weight_always_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    ev = torch.from_numpy(rng.uniform(0, 1, size=(1, 6, 6)).astype(np.float32))
    m = RaindropMask.from_evidence(ev, threshold=0.05, mode="soft")
    assert float(m.nonrain_weight.min()) >= 0.0
    assert float(m.nonrain_weight.max()) <= 1.0
