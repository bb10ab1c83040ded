import struct

import numpy as np
import pytest
import torch

from dropvid.flow import (
    FlowEstimator,
    PyramidFlowNet,
    flow_alignment_error,
    load_flow,
    save_flow,
    smoothness_penalty,
)
from dropvid.types import FlowField, Frame
from dropvid.warp import backward_warp


def _frame(arr, t=0):
    return Frame(torch.as_tensor(arr, dtype=torch.float32), t)


class TestPyramidNet:
    def test_untrained_net_recovers_translation(self):
        # the soft-argmax readout is parameter-free, so a fresh net already
        # estimates pure translations; only the subpixel residual is learned
        torch.manual_seed(0)
        img = torch.rand(1, 3, 48, 48)
        img = torch.nn.functional.avg_pool2d(
            torch.nn.functional.pad(img, (2, 2, 2, 2), mode="replicate"), 5, stride=1
        )
        shift = torch.tensor([2.0, -1.0]).view(1, 2, 1, 1).expand(1, 2, 48, 48)
        tgt = backward_warp(img, shift)
        net = PyramidFlowNet(levels=3, channels=8)
        with torch.no_grad():
            flow = net(img, tgt)
        assert flow.shape == (1, 2, 48, 48)
        inner = flow[..., 8:-8, 8:-8]
        assert abs(float(inner[0, 0].mean()) - 2.0) < 0.3
        assert abs(float(inner[0, 1].mean()) + 1.0) < 0.3

    def test_identical_frames_give_near_zero_flow(self):
        torch.manual_seed(0)
        img = torch.rand(2, 3, 32, 32)
        net = PyramidFlowNet(levels=3, channels=8)
        with torch.no_grad():
            flow = net(img, img)
        assert float(flow.abs().mean()) < 0.1

    def test_warm_up_improves_translation_fit(self):
        torch.manual_seed(1)
        rng = np.random.default_rng(1)
        from scipy.ndimage import gaussian_filter

        base = np.stack([gaussian_filter(rng.random((40, 40)), 2.5) for _ in range(3)])
        base = (base - base.min()) / (base.max() - base.min())
        src = torch.from_numpy(base[:, :32, :32].astype(np.float32))
        tgt = torch.from_numpy(base[:, 2:34, 2:34].astype(np.float32))

        est = FlowEstimator(net=PyramidFlowNet(levels=3, channels=12))
        losses = est.warm_up([(src, tgt)], steps=80, lr=2e-3)
        assert losses[-1] < losses[0], f"{losses[0]:.5f} -> {losses[-1]:.5f}"
        assert losses[-1] < 0.05, f"final fit error {losses[-1]:.5f}"

    def test_estimate_returns_typed_field(self):
        net = PyramidFlowNet(levels=2, channels=4)
        est = FlowEstimator(net=net)
        f = est.estimate(_frame(torch.rand(3, 16, 16), 1), _frame(torch.rand(3, 16, 16), 3))
        assert isinstance(f, FlowField)
        assert f.source_index == 1 and f.target_index == 3

    def test_external_backend_requires_callable(self):
        with pytest.raises(ValueError, match="external"):
            FlowEstimator(backend="external")

    def test_external_backend_used_when_given(self):
        def fake(src, tgt):
            return torch.ones(2, *src.shape[1:])

        est = FlowEstimator(backend="external", external_fn=fake)
        out = est.estimate_batch(torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8))
        assert torch.equal(out, torch.ones(2, 2, 8, 8))


class TestFlowCache:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vec = torch.from_numpy(rng.standard_normal((2, 6, 9)).astype(np.float32))
        field = FlowField(vec, source_index=2, target_index=4)
        p = tmp_path / "f.dvfl"
        save_flow(field, p)
        back = load_flow(p, source_index=2, target_index=4)
        assert torch.equal(back.vectors, vec)

    def test_byte_layout(self, tmp_path):
        vec = torch.tensor(
            [
                [[0.125, 0.25], [0.375, 0.5]],  # u
                [[-0.5, -0.25], [0.75, 1.0]],  # v
            ]
        )
        p = tmp_path / "f.dvfl"
        save_flow(FlowField(vec, 0, 1), p)
        raw = p.read_bytes()
        assert raw[:4] == b"DVFL"
        h, w = struct.unpack("<II", raw[4:12])
        assert (h, w) == (2, 2)
        vals = struct.unpack("<8f", raw[12:])
        # row-major pixels, u then v per pixel
        assert vals == (0.125, -0.5, 0.25, -0.25, 0.375, 0.75, 0.5, 1.0)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.dvfl"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_flow(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "short.dvfl"
        p.write_bytes(b"DVFL" + struct.pack("<II", 4, 4) + b"\x00" * 10)
        with pytest.raises(ValueError, match="bytes"):
            load_flow(p)


class TestAlignmentError:
    def test_identical_frames_score_zero(self):
        f = _frame(torch.rand(3, 8, 8))
        others = [_frame(f.pixels.clone(), t) for t in range(4)]
        assert flow_alignment_error(others, f) == 0.0

    def test_single_constant_offset_example(self):
        full = lambda v: torch.full((3, 8, 8), v, dtype=torch.float64)
        target = Frame(full(0.5), 0)
        good = [Frame(full(0.5), t) for t in range(3)]
        off = Frame(full(0.6), 3)
        err = flow_alignment_error(good + [off], target)
        assert err == pytest.approx(0.0025, abs=1e-12)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            flow_alignment_error([], _frame(torch.rand(3, 8, 8)))


def test_smoothness_zero_for_constant_flow():
    assert float(smoothness_penalty(torch.full((1, 2, 8, 8), 3.0))) == 0.0


def test_flow_warm_up_learns_direction():
    # content moves left by 1 px from src to tgt: tgt(x) = src(x+1), so the
    # fitted backward flow should be ~ +1 in x
    torch.manual_seed(3)
    rng = np.random.default_rng(3)
    from scipy.ndimage import gaussian_filter

    base = np.stack([gaussian_filter(rng.random((36, 40)), 2.0) for _ in range(3)])
    base = (base - base.min()) / (base.max() - base.min())
    src = torch.from_numpy(base[:, 2:34, 0:32].astype(np.float32))
    tgt = torch.from_numpy(base[:, 2:34, 1:33].astype(np.float32))
    est = FlowEstimator(net=PyramidFlowNet(levels=3, channels=12))
    est.warm_up([(src, tgt)], steps=80, lr=2e-3)
    with torch.no_grad():
        flow = est.net(src[None], tgt[None])[0]
    interior = flow[0, 8:-8, 8:-8]
    assert 0.5 < float(interior.mean()) < 1.5, float(interior.mean())
