"""Round-trip and validation tests for on-disk formats."""
import dataclasses
import json

import numpy as np
import pytest
import torch
from torch import nn

from dropvid.checkpoint import FORMAT_VERSION, load_checkpoint, load_into, save_checkpoint
from dropvid.config import TrainConfig, format_config, load_config, parse_config, save_config
from dropvid.data import (
    load_frame_png,
    load_mask_png,
    read_clip_dir,
    save_frame_png,
    save_mask_png,
    write_clip_dir,
)
from dropvid.synth import SynthSpec, synthesize_clip


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = TrainConfig()
        assert parse_config(format_config(cfg)) == cfg

    def test_non_default_round_trip(self):
        cfg = TrainConfig(crop_size=128, lr_stage2=3e-5, no_mask=True, mask_mode="soft")
        assert parse_config(format_config(cfg)) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(crop_size=96, seed=42, lambda_t=0.25)
        p = tmp_path / "train.cfg"
        save_config(cfg, p)
        assert load_config(p) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config("learning_rate = 0.1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config("seed = 1\nseed = 2\n")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# comment\n\nseed = 7  # trailing\n")
        assert cfg.seed == 7

    def test_malformed_line_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config("just some words\n")

    def test_bool_parsing(self):
        assert parse_config("no_mask = true\n").no_mask is True
        assert parse_config("no_mask = false\n").no_mask is False
        with pytest.raises(ValueError):
            parse_config("no_mask = maybe\n")

    def test_validation_crop_size(self):
        with pytest.raises(ValueError, match="crop_size"):
            TrainConfig(crop_size=50)
        with pytest.raises(ValueError, match="crop_size"):
            TrainConfig(crop_size=126)

    def test_validation_modes(self):
        with pytest.raises(ValueError):
            TrainConfig(mask_mode="fuzzy")
        with pytest.raises(ValueError):
            TrainConfig(decoder_mode="direct")

    def test_every_field_appears_in_output(self):
        text = format_config(TrainConfig())
        for f in dataclasses.fields(TrainConfig):
            assert f.name in text


class TestCheckpoint:
    def _modules(self):
        torch.manual_seed(0)
        return {"enc": nn.Conv2d(3, 4, 3), "head": nn.Linear(4, 2)}

    def test_round_trip_bit_exact(self, tmp_path):
        mods = self._modules()
        p = tmp_path / "ck.npz"
        save_checkpoint(p, "stage1", mods, extra={"step": 17})
        kind, states, extra = load_checkpoint(p)
        assert kind == "stage1"
        assert extra == {"step": 17}
        for name, mod in mods.items():
            for key, tensor in mod.state_dict().items():
                assert torch.equal(states[name][key], tensor)

    def test_load_into_restores_weights(self, tmp_path):
        mods = self._modules()
        p = tmp_path / "ck.npz"
        save_checkpoint(p, "stage1", mods)
        fresh = {"enc": nn.Conv2d(3, 4, 3), "head": nn.Linear(4, 2)}
        load_into(p, "stage1", fresh)
        for name in mods:
            for key, tensor in mods[name].state_dict().items():
                assert torch.equal(fresh[name].state_dict()[key], tensor)

    def test_wrong_kind_rejected(self, tmp_path):
        p = tmp_path / "ck.npz"
        save_checkpoint(p, "stage1", self._modules())
        with pytest.raises(ValueError, match="kind"):
            load_into(p, "stage2", self._modules())

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.npz")

    def test_meta_records_shapes(self, tmp_path):
        p = tmp_path / "ck.npz"
        save_checkpoint(p, "stage1", self._modules())
        with np.load(p) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
        assert meta["format_version"] == FORMAT_VERSION
        assert meta["shapes"]["enc.weight"] == [4, 3, 3, 3]

    def test_version_mismatch_rejected(self, tmp_path):
        p = tmp_path / "ck.npz"
        meta = {"format_version": 99, "kind": "x", "shapes": {}, "extra": {}}
        with open(p, "wb") as f:
            np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(p)

    def test_dotted_module_name_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="'.'"):
            save_checkpoint(tmp_path / "x.npz", "k", {"a.b": nn.Linear(2, 2)})


class TestPngs:
    def test_frame_round_trip_exact_on_byte_grid(self, tmp_path):
        rng = np.random.default_rng(0)
        quantized = rng.integers(0, 256, (3, 16, 16)).astype(np.float32) / 255.0
        p = tmp_path / "f.png"
        save_frame_png(torch.from_numpy(quantized), p)
        back = load_frame_png(p, 0)
        assert torch.allclose(back.pixels, torch.from_numpy(quantized), atol=1e-7)

    def test_mask_round_trip(self, tmp_path):
        m = (torch.rand(1, 16, 16) > 0.5).float()
        p = tmp_path / "m.png"
        save_mask_png(m, p)
        assert torch.equal(load_mask_png(p), m)

    def test_save_twice_byte_identical(self, tmp_path):
        img = torch.rand(3, 16, 16)
        a = tmp_path / "a.png"
        b = tmp_path / "b.png"
        save_frame_png(img, a)
        save_frame_png(img, b)
        assert a.read_bytes() == b.read_bytes()


class TestClipDir:
    def test_full_round_trip(self, tmp_path):
        rain, clean, masks = synthesize_clip(SynthSpec(n_frames=6, height=32, width=32, seed=1))
        root = tmp_path / "clip"
        write_clip_dir(root, rain, clean, masks, extra={"seed": 1})
        data = read_clip_dir(root, need_clean=True)
        assert len(data.rain) == 6
        assert data.manifest["seed"] == 1
        assert data.manifest["has_clean"] and data.manifest["has_mask"]
        # pixels survive up to 8-bit quantization
        diff = (data.rain.frames[0].pixels - rain.frames[0].pixels).abs().max()
        assert float(diff) <= 0.5 / 255 + 1e-6
        assert torch.equal(data.masks[0], masks[0])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            read_clip_dir(tmp_path)

    def test_missing_frames_detected(self, tmp_path):
        rain, clean, masks = synthesize_clip(SynthSpec(n_frames=6, height=32, width=32, seed=1))
        root = tmp_path / "clip"
        write_clip_dir(root, rain)
        (root / "rain" / "frame_000003.png").unlink()
        with pytest.raises(ValueError, match="missing"):
            read_clip_dir(root)

    def test_manifest_geometry_checked(self, tmp_path):
        rain, _, _ = synthesize_clip(SynthSpec(n_frames=6, height=32, width=32, seed=1))
        root = tmp_path / "clip"
        write_clip_dir(root, rain)
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["width"] = 64
        (root / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="manifest says"):
            read_clip_dir(root)

    def test_need_clean_enforced(self, tmp_path):
        rain, _, _ = synthesize_clip(SynthSpec(n_frames=6, height=32, width=32, seed=1))
        root = tmp_path / "clip"
        write_clip_dir(root, rain)
        with pytest.raises(ValueError, match="clean"):
            read_clip_dir(root, need_clean=True)
