import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ttsfuda.exceptions import CheckpointError, ConfigError, IncompatibleCheckpointError, ShapeError
from ttsfuda.models import (
    ArchSpec,
    build_model,
    clone_model,
    forward,
    load_checkpoint,
    parameter_count,
    predict_volume,
    save_checkpoint,
)

SMALL_2D = ArchSpec(dims=2, levels=5, in_channels=3, out_classes=1, base_width=4)


def states_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return list(sa) == list(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestArchSpec:
    @pytest.mark.parametrize("kwargs", [{"dims": 4}, {"levels": 1}, {"base_width": 0}, {"in_channels": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ArchSpec(**kwargs)

    def test_defaults(self):
        arch = ArchSpec()
        assert arch.levels == 5 and arch.base_width == 64
        assert arch.widths == [64, 128, 256, 512, 1024]

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            ArchSpec.from_dict({"dims": 2, "depth": 3})


class TestBuildAndForward:
    def test_deterministic_build(self):
        arch = ArchSpec(dims=2, levels=5, in_channels=3, out_classes=1, base_width=8)
        assert states_equal(build_model(arch, 7), build_model(arch, 7))
        assert not states_equal(build_model(arch, 7), build_model(arch, 8))

    def test_build_leaves_global_rng_alone(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        build_model(SMALL_2D, 1)
        assert torch.equal(torch.rand(3), expected)

    def test_output_shape(self):
        probs, latent = forward(build_model(SMALL_2D, 0), torch.rand(1, 3, 64, 64))
        assert probs.shape == (1, 1, 64, 64)
        assert latent.shape == (1, 64, 4, 4)

    def test_3d_latent_extent(self):
        arch = ArchSpec(dims=3, levels=5, in_channels=1, out_classes=4, base_width=2)
        model = build_model(arch, 0)
        probs, latent = forward(model, torch.rand(1, 1, 128, 128, 128))
        assert latent.shape[2:] == (8, 8, 8)
        assert probs.shape == (1, 4, 128, 128, 128)

    def test_multiclass_sums_to_one(self):
        arch = ArchSpec(dims=2, levels=3, in_channels=1, out_classes=4, base_width=4)
        probs, _ = forward(build_model(arch, 0), torch.rand(2, 1, 16, 16))
        np.testing.assert_allclose(probs.sum(1).numpy(), 1.0, atol=1e-5)

    def test_zero_input_finite(self):
        probs, latent = forward(build_model(SMALL_2D, 0), torch.zeros(1, 3, 32, 32))
        assert torch.isfinite(probs).all() and torch.isfinite(latent).all()
        assert float(probs.min()) >= 0 and float(probs.max()) <= 1

    def test_eval_forward_is_pure(self):
        arch = ArchSpec(dims=2, levels=3, in_channels=3, base_width=4, instance_norm=True)
        model = build_model(arch, 0)
        x = torch.rand(2, 3, 16, 16)
        a, _ = forward(model, x)
        b, _ = forward(model, x)
        assert torch.equal(a, b)

    def test_indivisible_shape_names_axis(self):
        with pytest.raises(ShapeError, match="axis 3"):
            forward(build_model(SMALL_2D, 0), torch.rand(1, 3, 32, 30))

    def test_wrong_channels(self):
        with pytest.raises(ShapeError, match="channels"):
            forward(build_model(SMALL_2D, 0), torch.rand(1, 1, 32, 32))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 2))
    def test_shape_preserved(self, h, w, n):
        arch = ArchSpec(dims=2, levels=5, in_channels=3, base_width=2)
        probs, _ = forward(build_model(arch, 0), torch.rand(n, 3, 16 * h, 16 * w))
        assert probs.shape == (n, 1, 16 * h, 16 * w)

    def test_parameter_count_regression(self):
        # 3x3 convs: two per encoder level, two per decoder level, plus the 1x1 head
        assert parameter_count(ArchSpec(dims=2, levels=5, in_channels=3, out_classes=1, base_width=8)) == 491_137
        assert parameter_count(ArchSpec(dims=2, levels=5, in_channels=3, out_classes=1, base_width=64)) == 31_378_945

    def test_parameter_count_closed_form(self):
        arch = ArchSpec(dims=2, levels=3, in_channels=3, out_classes=1, base_width=4)
        conv = lambda i, o: 9 * i * o + o
        expected = conv(3, 4) + conv(4, 4) + conv(4, 8) + conv(8, 8) + conv(8, 16) + conv(16, 16)
        expected += conv(16 + 8, 8) + conv(8, 8) + conv(8 + 4, 4) + conv(4, 4) + (4 + 1)
        assert parameter_count(arch) == expected


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model(SMALL_2D, 3)
        model.step_count = 17
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(path)
        assert states_equal(model, loaded)
        assert loaded.arch == model.arch and loaded.step_count == 17

    def test_deterministic_bytes(self, tmp_path):
        a = save_checkpoint(build_model(SMALL_2D, 3), tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(build_model(SMALL_2D, 3), tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_corrupted_header(self, tmp_path):
        path = save_checkpoint(build_model(SMALL_2D, 3), tmp_path / "m.ckpt")
        raw = bytearray(path.read_bytes())
        raw[20:30] = b"\xff" * 10
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(build_model(SMALL_2D, 3), tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_dims_mismatch(self, tmp_path):
        arch3 = ArchSpec(dims=3, levels=2, in_channels=1, base_width=2)
        path = save_checkpoint(build_model(arch3, 0), tmp_path / "m3.ckpt")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected_dims=2)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected_arch=SMALL_2D)

    def test_clone(self):
        model = build_model(SMALL_2D, 1)
        twin = clone_model(model)
        assert states_equal(model, twin)
        with torch.no_grad():
            next(twin.parameters()).add_(1)
        assert not states_equal(model, twin)


class TestSlidingWindow:
    def test_matches_full_forward_when_window_covers_image(self):
        arch = ArchSpec(dims=3, levels=2, in_channels=1, out_classes=4, base_width=2)
        model = build_model(arch, 0)
        vol = torch.rand(1, 8, 8, 8)
        full, _ = forward(model, vol[None])
        np.testing.assert_allclose(predict_volume(model, vol, roi=(8, 8, 8)).numpy(), full[0].numpy(), atol=1e-6)

    def test_odd_sized_volume(self):
        arch = ArchSpec(dims=3, levels=2, in_channels=1, out_classes=4, base_width=2)
        out = predict_volume(build_model(arch, 0), torch.rand(1, 9, 10, 7), roi=(4, 4, 4), overlap=0.5)
        assert out.shape == (4, 9, 10, 7)
        np.testing.assert_allclose(out.sum(0).numpy(), 1.0, atol=1e-5)
