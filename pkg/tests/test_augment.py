import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ttsfuda.augment import (
    REGISTRY,
    AugSpec,
    apply_strong,
    apply_weak,
    compose,
    default_specs,
    derive_seed,
    ensemble,
    resolve_specs,
)
from ttsfuda.exceptions import ConfigError


def rgb(seed=0, n=4, size=16):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_identity_returns_input():
    x = rgb()
    (out,) = ensemble(x, [AugSpec("identity")], seed=0)
    assert torch.equal(out, x)


def test_ensemble_is_deterministic():
    x = rgb()
    specs = default_specs("ensemble")
    a = ensemble(x, specs, seed=11)
    b = ensemble(x, specs, seed=11)
    assert len(a) == 3
    assert all(torch.equal(u, v) for u, v in zip(a, b))
    c = ensemble(x, specs, seed=12)
    assert not torch.equal(a[0], c[0])


def test_grayscale_gives_equal_channels():
    (out,) = ensemble(rgb(), [AugSpec("grayscale")], seed=0)
    assert torch.allclose(out[:, 0], out[:, 1]) and torch.allclose(out[:, 1], out[:, 2])


def test_grayscale_probability_zero_is_identity():
    x = rgb()
    (out,) = ensemble(x, [AugSpec("grayscale", {"p": 0.0})], seed=0)
    assert torch.equal(out, x)


def test_geometric_spec_rejected_in_ensemble():
    with pytest.raises(ConfigError, match="geometric"):
        ensemble(rgb(), [AugSpec("jitter"), AugSpec("hflip")], seed=0)


def test_empty_ensemble_rejected():
    with pytest.raises(ConfigError):
        ensemble(rgb(), [], seed=0)


def test_unknown_name_and_tier():
    with pytest.raises(ConfigError):
        AugSpec("rotate")
    with pytest.raises(ConfigError):
        AugSpec("jitter", tier="medium")


def test_weak_zero_magnitude_is_identity():
    x = rgb()
    specs = [AugSpec("jitter", {"brightness": 0.0, "contrast": 0.0, "saturation": 0.0}, "weak")]
    assert torch.allclose(apply_weak(x, 3, specs), x, atol=1e-6)


def test_strong_and_weak_differ():
    x = rgb(5)
    assert not torch.allclose(apply_strong(x, 7), apply_weak(x, 7))


def test_weak_and_strong_deterministic():
    x = rgb(6)
    assert torch.equal(apply_weak(x, 9), apply_weak(x, 9))
    assert torch.equal(apply_strong(x, 9), apply_strong(x, 9))


def test_default_tier_contents():
    weak = default_specs("weak")
    assert [s.name for s in weak] == ["jitter"]
    assert weak[0].params["brightness"] == 0.1 and weak[0].params["contrast"] == 0.1
    strong = {s.name: s.params for s in default_specs("strong")}
    assert strong["jitter"] == {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4}
    assert strong["grayscale"]["p"] == 0.2 and "blur" in strong
    assert [s.name for s in default_specs("ensemble")] == ["jitter", "grayscale", "contrast"]


def test_volume_tiers_work_on_single_channel():
    x = torch.rand(2, 1, 8, 8, 8, generator=torch.Generator().manual_seed(0))
    for tier in ("weak", "strong"):
        out = compose(x, default_specs(tier, dims=3), seed=1)
        assert out.shape == x.shape
    views = ensemble(x, default_specs("ensemble", dims=3), seed=1)
    # grayscale is a no-op on one channel
    assert torch.equal(views[1], x)


def test_resolve_specs_forms():
    specs = resolve_specs(["jitter", {"name": "blur", "params": {"sigma": [0.5, 1.0]}}, AugSpec("identity")], "strong")
    assert [s.name for s in specs] == ["jitter", "blur", "identity"]
    assert specs[0].tier == "strong"
    with pytest.raises(ConfigError):
        resolve_specs([{"kind": "jitter"}], "weak")
    with pytest.raises(ConfigError):
        resolve_specs([3], "weak")


def test_derive_seed_stable():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_blur_preserves_constant_image():
    x = torch.full((1, 3, 12, 12), 0.4)
    (out,) = ensemble(x, [AugSpec("blur")], seed=0)
    assert torch.allclose(out, x, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(n for n in REGISTRY if not REGISTRY[n].geometric)), st.integers(0, 2**31 - 1))
def test_shape_and_range_preserved(name, seed):
    x = rgb(seed % 100, n=2, size=8)
    (out,) = ensemble(x, [AugSpec(name)], seed=seed)
    assert out.shape == x.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["brightness", "gamma", "intensity", "contrast"]), st.integers(0, 1000))
def test_pixels_stay_in_place(name, seed):
    # per-sample monotone maps keep the pixel ordering, so masks stay aligned
    x = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(seed)) * 0.5 + 0.25
    (out,) = ensemble(x, [AugSpec(name, {"magnitude": 0.2} if name in ("brightness", "gamma", "contrast") else {})], seed)
    order = torch.argsort(x.flatten())
    assert bool((out.flatten()[order].diff() >= -1e-7).all())


def test_hflip_moves_pixels():
    x = rgb(2, n=8)
    out = compose(x, [AugSpec("hflip", {"p": 1.0}, "strong")], seed=0)
    assert torch.equal(out, torch.flip(x, dims=[-1]))


def test_grayscale_drawn_per_sample():
    x = rgb(1, n=64, size=4)
    out = ensemble(x, [AugSpec("grayscale", {"p": 0.2})], seed=3)[0]
    gray = (out[:, 0] == out[:, 1]).flatten(1).all(1) & (out[:, 1] == out[:, 2]).flatten(1).all(1)
    frac = gray.float().mean().item()
    assert np.isclose(frac, 0.2, atol=0.15)
