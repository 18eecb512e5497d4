import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttsfuda.exceptions import ConfigError, ShapeError
from ttsfuda.losses import (
    aug_consistency_loss,
    ensemble_entropy_loss,
    entropy_map,
    seg_loss,
)


def np_binary_entropy(p):
    """Straight-line reference with the 0 log 0 = 0 convention."""
    out = np.zeros_like(p, dtype=np.float64)
    for idx, v in np.ndenumerate(p):
        h = 0.0
        for q in (v, 1.0 - v):
            if q > 0:
                h -= q * math.log(q)
        out[idx] = h
    return out


def np_seg_loss(p, y, smooth=1.0, eps=1e-7):
    pc = np.clip(p, eps, 1 - eps)
    bce = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    dices = [(2 * (pi * yi).sum() + smooth) / (pi.sum() + yi.sum() + smooth) for pi, yi in zip(p, y)]
    return 0.5 * bce + 1 - np.mean(dices)


def t(a):
    return torch.tensor(a, dtype=torch.float64)


class TestEntropyMap:
    def test_half_is_ln2(self):
        assert float(entropy_map(t([[[0.5]]]))) == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_degenerate_is_zero(self, p):
        assert float(entropy_map(t([[[p]]]))) == 0.0

    def test_p09(self):
        assert float(entropy_map(t([[[0.9]]]))) == pytest.approx(0.325083, abs=1e-6)

    def test_matches_reference(self):
        p = np.random.default_rng(0).uniform(0, 1, size=(2, 1, 8, 8))
        np.testing.assert_allclose(entropy_map(t(p)).numpy(), np_binary_entropy(p), atol=1e-12)

    def test_multiclass(self):
        p = np.random.default_rng(1).dirichlet(np.ones(4), size=(2, 5, 5)).transpose(0, 3, 1, 2)
        expected = -(p * np.log(p)).sum(1, keepdims=True)
        got = entropy_map(t(p))
        assert got.shape == (2, 1, 5, 5)
        np.testing.assert_allclose(got.numpy(), expected, atol=1e-12)
        assert float(got.max()) <= math.log(4) + 1e-9

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (1, 1, 4, 4), elements=st.floats(0, 1)))
    def test_bounds_and_symmetry(self, p):
        h = entropy_map(t(p))
        assert float(h.min()) >= 0
        assert float(h.max()) <= math.log(2) + 1e-9
        np.testing.assert_allclose(h.numpy(), entropy_map(t(1 - p)).numpy(), atol=1e-12)

    def test_finite_gradient_at_saturation(self):
        p = t([[[0.0, 1.0, 0.5]]]).requires_grad_()
        entropy_map(p).sum().backward()
        assert torch.isfinite(p.grad).all()


class TestSegLoss:
    def test_perfect_prediction(self):
        y = (np.random.default_rng(0).uniform(size=(2, 1, 8, 8)) > 0.5).astype(float)
        assert float(seg_loss(t(y), t(y))) < 0.01

    def test_uniform_half(self):
        y = np.zeros((1, 1, 8, 8))
        y[..., :4] = 1
        p = np.full_like(y, 0.5)
        loss = float(seg_loss(t(p), t(y)))
        # BCE half is 0.5 ln 2; soft Dice of the 0.5 map is (2*16 + 1) / (32 + 32 + 1)
        assert loss == pytest.approx(0.5 * math.log(2) + 1 - 33 / 65, abs=1e-12)
        assert loss == pytest.approx(np_seg_loss(p, y), abs=1e-12)

    def test_empty_target_empty_prediction(self):
        z = t(np.zeros((1, 1, 4, 4)))
        # BCE of clamped zeros is -ln(1 - 1e-7); Dice term vanishes under smoothing
        assert float(seg_loss(z, z)) == pytest.approx(-0.5 * math.log(1 - 1e-7), abs=1e-15)

    def test_matches_reference_random(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(size=(3, 1, 8, 8))
        y = (rng.uniform(size=p.shape) > 0.6).astype(float)
        assert float(seg_loss(t(p), t(y))) == pytest.approx(np_seg_loss(p, y), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            seg_loss(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 4, 5))))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            seg_loss(t(np.full((1, 1, 2, 2), 1.5)), t(np.zeros((1, 1, 2, 2))))

    def test_multiclass(self):
        rng = np.random.default_rng(4)
        p = rng.dirichlet(np.ones(3), size=(2, 4, 4)).transpose(0, 3, 1, 2)
        y = rng.integers(0, 3, size=(2, 4, 4))
        onehot = np.eye(3)[y].transpose(0, 3, 1, 2)
        ce = -np.mean((onehot * np.log(p)).sum(1))
        dices = []
        for c in (1, 2):
            dices.append(np.mean([(2 * (p[i, c] * onehot[i, c]).sum() + 1) / (p[i, c].sum() + onehot[i, c].sum() + 1) for i in range(2)]))
        expected = 0.5 * ce + 1 - np.mean(dices)
        assert float(seg_loss(t(p), torch.tensor(y))) == pytest.approx(expected, abs=1e-12)


class TestEnsembleEntropyLoss:
    def test_constant_fields(self):
        h = t(np.full((1, 1, 4, 4), 0.2))
        d = t(np.full((1, 1, 4, 4), 0.3))
        assert float(ensemble_entropy_loss(h, [d])) == pytest.approx(0.5, abs=1e-12)

    def test_half_probabilities(self):
        h = entropy_map(t(np.full((1, 1, 8, 8), 0.5)))
        assert float(ensemble_entropy_loss(h, [h, h])) == pytest.approx(1.386294, abs=1e-6)

    def test_hard_predictions(self):
        p = t((np.random.default_rng(0).uniform(size=(1, 1, 8, 8)) > 0.5).astype(float))
        assert float(ensemble_entropy_loss(entropy_map(p), [entropy_map(p)])) == 0.0

    def test_empty_augmented_list(self):
        with pytest.raises(ConfigError):
            ensemble_entropy_loss(t(np.zeros((1, 1, 2, 2))), [])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        maps = [t(rng.uniform(0, 0.69, size=(2, 1, 8, 8))) for _ in range(4)]
        a = ensemble_entropy_loss(maps[0], maps[1:])
        b = ensemble_entropy_loss(maps[0], maps[1:][::-1])
        assert float(a) == pytest.approx(float(b), abs=1e-12)

    def test_descends_monotonically(self):
        z = torch.zeros(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        noise = [torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(i), dtype=torch.float64) * 0.1 for i in range(2)]
        opt = torch.optim.Adam([z], lr=0.3)
        losses = []
        for _ in range(10):
            loss = ensemble_entropy_loss(entropy_map(torch.sigmoid(z)), [entropy_map(torch.sigmoid(z + n)) for n in noise])
            losses.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestConsistency:
    def test_identical(self):
        a = t(np.random.default_rng(0).normal(size=(2, 4, 2, 2)))
        assert float(aug_consistency_loss(a, a.clone())) == 0.0

    def test_two_elements(self):
        assert float(aug_consistency_loss(t([0.0, 0.0]), t([3.0, 4.0]))) == pytest.approx(12.5)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = t(rng.normal(size=(2, 3, 4))), t(rng.normal(size=(2, 3, 4)))
        assert float(aug_consistency_loss(a, b)) == float(aug_consistency_loss(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            aug_consistency_loss(t(np.zeros(3)), t(np.zeros(4)))
