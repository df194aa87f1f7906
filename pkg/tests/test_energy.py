import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sghmcseg import tensor as T
from sghmcseg.energy import (EnergyConfig, cross_entropy_loss, energy, minibatch_gradient, one_hot,
                             soft_dice_loss, total_loss)
from sghmcseg.models import ModelConfig, build_model


def _labels(c=4, n=2, h=6, w=6, seed=0):
    lab = np.random.default_rng(seed).integers(0, c, (n, h, w))
    lab[:, 0, :c] = np.arange(c)            # every class present
    return lab


class TestSoftDice:
    def test_exact_one_hot_gives_minus_c(self):
        lab = _labels()
        val = soft_dice_loss(one_hot(lab, 4, np.float64), lab, smooth=0.0).data
        np.testing.assert_allclose(val, -4.0, rtol=1e-12)

    def test_disjoint_gives_zero(self):
        lab = np.zeros((1, 4, 4), dtype=int)
        lab[0, :2] = 1
        wrong = 1 - lab
        probs = one_hot(wrong, 2, np.float64)
        np.testing.assert_allclose(soft_dice_loss(probs, lab, smooth=0.0).data, 0.0, atol=1e-15)

    def test_absent_class_contributes_minus_one(self):
        lab = np.zeros((1, 4, 4), dtype=int)
        probs = one_hot(lab, 3, np.float64)           # classes 1 and 2 absent everywhere
        val = soft_dice_loss(probs, lab).data
        # class 0: -2 * (16 + s) / (32 + 2s), classes 1, 2: -2 * s / 2s each
        s = 1e-5
        np.testing.assert_allclose(val, -2 * (16 + s) / (32 + 2 * s) - 2.0, rtol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(3), size=(2, 5, 5)).transpose(0, 3, 1, 2)
        val = float(soft_dice_loss(p, _labels(3, 2, 5, 5)).data)
        assert -3.0 <= val <= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_dice_loss(np.ones((1, 2, 4, 4)) / 2, np.zeros((1, 4, 5), dtype=int))


class TestCrossEntropy:
    def test_correct_one_hot_is_zero(self):
        lab = _labels()
        assert float(cross_entropy_loss(one_hot(lab, 4, np.float64), lab).data) == 0.0

    def test_uniform(self):
        lab = _labels()
        np.testing.assert_allclose(cross_entropy_loss(np.full((2, 4, 6, 6), 0.25), lab).data, np.log(4))

    def test_half(self):
        lab = np.zeros((1, 3, 3), dtype=int)
        np.testing.assert_allclose(cross_entropy_loss(np.full((1, 2, 3, 3), 0.5), lab).data, np.log(2))

    def test_floor_keeps_it_finite(self):
        lab = np.zeros((1, 2, 2), dtype=int)
        probs = one_hot(1 - lab, 2, np.float64)
        np.testing.assert_allclose(cross_entropy_loss(probs, lab).data, -np.log(1e-12))

    def test_labels_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(np.full((1, 2, 2, 2), 0.5), np.full((1, 2, 2), 2))


class TestEnergy:
    def test_prior_only(self):
        assert energy(0.0, np.array([1.0, 1.0]), 3e-5) == pytest.approx(3e-5, rel=1e-12)

    def test_prior_vanishes(self):
        assert energy(1.7, np.array([3.0, 4.0]), 1e-300) == pytest.approx(1.7)
        assert energy(1.7, np.zeros(4), 3e-5) == 1.7

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.randoms())
    def test_permutation_invariant(self, xs, r):
        w = np.array(xs)
        perm = list(range(len(xs)))
        r.shuffle(perm)
        assert energy(0.3, w, 1e-2) == pytest.approx(energy(0.3, w[perm], 1e-2), rel=1e-12)

    @pytest.mark.parametrize("kw", [dict(lam=0.0), dict(temperature=-1.0),
                                    dict(dataset_size=4, batch_size=5), dict(batch_size=0)])
    def test_config_validation(self, kw):
        base = dict(dataset_size=10, batch_size=2)
        base.update(kw)
        with pytest.raises(ValueError):
            EnergyConfig(**base)


@pytest.fixture(scope="module")
def small():
    model, w = build_model(ModelConfig(levels=2, base_channels=2, classes=3), seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 8, 8))
    y = rng.integers(0, 3, (2, 8, 8))
    return model, w, x, y


class TestGradient:
    def test_matches_finite_difference(self, small):
        model, w, x, y = small
        lam = 0.3
        g = minibatch_gradient(model, w, (x, y), lam)
        layout = model.layout

        def fn(p):
            loss = total_loss(model.forward(p, T.Tensor(x)), y)
            reg = sum(T.sum_(T.square(p[k])) for k in layout.names)
            return loss + reg * (0.5 * lam)

        pts = w.params()
        assert T.finite_diff_check(fn, pts, eps=1e-5) < 1e-4
        # and the flat vector lines up with the per-parameter gradients
        params = {k: T.Tensor(v, requires_grad=True) for k, v in pts.items()}
        grads = T.backward(fn(params), params)
        np.testing.assert_allclose(g, layout.flatten(grads), rtol=1e-10, atol=1e-12)

    def test_identical_batch_equals_single(self, small):
        model, w, x, y = small
        single = minibatch_gradient(model, w, (x[:1], y[:1]), 0.0)
        batch = minibatch_gradient(model, w, (np.repeat(x[:1], 3, 0), np.repeat(y[:1], 3, 0)), 0.0)
        np.testing.assert_allclose(batch, single, rtol=1e-10, atol=1e-14)

    def test_prior_gradient_is_lam_w(self, small):
        model, w, x, y = small
        g0 = minibatch_gradient(model, w, (x, y), 0.0)
        g1 = minibatch_gradient(model, w, (x, y), 0.25)
        np.testing.assert_allclose(g1 - g0, 0.25 * w.values, rtol=1e-12, atol=1e-15)

    def test_zero_loss_point_leaves_only_prior(self):
        # an MLP whose logits are huge on the right class has zero CE gradient in float64
        model, w = build_model(ModelConfig(arch="mlp", mlp_layers=(2, 2)), dtype=np.float64)
        w.values[:] = 0.0
        w.values[-2:] = [800.0, 0.0]                    # bias only; class 0 everywhere
        x = np.zeros((3, 2))
        y = np.zeros(3, dtype=int)
        g = minibatch_gradient(model, w, (x, y), 1e-3)
        np.testing.assert_allclose(g, 1e-3 * w.values, rtol=1e-12)

    def test_return_loss(self, small):
        model, w, x, y = small
        g, loss = minibatch_gradient(model, w, (x, y), 0.0, return_loss=True)
        expected = total_loss(model.forward({k: T.Tensor(v) for k, v in w.params().items()}, T.Tensor(x)), y)
        assert loss == pytest.approx(float(expected.data), rel=1e-12)
