from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from conftest import ConstantModel, LinearModel
from xforge import attributions as A
from xforge.attributions import AttributionError, BaselineSpec, PatchPartition
from xforge.engine import Tensor, finite_difference_gradient, no_record
from xforge.engine import functional as F
from xforge.nn import Module


def f_value(model, x, cls):
    """Class score evaluated in float64 shadow mode."""
    with no_record():
        return float(model(Tensor(np.asarray(x, dtype=np.float64)[None])).data[0, cls])


def brute_force_shapley(v, d):
    """Shapley values from the subset formula over all 2^d coalitions."""
    phi = np.zeros(d)
    for i in range(d):
        others = [j for j in range(d) if j != i]
        for k in range(d):
            w = math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d)
            for s in itertools.combinations(others, k):
                phi[i] += w * (v(set(s) | {i}) - v(set(s)))
    return phi


class TestPatchPartition:
    def test_default_grid(self):
        p = PatchPartition.default(32, 32)
        assert (p.rows, p.cols, p.d) == (8, 8, 64)
        assert np.all(p.sizes == 16)

    def test_total_and_disjoint(self):
        p = PatchPartition(3, 5, 10, 13)
        idx = p.index
        assert idx.min() == 0 and idx.max() == p.d - 1
        assert p.membership().sum(axis=0).tolist() == [1] * (10 * 13)

    def test_broadcast_preserves_patch_sums(self, rng):
        p = PatchPartition(2, 4, 8, 16)
        v = rng.normal(size=p.d)
        np.testing.assert_allclose(p.aggregate(p.broadcast(v)), v)

    def test_grid_too_fine(self):
        with pytest.raises(ValueError):
            PatchPartition(9, 1, 8, 8)


class TestBaselineSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            BaselineSpec(sigma=-1.0)
        with pytest.raises(ValueError):
            BaselineSpec(samples=0)
        with pytest.raises(ValueError):
            BaselineSpec("dataset")
        with pytest.raises(ValueError):
            BaselineSpec("uniform")

    def test_gaussian_centered_on_input(self, rng):
        x = np.ones((1, 4, 4))
        b = BaselineSpec("gaussian", sigma=0.0).draw(x, 3, rng)
        np.testing.assert_array_equal(b, np.ones((3, 1, 4, 4)))


class TestSaliency:
    def test_linear_is_abs_weight(self, linear_model, rng):
        x = rng.normal(size=(2, 8, 8))
        m = A.saliency(linear_model, x, 1)
        np.testing.assert_allclose(m.scores, np.abs(linear_model.coef(1)).sum(axis=0), rtol=1e-6)

    def test_constant_model_zero(self, rng):
        m = A.saliency(ConstantModel(), rng.normal(size=(1, 4, 4)), 0)
        assert np.all(m.scores == 0)

    def test_matches_finite_differences(self, small_net, small_input):
        cls = 2
        numeric = finite_difference_gradient(lambda v: f_value(small_net, v, cls), small_input, step=1e-5)
        m = A.saliency(small_net, small_input, cls)
        assert np.abs(m.raw - np.abs(numeric)).max() <= 1e-3 * np.abs(numeric).max()

    def test_bad_target(self, small_net, small_input):
        with pytest.raises(AttributionError, match="out of range"):
            A.saliency(small_net, small_input, 7)


class TestIntegratedGradients:
    def test_linear_exact(self, linear_model, rng):
        x = rng.normal(size=(2, 8, 8))
        m = A.integrated_gradients(linear_model, x, 0)
        np.testing.assert_allclose(m.raw, linear_model.coef(0) * x, atol=1e-10)

    def test_x_equals_baseline(self, small_net):
        m = A.integrated_gradients(small_net, np.zeros((2, 8, 8)), 0)
        assert np.all(m.scores == 0) and np.all(m.pre_clamp == 0)

    def test_completeness_converges(self, small_net, small_input):
        target = f_value(small_net, small_input, 1) - f_value(small_net, np.zeros_like(small_input), 1)
        err = {
            steps: abs(A.integrated_gradients(small_net, small_input, 1, steps=steps, rule="midpoint").pre_clamp.sum() - target)
            for steps in (16, 512)
        }
        assert err[512] <= 1e-3 * abs(target)

    def test_left_riemann_points(self):
        np.testing.assert_allclose(A.path_alphas(4), [0, 0.25, 0.5, 0.75])

    def test_steps_lower_bound(self, small_net, small_input):
        with pytest.raises(ValueError):
            A.integrated_gradients(small_net, small_input, 0, steps=4)


class TestGradientShap:
    def test_no_noise_baseline_at_input_is_zero(self, small_net, small_input):
        base = BaselineSpec("gaussian", sigma=0.0)
        m = A.gradient_shap(small_net, small_input, 0, n_samples=1, sigma=0.0, baseline=base)
        assert np.all(m.pre_clamp == 0)

    def test_linear_expectation_within_three_se(self, linear_model, rng):
        x = rng.normal(size=(2, 8, 8))
        w = linear_model.coef(2)
        n, sigma = 64, 0.3
        m = A.gradient_shap(linear_model, x, 2, n_samples=n, sigma=sigma, seed=5)
        expected = (w * x).sum()
        se = sigma * np.sqrt((w**2).sum() / n)
        assert abs(m.pre_clamp.sum() - expected) <= 3 * se

    def test_deterministic(self, small_net, small_input):
        a = A.gradient_shap(small_net, small_input, 0, seed=11)
        b = A.gradient_shap(small_net, small_input, 0, seed=11)
        np.testing.assert_array_equal(a.scores, b.scores)


class TwoUnitNet(Module):
    """logit = v . relu(U x) + c on flattened input; the guided rule has a closed form."""

    def __init__(self, u, v):
        super().__init__()
        self.u = self.param("u", u)
        self.v = self.param("v", v)

    def forward(self, x, activations=None):
        h = F.relu(F.dense(x.reshape(x.shape[0], -1), self.u))
        return F.dense(h, self.v)


class TestGuidedBackprop:
    def test_matches_enumeration(self, rng):
        u = rng.normal(size=(4, 2))
        v = np.array([[1.5, -0.5], [-2.0, 0.7]])
        net = TwoUnitNet(u, v)
        x = rng.normal(size=(1, 2, 2))
        pre = x.reshape(-1) @ net.u.data
        for cls in range(2):
            upstream = np.maximum(net.v.data[:, cls], 0) * (pre > 0)
            expected = (net.u.data @ upstream).reshape(1, 2, 2)
            m = A.guided_backprop(net, x, cls)
            np.testing.assert_allclose(m.raw, expected, rtol=1e-6)
            np.testing.assert_allclose(m.scores, np.maximum(expected.sum(axis=0), 0), rtol=1e-6)

    def test_all_negative_preactivations(self):
        net = TwoUnitNet(-np.ones((4, 2)), np.ones((2, 1)))
        m = A.guided_backprop(net, np.ones((1, 2, 2)), 0)
        assert np.all(m.scores == 0)

    def test_rejects_relu_free_model(self, linear_model, rng):
        with pytest.raises(AttributionError, match="relu"):
            A.guided_backprop(linear_model, rng.normal(size=(2, 8, 8)), 0)


class IdentityCamNet(Module):
    """One 1x1 identity conv + relu, then global average pool and a dense head."""

    def __init__(self, head):
        super().__init__()
        self.k = self.param("k", np.ones((1, 1, 1, 1)))
        self.head = self.param("head", head)

    def forward(self, x, activations=None):
        a = F.relu(F.conv2d(x, self.k))
        if activations is not None:
            activations.append(a)
        return F.dense(F.avgpool(a), self.head)


class TestGradCam:
    def test_hand_computation(self):
        net = IdentityCamNet(np.array([[2.0, -1.0]]))
        x = np.array([[[1.0, -3.0], [0.5, 2.0]]])
        act = np.maximum(x[0], 0)
        # d logit / d A = head / 4 everywhere, so alpha = head / 4
        np.testing.assert_allclose(A.grad_cam(net, x, 0), np.maximum(0.5 * act, 0))
        np.testing.assert_allclose(A.grad_cam(net, x, 1), np.zeros((2, 2)))

    def test_shape_and_sign(self, small_net, small_input):
        cam = A.grad_cam(small_net, small_input, 0)
        assert cam.shape == (8, 8) and np.all(cam >= 0)

    def test_invalid_layer(self, small_net, small_input):
        with pytest.raises(AttributionError, match="layer"):
            A.grad_cam(small_net, small_input, 0, layer=5)

    def test_guided_gradcam_is_product(self, small_net, small_input):
        gb = A.guided_backprop(small_net, small_input, 1)
        cam = A.grad_cam(small_net, small_input, 1)
        ggc = A.guided_grad_cam(small_net, small_input, 1)
        np.testing.assert_allclose(ggc.scores, gb.scores * cam, rtol=1e-6, atol=1e-12)
        assert np.all(ggc.scores[cam == 0] == 0)


class TestDeepLift:
    def test_linear_equals_exact(self, linear_model, rng):
        x = rng.normal(size=(2, 8, 8))
        m = A.deeplift_rescale(linear_model, x, 1)
        np.testing.assert_allclose(m.raw, linear_model.coef(1) * x, atol=1e-10)

    def test_summation_to_delta(self, small_net, small_input):
        for cls in range(3):
            target = f_value(small_net, small_input, cls) - f_value(small_net, np.zeros_like(small_input), cls)
            total = A.deeplift_rescale(small_net, small_input, cls).pre_clamp.sum()
            assert abs(total - target) <= 1e-4 * max(abs(target), 1e-12)

    def test_x_equals_baseline(self, small_net):
        assert np.all(A.deeplift_rescale(small_net, np.zeros((2, 8, 8)), 0).pre_clamp == 0)

    def test_rejects_unsupported_op(self, rng):
        class PoolNet(Module):
            def __init__(self):
                super().__init__()
                self.w = self.param("w", np.ones((4, 2)))

            def forward(self, x, activations=None):
                return F.dense(F.maxpool2x2(x).reshape(x.shape[0], -1), self.w)

        with pytest.raises(AttributionError, match="maxpool2x2"):
            A.deeplift_rescale(PoolNet(), rng.normal(size=(1, 4, 4)), 0)

    def test_shap_single_baseline_equals_rescale(self, small_net, small_input, rng):
        ref = rng.uniform(size=(2, 8, 8))
        a = A.deeplift_shap(small_net, small_input, 0, reference=ref)
        b = A.deeplift_rescale(small_net, small_input, 0, baseline=BaselineSpec("dataset", reference=ref[None]))
        np.testing.assert_allclose(a.pre_clamp, b.pre_clamp, atol=1e-10)

    def test_shap_linear_reference_mean(self, linear_model, rng):
        x = rng.normal(size=(2, 8, 8))
        ref = rng.normal(size=(200, 2, 8, 8))
        w = linear_model.coef(0)
        n = 32
        m = A.deeplift_shap(linear_model, x, 0, reference=ref, n_samples=n, seed=2)
        per_ref = (w * (x - ref)).sum(axis=(1, 2, 3))
        se = per_ref.std(ddof=1) / np.sqrt(n)
        assert abs(m.pre_clamp.sum() - per_ref.mean()) <= 3 * se

    def test_shap_deterministic(self, small_net, small_input, rng):
        ref = rng.uniform(size=(20, 2, 8, 8))
        a = A.deeplift_shap(small_net, small_input, 0, reference=ref, seed=4)
        b = A.deeplift_shap(small_net, small_input, 0, reference=ref, seed=4)
        np.testing.assert_array_equal(a.scores, b.scores)


class PatchGame(Module):
    """Nonlinear model over the 8 patch sums of a 1x4x8 image (2x4 grid of 2x2 patches)."""

    def __init__(self, rng):
        super().__init__()
        part = PatchPartition(2, 4, 4, 8)
        self.pool = self.param("pool", part.membership().T)  # (32, 8)
        self.mix = self.param("mix", rng.normal(size=(8, 6)))
        self.out = self.param("out", rng.normal(size=(6 + 8, 1)))

    def forward(self, x, activations=None):
        s = F.dense(x.reshape(x.shape[0], -1), self.pool)
        h = F.relu(F.dense(s, self.mix))
        return F.dense(F.concat_channels(h, s), self.out)


class TestKernelShap:
    def test_additive_game_exact(self, rng):
        d = 8
        coef = rng.normal(size=d)
        part = PatchPartition(2, 4, 4, 8)
        m = A.kernel_shap(None, np.zeros((1, 4, 8)), 0, partition=part, n_coalitions=2**d, value_fn=lambda z: z @ coef + 0.3)
        np.testing.assert_allclose(part.aggregate(m.pre_clamp), coef, atol=1e-6)

    def test_matches_brute_force_on_patch_model(self, rng):
        model = PatchGame(rng)
        part = PatchPartition(2, 4, 4, 8)
        x = rng.uniform(0.2, 1.0, size=(1, 4, 8))

        def v(coalition):
            mask = part.mask(sorted(coalition)) if coalition else np.zeros((4, 8), bool)
            return f_value(model, x * mask, 0)

        phi = part.aggregate(A.kernel_shap(model, x, 0, partition=part, n_coalitions=254).pre_clamp)
        np.testing.assert_allclose(phi, brute_force_shapley(v, 8), atol=1e-6)

    def test_symmetric_features_equal(self):
        part = PatchPartition(1, 4, 1, 4)
        game = lambda z: (z[:, 0] + z[:, 1]) ** 2 + z[:, 2]  # features 0 and 1 interchangeable
        phi = part.aggregate(A.kernel_shap(None, np.zeros((1, 1, 4)), 0, partition=part, n_coalitions=14, value_fn=game).pre_clamp)
        assert abs(phi[0] - phi[1]) <= 1e-6

    def test_efficiency(self, rng):
        model = PatchGame(rng)
        part = PatchPartition(2, 4, 4, 8)
        x = rng.uniform(size=(1, 4, 8))
        m = A.kernel_shap(model, x, 0, partition=part, n_coalitions=254)
        target = f_value(model, x, 0) - f_value(model, np.zeros_like(x), 0)
        assert abs(m.pre_clamp.sum() - target) <= 1e-4 * max(1.0, abs(target))

    def test_sampled_regime_runs(self, small_net, small_input):
        m = A.kernel_shap(small_net, small_input, 0, n_coalitions=40, seed=1)
        assert m.scores.shape == (8, 8)

    def test_singular_system_rejected(self):
        # complementary pairs leave only half the rows independent
        part = PatchPartition(1, 30, 1, 30)
        with pytest.raises(A.SingularSystemError):
            A.kernel_shap(None, np.zeros((1, 1, 30)), 0, partition=part, n_coalitions=32, ridge=0.0, value_fn=lambda z: z.sum(axis=1))

    def test_preconditions(self, small_net, small_input):
        with pytest.raises(ValueError, match="n_coalitions"):
            A.kernel_shap(small_net, small_input, 0, n_coalitions=5)
        with pytest.raises(ValueError, match="two features"):
            A.kernel_shap(small_net, small_input, 0, partition=PatchPartition(1, 1, 8, 8))


class TestCommonContracts:
    @pytest.mark.parametrize("method", A.METHOD_NAMES)
    def test_positive_and_shaped(self, method, small_net, small_input, rng):
        params = {"reference": rng.uniform(size=(6, 2, 8, 8))} if method == "deeplift_shap" else {}
        m = A.explain(small_net, small_input, 1, method, **params)
        assert m.scores.shape == (8, 8)
        assert np.all(m.scores >= 0)
        assert m.method == method

    def test_unknown_method(self, small_net, small_input):
        with pytest.raises(ValueError, match="valid"):
            A.explain(small_net, small_input, 0, "lime")

    def test_linear_oracle_agreement(self, rng):
        model = LinearModel(rng.normal(size=(1, 4, 8, 2)))
        part = PatchPartition(2, 4, 4, 8)
        x = rng.normal(size=(1, 4, 8))
        ig = part.aggregate(A.integrated_gradients(model, x, 0).pre_clamp)
        dl = part.aggregate(A.deeplift_rescale(model, x, 0).pre_clamp)
        ks = part.aggregate(A.kernel_shap(model, x, 0, partition=part, n_coalitions=254).pre_clamp)
        np.testing.assert_allclose(ig, dl, atol=1e-4)
        np.testing.assert_allclose(ig, ks, atol=1e-4)
