from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import LinearModel
from xforge import metrics as M
from xforge.attributions import PatchPartition
from xforge.metrics import FaithfulnessConfig, MetricError, SsimParams


class TestPearson:
    def test_perfect(self):
        assert M.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert M.pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)

    def test_independent_small(self):
        rng = np.random.default_rng(7)
        assert abs(M.pearson(rng.normal(size=1000), rng.normal(size=1000))) < 0.1

    def test_zero_variance_undefined(self):
        assert math.isnan(M.pearson([1, 1, 1], [1, 2, 3]))

    def test_too_short(self):
        with pytest.raises(MetricError):
            M.pearson([1, 2], [1, 2])

    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        u, v = rng.normal(size=50), rng.normal(size=50)
        assert M.pearson(u, v) == pytest.approx(stats.pearsonr(u, v)[0], abs=1e-12)


class TestFaithfulness:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(0)
        model = LinearModel(rng.normal(size=(1, 8, 8, 2)))
        x = rng.uniform(size=(1, 8, 8))
        cfg = FaithfulnessConfig(partition=PatchPartition(4, 4, 8, 8), seed=3)
        return model, x, cfg

    def test_exact_additive_is_one(self, setup):
        model, x, cfg = setup
        exact = (model.coef(0) * x).sum(axis=0)
        assert M.faithfulness(model, exact, x, 0, cfg) == pytest.approx(1.0, abs=1e-6)

    def test_negated_is_minus_one(self, setup):
        model, x, cfg = setup
        exact = (model.coef(0) * x).sum(axis=0)
        assert M.faithfulness(model, -exact, x, 0, cfg) == pytest.approx(-1.0, abs=1e-6)

    def test_positive_rescaling_invariant(self, setup):
        model, x, cfg = setup
        m = np.random.default_rng(2).uniform(size=(8, 8))
        assert M.faithfulness(model, m, x, 0, cfg) == pytest.approx(M.faithfulness(model, 7.5 * m, x, 0, cfg), abs=1e-12)

    def test_uniform_map_undefined(self, setup):
        model, x, cfg = setup
        # every subset has the same size, so a uniform map gives constant subset sums
        assert math.isnan(M.faithfulness(model, np.ones((8, 8)), x, 0, cfg))

    def test_default_subset_size(self):
        cfg = FaithfulnessConfig().resolve(32, 32)
        assert (cfg.partition.d, cfg.subset_size, cfg.perturbations) == (64, 16, 70)

    def test_config_validation(self):
        with pytest.raises(MetricError):
            FaithfulnessConfig(perturbations=2).resolve(32, 32)
        with pytest.raises(MetricError):
            FaithfulnessConfig(subset_size=64).resolve(32, 32)

    def test_shape_mismatch(self, setup):
        model, x, cfg = setup
        with pytest.raises(MetricError):
            M.faithfulness(model, np.ones((4, 4)), x, 0, cfg)

    def test_perturbation_zeroes_whole_patches(self, setup):
        model, x, cfg = setup
        p = M.perturb(model, x, 0, cfg)
        w = model.coef(0)
        for s, delta in zip(p.subsets[:5], p.deltas[:5]):
            mask = cfg.partition.mask(s)
            assert delta == pytest.approx((w * x)[:, mask].sum(), rel=1e-4)


class TestComplexity:
    def test_one_hot_zero(self):
        m = np.zeros((8, 8))
        m[0, 0] = 3.0
        assert M.complexity(m, PatchPartition(2, 2, 8, 8)) == 0.0

    def test_uniform_is_log_d(self):
        assert M.complexity(np.ones((4, 4)), PatchPartition(2, 2, 4, 4)) == pytest.approx(math.log(4), abs=1e-12)
        assert M.complexity(np.ones((32, 32))) == pytest.approx(math.log(64), abs=1e-12)

    def test_distribution_sums_to_one(self):
        rng = np.random.default_rng(0)
        p = M.attribution_distribution(rng.uniform(size=(32, 32)))
        assert p.sum() == pytest.approx(1.0, abs=1e-7)

    def test_zero_map_rejected(self):
        with pytest.raises(MetricError):
            M.complexity(np.zeros((8, 8)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_bounds_and_scale_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        m = rng.exponential(size=(8, 8)) * (rng.uniform(size=(8, 8)) < 0.5)
        m[0, 0] += 1.0
        part = PatchPartition(4, 4, 8, 8)
        c = M.complexity(m, part)
        assert -1e-12 <= c <= math.log(16) + 1e-12
        assert M.complexity(scale * m, part) == pytest.approx(c, abs=1e-9)


class TestSsim:
    def test_identity(self):
        x = np.random.default_rng(0).uniform(size=(16, 16))
        assert M.ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        x, y = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        assert M.ssim(x, y) == M.ssim(y, x)

    def test_constants_by_hand(self):
        p = SsimParams(dynamic_range=1.0)
        c1, c2 = 1e-4, 9e-4
        expected = (c1 * c2) / ((1 + c1) * c2)
        assert M.ssim(np.zeros((4, 4)), np.ones((4, 4)), p) == pytest.approx(expected, rel=1e-12)

    def test_sliding_window(self):
        x = np.random.default_rng(2).uniform(size=(12, 12))
        assert M.ssim(x, x, SsimParams(window="sliding")) == pytest.approx(1.0, abs=1e-9)
        assert M.ssim(x, 1 - x, SsimParams(window="sliding")) < 0

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            M.ssim(np.ones((4, 4)), np.ones((4, 5)))

    def test_invalid_params(self):
        with pytest.raises(MetricError):
            SsimParams(k1=0.0)


class TestKruskalWallis:
    def test_identical_groups(self):
        r = M.kruskal_wallis([[1, 1, 1], [1, 1, 1]])
        assert (r.statistic, r.pvalue) == (0.0, 1.0)

    def test_hand_ranked(self):
        # ranks 1..3 vs 4..6: H = 12/(6*7) * (6^2/3 + 15^2/3) - 3*7
        h = 12 / 42 * (36 / 3 + 225 / 3) - 21
        r = M.kruskal_wallis([[1, 2, 3], [4, 5, 6]], labels=["a", "b"])
        assert r.statistic == pytest.approx(h, abs=1e-12)
        assert r.dof == 1 and r.labels == ("a", "b")
        assert r.pvalue == pytest.approx(stats.chi2.sf(h, 1), rel=1e-12)

    def test_matches_scipy_with_ties(self):
        rng = np.random.default_rng(3)
        groups = [rng.integers(0, 5, size=n).astype(float) for n in (7, 9, 12)]
        r = M.kruskal_wallis(groups)
        ref = stats.kruskal(*groups)
        assert r.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert r.pvalue == pytest.approx(ref.pvalue, rel=1e-9)

    def test_monotone_invariance(self):
        rng = np.random.default_rng(4)
        groups = [rng.normal(size=10) for _ in range(3)]
        a = M.kruskal_wallis(groups).statistic
        b = M.kruskal_wallis([np.exp(3 * g) for g in groups]).statistic
        assert a == pytest.approx(b, abs=1e-12)

    def test_needs_groups(self):
        with pytest.raises(MetricError):
            M.kruskal_wallis([[1, 2, 3]])
        with pytest.raises(MetricError):
            M.kruskal_wallis([[1], [2, 3]])


class TestSummarize:
    def test_single_score(self):
        (row,) = M.summarize({"m": [0.4]})
        assert row.mean == row.median == 0.4

    def test_symmetric(self):
        (row,) = M.summarize({"m": [1, 2, 3, 4, 5]})
        assert row.mean == row.median == 3.0
        assert (row.q1, row.q3, row.minimum, row.maximum) == (2.0, 4.0, 1.0, 5.0)

    def test_undefined_excluded(self):
        (row,) = M.summarize({"m": [1.0, math.nan, 3.0]})
        assert row.count == 2 and row.undefined == 1 and row.mean == 2.0

    def test_report_means(self):
        report = M.MetricReport([M.InstanceScore("0", "a", 0.5, 1.0), M.InstanceScore("1", "a", math.nan, 2.0)])
        assert report.mean("a", "faithfulness") == 0.5
        assert report.rows[1].undefined
