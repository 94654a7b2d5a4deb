import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pzms.errors import SingularDesignError
from pzms.regress import Z975, t_pvalue, t_quantile, tsls_fit, wls_fit

from oracles import T975_DF9, T975_INF, dense_tsls, t_cdf_oracle, t_quantile_oracle


def _design(x):
    return np.column_stack([np.ones_like(x), x])


class TestWlsFit:
    def test_exact_line(self):
        x = np.arange(10.0)
        fit = wls_fit(_design(x), 2 + 3 * x)
        np.testing.assert_allclose(fit.coef, [2, 3], rtol=1e-12)
        assert np.abs(fit.vcov).max() < 1e-20

    def test_three_point_hand_example(self):
        fit = wls_fit(_design(np.array([0.0, 1.0, 2.0])), np.array([0.0, 1.0, 3.0]))
        assert fit.coef[1] == pytest.approx(1.5, rel=1e-12)
        assert fit.coef[0] == pytest.approx(-1 / 6, rel=1e-12)

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(50)
        y = 1 + x + rng.standard_normal(50)
        w = rng.uniform(0.5, 2, 50)
        a = wls_fit(_design(x), y, w)
        b = wls_fit(_design(x), y, 10 * w)
        np.testing.assert_allclose(b.coef, a.coef, rtol=1e-12)
        np.testing.assert_allclose(b.vcov, a.vcov, rtol=1e-10)

    def test_rank_deficiency_names_column(self):
        x = np.arange(6.0)
        X = np.column_stack([np.ones(6), x, 2 * x])
        with pytest.raises(SingularDesignError) as exc:
            wls_fit(X, x, names=["1", "x", "x2"])
        assert exc.value.column in ("x", "x2")

    def test_zero_column(self):
        with pytest.raises(SingularDesignError):
            wls_fit(np.column_stack([np.ones(4), np.zeros(4)]), np.arange(4.0))

    def test_single_cluster_flags_inference(self):
        x = np.arange(8.0)
        fit = wls_fit(_design(x), x + np.sin(x), clusters=np.zeros(8))
        assert not fit.inference_available
        assert np.isnan(fit.vcov).all()
        assert np.isfinite(fit.coef).all()

    def test_cluster_sandwich_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        n = 60
        x = rng.standard_normal(n)
        g = rng.integers(0, 12, n)
        y = 0.5 + 2 * x + rng.standard_normal(n)
        w = rng.uniform(0.5, 3, n)
        X = _design(x)
        fit = wls_fit(X, y, w, clusters=g)
        beta, vcov = dense_tsls(y, X, X, w, g)
        np.testing.assert_allclose(fit.coef, beta, rtol=1e-10)
        np.testing.assert_allclose(fit.vcov, vcov, rtol=1e-9)

    def test_one_row_per_cluster_is_hc1(self):
        rng = np.random.default_rng(4)
        n = 40
        x = rng.standard_normal(n)
        y = x + rng.standard_normal(n) * (1 + np.abs(x))
        X = _design(x)
        fit = wls_fit(X, y, clusters=np.arange(n))
        u = y - X @ fit.coef
        bread = np.linalg.inv(X.T @ X)
        hc0 = bread @ (X.T * u ** 2) @ X @ bread
        # G/(G-1) * (n-1)/(n-k) with G = n reduces to n/(n-k)
        np.testing.assert_allclose(fit.vcov, hc0 * n / (n - 2), rtol=1e-10)

    def test_vcov_symmetric_psd(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
        fit = wls_fit(X, rng.standard_normal(30), clusters=rng.integers(0, 6, 30))
        np.testing.assert_allclose(fit.vcov, fit.vcov.T)
        assert np.linalg.eigvalsh(fit.vcov).min() > -1e-14


class TestTslsFit:
    def test_endog_equal_instrument_is_ols(self):
        rng = np.random.default_rng(0)
        n = 80
        d = (rng.random(n) > 0.5).astype(float)
        x = rng.standard_normal(n)
        y = 1 + 0.4 * d + x + rng.standard_normal(n)
        iv = tsls_fit(y, d, _design(x), d[:, None])
        ols = wls_fit(np.column_stack([d, np.ones(n), x]), y)
        np.testing.assert_allclose(iv.coef, ols.coef, rtol=1e-10)
        np.testing.assert_allclose(iv.vcov, ols.vcov, rtol=1e-9)

    def test_wald_ratio_hand_example(self):
        z = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        t = np.array([0.0, 1.0, 0.0, 1.0, 1.0, 1.0])
        y = np.array([1.0, 2.0, 0.0, 3.0, 4.0, 2.0])
        fit = tsls_fit(y, t, np.ones((6, 1)), z[:, None])
        reduced = y[z == 1].mean() - y[z == 0].mean()     # 3 - 1 = 2
        first = t[z == 1].mean() - t[z == 0].mean()       # 1 - 1/3
        assert fit.coef[0] == pytest.approx(reduced / first, rel=1e-12)
        assert fit.coef[0] == pytest.approx(3.0, rel=1e-12)

    def test_matches_dense_oracle_overidentified(self):
        rng = np.random.default_rng(7)
        n = 120
        x = rng.uniform(-1, 1, n)
        z1 = (x >= 0).astype(float)
        z2 = z1 * x
        t = np.clip(0.2 + 0.5 * z1 + 0.3 * z2 + 0.2 * rng.standard_normal(n), 0, 1)
        y = 0.7 * t + x + rng.standard_normal(n)
        w = rng.uniform(1, 2, n)
        g = np.round(x * 20)
        exog = _design(x)
        fit = tsls_fit(y, t, exog, np.column_stack([z1, z2]), w, g)
        beta, vcov = dense_tsls(y, np.column_stack([t, exog]),
                                np.column_stack([exog, z1, z2]), w, g)
        np.testing.assert_allclose(fit.coef, beta, rtol=1e-9)
        np.testing.assert_allclose(fit.vcov, vcov, rtol=1e-8)

    def test_endog_in_span_reproduces_wls(self):
        rng = np.random.default_rng(8)
        n = 50
        x = rng.standard_normal(n)
        z = rng.standard_normal(n)
        t = 0.5 * z + 2 * x + 1
        y = t + x + rng.standard_normal(n)
        iv = tsls_fit(y, t, _design(x), z[:, None])
        ols = wls_fit(np.column_stack([t, np.ones(n), x]), y)
        np.testing.assert_allclose(iv.coef, ols.coef, rtol=1e-9)

    def test_irrelevant_instrument_is_singular(self):
        z = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
        t = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        y = np.arange(8.0)
        with pytest.raises(SingularDesignError):
            tsls_fit(y, t, np.ones((8, 1)), z[:, None])

    def test_collinear_instrument_dropped_with_warning(self):
        rng = np.random.default_rng(9)
        n = 40
        x = rng.standard_normal(n)
        z = rng.standard_normal(n)
        t = z + 0.1 * rng.standard_normal(n)
        y = t + rng.standard_normal(n)
        with pytest.warns(UserWarning, match="collinear"):
            fit = tsls_fit(y, t, _design(x), np.column_stack([z, 3 * x]))
        ref = tsls_fit(y, t, _design(x), z[:, None])
        np.testing.assert_allclose(fit.coef, ref.coef, rtol=1e-10)


class TestDistributions:
    def test_median_is_zero(self):
        for df in (1, 5, 30, math.inf):
            assert t_quantile(0.5, df) == pytest.approx(0.0, abs=1e-14)

    def test_normal_quantile_against_oracle(self):
        assert t_quantile(0.975) == pytest.approx(T975_INF, abs=1e-9)
        assert Z975 == pytest.approx(1.959964, abs=1e-6)

    def test_t9_against_oracle(self):
        assert t_quantile(0.975, 9) == pytest.approx(T975_DF9, abs=1e-9)
        assert t_quantile(0.975, 9) == pytest.approx(2.262157, abs=1e-6)

    def test_oracle_frozen_values(self):
        assert t_quantile_oracle(0.975, math.inf) == pytest.approx(T975_INF, abs=1e-12)
        assert t_quantile_oracle(0.975, 9) == pytest.approx(T975_DF9, abs=1e-12)

    def test_converges_to_normal(self):
        assert abs(t_quantile(0.975, 1e6) - 1.959964) < 1e-4

    def test_pvalue_inverts_quantile(self):
        for df in (3, 6, 12, math.inf):
            q = t_quantile(0.975, df)
            assert t_pvalue(q, df) == pytest.approx(0.05, rel=1e-10)
            assert t_pvalue(-q, df) == pytest.approx(0.05, rel=1e-10)

    def test_pvalue_against_oracle(self):
        assert t_pvalue(2.5, 7) == pytest.approx(2 * t_cdf_oracle(-2.5, 7), rel=1e-8)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_bad_probability(self, p):
        with pytest.raises(ValueError):
            t_quantile(p, 5)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.sampled_from([1, 2, 6, 40, math.inf]))
    def test_monotone_in_p(self, p, dp, df):
        assert t_quantile(p + dp, df) > t_quantile(p, df)
