import numpy as np
import pytest
from scipy import stats

from pzms.candidates import estimate, spec_from_model
from pzms.dataset import Dataset
from pzms.dgp import (DgpSpec, StylizedKind, analytic_llr_bias, beta_fit_mom, beta_from_moments,
                      fit_realistic_dgp, iteration_rng, sample_realistic, stylized_cef,
                      stylized_dgp, stylized_grid)
from pzms.errors import ConfigError

from oracles import LLR_BIAS_CUBIC_B100, llr_bias_oracle, projection_intercept_oracle


class TestStylized:
    def test_linear_values(self):
        assert stylized_cef("linear", 400) == 1.0
        assert stylized_cef("linear", -100) == -0.25

    def test_cosine_values(self):
        assert stylized_cef("cosine", 0) == pytest.approx(0.5)
        assert stylized_cef("cosine", 200) == pytest.approx(-0.5)

    def test_sine_and_powers(self):
        assert stylized_cef("sine", 100) == pytest.approx(0.5)
        assert stylized_cef("quadratic", -400) == 1.0
        assert stylized_cef("cubic", -400) == -1.0

    def test_grid(self):
        x = stylized_grid()
        assert x.size == 900 and x[0] == -99.5 and x[-1] == 799.5

    def test_noiseless_equals_cef(self):
        ds = stylized_dgp(StylizedKind("quadratic", sigma=0.0), iteration_rng(0, 0))
        np.testing.assert_array_equal(ds.y, 0.3 * (ds.x > 0) + stylized_cef("quadratic", ds.x))

    def test_short_zone_keeps_rows(self):
        k = StylizedKind("linear", zone="short")
        assert stylized_dgp(k, iteration_rng(0, 0)).n == 900
        assert (k.zone_end, k.max_bw) == (400.0, 200.0)

    def test_noise_sd(self):
        k = StylizedKind("linear", sigma=0.1)
        resid = np.concatenate([
            stylized_dgp(k, iteration_rng(1, i)).y - 0.3 * (stylized_grid() > 0)
            - stylized_cef("linear", stylized_grid()) for i in range(20)])
        assert np.std(resid) == pytest.approx(0.1, rel=0.03)

    @pytest.mark.parametrize("bad", [dict(kind="septic"), dict(sigma=-1), dict(zone="mid")])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            StylizedKind(**bad)


class TestDgpSpec:
    def test_cef_jump_and_kink(self):
        d = DgpSpec(poly=(1, 2, 0, 0, 0, 0), jump=0.5, kink=3.0)
        np.testing.assert_allclose(d.cef([-1.0, 0.0, 1.0]), [-1.0, 1.0, 6.5])

    def test_json_round_trip(self):
        d = DgpSpec(poly=(0.1, 0, 0.2, 0, 0, 0.01), jump=0.3, sigma=0.2,
                    x_dist={"kind": "beta", "a": 2.0, "b": 3.0, "lo": -5.0, "hi": 9.0}, n=50)
        back = DgpSpec.from_json(d.to_json())
        assert back == d and back.spec_hash() == d.spec_hash()

    def test_hash_changes(self):
        assert DgpSpec(jump=0.1).spec_hash() != DgpSpec(jump=0.2).spec_hash()

    @pytest.mark.parametrize("bad", [dict(poly=(1, 2)), dict(sigma=-0.1),
                                     dict(x_dist={"kind": "normal", "lo": 0, "hi": 1}),
                                     dict(x_dist={"kind": "uniform", "lo": 1, "hi": 0}),
                                     dict(x_dist={"kind": "beta", "a": 0, "b": 1, "lo": 0,
                                                  "hi": 1})])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            DgpSpec(**bad)


class TestSampling:
    def test_deterministic_per_iteration(self):
        d = DgpSpec(sigma=0.3, n=100)
        a = sample_realistic(d, iteration_rng(5, 2))
        b = sample_realistic(d, iteration_rng(5, 2))
        c = sample_realistic(d, iteration_rng(5, 3))
        np.testing.assert_array_equal(a.y, b.y)
        assert not np.array_equal(a.y, c.y)

    def test_uniform_mean(self):
        d = DgpSpec(x_dist={"kind": "uniform", "lo": 0.0, "hi": 12.0}, n=40_000)
        x = sample_realistic(d, iteration_rng(0, 0)).x
        # mean 6, SD of the mean sqrt(12) / sqrt(n)
        assert abs(x.mean() - 6.0) < 4 * np.sqrt(12.0 / 40_000)

    def test_beta_support(self):
        d = DgpSpec(x_dist={"kind": "beta", "a": 2.0, "b": 5.0, "lo": -10.0, "hi": 30.0}, n=5000)
        x = sample_realistic(d, iteration_rng(0, 1)).x
        assert x.min() >= -10 and x.max() <= 30
        assert x.mean() == pytest.approx(-10 + 40 * 2 / 7, abs=0.5)


class TestBetaMoments:
    def test_uniform_gives_one_one(self):
        a, b = beta_from_moments(0.5, 1 / 12)
        assert a == pytest.approx(1.0, rel=1e-12) and b == pytest.approx(1.0, rel=1e-12)

    def test_fit_on_uniform_grid(self):
        a, b, lo, hi = beta_fit_mom(np.linspace(0, 1, 100_001))
        assert a == pytest.approx(1.0, abs=0.01) and b == pytest.approx(1.0, abs=0.01)
        assert lo < 0 and hi > 1

    def test_recovers_beta_2_5(self):
        rng = np.random.default_rng(0)
        x = rng.beta(2, 5, 100_000)
        m, v = x.mean(), x.var()
        a, b = beta_from_moments(m, v)
        assert a == pytest.approx(2, rel=0.05) and b == pytest.approx(5, rel=0.05)

    def test_padding_and_clamp(self):
        a, b, lo, hi = beta_fit_mom([0.0, 0.0, 0.0, 0.0, 1.0])
        assert lo == pytest.approx(-0.001) and hi == pytest.approx(1.001)
        assert 0.01 <= a <= 1e6 and 0.01 <= b <= 1e6

    def test_degenerate(self):
        with pytest.raises(ValueError):
            beta_fit_mom([2.0, 2.0, 2.0])
        with pytest.raises(ValueError):
            beta_from_moments(0.5, 0.0)


class TestFitRealistic:
    def _ds(self, y_fn, n=2000, seed=0):
        x = np.random.default_rng(seed).uniform(-50, 150, n)
        return Dataset(y=y_fn(x), x=x)

    def test_exact_round_trip(self):
        true = DgpSpec(poly=(0.2, -0.5, 0.3, 0.1, -0.05, 0.02), jump=0.4, kink=-0.3,
                       x_dist={"kind": "uniform", "lo": -50.0, "hi": 150.0}, n=2000,
                       x_scale=150.0)
        ds = sample_realistic(true, iteration_rng(0, 0))
        fit = fit_realistic_dgp(ds)
        scale = np.max(np.abs(ds.x))
        grid = np.linspace(-50, 150, 401)
        np.testing.assert_allclose(fit.cef(grid), true.cef(grid), atol=1e-6)
        assert fit.jump == pytest.approx(0.4, abs=1e-6)
        assert fit.kink * 150.0 / scale == pytest.approx(-0.3, abs=1e-6)
        assert fit.sigma < 1e-6

    def test_quadratic_data(self):
        fit = fit_realistic_dgp(self._ds(lambda x: (x / 100) ** 2))
        assert abs(fit.jump) < 1e-8 and abs(fit.kink) < 1e-8
        grid = np.linspace(-50, 150, 51)
        np.testing.assert_allclose(fit.cef(grid), (grid / 100) ** 2, atol=1e-9)

    def test_null_data(self):
        rng = np.random.default_rng(1)
        fit = fit_realistic_dgp(self._ds(lambda x: 0.1 * rng.standard_normal(x.size)))
        # the jump SE of a global quintic fit at this noise level is about 0.02
        assert abs(fit.jump) < 0.1
        assert fit.sigma == pytest.approx(0.1, rel=0.05)
        assert fit.x_dist["kind"] == "beta" and fit.n == 2000

    def test_one_sided(self):
        x = np.arange(1.0, 30.0)
        with pytest.raises(ConfigError):
            fit_realistic_dgp(Dataset(y=x, x=x))

    def test_too_few_values(self):
        x = np.tile(np.arange(-3.0, 3.0), 4)
        with pytest.raises(ConfigError):
            fit_realistic_dgp(Dataset(y=x, x=x))


class TestBiasOracle:
    def test_projection_intercept(self):
        assert projection_intercept_oracle(100.0) == pytest.approx(-100.0 ** 3 / 5, rel=1e-6)

    def test_analytic_matches_numeric(self):
        theta3 = 1 / 400 ** 3
        a = analytic_llr_bias(theta3, 100)
        assert a == pytest.approx(LLR_BIAS_CUBIC_B100, rel=1e-12)
        assert llr_bias_oracle(theta3, 100) == pytest.approx(a, rel=1e-4)

    @pytest.mark.parametrize("b", [20.0, 50.0, 200.0])
    def test_scaling(self, b):
        theta3 = 1 / 400 ** 3
        assert analytic_llr_bias(theta3, b) == pytest.approx(llr_bias_oracle(theta3, b), rel=1e-4)

    def test_sign_follows_theta(self):
        assert analytic_llr_bias(1.0, 10) < 0 < analytic_llr_bias(-1.0, 10)

    def test_estimator_on_dense_grid(self):
        # dense noiseless cubic: the fitted jump minus 0.3 equals the oracle
        x = np.arange(-100, 100, 0.05) + 0.025
        y = 0.3 * (x >= 0) + (x / 400) ** 3
        r = estimate(spec_from_model(1, 100), Dataset(y=y, x=x), 0.0)
        assert r.tau - 0.3 == pytest.approx(LLR_BIAS_CUBIC_B100, rel=1e-3)

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            analytic_llr_bias(1.0, 0)

    def test_uniform_moment_projection_by_scipy(self):
        # independent check: E[x^3] and E[x^4] of U(0, b) give the same intercept
        b = 100.0
        u = stats.uniform(0, b)
        m1, m2, m3, m4 = (u.moment(k) for k in (1, 2, 3, 4))
        slope = (m4 - m1 * m3) / (m2 - m1 ** 2)
        assert m3 - slope * m1 == pytest.approx(-b ** 3 / 5, rel=1e-10)
