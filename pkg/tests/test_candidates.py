import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pzms.candidates import (FORMS, MODEL_IDS, CandidateGrid, CandidateSpec, bandwidth_profile,
                             build_design, enumerate_candidates, estimate, form_def,
                             spec_from_model)
from pzms.dataset import Dataset, ShiftRule
from pzms.errors import DegenerateWindowError, ThinWindowError
from pzms.regress import Z975, wls_fit

from oracles import llr_bias_oracle
from synth import fuzzy_application, linear_jump


class TestForms:
    def test_fourteen_models(self):
        assert sorted(MODEL_IDS) == list(range(1, 15))
        assert len(FORMS) == 14

    def test_family_validity(self):
        with pytest.raises(ValueError):
            form_def("RDD", "cubic")
        with pytest.raises(ValueError):
            form_def("RDD", "interacted-quadratic")
        assert form_def("CohortIV", "cubic").model_id == 14
        assert form_def("RKD", "interacted-quadratic").model_id == 11

    def test_spec_rejects_invalid(self):
        with pytest.raises(ValueError):
            CandidateSpec("RDD", "cubic", 10, 10)
        with pytest.raises(ValueError):
            CandidateSpec("RDD", "linear", 0, 10)
        with pytest.raises(ValueError):
            CandidateSpec("RDD", "linear", 10, 10, kernel="epanechnikov")

    def test_spec_round_trip_and_hash(self):
        s = spec_from_model(6, 100, 200, kernel="triangular")
        back = CandidateSpec.from_dict(s.to_dict())
        assert back == s
        assert back.spec_hash() == s.spec_hash()
        assert spec_from_model(6, 100, 201).spec_hash() != s.spec_hash()
        assert s.label == "m06 bw100/200 tri"


class TestEnumerate:
    def test_application_grid_size(self):
        grid = CandidateGrid(models=range(1, 15), bandwidths=range(35, 366))
        assert len(enumerate_candidates(grid)) == 4634

    def test_small_grid(self):
        grid = CandidateGrid(models=(1, 3), bandwidths=(50,))
        assert len(enumerate_candidates(grid)) == 2

    def test_invalid_form_filtered_with_warning(self):
        grid = CandidateGrid(families=("RDD", "CohortIV"), forms=("cubic",), bandwidths=(50,))
        with pytest.warns(UserWarning, match="not valid"):
            specs = enumerate_candidates(grid)
        assert [s.family for s in specs] == ["CohortIV"]

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            enumerate_candidates(CandidateGrid(models=(1,), bandwidths=()))

    def test_deterministic_order(self):
        grid = CandidateGrid(models=(3, 1), bandwidths=(60, 30), kernels=("uniform", "triangular"))
        specs = enumerate_candidates(grid)
        keys = [(s.model_id, s.bw_left, s.bw_right, s.kernel) for s in specs]
        assert keys[0] == (1, 30, 30, "uniform")
        assert [k[0] for k in keys] == [1] * 4 + [3] * 4
        assert enumerate_candidates(grid) == specs

    def test_symmetric_with_left_cap(self):
        grid = CandidateGrid(models=(1,), bandwidths=(50, 100, 150, 200), left_cap=100)
        pairs = [(s.bw_left, s.bw_right) for s in enumerate_candidates(grid)]
        assert pairs == [(50, 50), (100, 100), (100, 150), (100, 200)]

    def test_two_sided_grid(self):
        grid = CandidateGrid(models=(1,), symmetric=False, bw_left=(50, 100), bw_right=(60, 70, 80))
        assert len(enumerate_candidates(grid)) == 6


class TestBuildDesign:
    ds = linear_jump(lo=-100, hi=100, sigma=0.1)

    def test_model1_columns(self):
        d = build_design(spec_from_model(1, 50), self.ds, 0.0)
        assert d.exog_names == ["1", "X", "X*D"]
        assert d.instrument_names == ["D"]
        np.testing.assert_array_equal(d.instruments[:, 0], (d.u >= 0).astype(float))

    def test_model6_mixed_polynomial(self):
        d = build_design(spec_from_model(6, 50), self.ds, 0.0)
        assert d.instrument_names == ["D", "X*D"]
        left = d.u < 0
        x2 = d.exog[:, 2]
        # quadratic term only on the left of the threshold
        assert np.all(x2[~left] == 0) and np.all(x2[left] > 0)
        np.testing.assert_allclose(x2[left], (d.u[left] / d.scale) ** 2)

    def test_model12_cohort_dummies(self):
        d = build_design(spec_from_model(12, 90), self.ds, 0.0)
        assert d.exog_names == ["1", "X"]
        # bins of width 30 anchored at k: [-90,-60), ..., [60,90); one dropped
        assert d.instruments.shape[1] == 5
        assert all(n.startswith("bin[") for n in d.instrument_names)

    def test_window_convention(self):
        d = build_design(spec_from_model(1, 10), self.ds, 0.0)
        assert d.u.min() == -10 and d.u.max() == 9

    def test_thin_window(self):
        with pytest.raises(ThinWindowError):
            build_design(spec_from_model(3, 4), self.ds, 0.0)

    def test_degenerate_window(self):
        ds = Dataset(y=np.zeros(6), x=np.array([0.0, 0.0, 0.0, 1.0, 2.0, 3.0]))
        with pytest.raises((DegenerateWindowError, ThinWindowError)):
            build_design(spec_from_model(1, 5), ds, 0.0)

    def test_triangular_weights(self):
        d = build_design(spec_from_model(1, 20, kernel="triangular"), self.ds, 0.0)
        np.testing.assert_allclose(d.weights, np.maximum(0, 1 - np.abs(d.u) / 20))

    def test_shifted_rule_treatment(self):
        ds = fuzzy_application(seed=1, lo=-100, hi=300)
        d = build_design(spec_from_model(1, 50), ds, 100.0, ShiftRule("shifted-aux", 0.0))
        np.testing.assert_array_equal(d.endog, (ds.z[d.rows] >= 100).astype(float))


class TestEstimate:
    def test_exact_step(self):
        x = np.arange(-50.0, 50.0)
        ds = Dataset(y=(x >= 0).astype(float), x=x)
        for m in (1, 2, 3):
            r = estimate(spec_from_model(m, 40), ds)
            assert r.tau == pytest.approx(1.0, abs=1e-12)
            assert r.se == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.parametrize("model", [1, 2, 3])
    @pytest.mark.parametrize("bw", [20, 60, 100])
    def test_linear_with_jump_recovered(self, model, bw):
        ds = linear_jump(lo=-150, hi=150)
        assert estimate(spec_from_model(model, bw), ds).tau == pytest.approx(0.3, abs=1e-10)

    def test_cubic_bias_matches_oracle(self):
        x = np.arange(-100.0, 100.0, 0.01) + 0.005
        ds = Dataset(y=(x / 400.0) ** 3, x=x)
        tau = estimate(spec_from_model(1, 100), ds).tau
        assert tau == pytest.approx(llr_bias_oracle(1 / 400 ** 3, 100), abs=1e-8)
        assert tau == pytest.approx(-0.00625, abs=1e-7)

    def test_ci_is_normal_interval(self):
        ds = linear_jump(sigma=0.2, seed=3)
        r = estimate(spec_from_model(1, 80), ds)
        assert r.ci_low == pytest.approx(r.tau - Z975 * r.se)
        assert r.ci_high == pytest.approx(r.tau + Z975 * r.se)
        assert r.ci_low <= r.tau <= r.ci_high
        assert (r.n_left, r.n_right) == (80, 80)

    @pytest.mark.parametrize("model", [1, 2, 3])
    def test_sharp_tsls_equals_wls(self, model):
        ds = linear_jump(sigma=0.3, seed=model)
        spec = spec_from_model(model, 70)
        d = build_design(spec, ds, 0.0)
        X = np.column_stack([d.endog, d.exog])
        ols = wls_fit(X, d.y, d.weights, d.clusters)
        r = estimate(spec, ds)
        assert r.tau == pytest.approx(ols.coef[0], rel=1e-10)
        assert r.se == pytest.approx(ols.se[0], rel=1e-8)

    @pytest.mark.parametrize("model", range(1, 15))
    def test_shift_and_scale(self, model):
        ds = fuzzy_application(seed=model, lo=-300, hi=300, n_per=2)
        spec = spec_from_model(model, 150)
        base = estimate(spec, ds)
        shifted = estimate(spec, ds.with_y(ds.y + 5.0))
        scaled = estimate(spec, ds.with_y(-3.0 * ds.y))
        assert shifted.tau == pytest.approx(base.tau, rel=1e-8, abs=1e-10)
        assert scaled.tau == pytest.approx(-3.0 * base.tau, rel=1e-8)
        assert scaled.se == pytest.approx(3.0 * base.se, rel=1e-8)

    def test_quadratic_cef_symmetric_window_is_unbiased(self):
        x = np.arange(-100.0, 100.0) + 0.5
        ds = Dataset(y=(x / 100.0) ** 2, x=x)
        assert estimate(spec_from_model(1, 60), ds).tau == pytest.approx(0.0, abs=1e-12)

    def test_triangular_converges_to_uniform(self):
        ds = linear_jump(lo=-40, hi=40, sigma=0.5, seed=2)
        uni = estimate(spec_from_model(1, 40), ds).tau
        # the window is fixed by the data range; a huge triangular bandwidth
        # gives nearly flat weights inside it
        tri = estimate(spec_from_model(1, 1e7, kernel="triangular"), ds).tau
        assert tri == pytest.approx(uni, abs=1e-5)

    def test_zero_kernel_weight_rows_dropped(self):
        ds = linear_jump(sigma=0.1)
        r = estimate(spec_from_model(1, 30, kernel="triangular"), ds)
        assert np.isfinite(r.se)

    def test_unit_weights_toggle(self):
        ds = linear_jump(sigma=0.1, w=np.linspace(1, 3, 400))
        a = estimate(CandidateSpec("RDD", "linear", 50, 50, use_row_weights=False), ds)
        b = estimate(CandidateSpec("RDD", "linear", 50, 50), ds.subset(np.ones(ds.n, bool)))
        plain = Dataset(y=ds.y, x=ds.x)
        c = estimate(CandidateSpec("RDD", "linear", 50, 50), plain)
        assert a.tau == pytest.approx(c.tau, rel=1e-12)
        assert b.tau != pytest.approx(c.tau, rel=1e-6)

    def test_covariates_enter_design(self):
        rng = np.random.default_rng(0)
        x = np.arange(-100.0, 100.0)
        c = rng.standard_normal(x.size)
        y = 0.3 * (x >= 0) + 2.0 * c + 0.01 * rng.standard_normal(x.size)
        ds = Dataset(y=y, x=x, cov=c[:, None], cov_names=("c",))
        with_c = estimate(CandidateSpec("RDD", "linear", 80, 80, covariates=("c",)), ds)
        without = estimate(CandidateSpec("RDD", "linear", 80, 80), ds)
        assert abs(with_c.tau - 0.3) < 0.01
        assert with_c.se < without.se


class TestBandwidthProfile:
    def test_constant_on_exact_linear(self):
        rows, notes = bandwidth_profile(linear_jump(), "RDD", "linear", [20, 50, 100])
        assert [r[0] for r in rows] == [20, 50, 100]
        for r in rows:
            assert r[2] == pytest.approx(0.3, abs=1e-10)

    def test_infeasible_skipped_with_note(self):
        rows, notes = bandwidth_profile(linear_jump(), "RDD", "quadratic", [3, 50, 150])
        assert len(rows) == 2 and len(notes) == 1
        assert [r[0] for r in rows] == sorted(r[0] for r in rows)

    def test_cubic_bias_grows_with_bandwidth(self):
        x = np.arange(-200.0, 200.0, 0.05) + 0.025
        ds = Dataset(y=(x / 400.0) ** 3, x=x)
        rows, _ = bandwidth_profile(ds, "RDD", "linear", [50, 75, 100])
        mags = [abs(r[2]) for r in rows]
        assert mags[0] < mags[1] < mags[2]
        np.testing.assert_allclose(mags, [0.4 * b ** 3 / 400 ** 3 for b in (50, 75, 100)],
                                   rtol=1e-4)

    def test_empty_feasible_set(self):
        with pytest.raises(ValueError):
            bandwidth_profile(linear_jump(), "RDD", "linear", [1, 2])


class TestWeightInvariance:
    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(1, 14))
    def test_weight_scale(self, c, model):
        ds = fuzzy_application(seed=3, lo=-200, hi=200, n_per=1)
        w = np.linspace(1, 2, ds.n)
        a = Dataset(y=ds.y, x=ds.x, t=ds.t, z=ds.z, w=w)
        b = Dataset(y=ds.y, x=ds.x, t=ds.t, z=ds.z, w=c * w)
        spec = spec_from_model(model, 120)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ra, rb = estimate(spec, a), estimate(spec, b)
        assert rb.tau == pytest.approx(ra.tau, rel=1e-9, abs=1e-12)
        assert rb.se == pytest.approx(ra.se, rel=1e-7)
