import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from jumpsde import analysis
from jumpsde.analysis import (check_assumptions, convergence_study, distribution_compare,
                              fit_order, ito_residual, ks_critical, ks_statistic,
                              mean_count_ci, poisson_chi_square)
from jumpsde.drivers import make_noise_plan, path_streams, sample_jump_train
from jumpsde.errors import NumericalBlowUp
from jumpsde.presets import build_model
from jumpsde.solver import SchemeConfig, em_direct, em_transformed, simulate_paths
from jumpsde.transform import build_transform

from conftest import sign_model
from oracles import ks_brute, poisson_pmf

SPHERE = {"type": "level_set", "preset": "sphere", "center": [0.0, 0.0], "radius": 1.0}


# -- assumption checks ---------------------------------------------------------------

def test_degenerate_diffusion_fails_non_parallelity():
    rep = check_assumptions(sign_model(sigma=0.0))
    assert not rep.passed
    cl = rep.clause("non_parallelity")
    assert cl.value == 0.0 and not cl.passed


def test_identity_diffusion_passes_for_c0_up_to_one():
    m = build_model("threshold_affine", {"dim": 2, "sigma": 1.0})
    rep = check_assumptions(m, c0=1.0)
    assert rep.clause("non_parallelity").value == pytest.approx(1.0)
    assert rep.passed
    assert not check_assumptions(m, c0=1.5).passed


def test_sign_preset_alpha_bound_is_one():
    rep = check_assumptions(build_model("sign_1d"))
    assert rep.clause("alpha_bound").value == 1.0
    assert rep.clause("kappa").value <= 0.5
    assert rep.c == 0.5


def test_report_is_deterministic_and_serialisable():
    m = build_model("cpp_threshold_2d")
    a, b = check_assumptions(m, seed=4), check_assumptions(m, seed=4)
    assert a.to_dict() == b.to_dict()
    text = a.to_text()
    assert text.startswith("overall: PASS")
    assert "non_parallelity" in text


def test_loc_bound_caveat_for_affine_coefficients():
    rep = check_assumptions(build_model("cpp_threshold_2d"))
    assert "unbounded" in rep.clause("loc_bound").note
    rep = check_assumptions(build_model("sign_1d"))
    assert "unbounded" not in rep.clause("loc_bound").note


def test_certification_failure_is_a_report_entry():
    m = sign_model()
    m.drift.minus.b[:] = 9.0
    rep = check_assumptions(m, c=1.0)
    assert not rep.clause("kappa").passed
    assert not rep.passed


def test_level_set_model_is_checked():
    m = build_model("threshold_affine", {"dim": 2, "x0": [1.0, 0.0]}, SPHERE)
    rep = check_assumptions(m, epsilon0=0.5, n_samples=500)
    assert rep.clause("ass_mu").informational
    assert rep.passed


# -- Ito residual ----------------------------------------------------------------------

def _identity_triple(d):
    eye = np.eye(d)
    return (lambda y: np.asarray(y, float),
            lambda y: np.broadcast_to(eye, np.shape(y)[:-1] + (d, d)),
            lambda y: np.zeros(np.shape(y)[:-1] + (d, d, d)))


def test_residual_vanishes_for_identity_with_continuous_drift():
    m = build_model("cpp_threshold_2d", {"b_plus": [0.2, 0.1], "b_minus": [0.2, 0.1]})
    tr = build_transform(m, 1.0)
    path = em_transformed(m, tr, SchemeConfig(1 / 64), make_noise_plan(m, 2, 0, 64))
    for k in range(2):
        assert np.all(ito_residual(tr, path, k, _identity_triple(2)) == 0.0)
        assert np.all(ito_residual(tr, path, k, "G") == 0.0)


def test_residual_is_exactly_zero_in_the_identity_region(sign_1d):
    m, tr = sign_1d
    far = build_model("sign_1d", {"x0": [3.0], "sigma": 0.1, "lambda": 0.0})
    path = em_direct(far, SchemeConfig(1 / 64), make_noise_plan(far, 1, 0, 64))
    assert np.all(np.abs(path.x) > tr.c)
    assert np.all(ito_residual(tr, path, 0, "G") == 0.0)


def _quadratic():
    return (lambda y: np.asarray(y) ** 2,
            lambda y: (2 * np.asarray(y))[..., None],
            lambda y: np.full(np.shape(y) + (1, 1), 2.0))


def _cubic():
    return (lambda y: np.asarray(y) ** 3,
            lambda y: (3 * np.asarray(y) ** 2)[..., None],
            lambda y: (6 * np.asarray(y))[..., None, None])


def test_quadratic_test_function_has_roundoff_residual(sign_1d):
    m = build_model("poisson_1d", {"lambda": 0.0})
    _, tr = sign_1d
    path = em_direct(m, SchemeConfig(1 / 256), make_noise_plan(m, 1, 0, 256))
    assert np.max(np.abs(ito_residual(tr, path, 0, _quadratic()))) <= 1e-12


def test_cubic_residual_is_first_order(sign_1d):
    m = build_model("poisson_1d", {"lambda": 0.0})
    _, tr = sign_1d
    hs, errs = [], []
    for k in (5, 6, 7, 8):
        n = 2 ** k
        b = simulate_paths(m, SchemeConfig(1 / n, "direct_em"), 3, 400, plan_steps=256)
        errs.append(np.mean([abs(ito_residual(tr, b.path(i), 0, _cubic())[-1])
                             for i in range(400)]))
        hs.append(1 / n)
    slope, _ = fit_order(hs, errs)
    assert slope == pytest.approx(1.0, abs=0.2)


def test_residual_with_jumps_and_inverse(sign_1d):
    m, tr = sign_1d
    plan = make_noise_plan(m, 5, 3, 512)
    path = em_transformed(m, tr, SchemeConfig(1 / 512), plan)
    r_g = ito_residual(tr, path, 0, "G")
    r_inv = ito_residual(tr, path, 0, "G_inv")
    assert r_g.shape == path.t.shape and r_g[0] == 0.0
    assert abs(r_g[-1]) < 0.1 and abs(r_inv[-1]) < 0.1


def test_residual_argument_checks(sign_1d):
    m, tr = sign_1d
    path = em_direct(m, SchemeConfig(1 / 8), make_noise_plan(m, 1, 0, 8))
    with pytest.raises(IndexError):
        ito_residual(tr, path, 1)
    with pytest.raises(ValueError):
        ito_residual(tr, path, 0, "G_inv")
    with pytest.raises(ValueError):
        ito_residual(tr, path, 0, "exp")


# -- convergence -------------------------------------------------------------------------

def test_fit_order_recovers_synthetic_slope():
    h = 2.0 ** -np.arange(3, 8)
    slope, icpt = fit_order(h, 3.0 * h ** 0.75)
    assert slope == pytest.approx(0.75) and icpt == pytest.approx(np.log2(3.0))


def test_constant_coefficients_are_exact():
    m = build_model("threshold_affine", {"dim": 1, "A_plus": [[0.0]], "A_minus": [[0.0]],
                                         "b_plus": [0.3], "b_minus": [0.3], "lambda": 2.0,
                                         "jump": {"intercept": [0.5]}})
    tr = build_transform(m, 1.0)
    rep = convergence_study(m, tr, "direct_em", [1 / 4, 1 / 8, 1 / 16], 50, 1, h_ref=1 / 64)
    assert rep.exact and rep.order == "exact"
    assert all(lv.error <= 1e-12 for lv in rep.levels)


def test_convergence_report_shape(sign_1d):
    m, tr = sign_1d
    rep = convergence_study(m, tr, "transformed_em", [1 / 8, 1 / 16, 1 / 32], 200, 2,
                            h_ref=1 / 256)
    assert [lv.h for lv in rep.levels] == [1 / 8, 1 / 16, 1 / 32]
    assert all(np.isfinite(lv.error) and lv.ci_lo <= lv.error <= lv.ci_hi for lv in rep.levels)
    assert rep.paths == 200 and np.isfinite(rep.slope)
    assert rep.to_dict()["slope"] == rep.slope


def test_convergence_rejects_bad_levels(sign_1d):
    m, tr = sign_1d
    with pytest.raises(ValueError):
        convergence_study(m, tr, "direct_em", [1 / 8, 1 / 16], 10, 1, h_ref=1 / 64)
    with pytest.raises(ValueError):
        convergence_study(m, tr, "direct_em", [1 / 3, 1 / 8, 1 / 16], 10, 1, h_ref=1 / 64)


def test_blow_up_level_is_excluded(sign_1d, monkeypatch):
    m, tr = sign_1d
    real = analysis.simulate_paths

    def flaky(model, cfg, *args, **kwargs):
        if cfg.h == 1 / 4:
            raise NumericalBlowUp("non-finite state after step 2", step=2)
        return real(model, cfg, *args, **kwargs)

    monkeypatch.setattr(analysis, "simulate_paths", flaky)
    rep = convergence_study(m, tr, "direct_em", [1 / 4, 1 / 8, 1 / 16, 1 / 32], 50, 1,
                            h_ref=1 / 64)
    assert rep.levels[0].excluded and "step 2" in rep.levels[0].note
    assert np.isfinite(rep.slope)


# -- law comparison ------------------------------------------------------------------------

def test_ks_trivial_cases():
    a = np.random.default_rng(0).normal(size=1000)
    assert distribution_compare(a, a).statistics[0] == 0.0
    assert distribution_compare(np.zeros(1000), np.ones(1000)).statistics[0] == 1.0
    with pytest.raises(ValueError):
        distribution_compare(np.empty(0), a)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30),
       st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_ks_statistic_matches_brute_force_and_is_symmetric(a, b):
    s = ks_statistic(a, b)
    assert s == pytest.approx(ks_brute(a, b), abs=1e-12)
    assert s == ks_statistic(b, a)


def test_ks_against_scipy(rng):
    a, b = rng.normal(size=700), rng.normal(0.1, 1.0, size=900)
    assert ks_statistic(a, b) == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-12)


def test_ks_critical_value_frozen():
    assert ks_critical(10000, 10000, 0.01) == pytest.approx(0.023018074130013652, rel=1e-12)
    res = distribution_compare(np.zeros((10, 2)), np.zeros((12, 2)), alpha=0.01)
    assert res.critical == pytest.approx(ks_critical(10, 12, 0.005))


def test_ks_detects_a_shift(rng):
    assert distribution_compare(rng.normal(size=5000), rng.normal(size=5000)).passed
    assert not distribution_compare(rng.normal(size=5000), rng.normal(0.2, 1, 5000)).passed


def test_poisson_chi_square(rng):
    counts = np.array([len(sample_jump_train(1.5, build_model("sign_1d").marks, 2.0,
                                             path_streams(1, i)[0])) for i in range(20000)])
    good = poisson_chi_square(counts, 3.0)
    assert good.passed
    assert not poisson_chi_square(counts, 3.3).passed
    lo, hi = mean_count_ci(counts, 3.0)
    assert lo <= counts.mean() <= hi


def test_chi_square_expected_counts_match_pmf_oracle():
    counts = np.array([0, 1, 1, 2, 2, 2, 3, 3, 4, 7])
    res = poisson_chi_square(counts, 2.0, min_expected=0.0)
    n = counts.size
    obs = np.bincount(counts, minlength=8).astype(float)
    exp = np.array([n * poisson_pmf(k, 2.0) for k in range(8)])
    exp[-1] += n - exp.sum()
    assert res.statistic == pytest.approx(float(np.sum((obs - exp) ** 2 / exp)), rel=1e-10)
    assert res.dof == 7
