import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, special, stats

from gmmreg.cost import CostModel, OutlierModel
from gmmreg.credibility import (TrialRecord, chi2_bounds, credible_reference, chi2_cdf, chi2_quantile, gamma_p, nci, nees, nees_test,
                                run_campaign)
from gmmreg.optim import OptimizerConfig
from gmmreg.scenario import ScenarioSpec


def quadrature_quantile(p, k):
    """Oracle: adaptive quadrature of the chi-square density, inverted by root finding."""
    dens = lambda x: x ** (k / 2 - 1) * math.exp(-x / 2) / (2 ** (k / 2) * math.gamma(k / 2))  # noqa: E731
    cdf = lambda x: integrate.quad(dens, 0, x, epsabs=1e-13, epsrel=1e-13, limit=200)[0]  # noqa: E731
    return optimize.brentq(lambda x: cdf(x) - p, 1e-9, 100.0, xtol=1e-12)


def test_nees_examples():
    assert nees(TrialRecord([1.0, 2.0, 0.5], np.eye(3), [1.0, 2.0, 0.5])) == 0.0
    assert nees(TrialRecord([2.0 * 0.3], [[0.09]], [0.0])) == pytest.approx(4.0)
    assert nees(TrialRecord([1.0, 0, 0], np.diag([4.0, 1, 1]), [0.0, 0, 0])) == pytest.approx(0.25)


def test_nees_singular_and_shape_errors():
    with pytest.raises(np.linalg.LinAlgError):
        nees(TrialRecord([1.0, 0.0], np.zeros((2, 2)), [0.0, 0.0]))
    with pytest.raises(ValueError):
        TrialRecord([1.0, 0.0], np.eye(3), [0.0, 0.0])


def test_nees_invariant_under_reparameterisation(rng):
    for _ in range(20):
        B = rng.normal(size=(3, 3))
        S = B @ B.T + 0.1 * np.eye(3)
        e = rng.normal(size=3)
        T = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        a = nees(TrialRecord(e, S, np.zeros(3)))
        b = nees(TrialRecord(T @ e, T @ S @ T.T, np.zeros(3)))
        assert abs(a - b) <= 1e-10 * max(1.0, a)


def test_chi2_against_quadrature_oracle():
    assert abs(chi2_quantile(0.95, 3) - 7.8147) < 1e-3
    assert abs(chi2_quantile(0.95, 3) - quadrature_quantile(0.95, 3)) < 1e-8
    assert abs(chi2_quantile(0.5, 1) - 0.4549) < 1e-3
    assert abs(chi2_quantile(0.5, 1) - quadrature_quantile(0.5, 1)) < 1e-8


@pytest.mark.parametrize("dof", [1, 2, 3, 7, 30, 300, 3000])
def test_chi2_quantiles_match_scipy(dof):
    for p in (0.05, 0.5, 0.95):
        assert chi2_quantile(p, dof) == pytest.approx(stats.chi2.ppf(p, dof), rel=1e-9)
    assert chi2_quantile(0.5, dof) < dof


def test_gamma_p_matches_scipy(rng):
    for a, x in zip(rng.uniform(0.1, 200, 200), rng.uniform(0, 300, 200)):
        assert gamma_p(a, x) == pytest.approx(special.gammainc(a, x), abs=1e-12)
    assert chi2_cdf(0.0, 3) == 0.0


def test_chi2_bounds_monotone():
    prev = (0.0, 0.0)
    for n in range(1, 30):
        b = chi2_bounds(n, 3)
        assert b[0] < b[1] and b[0] > prev[0] and b[1] > prev[1]
        prev = b
    qs = [chi2_quantile(p, 9) for p in np.linspace(0.01, 0.99, 25)]
    assert all(a < b for a, b in zip(qs, qs[1:]))
    with pytest.raises(ValueError):
        chi2_bounds(0, 3)


def _sampled(rng, n, scale=1.0, d=3):
    out = []
    for _ in range(n):
        B = rng.normal(size=(d, d))
        S = B @ B.T + 0.2 * np.eye(d)
        e = rng.multivariate_normal(np.zeros(d), S)
        out.append(TrialRecord(e, scale * S, np.zeros(d)))
    return out


def test_nees_test_zero_errors_fail():
    trials = [TrialRecord(np.zeros(3), np.eye(3), np.zeros(3)) for _ in range(10)]
    mean, ok = nees_test(trials)
    assert mean == 0.0 and not ok


def test_nees_test_consistent_and_inflated(rng):
    mean, ok = nees_test(_sampled(rng, 1000))
    assert ok and abs(mean - 3) < 0.3
    mean4, ok4 = nees_test(_sampled(rng, 1000, scale=4.0))
    assert not ok4 and mean4 < chi2_bounds(1000, 3)[0] / 1000
    assert abs(mean4 - 0.75) < 0.1


def _with_actual(errors, factor):
    E = np.array(errors)
    S = E.T @ E / len(E)
    return [TrialRecord(e, factor * S, np.zeros(E.shape[1])) for e in E]


def test_nci_examples(rng):
    errs = rng.normal(size=(50, 3))
    r = nci(_with_actual(errs, 1.0))
    np.testing.assert_allclose(r.rho_values, 1.0, rtol=1e-12)
    assert abs(r.gamma) < 1e-10 and abs(r.nu) < 1e-10
    r = nci(_with_actual(errs, 0.1))
    assert r.gamma == pytest.approx(10.0) and r.nu == pytest.approx(10.0)
    r = nci(_with_actual(errs, 10.0))
    assert r.gamma == pytest.approx(10.0) and r.nu == pytest.approx(-10.0)


def test_nci_zero_error_excluded(rng):
    errs = np.vstack([rng.normal(size=(20, 3)), np.zeros((2, 3))])
    r = nci(_with_actual(errs, 1.0))
    assert r.n_excluded == 2 and len(r.rho_values) == 20


def test_nci_needs_enough_trials():
    with pytest.raises(ValueError):
        nci([TrialRecord(np.ones(3), np.eye(3), np.zeros(3))] * 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 20.0))
def test_gamma_bounds_nu(seed, scale):
    rng = np.random.default_rng(seed)
    r = nci(_sampled(rng, 12, scale=scale))
    assert r.gamma >= abs(r.nu)


SPEC = ScenarioSpec.defaults("overlapped2d")
MODEL = CostModel("d2d", "likelihood", OutlierModel.corrupted())


def test_campaign_rejects_empty():
    with pytest.raises(ValueError):
        run_campaign(SPEC, MODEL, N=0)


def test_campaign_deterministic_and_parallel_safe():
    a = run_campaign(SPEC, MODEL, N=8, base_seed=11)
    b = run_campaign(SPEC, MODEL, N=8, base_seed=11)
    c = run_campaign(SPEC, MODEL, N=8, base_seed=11, jobs=2)
    assert a.trials_csv() == b.trials_csv() == c.trials_csv()
    assert a.to_json() == c.to_json()
    d = run_campaign(SPEC, MODEL, N=8, base_seed=12)
    assert d.trials_csv() != a.trials_csv()


def test_campaign_report_fields():
    r = run_campaign(SPEC, MODEL, N=12, base_seed=3)
    assert r.n_runs == len(r.nees_values) == len(r.rho_values) == 12
    assert r.dof == 3 and r.n_excluded == 0
    assert r.nci_gamma >= abs(r.inclination_nu)
    header = r.trials_csv().splitlines()[0].split(",")
    assert header[:2] == ["index", "seed"] and "nees" in header and "rho" in header and "converged" in header


def test_campaign_noise_free_errors_do_not_break_report():
    r = run_campaign(ScenarioSpec.defaults("oned_basic"), CostModel("d2d", "likelihood"), N=5)
    assert r.dof == 1 and r.n_runs == 5
    assert np.all(r.nees_values < 1e-6)
    assert math.isnan(r.nci_gamma)


def test_campaign_one_dimensional_with_noise():
    r = run_campaign(ScenarioSpec.defaults("oned_basic", noise_1d=True), CostModel("d2d", "likelihood"), N=30)
    assert r.dof == 1 and np.isfinite(r.nci_gamma) and r.nees_mean > 0


def test_credible_reference_passes_gate(rng):
    base = _sampled(rng, 1000, scale=4.0)
    ref = credible_reference(base, seed=1)
    assert [t.sigma_hat is b.sigma_hat for t, b in zip(ref, base)] == [True] * 1000
    mean, ok = nees_test(ref)
    assert ok and abs(mean - 3) < 0.3
    assert credible_reference(base, seed=1)[5].theta_hat.tolist() == ref[5].theta_hat.tolist()
