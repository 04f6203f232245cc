"""Monte-Carlo credibility of (θ̂, Σ̂): NEES with a chi-square gate, NCI and inclination.

NEES uses the inverse estimated covariance, ε = θ̃ᵀ Σ̂⁻¹ θ̃ with
θ̃ = θ̂ - θ_g.  Chi-square quantiles come from an in-house regularized
lower incomplete gamma function (series below ``a + 1``, Lentz continued
fraction above) inverted by bisection.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cost import CostModel, make_objective
from .covest import InputNoise, PoseCovariance, fisher_covariance, propagation_from_objective
from .geometry import MotionParams
from .optim import DivergenceError, NonFiniteError, OptimizerConfig, minimize
from .scenario import ScenarioSpec, derive_seed, generate

COV_METHODS = ("fisher", "error_propagation")
_EPS = 1e-15
_TINY = 1e-300


@dataclass(frozen=True)
class TrialRecord:
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    theta_g: np.ndarray
    seed: int = 0

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.theta_hat, dtype=float))
        tg = np.atleast_1d(np.asarray(self.theta_g, dtype=float))
        S = np.atleast_2d(np.asarray(self.sigma_hat, dtype=float))
        if th.shape != tg.shape or S.shape != (th.size, th.size):
            raise ValueError("theta_hat, theta_g and sigma_hat dimensions disagree")
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "theta_g", tg)
        object.__setattr__(self, "sigma_hat", S)

    @property
    def error(self) -> np.ndarray:
        return self.theta_hat - self.theta_g


def nees(trial: TrialRecord) -> float:
    e = trial.error
    try:
        L = np.linalg.cholesky(trial.sigma_hat)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("sigma_hat is not positive definite") from exc
    y = np.linalg.solve(L, e)
    return float(y @ y)


# chi-square quantiles ----------------------------------------------------------

def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(100000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_cf(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 100000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("a must be > 0")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_cf(a, x)


def chi2_cdf(x: float, dof: float) -> float:
    return gamma_p(0.5 * dof, 0.5 * x)


def chi2_quantile(p: float, dof: float, tol: float = 1e-10) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if dof <= 0:
        raise ValueError("dof must be > 0")
    lo, hi = 0.0, dof + 10.0 * math.sqrt(2.0 * dof) + 50.0
    while chi2_cdf(hi, dof) < p:
        hi *= 2.0
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def chi2_bounds(N: int, n_theta: int, p_low: float = 0.05, p_high: float = 0.95) -> tuple:
    dof = N * n_theta
    if dof < 1:
        raise ValueError("N * n_theta must be >= 1")
    if not p_low < p_high:
        raise ValueError("p_low must be below p_high")
    return chi2_quantile(p_low, dof), chi2_quantile(p_high, dof)


def nees_test(trials) -> tuple:
    """(ε̄, pass) with pass iff N·ε̄ lies inside the two-sided chi-square gate."""
    trials = list(trials)
    if not trials:
        raise ValueError("need at least one trial")
    eps = np.array([nees(t) for t in trials])
    n = len(trials)
    l1, l2 = chi2_bounds(n, trials[0].theta_hat.size)
    mean = float(eps.mean())
    return mean, bool(l1 <= n * mean <= l2)


def credible_reference(trials, seed: int = 0) -> list:
    """Trials of a perfectly credible estimator with the same Σ̂ and θ_g.

    Each θ̂ is redrawn from N(θ_g, Σ̂); the NEES of the result is the
    reference curve a credible estimator would produce.
    """
    rng = np.random.default_rng(derive_seed(seed, "credible-reference"))
    out = []
    for t in trials:
        L = np.linalg.cholesky(t.sigma_hat)
        e = L @ rng.standard_normal(t.theta_g.size)
        out.append(TrialRecord(t.theta_g + e, t.sigma_hat, t.theta_g, t.seed))
    return out


@dataclass(frozen=True)
class NciResult:
    actual_cov: np.ndarray
    rho_values: np.ndarray
    gamma: float
    nu: float
    n_excluded: int


def nci(trials) -> NciResult:
    """Credibility ratio per trial, NCI γ and inclination ν.

    Trials with an exactly zero error leave ρ undefined and are excluded;
    Σ* is still formed from all trials.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("need at least one trial")
    E = np.array([t.error for t in trials])
    n, d = E.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} trials for an invertible actual covariance")
    S_star = E.T @ E / n
    try:
        Ls = np.linalg.cholesky(S_star)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("actual covariance is singular") from exc
    rho = []
    excluded = 0
    for t, e in zip(trials, E):
        if not np.any(e):
            excluded += 1
            continue
        ys = np.linalg.solve(Ls, e)
        rho.append(nees(t) / float(ys @ ys))
    if not rho:
        raise ValueError("all errors are exactly zero")
    rho = np.array(rho)
    lg = np.log10(rho)
    gamma = 10.0 * float(np.mean(np.abs(lg)))
    nu = 10.0 * float(np.mean(lg))
    return NciResult(S_star, rho, gamma, nu, excluded)


# campaigns ------------------------------------------------------------------------

@dataclass
class TrialRow:
    index: int
    seed: int
    theta_hat: np.ndarray | None
    theta_g: np.ndarray
    sigma_hat: np.ndarray | None
    converged: bool
    status: str
    nees: float = math.nan
    rho: float = math.nan

    @property
    def error(self) -> np.ndarray | None:
        if self.theta_hat is None:
            return None
        e = self.theta_hat - self.theta_g
        if e.size == 3:
            e[2] = math.remainder(e[2], 2.0 * math.pi)
        return e

    @property
    def translation_error(self) -> float:
        e = self.error
        return math.inf if e is None else float(np.linalg.norm(e[:2]))


@dataclass
class CredibilityReport:
    nees_values: np.ndarray
    nees_mean: float
    chi2_bounds: tuple
    nees_pass: bool
    actual_cov: np.ndarray
    rho_values: np.ndarray
    nci_gamma: float
    inclination_nu: float
    n_runs: int
    dof: int
    n_excluded: int = 0
    n_rho_excluded: int = 0
    trials: list = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "n_runs": self.n_runs,
            "dof": self.dof,
            "n_excluded": self.n_excluded,
            "n_rho_excluded": self.n_rho_excluded,
            "nees_mean": self.nees_mean,
            "chi2_bounds": list(self.chi2_bounds),
            "nees_pass": self.nees_pass,
            "nci_gamma": self.nci_gamma,
            "inclination_nu": self.inclination_nu,
            "actual_cov": np.asarray(self.actual_cov).tolist(),
            "nees_values": [float(v) for v in self.nees_values],
            "rho_values": [float(v) for v in self.rho_values],
        }
        return json.dumps(body, indent=2, sort_keys=True)

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.dof
        w.writerow(["index", "seed"] + [f"theta_hat{j}" for j in range(d)] + [f"err{j}" for j in range(d)]
                   + ["nees", "rho", "converged", "status"])
        for t in self.trials:
            th = t.theta_hat if t.theta_hat is not None else np.full(d, math.nan)
            err = t.error if t.theta_hat is not None else np.full(d, math.nan)
            w.writerow([t.index, t.seed] + [repr(float(v)) for v in th] + [repr(float(v)) for v in err]
                       + [repr(float(t.nees)), repr(float(t.rho)), int(t.converged), t.status])
        return buf.getvalue()


def _run_trial(args):
    index, spec, model, cfg, cov_method, base_seed, init = args
    seed = derive_seed(base_seed, index)
    inst = generate(_with_seed(spec, seed))
    theta_g = inst.theta_g.as_pose()[:inst.M.dim if inst.M.dim == 1 else 3]
    if isinstance(init, str):
        x0 = theta_g.copy() if init == "truth" else np.zeros_like(theta_g)
    else:
        x0 = np.asarray(init.as_pose() if isinstance(init, MotionParams) else init, dtype=float)[:theta_g.size]
    f = make_objective(inst.M, inst.F, model)
    try:
        res = minimize(f, x0, cfg)
    except (DivergenceError, NonFiniteError, np.linalg.LinAlgError):
        return TrialRow(index, seed, None, theta_g, None, False, "optimizer_failed")
    row = TrialRow(index, seed, res.x.copy(), theta_g, None, res.converged, "ok")
    try:
        row.sigma_hat = estimate_covariance(inst, model, res.x, cov_method).sigma_theta
        np.linalg.cholesky(row.sigma_hat)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError):
        row.status = "covariance_failed"
    return row


def _with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)


def estimate_covariance(inst, model: CostModel, theta_hat, method: str) -> PoseCovariance:
    """Fisher (inverse Hessian) or input-noise propagation at θ̂.

    Propagation treats the current-set target means as the measurements z,
    each with its declared covariance.
    """
    f = make_objective(inst.M, inst.F, model)
    if method == "fisher":
        return fisher_covariance(f, theta_hat, check_gradient=False)
    if method != "error_propagation":
        raise ValueError(f"unknown covariance method {method!r}")
    M = inst.M
    shape = M.mu.shape

    def fz(z, th):
        return make_objective(M.with_arrays(z.reshape(shape), M.cov), inst.F, model)(th)

    return propagation_from_objective(fz, M.mu.reshape(-1), theta_hat, InputNoise(tuple(M.cov)))


def report_from_trials(rows, dof: int, n_excluded: int = 0) -> CredibilityReport:
    rows = sorted(rows, key=lambda r: r.index)
    usable = [r for r in rows if r.status == "ok"]
    excluded = n_excluded + len(rows) - len(usable)
    if not usable:
        raise ValueError("no usable trials in campaign")
    # angle errors are wrapped, so rebuild θ̂ as θ_g + θ̃
    recs = [TrialRecord(r.theta_g + r.error, r.sigma_hat, r.theta_g, r.seed) for r in usable]
    eps = np.array([nees(t) for t in recs])
    n = len(recs)
    bounds = chi2_bounds(n, dof)
    mean = float(eps.mean())
    for r, e in zip(usable, eps):
        r.nees = float(e)
    try:
        res = nci(recs) if n >= dof + 1 else None
    except (ValueError, np.linalg.LinAlgError):
        res = None  # e.g. noise-free trials with zero error
    if res is not None:
        rho_iter = iter(res.rho_values)
        for r, t in zip(usable, recs):
            if np.any(t.error):
                r.rho = float(next(rho_iter))
        actual, rho, gamma, nu, rho_ex = res.actual_cov, res.rho_values, res.gamma, res.nu, res.n_excluded
    else:
        actual, rho, gamma, nu, rho_ex = np.full((dof, dof), math.nan), np.array([]), math.nan, math.nan, 0
    return CredibilityReport(eps, mean, bounds, bool(bounds[0] <= n * mean <= bounds[1]), actual, rho,
                             gamma, nu, n, dof, excluded, rho_ex, rows)


def run_campaign(scenario_spec: ScenarioSpec, cost_model: CostModel, optimizer_cfg: OptimizerConfig = OptimizerConfig(),
                 cov_method: str = "fisher", N: int = 200, base_seed: int = 0, init="truth",
                 jobs: int = 1) -> CredibilityReport:
    """Generate, register and assess ``N`` independent trials.

    Trial ``i`` uses seed ``derive_seed(base_seed, i)``.  ``init`` is
    ``"truth"``, ``"zero"`` or an explicit parameter vector.  Trials whose
    optimizer fails or whose covariance is not positive definite are kept in
    the table, flagged and left out of the statistics.
    """
    if N < 1:
        raise ValueError("campaign needs N >= 1")
    if cov_method not in COV_METHODS:
        raise ValueError(f"unknown covariance method {cov_method!r}")
    if isinstance(init, str) and init not in ("truth", "zero"):
        raise ValueError("init must be 'truth', 'zero' or a vector")
    args = [(i, scenario_spec, cost_model, optimizer_cfg, cov_method, base_seed, init) for i in range(N)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_run_trial, args, chunksize=max(1, N // (4 * jobs))))
    else:
        rows = [_run_trial(a) for a in args]
    return report_from_trials(rows, 1 if scenario_spec.dim == 1 else 3)
