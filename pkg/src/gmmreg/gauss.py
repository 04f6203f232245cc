"""Gaussian densities, maximum-likelihood fits, mixtures and EM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
EM_COV_FLOOR = 1e-8


class SingularFitError(ValueError):
    pass


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mu.shape[0] not in (1, 2) or cov.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError(f"bad Gaussian shapes mu={mu.shape} cov={cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def scalar(cls, mu: float, sigma: float) -> "Gaussian":
        return cls(np.array([mu]), np.array([[sigma * sigma]]))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def log_pdf(g: Gaussian, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != g.mu.shape:
        raise ValueError(f"point of shape {x.shape} for a {g.dim}-d Gaussian")
    z = np.linalg.solve(g._chol, x - g.mu)
    half_logdet = float(np.sum(np.log(np.diag(g._chol))))
    return -0.5 * float(z @ z) - half_logdet - 0.5 * g.dim * LOG_2PI


def pdf(g: Gaussian, x) -> float:
    return math.exp(log_pdf(g, x))


def mle_fit(samples) -> Gaussian:
    """Biased (1/N) maximum-likelihood mean and covariance."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise SingularFitError("need at least two samples")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / x.shape[0]
    if np.linalg.matrix_rank(cov, tol=1e-12 * max(1.0, np.abs(cov).max())) < cov.shape[0]:
        raise SingularFitError("sample covariance is singular")
    return Gaussian(mu, cov)


@dataclass(frozen=True)
class GaussianMixture:
    components: tuple
    weights: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(comps) < 1 or len(comps) != w.shape[0]:
            raise ValueError("need one weight per component and at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if len({c.dim for c in comps}) != 1:
            raise ValueError("components differ in dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @classmethod
    def equal(cls, components) -> "GaussianMixture":
        comps = tuple(components)
        return cls(comps, np.full(len(comps), 1.0 / len(comps)))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def arrays(self):
        mu = np.stack([c.mu for c in self.components])
        cov = np.stack([c.cov for c in self.components])
        return mu, cov


def gmm_pdf(m: GaussianMixture, x) -> float:
    return float(sum(w * pdf(c, x) for w, c in zip(m.weights, m.components)))


# vectorised helpers ----------------------------------------------------------

def batch_log_pdf(x: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(x | mu, cov) broadcast over leading axes; d in {1, 2}.

    Shapes: x and mu ``(..., d)``, cov ``(..., d, d)``.  Closed-form 2x2
    inverse keeps this cheap inside the cost surface loops.
    """
    diff = x - mu
    d = diff.shape[-1]
    if d == 1:
        var = cov[..., 0, 0]
        return -0.5 * (diff[..., 0] ** 2 / var + np.log(var) + LOG_2PI)
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * c - b * b
    dx, dy = diff[..., 0], diff[..., 1]
    maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -0.5 * (maha + np.log(det)) - LOG_2PI


def _mixture_loglik(x, weights, mu, cov):
    # (n, k) component log densities plus log weights
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    return batch_log_pdf(x[:, None, :], mu[None], cov[None]) + lw[None]


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def mixture_log_likelihood(samples, m: GaussianMixture) -> float:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    mu, cov = m.arrays()
    return float(np.sum(_logsumexp(_mixture_loglik(x, m.weights, mu, cov), axis=1)))


def quantile_init(samples, k: int) -> GaussianMixture:
    """Spread k equal-weight components over sample quantiles (1D or per axis)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    qs = (np.arange(k) + 0.5) / k
    means = np.quantile(x, qs, axis=0)
    cov = np.cov(x.T, bias=True).reshape(x.shape[1], x.shape[1]) / k**2
    cov = cov + EM_COV_FLOOR * np.eye(x.shape[1])
    return GaussianMixture.equal(Gaussian(mu, cov) for mu in means)


def em_fit(samples, k: int, init: GaussianMixture | None = None, max_iter: int = 200,
           tol: float = 1e-8) -> GaussianMixture:
    """Fit a k-component mixture by expectation-maximisation.

    Stops when the log-likelihood gain drops below ``tol``.  The result's
    ``meta`` carries the log-likelihood history, the iteration count and
    whether the covariance floor had to be applied.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if init is None:
        init = quantile_init(x, k)
    if len(init.components) != k:
        raise ValueError("init must have k components")
    w = init.weights.copy()
    mu, cov = init.arrays()
    history = [float(np.sum(_logsumexp(_mixture_loglik(x, w, mu, cov), axis=1)))]
    floored = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # E-step: responsibilities
        ll = _mixture_loglik(x, w, mu, cov)
        resp = np.exp(ll - _logsumexp(ll, axis=1)[:, None])
        # M-step
        nk = resp.sum(axis=0)
        w = nk / n
        mu = (resp.T @ x) / nk[:, None]
        for j in range(k):
            dx = x - mu[j]
            cov[j] = (resp[:, j, None] * dx).T @ dx / nk[j]
            if np.min(np.linalg.eigvalsh(cov[j])) < EM_COV_FLOOR:
                cov[j] += EM_COV_FLOOR * np.eye(d)
                floored = True
        history.append(float(np.sum(_logsumexp(_mixture_loglik(x, w, mu, cov), axis=1))))
        if history[-1] - history[-2] < tol:
            converged = True
            break
    comps = tuple(Gaussian(mu[j], 0.5 * (cov[j] + cov[j].T)) for j in range(k))
    meta = {"log_likelihood": history, "iterations": it, "converged": converged,
            "covariance_floored": floored}
    return GaussianMixture(comps, w / w.sum(), meta)
