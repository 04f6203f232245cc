"""Iterative minimisers: gradient descent, Newton, Gauss-Newton, Levenberg-Marquardt.

Two modes are supported.  In *scalar* mode ``f(x) -> float`` and curvature
comes from a numeric Hessian (Gauss-Newton then coincides with Newton on a
PD-projected Hessian).  In *residual* mode ``residuals(x) -> r`` and the
objective is ``½ rᵀr`` with ``JᵀJ`` from the residual Jacobian.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import MotionParams

METHODS = ("gd", "newton", "gauss_newton", "lm")
DIVERGENCE_LIMIT = 1e15


class NonFiniteError(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "lm"
    step_alpha: float = 0.1
    lm_lambda0: float = 1e-3
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    fd_step: float = 1e-6
    hess_step: float = 1e-4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if min(self.grad_tol, self.step_tol, self.fd_step, self.hess_step) <= 0:
            raise ValueError("tolerances and steps must be > 0")
        if self.step_alpha <= 0 or self.lm_lambda0 <= 0:
            raise ValueError("step_alpha and lm_lambda0 must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class OptimResult:
    theta_hat: object
    objective_value: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def x(self) -> np.ndarray:
        if isinstance(self.theta_hat, MotionParams):
            return self.theta_hat.vector
        return np.atleast_1d(np.asarray(self.theta_hat, dtype=float))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.trace[0][0]) if self.trace else 0
        w.writerow(["iter"] + [f"theta{j}" for j in range(n)] + ["f", "grad_norm"])
        for i, (x, fx, g) in enumerate(self.trace):
            w.writerow([i] + [repr(float(v)) for v in x] + [repr(float(fx)), repr(float(g))])
        return buf.getvalue()


def _steps(x: np.ndarray, h: float) -> np.ndarray:
    return h * np.maximum(1.0, np.abs(x))


def _eval(f, x, j=None):
    v = float(f(x))
    if not math.isfinite(v):
        where = f" along dimension {j}" if j is not None else ""
        raise NonFiniteError(f"objective is not finite{where} at x={x.tolist()}")
    return v


def numeric_gradient(f: Callable, theta, fd_step: float = 1e-6) -> np.ndarray:
    x = np.atleast_1d(np.asarray(theta, dtype=float))
    h = _steps(x, fd_step)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        g[j] = (_eval(f, x + e, j) - _eval(f, x - e, j)) / (2.0 * h[j])
    return g


def numeric_hessian(f: Callable, theta, fd_step: float = 1e-4, f0: float | None = None) -> np.ndarray:
    """Central second differences, symmetrised."""
    x = np.atleast_1d(np.asarray(theta, dtype=float))
    n = x.size
    h = _steps(x, fd_step)
    fx = _eval(f, x) if f0 is None else f0
    H = np.empty((n, n))
    E = np.diag(h)
    for i in range(n):
        H[i, i] = (_eval(f, x + E[i], i) - 2.0 * fx + _eval(f, x - E[i], i)) / h[i] ** 2
        for j in range(i + 1, n):
            fpp = _eval(f, x + E[i] + E[j], i)
            fpm = _eval(f, x + E[i] - E[j], i)
            fmp = _eval(f, x - E[i] + E[j], i)
            fmm = _eval(f, x - E[i] - E[j], i)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def numeric_jacobian(residuals: Callable, theta, fd_step: float = 1e-6) -> np.ndarray:
    x = np.atleast_1d(np.asarray(theta, dtype=float))
    h = _steps(x, fd_step)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        cols.append((np.asarray(residuals(x + e)) - np.asarray(residuals(x - e))) / (2.0 * h[j]))
    return np.stack(cols, axis=-1)


def make_pd(H: np.ndarray, floor: float = 1e-10):
    """Add a Levenberg shift μI until Cholesky succeeds; returns (H', μ)."""
    mu = 0.0
    scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
    while True:
        try:
            np.linalg.cholesky(H + mu * np.eye(len(H)))
            return H + mu * np.eye(len(H)), mu
        except np.linalg.LinAlgError:
            mu = max(2.0 * mu, floor * scale) if mu else floor * scale
            if mu > 1e20:
                raise


def minimize(f: Callable | None, init, cfg: OptimizerConfig = OptimizerConfig(),
             residuals: Callable | None = None, jac: Callable | None = None) -> OptimResult:
    """Minimise ``f`` (scalar mode) or ``½‖residuals‖²`` (residual mode).

    ``init`` may be a MotionParams (the result keeps its kind and τ) or a raw
    vector.  GD halves its step until the objective does not increase;
    LM divides λ by 10 on an accepted step and multiplies by 10 otherwise.
    """
    if isinstance(init, MotionParams):
        x = init.vector
        wrap = init.with_vector
    else:
        x = np.atleast_1d(np.asarray(init, dtype=float)).copy()
        wrap = lambda v: np.array(v)  # noqa: E731

    residual_mode = residuals is not None
    if residual_mode:
        def fobj(v):
            r = np.asarray(residuals(v), dtype=float)
            return 0.5 * float(r @ r)
    else:
        if f is None:
            raise ValueError("need an objective or residuals")
        fobj = f

    def grad_and_curv(v, fv):
        if residual_mode:
            r = np.asarray(residuals(v), dtype=float)
            J = np.asarray(jac(v)) if jac is not None else numeric_jacobian(residuals, v, cfg.fd_step)
            return J.T @ r, J.T @ J
        g = numeric_gradient(fobj, v, cfg.fd_step)
        if cfg.method == "gd":
            return g, None
        return g, numeric_hessian(fobj, v, cfg.hess_step, fv)

    fx = _eval(fobj, x)
    if fx > DIVERGENCE_LIMIT:
        raise DivergenceError(f"objective {fx:g} at the initial guess exceeds {DIVERGENCE_LIMIT:g}")
    trace = []
    lam = cfg.lm_lambda0
    converged = False
    message = "max_iter reached"
    it = 0
    g, C = grad_and_curv(x, fx)
    trace.append((x.copy(), fx, float(np.linalg.norm(g))))
    for it in range(1, cfg.max_iter + 1):
        if np.linalg.norm(g) < cfg.grad_tol:
            converged, message, it = True, "gradient below tolerance", it - 1
            break
        if cfg.method == "gd":
            step_size = cfg.step_alpha
            while True:
                dx = -step_size * g
                f_new = _eval(fobj, x + dx)
                if f_new <= fx:
                    break
                if np.linalg.norm(dx) < cfg.step_tol:
                    dx, f_new = np.zeros_like(x), fx
                    break
                step_size *= 0.5
        elif cfg.method == "lm":
            n = len(x)
            Cpd = C if residual_mode else make_pd(C)[0]
            while True:
                A = Cpd + lam * np.eye(n)
                try:
                    dx = np.linalg.solve(A, -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                f_new = _eval(fobj, x + dx)
                if f_new < fx:
                    lam = max(lam / 10.0, 1e-12)
                    break
                lam *= 10.0
                if lam > 1e16 or np.linalg.norm(dx) < cfg.step_tol:
                    dx = np.zeros(n)
                    f_new = fx
                    break
        else:
            # newton / gauss_newton share the PD-projected curvature step
            A, _ = make_pd(C)
            dx = np.linalg.solve(A, -g)
            f_new = _eval(fobj, x + dx)
            shrink = 0
            while f_new > fx and shrink < 30:
                dx *= 0.5
                f_new = _eval(fobj, x + dx)
                shrink += 1
            if f_new > fx:
                dx, f_new = np.zeros_like(x), fx
        if f_new > DIVERGENCE_LIMIT:
            raise DivergenceError(f"objective {f_new:g} exceeds {DIVERGENCE_LIMIT:g} at iteration {it}")
        step = float(np.linalg.norm(dx))
        if step > 0:
            x = x + dx
            fx = f_new
            g, C = grad_and_curv(x, fx)
            trace.append((x.copy(), fx, float(np.linalg.norm(g))))
        if step < cfg.step_tol:
            converged = True
            message = "step below tolerance"
            break
    return OptimResult(wrap(x), fx, it, converged, trace, message)


def trace_is_monotone(result: OptimResult, slack: float = 0.0) -> bool:
    vals = [t[1] for t in result.trace]
    return all(b <= a + slack for a, b in zip(vals, vals[1:]))
