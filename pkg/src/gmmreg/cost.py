"""Fuse per-target scores into a registration objective.

Per target k of the current set M (moved by θ) the robust score is

    s_k = log Σ_i w_i [(1 - α) inlier_ki + α outlier_ki]

where ``inlier_ki`` is the L2 overlap (d2d) or the point density (p2d)
against reference target i of F.  The *summing* fusion minimises
``-Σ_k exp(s_k)``, the *likelihood* fusion minimises ``-Σ_k s_k``.
Everything stays in the log domain; a target whose linear-domain score
would underflow a double is reported as ``SENTINEL_LOG`` and poisons the
likelihood objective to ``SENTINEL_COST`` (the product is zero).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .gauss import batch_log_pdf
from .geometry import CartesianTarget, pose_vector, rot2
from .metrics import PointSet

SENTINEL_LOG = -1e12
SENTINEL_COST = 1e12
# below this a probability is not representable as a double (smallest subnormal)
UNDERFLOW_LOG = math.log(5e-324)
DEFAULT_CELL_BUDGET = 10**7

METRICS = ("p2d", "d2d")
FUSIONS = ("summing", "likelihood")
OUTLIER_KINDS = ("none", "uniform", "corrupted_gaussian")


class GridBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class OutlierModel:
    kind: str = "none"
    alpha: float = 0.0
    uniform_density: float | None = None
    sigma_outlier: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in OUTLIER_KINDS:
            raise ValueError(f"unknown outlier kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.kind == "none" and self.alpha != 0.0:
            raise ValueError("alpha must be 0 without an outlier model")
        if self.kind == "uniform" and self.uniform_density is not None and self.uniform_density < 0:
            raise ValueError("uniform_density must be >= 0")
        if self.kind == "corrupted_gaussian":
            if self.sigma_outlier is None:
                raise ValueError("corrupted_gaussian needs sigma_outlier")
            s = np.atleast_2d(np.asarray(self.sigma_outlier, dtype=float))
            try:
                np.linalg.cholesky(s)
            except np.linalg.LinAlgError as exc:
                raise ValueError("sigma_outlier must be positive definite") from exc
            object.__setattr__(self, "sigma_outlier", s)

    @classmethod
    def corrupted(cls, alpha: float = 0.2, variance: float = 100.0, dim: int = 2) -> "OutlierModel":
        return cls("corrupted_gaussian", alpha, sigma_outlier=variance * np.eye(dim))


@dataclass(frozen=True)
class CostModel:
    metric: str = "d2d"
    fusion: str = "likelihood"
    outlier: OutlierModel = field(default_factory=OutlierModel)
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            object.__setattr__(self, "weights", w)

    def ref_weights(self, n: int) -> np.ndarray:
        if self.weights is None:
            return np.full(n, 1.0 / n)
        if self.weights.shape != (n,):
            raise ValueError(f"{self.weights.shape[0]} weights for {n} reference targets")
        return self.weights


def default_uniform_density(F: PointSet) -> float:
    """1 / volume of the reference bounding box grown by 3 max-σ per side."""
    max_sigma = math.sqrt(float(np.max(np.linalg.eigvalsh(F.cov))))
    span = F.mu.max(axis=0) - F.mu.min(axis=0) + 6.0 * max_sigma
    return 1.0 / float(np.prod(span))


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def branch_logs(moved_mu, moved_cov, F: PointSet, model: CostModel, log_w=None):
    """Per-target ``(log Σ_i w_i inlier_ki, log Σ_i w_i outlier_ki)``.

    The outlier branch is ``-inf`` when the model has none.
    """
    if log_w is None:
        with np.errstate(divide="ignore"):
            log_w = np.log(model.ref_weights(len(F)))
    diff = moved_mu[:, None, :] - F.mu[None]
    if model.metric == "d2d":
        S = moved_cov[:, None] + F.cov[None]
    else:
        S = np.broadcast_to(F.cov[None], diff.shape[:2] + F.cov.shape[1:])
    inl = _lse_rows(batch_log_pdf(diff, 0.0, S) + log_w)
    kind = model.outlier.kind
    if kind == "none":
        out = np.full(inl.shape, -math.inf)
    elif kind == "uniform":
        u = model.outlier.uniform_density
        if u is None:
            u = default_uniform_density(F)
        # Σ_i w_i u
        out = np.full(inl.shape, _log(u) + _log(float(np.exp(log_w).sum())))
    else:
        so = model.outlier.sigma_outlier
        out = _lse_rows(batch_log_pdf(diff, 0.0, np.broadcast_to(so, diff.shape[:2] + so.shape)) + log_w)
    return inl, out


def _lse_rows(a):
    m = np.max(a, axis=-1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.sum(np.exp(a - safe[..., None]), axis=-1))


def combine_branches(inl, out, alpha: float, inlier_extra=None):
    """log[(1-α)·exp(inl + extra) + α·exp(out)] with underflow to sentinel."""
    a = inl if inlier_extra is None else inl + inlier_extra
    la = _log(1.0 - alpha)
    lb = _log(alpha)
    s = np.logaddexp(a + la, out + lb) if alpha > 0 else a + la
    s = np.where(np.isnan(s), -math.inf, s)
    return np.where(s < UNDERFLOW_LOG, SENTINEL_LOG, s)


def target_log_scores(M: PointSet, F: PointSet, theta, model: CostModel) -> np.ndarray:
    mu, cov = _move(M, theta)
    inl, out = branch_logs(mu, cov, F, model)
    return combine_branches(inl, out, model.outlier.alpha)


def target_mixture_score(moved: CartesianTarget, F: PointSet, model: CostModel) -> float:
    """Robust log score of one already-transformed current target."""
    inl, out = branch_logs(moved.mu[None], moved.cov[None], F, model)
    return float(combine_branches(inl, out, model.outlier.alpha)[0])


def fuse(scores: np.ndarray, fusion: str) -> float:
    if fusion == "summing":
        return -float(np.sum(np.exp(scores)))
    if np.any(scores <= SENTINEL_LOG):
        return SENTINEL_COST
    return -float(np.sum(scores))


def _move(M: PointSet, theta):
    tx, ty, phi = pose_vector(theta)
    if M.dim == 1:
        return M.mu + tx, M.cov
    R = rot2(phi)
    return M.mu @ R.T + np.array([tx, ty]), R @ M.cov @ R.T


def objective(M: PointSet, F: PointSet, theta, model: CostModel) -> float:
    """Value to minimise; each target of M is moved by θ before scoring."""
    return fuse(target_log_scores(M, F, theta, model), model.fusion)


def make_objective(M: PointSet, F: PointSet, model: CostModel, to_pose=None):
    """Closure ``f(x) -> float`` over a raw parameter vector.

    ``x`` is ``(tx,)`` for 1D sets and ``(tx, ty, phi_z)`` for 2D ones unless
    ``to_pose`` maps it (e.g. velocity × τ).
    """
    with np.errstate(divide="ignore"):
        log_w = np.log(model.ref_weights(len(F)))
    alpha = model.outlier.alpha

    def f(x):
        pose = pose_vector(x if to_pose is None else to_pose(x))
        mu, cov = _move(M, pose)
        inl, out = branch_logs(mu, cov, F, model, log_w)
        return fuse(combine_branches(inl, out, alpha), model.fusion)

    return f


# cost surfaces -----------------------------------------------------------------

@dataclass
class CostSurface:
    axes: list
    values: np.ndarray
    argopt: tuple
    names: tuple = ()

    def coords(self) -> list:
        return [np.linspace(lo, hi, int(n)) for lo, hi, n in self.axes]

    def argopt_point(self) -> np.ndarray:
        return np.array([c[i] for c, i in zip(self.coords(), self.argopt)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.names) or [f"x{j}" for j in range(len(self.axes))]
        w.writerow(names + ["value", "saturated"])
        grids = np.meshgrid(*self.coords(), indexing="ij")
        for idx in np.ndindex(self.values.shape):
            v = self.values[idx]
            w.writerow([repr(float(g[idx])) for g in grids] + [repr(float(v)), int(v >= SENTINEL_COST)])
        return buf.getvalue()


def _surface_rows(args):
    M, F, model, base_pose, coords, first = args
    f = make_objective(M, F, model)
    shape = [len(c) for c in coords[1:]]
    out = np.empty([len(first)] + shape)
    for a, v0 in enumerate(first):
        for idx in np.ndindex(*shape):
            x = base_pose.copy()
            x[0] = v0
            for j, i in enumerate(idx, 1):
                x[j] = coords[j][i]
            out[(a,) + idx] = f(x)
    return out


def cost_surface(M: PointSet, F: PointSet, model: CostModel, grid_spec, base=None,
                 budget: int = DEFAULT_CELL_BUDGET, jobs: int = 1) -> CostSurface:
    """Dense objective evaluation.

    ``grid_spec`` is a list of ``(lo, hi, steps)``: one entry sweeps tx with
    the other pose components taken from ``base``; three entries sweep the
    full pose.  ``jobs > 1`` splits the tx axis over processes; the values do
    not depend on it.
    """
    axes = [(float(lo), float(hi), int(n)) for lo, hi, n in grid_spec]
    if len(axes) not in (1, 3):
        raise ValueError("grid must have 1 (tx) or 3 (tx, ty, phi_z) axes")
    if M.dim == 1 and len(axes) != 1:
        raise ValueError("1D point sets take a tx-only grid")
    total = int(np.prod([n for _, _, n in axes]))
    if total > budget:
        raise GridBudgetError(f"grid has {total} cells, budget is {budget}")
    base_pose = np.zeros(3) if base is None else pose_vector(base).copy()
    coords = [np.linspace(lo, hi, n) for lo, hi, n in axes]
    chunks = [c for c in np.array_split(coords[0], max(1, min(jobs, len(coords[0])))) if len(c)]
    work = [(M, F, model, base_pose, coords, c) for c in chunks]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            values = np.concatenate(list(ex.map(_surface_rows, work)))
    else:
        values = np.concatenate([_surface_rows(w) for w in work])
    argopt = tuple(int(i) for i in np.unravel_index(int(np.argmin(values)), values.shape))
    names = ("tx",) if len(axes) == 1 else ("tx", "ty", "phi_z")
    return CostSurface(axes, values, argopt, names)


def local_minima(values) -> list:
    """Indices of interior local minima of a 1D profile.

    A plateau counts once (its first index) when both neighbouring values
    are higher; sentinel plateaus never qualify because nothing exceeds them.
    Grid end points are not minima: the profile continues past them.
    """
    v = np.asarray(values, dtype=float)
    out = []
    i, n = 0, len(v)
    while i < n:
        j = i
        while j + 1 < n and v[j + 1] == v[i]:
            j += 1
        left_ok = i > 0 and v[i - 1] > v[i]
        right_ok = j < n - 1 and v[j + 1] > v[i]
        if left_ok and right_ok and v[i] < SENTINEL_COST:
            out.append(i)
        i = j + 1
    return out
