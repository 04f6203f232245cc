"""Per-target distance metrics, NDT cells and a baseline ICP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gauss import Gaussian, GaussianMixture, SingularFitError, batch_log_pdf, gmm_pdf, mle_fit
from .geometry import CartesianTarget, MotionParams, pose_vector, rot2

NDT_COV_FLOOR = 1e-9


@dataclass(frozen=True)
class PointSet:
    """Targets stored as stacked arrays: ``mu`` (n, d) and ``cov`` (n, d, d).

    ``label`` is ``"F"`` for the previous set and ``"M"`` for the current one.
    """

    mu: np.ndarray
    cov: np.ndarray
    label: str = "F"

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None, None]
        if mu.shape[0] == 0:
            raise ValueError("point set is empty")
        if cov.shape != mu.shape + (mu.shape[1],):
            raise ValueError(f"cov shape {cov.shape} does not match mu shape {mu.shape}")
        if self.label not in ("F", "M"):
            raise ValueError("label must be 'F' or 'M'")
        mu.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_targets(cls, targets, label: str = "F") -> "PointSet":
        targets = list(targets)
        if not targets:
            raise ValueError("point set is empty")
        return cls(np.stack([t.mu for t in targets]), np.stack([t.cov for t in targets]), label)

    @classmethod
    def isotropic(cls, points, sigma: float, label: str = "F") -> "PointSet":
        mu = np.asarray(points, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.broadcast_to(sigma**2 * np.eye(mu.shape[1]), mu.shape + (mu.shape[1],)).copy()
        return cls(mu, cov, label)

    @property
    def targets(self) -> list:
        return [CartesianTarget(m, c) for m, c in zip(self.mu, self.cov)]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def __len__(self) -> int:
        return self.mu.shape[0]

    def with_arrays(self, mu, cov) -> "PointSet":
        return PointSet(mu, cov, self.label)

    def scaled(self, factor: float) -> "PointSet":
        """Covariances multiplied by ``factor**2``."""
        return PointSet(self.mu, self.cov * factor**2, self.label)

    def as_mixture(self, weights=None) -> GaussianMixture:
        comps = [Gaussian(m, c) for m, c in zip(self.mu, self.cov)]
        if weights is None:
            return GaussianMixture.equal(comps)
        return GaussianMixture(comps, weights)


@dataclass(frozen=True)
class NdtGrid:
    cell_size: float
    cells: dict = field(default_factory=dict)
    min_points_per_cell: int = 3

    def cell_of(self, point) -> tuple:
        return tuple(int(math.floor(c / self.cell_size)) for c in np.atleast_1d(point))

    def as_mixture(self) -> GaussianMixture:
        return GaussianMixture.equal(self.cells[k] for k in sorted(self.cells))


def build_ndt(points, cell_size: float, min_points_per_cell: int = 3) -> NdtGrid:
    if cell_size <= 0:
        raise ValueError("cell_size must be > 0")
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    buckets: dict = {}
    for p in pts:
        key = tuple(int(math.floor(c / cell_size)) for c in p)
        buckets.setdefault(key, []).append(p)
    cells = {}
    for key in sorted(buckets):
        members = np.array(buckets[key])
        if len(members) < max(min_points_per_cell, 2):
            continue
        mu = members.mean(axis=0)
        dx = members - mu
        cov = dx.T @ dx / len(members)
        try:
            cells[key] = mle_fit(members)
        except SingularFitError:
            cells[key] = Gaussian(mu, cov + NDT_COV_FLOOR * np.eye(pts.shape[1]))
    return NdtGrid(cell_size, cells, min_points_per_cell)


def p2d_score(point, ref: GaussianMixture) -> float:
    """Mixture density of an already-moved point under the reference set."""
    return gmm_pdf(ref, point)


def l2_distance(a: Gaussian, b: Gaussian) -> float:
    """Closed-form ∫N_a N_b dx = N(0 | mu_a - mu_b, cov_a + cov_b)."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    diff = a.mu - b.mu
    return float(np.exp(batch_log_pdf(np.zeros_like(diff), diff, a.cov + b.cov)))


def d2d_target_score(moved: CartesianTarget, ref_set: PointSet, weights=None) -> float:
    if weights is None:
        weights = np.full(len(ref_set), 1.0 / len(ref_set))
    lp = batch_log_pdf(moved.mu[None] - ref_set.mu, np.zeros_like(ref_set.mu), moved.cov[None] + ref_set.cov)
    return float(np.sum(np.asarray(weights) * np.exp(lp)))


# ICP baseline -----------------------------------------------------------------

@dataclass(frozen=True)
class IcpResult:
    theta: MotionParams
    iterations: int
    converged: bool
    rms: float


def rigid_align_2d(src: np.ndarray, dst: np.ndarray):
    """Least-squares R, t with ``dst ≈ R src + t`` (Kabsch / Procrustes)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, d]) @ U.T
    return R, cd - R @ cs


def icp_register(F, M, init=None, max_iter: int = 50, tol: float = 1e-10) -> IcpResult:
    """Point-to-point ICP moving M onto F; brute-force nearest neighbours."""
    F = np.asarray(F, dtype=float)
    M = np.asarray(M, dtype=float)
    if len(F) == 0 or len(M) == 0:
        raise ValueError("both sets must be nonempty")
    x = pose_vector(init if init is not None else MotionParams.pose())
    best = (math.inf, x)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R = rot2(x[2])
        moved = M @ R.T + x[:2]
        d2 = np.sum((moved[:, None, :] - F[None]) ** 2, axis=-1)
        nn = np.argmin(d2, axis=1)
        rms = math.sqrt(float(np.mean(d2[np.arange(len(M)), nn])))
        if rms < best[0]:
            best = (rms, x)
        R_new, t_new = rigid_align_2d(M, F[nn])
        x_new = np.array([t_new[0], t_new[1], math.atan2(R_new[1, 0], R_new[0, 0])])
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step < tol:
            converged = True
            break
    moved = M @ rot2(x[2]).T + x[:2]
    rms = math.sqrt(float(np.mean(np.min(np.sum((moved[:, None, :] - F[None]) ** 2, axis=-1), axis=1))))
    if not converged and best[0] < rms:
        rms, x = best
    return IcpResult(MotionParams.pose(*x), it, converged, rms)
