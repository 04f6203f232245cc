"""Deterministic synthetic scenarios for the 1D and 2D registration experiments.

Random draws use numpy's PCG64 generator.  Every sub-draw gets its own
stream derived from ``(seed, tag)`` through ``numpy.random.SeedSequence``,
so an instance depends only on its spec and reproduces across platforms.

1D layout (a replica, the original coordinates are not published): the
previous set holds A=10, B=2, C=12.2 and the current set is shifted by -2,
so moving current-B by tx lands on B at 2, on A at 10 and on C at 12.2.

2D layout: 8 seeds on a 10 m ring at 45° spacing, each jittered by up to
±1 m per axis.  The current set is ``T(θ_g)⁻¹`` of the previous one, so
moving M by θ_g restores F.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import MotionParams, cartesian_to_polar, polar_arrays_to_cartesian, rot2
from .metrics import PointSet

KINDS = ("oned_basic", "overlapped2d", "outlier2d", "clustered2d", "combined2d")
ONED_LAYOUT = {"A": 10.0, "B": 2.0, "C": 12.2}
ONED_SHIFT = 2.0
ONED_SIGMA = 0.15
RING_RADIUS = 10.0
JITTER = 1.0
NEAR_OUTLIER_P = 0.2


def derive_seed(base: int, *keys) -> int:
    words = [int(base)] + [k if isinstance(k, int) else sum(ord(c) << (8 * (i % 4)) for i, c in enumerate(str(k)))
                           for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag))


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "overlapped2d"
    theta_g: MotionParams = field(default_factory=lambda: MotionParams.pose(5.0, 0.0, math.radians(15.0)))
    n_inliers: int = 8
    n_outliers_prev: int = 0
    n_outliers_curr: int = 0
    n_cluster_points: int = 0
    cluster_spread: str = "loose"
    sigma_r: float = 0.2
    sigma_phi: float = 0.03
    sigma_1d: float = ONED_SIGMA
    noise_1d: bool = False
    dt: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind != "oned_basic" and self.n_inliers < 3:
            raise ValueError("2D scenarios need at least 3 inliers")
        if min(self.sigma_r, self.sigma_phi, self.sigma_1d, self.dt) <= 0:
            raise ValueError("sigmas and dt must be > 0")
        if min(self.n_outliers_prev, self.n_outliers_curr, self.n_cluster_points) < 0:
            raise ValueError("counts must be >= 0")
        if self.cluster_spread not in ("tight", "loose"):
            raise ValueError("cluster_spread is 'tight' or 'loose'")

    @classmethod
    def defaults(cls, kind: str, **kw) -> "ScenarioSpec":
        base = {
            "oned_basic": dict(theta_g=MotionParams.pose(ONED_SHIFT, 0.0, 0.0), n_inliers=3),
            "overlapped2d": {},
            "outlier2d": dict(n_outliers_prev=2, n_outliers_curr=2),
            "clustered2d": dict(n_cluster_points=6, cluster_spread="loose"),
            "combined2d": dict(n_outliers_prev=2, n_outliers_curr=2, n_cluster_points=6),
        }[kind]
        base.update(kw)
        return cls(kind=kind, **base)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "oned_basic" else 2


@dataclass(frozen=True)
class ScenarioInstance:
    """Noisy sets plus the noise-free bookkeeping used to build them.

    ``F_polar`` / ``M_polar`` hold ``(r, phi, sigma_r, sigma_phi)`` rows for
    2D scenarios (``None`` in 1D).
    """

    F: PointSet
    M: PointSet
    theta_g: MotionParams
    correspondence: tuple
    outliers_prev: tuple
    outliers_curr: tuple
    F_true: np.ndarray
    M_true: np.ndarray
    spec: ScenarioSpec
    F_polar: np.ndarray | None = None
    M_polar: np.ndarray | None = None


def _apply(theta: MotionParams, xy: np.ndarray) -> np.ndarray:
    tx, ty, phi = theta.as_pose()
    if xy.shape[1] == 1:
        return xy + tx
    return xy @ rot2(phi).T + np.array([tx, ty])


def _apply_inverse(theta: MotionParams, xy: np.ndarray) -> np.ndarray:
    tx, ty, phi = theta.as_pose()
    if xy.shape[1] == 1:
        return xy - tx
    return (xy - np.array([tx, ty])) @ rot2(phi)


def _measure(xy: np.ndarray, spec: ScenarioSpec, rng: np.random.Generator, label: str):
    """Noisy targets for true positions; returns (PointSet, polar rows or None)."""
    n = xy.shape[0]
    if spec.dim == 1:
        mu = xy + (rng.normal(0.0, spec.sigma_1d, xy.shape) if spec.noise_1d else 0.0)
        return PointSet.isotropic(mu, spec.sigma_1d, label), None
    r, phi = cartesian_to_polar(xy)
    r = np.abs(r + rng.normal(0.0, spec.sigma_r, n))
    phi = phi + rng.normal(0.0, spec.sigma_phi, n)
    mu, cov = polar_arrays_to_cartesian(r, phi, spec.sigma_r, spec.sigma_phi)
    polar = np.column_stack([r, phi, np.full(n, spec.sigma_r), np.full(n, spec.sigma_phi)])
    return PointSet(mu, cov, label), polar


def _stack(a: PointSet, b: PointSet) -> PointSet:
    return PointSet(np.vstack([a.mu, b.mu]), np.concatenate([a.cov, b.cov]), a.label)


def _stack_polar(a, b):
    if a is None:
        return None
    return np.vstack([a, b])


def _seed_points(spec: ScenarioSpec) -> np.ndarray:
    if spec.dim == 1:
        return np.array([[ONED_LAYOUT["A"]], [ONED_LAYOUT["B"]], [ONED_LAYOUT["C"]]])
    rng = _rng(spec.seed, "layout")
    ang = np.arange(spec.n_inliers) * (2.0 * math.pi / spec.n_inliers)
    ring = RING_RADIUS * np.column_stack([np.cos(ang), np.sin(ang)])
    return ring + rng.uniform(-JITTER, JITTER, ring.shape)


def positional_sigma(spec: ScenarioSpec, xy: np.ndarray) -> np.ndarray:
    """Largest positional std-dev of a target measured at ``xy``."""
    if spec.dim == 1:
        return np.full(xy.shape[0], spec.sigma_1d)
    r = np.hypot(xy[:, 0], xy[:, 1])
    return np.maximum(spec.sigma_r, r * spec.sigma_phi)


def generate(spec: ScenarioSpec) -> ScenarioInstance:
    F_true = _seed_points(spec)
    M_true = _apply_inverse(spec.theta_g, F_true)
    F, Fp = _measure(F_true, spec, _rng(spec.seed, "noise-F"), "F")
    M, Mp = _measure(M_true, spec, _rng(spec.seed, "noise-M"), "M")
    n = F_true.shape[0]
    inst = ScenarioInstance(F, M, spec.theta_g, tuple((i, i) for i in range(n)), (), (),
                            F_true, M_true, spec, Fp, Mp)
    if spec.n_cluster_points:
        inst = add_clusters(inst, spec.n_cluster_points, spec.cluster_spread, derive_seed(spec.seed, "clusters"))
    if spec.n_outliers_prev or spec.n_outliers_curr:
        inst = add_outliers(inst, spec.n_outliers_prev, spec.n_outliers_curr, derive_seed(spec.seed, "outliers"))
    return inst


def _draw_outliers(true_xy: np.ndarray, inlier_idx, k: int, spec: ScenarioSpec, rng, placement: str):
    inl = true_xy[list(inlier_idx)]
    lo, hi = inl.min(axis=0), inl.max(axis=0)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    pts = []
    sig = positional_sigma(spec, inl)
    for _ in range(k):
        if placement == "far":
            # outside the ×1.5 box: 2-3 box half-widths beyond its edge
            span = max(float(np.max(half)), 1.0)
            direction = rng.normal(size=true_xy.shape[1])
            direction /= np.linalg.norm(direction)
            pts.append(centre + direction * (1.5 * span + rng.uniform(2.0, 3.0) * span))
        elif rng.uniform() < NEAR_OUTLIER_P:
            j = rng.integers(len(inl))
            off = rng.normal(size=true_xy.shape[1])
            off *= rng.uniform(0.0, 3.0 * sig[j]) / np.linalg.norm(off)
            pts.append(inl[j] + off)
        else:
            pts.append(centre + rng.uniform(-1.5, 1.5, true_xy.shape[1]) * half)
    return np.array(pts).reshape(k, true_xy.shape[1])


def _inlier_indices(inst: ScenarioInstance, side: int):
    return sorted({pair[side] for pair in inst.correspondence})


def add_outliers(inst: ScenarioInstance, n_prev: int, n_curr: int, seed: int,
                 placement: str = "mixed") -> ScenarioInstance:
    """Append targets without correspondence to F and/or M.

    ``placement="mixed"`` draws uniformly over the inlier box inflated ×1.5,
    with a 20 % chance of landing within 3σ of a random inlier instead;
    ``"far"`` puts every outlier well outside the box.
    """
    if n_prev < 0 or n_curr < 0:
        raise ValueError("outlier counts must be >= 0")
    if placement not in ("mixed", "far"):
        raise ValueError("placement is 'mixed' or 'far'")
    spec = inst.spec
    F, M, Fp, Mp = inst.F, inst.M, inst.F_polar, inst.M_polar
    F_true, M_true = inst.F_true, inst.M_true
    out_prev, out_curr = list(inst.outliers_prev), list(inst.outliers_curr)
    if n_prev:
        xy = _draw_outliers(F_true, _inlier_indices(inst, 0), n_prev, spec, _rng(seed, "out-F"), placement)
        ps, pp = _measure(xy, spec, _rng(seed, "out-F-noise"), "F")
        out_prev += list(range(len(F), len(F) + n_prev))
        F, Fp, F_true = _stack(F, ps), _stack_polar(Fp, pp), np.vstack([F_true, xy])
    if n_curr:
        xy = _draw_outliers(M_true, _inlier_indices(inst, 1), n_curr, spec, _rng(seed, "out-M"), placement)
        ps, pp = _measure(xy, spec, _rng(seed, "out-M-noise"), "M")
        out_curr += list(range(len(M), len(M) + n_curr))
        M, Mp, M_true = _stack(M, ps), _stack_polar(Mp, pp), np.vstack([M_true, xy])
    return replace(inst, F=F, M=M, F_polar=Fp, M_polar=Mp, F_true=F_true, M_true=M_true,
                   outliers_prev=tuple(out_prev), outliers_curr=tuple(out_curr))


def add_clusters(inst: ScenarioInstance, n_points: int, spread: str, seed: int) -> ScenarioInstance:
    """Add corresponding points next to random inliers of both sets.

    ``tight`` offsets are at most 0.5σ, ``loose`` ones between 2σ and 4σ,
    σ being the positional std-dev at the parent inlier.
    """
    if n_points < 0:
        raise ValueError("n_points must be >= 0")
    if spread not in ("tight", "loose"):
        raise ValueError("spread is 'tight' or 'loose'")
    if n_points == 0:
        return inst
    spec = inst.spec
    rng = _rng(seed, "clusters")
    parents = [pair[0] for pair in inst.correspondence]
    d = inst.F_true.shape[1]
    pts = []
    for _ in range(n_points):
        p = inst.F_true[parents[rng.integers(len(parents))]]
        sig = float(positional_sigma(spec, p[None])[0])
        mag = rng.uniform(0.0, 0.5) * sig if spread == "tight" else rng.uniform(2.0, 4.0) * sig
        direction = rng.normal(size=d)
        pts.append(p + mag * direction / np.linalg.norm(direction))
    F_new = np.array(pts).reshape(n_points, d)
    M_new = _apply_inverse(inst.theta_g, F_new)
    psF, ppF = _measure(F_new, spec, _rng(seed, "cluster-F-noise"), "F")
    psM, ppM = _measure(M_new, spec, _rng(seed, "cluster-M-noise"), "M")
    nF, nM = len(inst.F), len(inst.M)
    pairs = inst.correspondence + tuple((nF + j, nM + j) for j in range(n_points))
    return replace(inst, F=_stack(inst.F, psF), M=_stack(inst.M, psM),
                   F_polar=_stack_polar(inst.F_polar, ppF), M_polar=_stack_polar(inst.M_polar, ppM),
                   F_true=np.vstack([inst.F_true, F_new]), M_true=np.vstack([inst.M_true, M_new]),
                   correspondence=pairs)
