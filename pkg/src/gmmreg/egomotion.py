"""Radar ego-motion from consecutive scans with an optional Doppler term.

The motion is a velocity ``θ = (vx, vy, ω)`` held over ``τ = t_curr - t_prev``;
current targets are moved into the previous frame by ``R(ωτ) m + (vx τ, vy τ)``.
Per current target k the joint score is

    log[(1 - α) · Inlier_k · Doppler_k + α · Outlier_k]

with the Doppler factor a Gaussian on ``v_k - V(m_k, θ)``.  Only the inlier
branch carries it, so a moving object can still escape through the outlier
branch.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cost import CostModel, OutlierModel, branch_logs, combine_branches, fuse
from .covest import fisher_covariance
from .geometry import (MotionParams, PolarTarget, SensorOffset, compose, polar_arrays_to_cartesian,
                       rot2)
from .metrics import PointSet
from .optim import DivergenceError, NonFiniteError, OptimizerConfig, minimize
from .scenario import derive_seed

MAX_TARGETS = 48
DEFAULT_SIGMA_V = 0.1
FALLBACK_VARIANCE = 1e6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RadarScan:
    timestamp: float
    targets: tuple
    max_targets: int = MAX_TARGETS

    def __post_init__(self):
        targets = tuple(self.targets)
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        if len(targets) > self.max_targets:
            raise ValueError(f"scan has {len(targets)} targets, limit is {self.max_targets}")
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return len(self.targets)

    def arrays(self) -> dict:
        """Column arrays; ``v`` / ``sigma_v`` are NaN where Doppler is missing."""
        t = self.targets
        col = lambda name: np.array([getattr(x, name) if getattr(x, name) is not None else math.nan  # noqa: E731
                                     for x in t], dtype=float)
        return {k: col(k) for k in ("r", "phi", "sigma_r", "sigma_phi", "v", "sigma_v")}


@dataclass(frozen=True)
class EgoState:
    theta_hat: MotionParams
    sigma_theta: np.ndarray
    converged: bool
    used_doppler: bool
    init_source: str = "zero"
    message: str = ""

    def to_json(self, t: float | None = None) -> str:
        body = {"t": t, "vx": self.theta_hat.values[0], "vy": self.theta_hat.values[1],
                "omega": self.theta_hat.values[2], "tau": self.theta_hat.tau,
                "sigma_theta": np.asarray(self.sigma_theta).tolist(), "converged": self.converged,
                "used_doppler": self.used_doppler, "init_source": self.init_source, "message": self.message}
        return json.dumps(body, sort_keys=True)


@dataclass(frozen=True)
class AnnealConfig:
    enabled: bool = False
    factor: float = 10.0
    rounds: int = 2

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError("anneal factor must be > 0")
        if self.rounds < 2:
            raise ValueError("annealing needs at least 2 rounds")


@dataclass(frozen=True)
class EgoConfig:
    sensor: SensorOffset = field(default_factory=SensorOffset)
    outlier_alpha: float = 0.2
    outlier_sigma: np.ndarray = field(default_factory=lambda: 100.0 * np.eye(2))
    use_doppler: bool = False
    annealing: AnnealConfig = field(default_factory=AnnealConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if not 0.0 <= self.outlier_alpha < 1.0:
            raise ValueError("outlier_alpha must lie in [0, 1)")
        object.__setattr__(self, "outlier_sigma", np.asarray(self.outlier_sigma, dtype=float))

    def cost_model(self) -> CostModel:
        if self.outlier_alpha == 0.0:
            out = OutlierModel()
        else:
            out = OutlierModel("corrupted_gaussian", self.outlier_alpha, sigma_outlier=self.outlier_sigma)
        return CostModel("d2d", "likelihood", out)


# Doppler model ------------------------------------------------------------------

def _vel(theta) -> np.ndarray:
    if isinstance(theta, MotionParams):
        if theta.kind != "velocity":
            raise ValueError("Doppler model needs a velocity-kind motion")
        return theta.vector
    return np.asarray(theta, dtype=float)


def _sensor_velocity(theta, off: SensorOffset):
    vx, vy, w = _vel(theta)
    return vx - w * off.y_s, vy + w * off.x_s


def expected_doppler(t: PolarTarget, theta, off: SensorOffset = SensorOffset()) -> float:
    """V = -(vx - ω y_s) cos(φ + α_s) - (vy + ω x_s) sin(φ + α_s)."""
    ux, uy = _sensor_velocity(theta, off)
    a = t.phi + off.alpha_s
    return -ux * math.cos(a) - uy * math.sin(a)


def doppler_variance(t: PolarTarget, theta, off: SensorOffset = SensorOffset()) -> float:
    """(∂V/∂φ)² σ_φ²."""
    ux, uy = _sensor_velocity(theta, off)
    a = t.phi + off.alpha_s
    dv = ux * math.sin(a) - uy * math.cos(a)
    return dv * dv * t.sigma_phi**2


def doppler_component(t: PolarTarget, theta, off: SensorOffset = SensorOffset()) -> float:
    """log N(0 | v - V, σ_v² + (∂V/∂φ)² σ_φ²)."""
    if not t.has_doppler:
        raise ValueError("target has no Doppler measurement")
    g = t.sigma_v**2 + doppler_variance(t, theta, off)
    res = t.v - expected_doppler(t, theta, off)
    return -0.5 * (LOG_2PI + math.log(g) + res * res / g)


def _doppler_logs(phi, v, sigma_v, sigma_phi, theta, off: SensorOffset):
    """Vectorised ``doppler_component``; zero where Doppler is missing."""
    ux, uy = _sensor_velocity(theta, off)
    a = phi + off.alpha_s
    c, s = np.cos(a), np.sin(a)
    dv = ux * s - uy * c
    g = sigma_v**2 + dv * dv * sigma_phi**2
    res = v - (-ux * c - uy * s)
    out = -0.5 * (LOG_2PI + np.log(g) + res * res / g)
    return np.where(np.isnan(v), 0.0, out)


def doppler_residuals(scan: RadarScan, theta, off: SensorOffset = SensorOffset()):
    """Whitened Doppler residuals and their analytic Jacobian w.r.t. (vx, vy, ω).

    The variance is frozen at θ for the Jacobian (Gauss-Newton convention).
    Targets without Doppler are skipped.
    """
    A = scan.arrays()
    keep = ~np.isnan(A["v"])
    phi, v, sv, sp = A["phi"][keep], A["v"][keep], A["sigma_v"][keep], A["sigma_phi"][keep]
    ux, uy = _sensor_velocity(theta, off)
    a = phi + off.alpha_s
    c, s = np.cos(a), np.sin(a)
    dv = ux * s - uy * c
    sd = np.sqrt(sv**2 + dv * dv * sp**2)
    r = (v + ux * c + uy * s) / sd
    # dV/d(vx, vy, ω) = (-c, -s, y_s c - x_s s); residual is v - V
    J = np.column_stack([c, s, -off.y_s * c + off.x_s * s]) / sd[:, None]
    return r, J


# joint objective ---------------------------------------------------------------------

def scan_pointset(scan: RadarScan, off: SensorOffset = SensorOffset(), label: str = "F") -> PointSet:
    if len(scan) == 0:
        raise ValueError("scan has no targets")
    A = scan.arrays()
    mu, cov = polar_arrays_to_cartesian(A["r"], A["phi"], A["sigma_r"], A["sigma_phi"], off)
    return PointSet(mu, cov, label)


def _tau(prev: RadarScan, curr: RadarScan) -> float:
    tau = curr.timestamp - prev.timestamp
    if not tau > 0:
        raise ValueError(f"scan interval must be > 0, got {tau}")
    return tau


def make_joint_objective(prev: RadarScan, curr: RadarScan, cfg: EgoConfig, cov_scale: float = 1.0):
    """Closure ``f(x)`` over ``x = (vx, vy, ω)``; ``cov_scale`` multiplies target covariances."""
    tau = _tau(prev, curr)
    F = scan_pointset(prev, cfg.sensor, "F")
    M = scan_pointset(curr, cfg.sensor, "M")
    if cov_scale != 1.0:
        F, M = F.scaled(math.sqrt(cov_scale)), M.scaled(math.sqrt(cov_scale))
    model = cfg.cost_model()
    alpha = model.outlier.alpha
    log_w = np.full(len(F), -math.log(len(F)))
    A = curr.arrays()
    use_doppler = cfg.use_doppler and not np.all(np.isnan(A["v"]))

    def f(x):
        x = _vel(x)
        tx, ty, phi = x * tau
        R = rot2(phi)
        mu = M.mu @ R.T + np.array([tx, ty])
        cov = R @ M.cov @ R.T
        inl, out = branch_logs(mu, cov, F, model, log_w)
        extra = None
        if use_doppler:
            extra = _doppler_logs(A["phi"], A["v"], A["sigma_v"], A["sigma_phi"], x, cfg.sensor)
        return fuse(combine_branches(inl, out, alpha, extra), "likelihood")

    return f


def joint_objective(prev: RadarScan, curr: RadarScan, theta, cfg: EgoConfig) -> float:
    """-log of the joint spatial and Doppler likelihood at velocity θ."""
    return make_joint_objective(prev, curr, cfg)(_vel(theta))


# estimation ------------------------------------------------------------------------------

def anneal_schedule(prev: RadarScan, curr: RadarScan, cfg: EgoConfig, init=None) -> MotionParams:
    """Coarse-to-fine start: minimise with covariances inflated by factor², shrinking per round.

    Returns the starting point for the final, unscaled round.
    """
    tau = _tau(prev, curr)
    x = np.zeros(3) if init is None else _vel(init).copy()
    ac = cfg.annealing
    n_scaled = ac.rounds - 1
    if ac.factor != 1.0:
        for j in range(n_scaled):
            factor = ac.factor ** ((n_scaled - j) / n_scaled)
            f = make_joint_objective(prev, curr, cfg, factor * factor)
            x = minimize(f, x, cfg.optimizer).x
    return MotionParams.velocity(*x, tau=tau)


def estimate_step(prev: RadarScan, curr: RadarScan, init: EgoState | None, cfg: EgoConfig) -> EgoState:
    """One scan pair: constant-velocity start, optional annealing, minimise, Fisher covariance."""
    tau = _tau(prev, curr)
    if init is not None and init.converged:
        x0, source = init.theta_hat.vector, "constant_velocity"
    else:
        x0, source = np.zeros(3), "zero"
    start = MotionParams.velocity(*x0, tau=tau)
    used_doppler = cfg.use_doppler and any(t.has_doppler for t in curr.targets)
    f = make_joint_objective(prev, curr, cfg)
    try:
        if cfg.annealing.enabled:
            start = anneal_schedule(prev, curr, cfg, x0)
            source += "+anneal"
        res = minimize(f, start.vector, cfg.optimizer)
    except (DivergenceError, NonFiniteError, np.linalg.LinAlgError) as exc:
        return EgoState(MotionParams.velocity(*x0, tau=tau), FALLBACK_VARIANCE * np.eye(3), False,
                        used_doppler, source, f"optimizer failed: {exc}")
    theta = MotionParams.velocity(*res.x, tau=tau)
    try:
        sigma = fisher_covariance(f, res.x, check_gradient=False).sigma_theta
        message = res.message
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        sigma = FALLBACK_VARIANCE * np.eye(3)
        message = f"{res.message}; covariance failed: {exc}"
    return EgoState(theta, sigma, res.converged, used_doppler, source, message)


def run_sequence(scans, cfg: EgoConfig) -> list:
    """Estimate every consecutive pair of a scan stream; returns ``(t_curr, EgoState)`` pairs."""
    out = []
    prev = None
    state = None
    for scan in scans:
        if prev is not None:
            state = estimate_step(prev, scan, state, cfg)
            out.append((scan.timestamp, state))
        prev = scan
    return out


def integrate_trajectory(states, timestamps) -> list:
    """Dead-reckoned global poses ``(x, y, heading)``, one per timestamp.

    ``timestamps`` holds the scan times, one more than ``states``; the first
    pose is the origin.  Drift accumulates by construction.
    """
    states = list(states)
    ts = [float(t) for t in timestamps]
    if len(ts) != len(states) + 1:
        raise ValueError("need one more timestamp than states")
    pose = np.zeros(3)
    out = [pose]
    for s, t0, t1 in zip(states, ts, ts[1:]):
        tau = t1 - t0
        v = s.theta_hat.vector if isinstance(s, EgoState) else _vel(s)
        pose = compose(pose, v * tau)
        out.append(pose)
    return out


# I/O -----------------------------------------------------------------------------------

class ScanReader:
    """Streaming JSON-lines scan reader.

    Checks that timestamps strictly increase and drops zero-range targets,
    counting them in ``dropped_targets``.
    """

    def __init__(self, lines, default_sigma_v: float = DEFAULT_SIGMA_V, max_targets: int = MAX_TARGETS):
        self._lines = lines
        self.default_sigma_v = default_sigma_v
        self.max_targets = max_targets
        self.dropped_targets = 0
        self.n_scans = 0

    def __iter__(self):
        last = -math.inf
        for lineno, line in enumerate(self._lines, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            t = float(rec["t"])
            if not t > last:
                raise ValueError(f"line {lineno}: timestamp {t} does not increase")
            last = t
            targets = []
            for d in rec["targets"]:
                if float(d["r"]) == 0.0:
                    self.dropped_targets += 1
                    continue
                v = d.get("v")
                sv = d.get("sv", self.default_sigma_v if v is not None else None)
                targets.append(PolarTarget(float(d["r"]), float(d["phi"]), float(d["sr"]), float(d["sphi"]),
                                           None if v is None else float(v), None if sv is None else float(sv)))
            self.n_scans += 1
            yield RadarScan(t, tuple(targets), self.max_targets)


def read_scans(path, **kw) -> list:
    with open(path) as fh:
        reader = ScanReader(fh, **kw)
        scans = list(reader)
    return scans


def scan_to_json(scan: RadarScan) -> str:
    tg = []
    for t in scan.targets:
        d = {"r": t.r, "phi": t.phi, "sr": t.sigma_r, "sphi": t.sigma_phi}
        if t.has_doppler:
            d["v"] = t.v
            d["sv"] = t.sigma_v
        tg.append(d)
    return json.dumps({"t": scan.timestamp, "targets": tg})


def trajectory_csv(timestamps, poses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "heading"])
    for t, p in zip(timestamps, poses):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in p])
    return buf.getvalue()


def truth_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "vx", "vy", "omega"])
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def read_truth(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["t"]), float(r["vx"]), float(r["vy"]), float(r["omega"])] for r in rows])


# synthetic replay ------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplaySpec:
    n_steps: int = 50
    vx: float = 2.0
    vy: float = 0.0
    omega: float = 0.0
    dt: float = 0.2
    n_landmarks: int = 40
    max_range: float = 30.0
    sigma_r: float = 0.2
    sigma_phi: float = 0.03
    sigma_v: float = DEFAULT_SIGMA_V
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.dt <= 0:
            raise ValueError("need n_steps >= 1 and dt > 0")


def synthetic_replay(spec: ReplaySpec = ReplaySpec(), off: SensorOffset = SensorOffset()):
    """Scans of a static landmark map seen from a platform at constant velocity.

    Returns ``(scans, truth)`` where ``truth`` rows are ``(t, vx, vy, omega)``
    for each scan pair.  Doppler follows the same model as the estimator.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "replay"))
    length = math.hypot(spec.vx, spec.vy) * spec.dt * spec.n_steps
    lo = np.array([-0.5 * spec.max_range, -0.7 * spec.max_range])
    hi = np.array([length + 0.5 * spec.max_range, 0.7 * spec.max_range])
    landmarks = rng.uniform(lo, hi, (spec.n_landmarks, 2))
    theta = np.array([spec.vx, spec.vy, spec.omega])
    pose = np.zeros(3)
    scans, truth = [], []
    for k in range(spec.n_steps + 1):
        t = k * spec.dt
        if k:
            pose = compose(pose, theta * spec.dt)
            truth.append((t, spec.vx, spec.vy, spec.omega))
        # landmarks into the vehicle frame, then the sensor frame
        local = (landmarks - pose[:2]) @ rot2(pose[2])
        rel = (local - np.array([off.x_s, off.y_s])) @ rot2(off.alpha_s)
        r = np.hypot(rel[:, 0], rel[:, 1])
        order = np.argsort(r, kind="stable")
        vis = [i for i in order if 0.5 < r[i] <= spec.max_range][:MAX_TARGETS]
        targets = []
        for i in vis:
            phi_true = math.atan2(rel[i, 1], rel[i, 0])
            probe = PolarTarget(r[i], phi_true, spec.sigma_r, spec.sigma_phi)
            v = expected_doppler(probe, theta, off) + rng.normal(0.0, spec.sigma_v)
            targets.append(PolarTarget(abs(r[i] + rng.normal(0.0, spec.sigma_r)),
                                       phi_true + rng.normal(0.0, spec.sigma_phi),
                                       spec.sigma_r, spec.sigma_phi, v, spec.sigma_v))
        scans.append(RadarScan(t, tuple(targets)))
    return scans, np.array(truth)


def with_doppler(cfg: EgoConfig, flag: bool) -> EgoConfig:
    return replace(cfg, use_doppler=flag)
