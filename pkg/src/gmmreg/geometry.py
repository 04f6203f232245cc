"""Rigid 2D transforms, polar/cartesian conversion and their Jacobians.

All angles are radians.  A motion is either a pose ``(tx, ty, phi_z)`` or a
velocity ``(vx, vy, omega)`` held over an interval ``tau``; both map onto
the same rigid transform ``p' = R(phi_z) p + t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSD_TOL = -1e-12


def rot2(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def check_covariance(cov: np.ndarray, name: str = "cov") -> np.ndarray:
    """Validate a covariance: square, symmetric, eigenvalues >= -1e-12."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError(f"{name} is not symmetric")
    if np.min(np.linalg.eigvalsh(cov)) < PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semi-definite")
    return cov


@dataclass(frozen=True)
class PolarTarget:
    """One radar detection in the sensor frame."""

    r: float
    phi: float
    sigma_r: float
    sigma_phi: float
    v: float | None = None
    sigma_v: float | None = None

    def __post_init__(self):
        if not (self.r >= 0.0):
            raise ValueError(f"range must be >= 0, got {self.r}")
        if not (self.sigma_r > 0.0 and self.sigma_phi > 0.0):
            raise ValueError("sigma_r and sigma_phi must be > 0")
        if self.v is not None and not (self.sigma_v is not None and self.sigma_v > 0.0):
            raise ValueError("sigma_v must be > 0 when a Doppler velocity is given")

    @property
    def has_doppler(self) -> bool:
        return self.v is not None


@dataclass(frozen=True)
class CartesianTarget:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        cov = check_covariance(np.atleast_2d(np.asarray(self.cov, dtype=float)))
        if cov.shape[0] != mu.shape[0]:
            raise ValueError("mu and cov dimensions differ")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class SensorOffset:
    x_s: float = 0.0
    y_s: float = 0.0
    alpha_s: float = 0.0


@dataclass(frozen=True)
class MotionParams:
    """Rigid motion, tagged as ``pose`` or ``velocity``.

    ``values`` holds ``(tx, ty, phi_z)`` for a pose and ``(vx, vy, omega)``
    for a velocity; ``tau`` is the scan interval (required for velocity).
    """

    kind: str = "pose"
    values: tuple = (0.0, 0.0, 0.0)
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in ("pose", "velocity"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        vals = tuple(float(v) for v in np.asarray(self.values, dtype=float).reshape(-1))
        if len(vals) != 3:
            raise ValueError("motion needs exactly three values")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("motion values must be finite")
        if self.kind == "velocity" and not (self.tau is not None and self.tau > 0):
            raise ValueError("velocity motion requires tau > 0")
        object.__setattr__(self, "values", vals)

    @classmethod
    def pose(cls, tx: float = 0.0, ty: float = 0.0, phi_z: float = 0.0) -> "MotionParams":
        return cls("pose", (tx, ty, phi_z))

    @classmethod
    def velocity(cls, vx: float, vy: float, omega: float, tau: float) -> "MotionParams":
        return cls("velocity", (vx, vy, omega), tau)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.values)

    def with_vector(self, x) -> "MotionParams":
        return MotionParams(self.kind, tuple(np.asarray(x, dtype=float)), self.tau)

    def as_pose(self) -> np.ndarray:
        """Return ``(tx, ty, phi_z)`` regardless of kind."""
        if self.kind == "pose":
            return self.vector
        return self.vector * self.tau

    def to_pose(self) -> "MotionParams":
        return MotionParams("pose", tuple(self.as_pose()))

    def to_velocity(self, tau: float) -> "MotionParams":
        if self.kind == "velocity":
            return MotionParams("velocity", self.values, tau)
        return MotionParams("velocity", tuple(self.vector / tau), tau)

    def inverse(self) -> "MotionParams":
        tx, ty, phi = self.as_pose()
        t = -rot2(-phi) @ np.array([tx, ty])
        return MotionParams.pose(t[0], t[1], -phi)


def pose_vector(theta) -> np.ndarray:
    """Coerce a MotionParams or raw vector to ``(tx, ty, phi_z)``.

    A 1-vector (or scalar) is read as ``tx`` alone, which is how the 1D
    scenarios are parameterised.
    """
    if isinstance(theta, MotionParams):
        return theta.as_pose()
    x = np.atleast_1d(np.asarray(theta, dtype=float))
    if x.shape == (1,):
        return np.array([x[0], 0.0, 0.0])
    if x.shape == (3,):
        return x
    raise ValueError(f"cannot interpret motion vector of shape {x.shape}")


def polar_to_cartesian(t: PolarTarget, off: SensorOffset = SensorOffset()) -> CartesianTarget:
    a = t.phi + off.alpha_s
    c, s = math.cos(a), math.sin(a)
    mu = np.array([t.r * c + off.x_s, t.r * s + off.y_s])
    # columns: d/dr, d/dphi
    J = np.array([[c, -t.r * s], [s, t.r * c]])
    cov = J @ np.diag([t.sigma_r**2, t.sigma_phi**2]) @ J.T
    return CartesianTarget(mu, 0.5 * (cov + cov.T))


def polar_arrays_to_cartesian(r, phi, sigma_r, sigma_phi, off: SensorOffset = SensorOffset()):
    """Vectorised ``polar_to_cartesian``; returns ``(mu (n,2), cov (n,2,2))``."""
    r = np.asarray(r, dtype=float)
    a = np.asarray(phi, dtype=float) + off.alpha_s
    c, s = np.cos(a), np.sin(a)
    mu = np.stack([r * c + off.x_s, r * s + off.y_s], axis=-1)
    sr2 = np.broadcast_to(np.asarray(sigma_r, dtype=float) ** 2, r.shape)
    sp2 = np.broadcast_to(np.asarray(sigma_phi, dtype=float) ** 2, r.shape)
    rs, rc = r * s, r * c
    cov = np.empty(r.shape + (2, 2))
    cov[..., 0, 0] = c * c * sr2 + rs * rs * sp2
    cov[..., 1, 1] = s * s * sr2 + rc * rc * sp2
    cov[..., 0, 1] = cov[..., 1, 0] = c * s * sr2 - rs * rc * sp2
    return mu, cov


def cartesian_to_polar(xy, off: SensorOffset = SensorOffset()):
    xy = np.asarray(xy, dtype=float)
    dx = xy[..., 0] - off.x_s
    dy = xy[..., 1] - off.y_s
    return np.hypot(dx, dy), np.arctan2(dy, dx) - off.alpha_s


def transform(p: CartesianTarget, theta) -> CartesianTarget:
    if p.dim == 1:
        tx = pose_vector(theta)[0]
        return CartesianTarget(p.mu + tx, p.cov)
    tx, ty, phi = pose_vector(theta)
    R = rot2(phi)
    return CartesianTarget(R @ p.mu + np.array([tx, ty]), R @ p.cov @ R.T)


def transform_arrays(mu: np.ndarray, cov: np.ndarray, theta):
    """Apply a motion to stacked means ``(n,d)`` and covariances ``(n,d,d)``."""
    tx, ty, phi = pose_vector(theta)
    if mu.shape[-1] == 1:
        return mu + tx, cov
    R = rot2(phi)
    return mu @ R.T + np.array([tx, ty]), R @ cov @ R.T


def transform_jacobian(p: CartesianTarget, theta) -> np.ndarray:
    """Analytic 2x3 Jacobian of the transformed mean w.r.t. ``(tx, ty, phi_z)``."""
    _, _, phi = pose_vector(theta)
    c, s = math.cos(phi), math.sin(phi)
    x, y = p.mu
    return np.array([[1.0, 0.0, -s * x - c * y], [0.0, 1.0, c * x - s * y]])


def compose(pose, delta) -> np.ndarray:
    """SE(2) composition ``pose ⊕ delta`` with delta expressed in pose's frame."""
    x, y, h = pose
    dx, dy, dh = delta
    c, s = math.cos(h), math.sin(h)
    return np.array([x + c * dx - s * dy, y + s * dx + c * dy, h + dh])
