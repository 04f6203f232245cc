"""Covariance of an estimate θ̂: inverse Hessian and implicit-function propagation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .optim import numeric_gradient, numeric_hessian

EIG_CLIP = 1e-12


class NotAtOptimumError(ValueError):
    pass


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, msg, null_direction=None):
        super().__init__(msg)
        self.null_direction = null_direction


class VerticalTangentError(ZeroDivisionError):
    pass


class ConstraintViolationError(ValueError):
    pass


@dataclass(frozen=True)
class PoseCovariance:
    sigma_theta: np.ndarray
    method: str

    def to_json(self) -> dict:
        return {"method": self.method, "shape": list(self.sigma_theta.shape),
                "data": [float(v) for v in self.sigma_theta.reshape(-1)]}


@dataclass(frozen=True)
class InputNoise:
    """Per-measurement covariance blocks; ``matrix`` stacks them block-diagonally."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks)
        for b in blocks:
            np.linalg.cholesky(b)
        object.__setattr__(self, "blocks", blocks)

    @property
    def matrix(self) -> np.ndarray:
        n = sum(b.shape[0] for b in self.blocks)
        out = np.zeros((n, n))
        i = 0
        for b in self.blocks:
            k = b.shape[0]
            out[i:i + k, i:i + k] = b
            i += k
        return out


def _spd_inverse(H: np.ndarray, what: str) -> np.ndarray:
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    scale = max(1.0, float(np.max(np.abs(w))))
    k = int(np.argmin(np.abs(w)))
    if abs(w[k]) < 1e-12 * scale:
        raise RankDeficiencyError(f"{what} is singular; null direction {V[:, k].round(6).tolist()}", V[:, k])
    return V @ np.diag(1.0 / w) @ V.T


def clip_psd(S: np.ndarray, floor: float = EIG_CLIP) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    out = V @ np.diag(np.maximum(w, floor)) @ V.T
    return 0.5 * (out + out.T)


def fisher_covariance(f: Callable, theta_hat, grad_tol: float = 1e-6, fd_step: float = 1e-4,
                      check_gradient: bool = True) -> PoseCovariance:
    """Inverse numeric Hessian of a negative log-likelihood at its minimum."""
    x = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    if check_gradient:
        g = numeric_gradient(f, x)
        if np.linalg.norm(g) >= grad_tol:
            raise NotAtOptimumError(f"gradient norm {np.linalg.norm(g):.3g} at θ̂ exceeds {grad_tol:g}")
    H = numeric_hessian(f, x, fd_step)
    return PoseCovariance(clip_psd(_spd_inverse(H, "Hessian")), "fisher")


def mixed_partials(f: Callable, z, theta, step: float = 1e-5) -> np.ndarray:
    """∂²f/∂θ∂z by nested central differences, shape (n_theta, n_z)."""
    z = np.asarray(z, dtype=float)
    x = np.atleast_1d(np.asarray(theta, dtype=float))
    G = np.empty((x.size, z.size))
    for i in range(x.size):
        ei = np.zeros_like(x)
        ei[i] = step
        for j in range(z.size):
            ej = np.zeros_like(z)
            ej[j] = step
            G[i, j] = (f(z + ej, x + ei) - f(z + ej, x - ei) - f(z - ej, x + ei) + f(z - ej, x - ei)) / (4.0 * step * step)
    return G


def propagation_covariance(f2_theta, f2_mixed, input_noise) -> PoseCovariance:
    """H⁻¹ G Σ_z Gᵀ H⁻¹ with H = ∂²f/∂θ² and G = ∂²f/∂θ∂z."""
    H = np.atleast_2d(np.asarray(f2_theta, dtype=float))
    G = np.atleast_2d(np.asarray(f2_mixed, dtype=float))
    Sz = input_noise.matrix if isinstance(input_noise, InputNoise) else np.atleast_2d(input_noise)
    if G.shape != (H.shape[0], Sz.shape[0]):
        raise ValueError(f"mixed partials shape {G.shape} inconsistent with H {H.shape} and Σ_z {Sz.shape}")
    Hinv = _spd_inverse(H, "∂²f/∂θ²")
    return PoseCovariance(clip_psd(Hinv @ G @ Sz @ G.T @ Hinv, 0.0), "error_propagation")


def propagation_from_objective(f: Callable, z, theta_hat, input_noise, fd_step: float = 1e-4,
                               mixed_step: float = 1e-5) -> PoseCovariance:
    """Convenience wrapper: ``f(z, θ)`` differentiated numerically at (z, θ̂)."""
    z = np.asarray(z, dtype=float)
    H = numeric_hessian(lambda t: f(z, t), theta_hat, fd_step)
    G = mixed_partials(f, z, theta_hat, mixed_step)
    return propagation_covariance(H, G, input_noise)


def implicit_tangent(Phi: Callable, x0: float, y0: float, h: float = 1e-6, tol: float = 1e-9) -> float:
    """dy/dx = -Φ_x / Φ_y on the curve Φ(x, y) = 0."""
    v = Phi(x0, y0)
    if abs(v) > tol:
        raise ConstraintViolationError(f"Φ({x0}, {y0}) = {v:g} is not on the curve")
    phi_x = (Phi(x0 + h, y0) - Phi(x0 - h, y0)) / (2 * h)
    phi_y = (Phi(x0, y0 + h) - Phi(x0, y0 - h)) / (2 * h)
    if abs(phi_y) < 1e-12:
        raise VerticalTangentError("∂Φ/∂y vanishes: vertical tangent")
    return -phi_x / phi_y
