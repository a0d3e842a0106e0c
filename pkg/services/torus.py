"""
Circle of optima in R^3: f(x) = (sqrt(x1^2 + x2^2) - 1)^2 + x3^2.

Level sets of F(x) = (s, v) are circles of radius 1 + s cos v, and the
normal determinant of F is 1/s. Density convention is exp(-beta f).
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional

import numpy as np
import structlog

from config import get_settings
from errors import DegenerateProjection, DomainError
from services.manifold import NormalDeterminant, central_jacobian, restricted_determinant
from services.rng import RngStream

logger = structlog.get_logger("torus")

TWO_PI = 2.0 * math.pi


class ChiFunction(str, Enum):
    ONE = "one"
    COS_U = "cos_u"
    S_SQUARED = "s_squared"


@dataclass(frozen=True)
class TorusCoords:
    s: float
    u: float
    v: float


@dataclass(frozen=True)
class DecompositionCheck:
    chi: ChiFunction
    lhs: float
    rhs: float
    lhs_coarse: float
    rhs_coarse: float
    converged: bool

    @property
    def abs_diff(self) -> float:
        return abs(self.lhs - self.rhs)


# --- LOSS ---

def _rho(x: np.ndarray) -> np.ndarray:
    rho = np.hypot(x[..., 0], x[..., 1])
    if np.any(rho == 0.0):
        raise DegenerateProjection("point on the z-axis has no nearest point on the circle")
    return rho


def torus_loss(x) -> float:
    x = np.asarray(x, dtype=float)
    return float((_rho(x) - 1.0) ** 2 + x[2] ** 2)


def torus_gradient(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    rho = _rho(x)
    scale = 2.0 * (rho - 1.0) / rho
    return np.array([scale * x[0], scale * x[1], 2.0 * x[2]])


class TorusObjective:
    """Objective protocol over batches of shape (..., 3)."""

    def loss(self, x: np.ndarray) -> np.ndarray:
        return (_rho(x) - 1.0) ** 2 + x[..., 2] ** 2

    def gradient(self, x: np.ndarray) -> np.ndarray:
        rho = _rho(x)
        scale = 2.0 * (rho - 1.0) / rho
        return np.stack([scale * x[..., 0], scale * x[..., 1], 2.0 * x[..., 2]], axis=-1)


# --- CHART ---

def _coords_array(x: np.ndarray) -> np.ndarray:
    """(s, u, v) along the last axis."""
    rho = _rho(x)
    radial = rho - 1.0
    s = np.hypot(radial, x[..., 2])
    u = np.arctan2(x[..., 1], x[..., 0]) % TWO_PI
    v = np.where(s > 0, np.arctan2(x[..., 2], radial) % TWO_PI, 0.0)
    return np.stack([s, u, v], axis=-1)


def _point_array(s, u, v) -> np.ndarray:
    ring = 1.0 + s * np.cos(v)
    return np.stack(np.broadcast_arrays(ring * np.cos(u), ring * np.sin(u), s * np.sin(v)), axis=-1)


def torus_coords(x) -> TorusCoords:
    s, u, v = _coords_array(np.asarray(x, dtype=float))
    return TorusCoords(s=float(s), u=float(u), v=float(v))


def torus_point(c: TorusCoords) -> np.ndarray:
    return _point_array(c.s, c.u, c.v)


def torus_normal_determinant(x, step: Optional[float] = None) -> NormalDeterminant:
    """Numeric det of dF restricted to ker(dF)^perp for F(x) = (s, v)."""
    x = np.asarray(x, dtype=float)
    c = torus_coords(x)
    if c.s == 0.0:
        raise DomainError("normal determinant is singular on the circle (s = 0)")
    step = (step or get_settings().FD_STEP) * min(c.s, 1.0)
    jac = central_jacobian(lambda z: _coords_array(z)[[0, 2]], x, step, periodic=np.array([False, True]))
    return restricted_determinant(jac, 2)


def _determinant_grid(s: np.ndarray, v: np.ndarray, rel_step: float) -> np.ndarray:
    """Vectorised numeric det(dF) at u = 0 for every (s, v) pair, step scaled by s."""
    base = _point_array(s, 0.0, v)
    step = (rel_step * s)[..., None]
    jac = np.empty(base.shape[:-1] + (2, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        e = e * step
        diff = _coords_array(base + e)[..., [0, 2]] - _coords_array(base - e)[..., [0, 2]]
        diff[..., 1] = (diff[..., 1] + math.pi) % TWO_PI - math.pi
        jac[..., :, i] = diff / (2.0 * step)
    return np.sqrt(np.linalg.det(jac @ np.swapaxes(jac, -1, -2)))


# --- DECOMPOSITION IDENTITY ---

def _chi(chi: ChiFunction, x: np.ndarray) -> np.ndarray:
    if chi == ChiFunction.ONE:
        return np.ones(x.shape[:-1])
    if chi == ChiFunction.COS_U:
        return x[..., 0] / np.hypot(x[..., 0], x[..., 1])
    return (np.hypot(x[..., 0], x[..., 1]) - 1.0) ** 2 + x[..., 2] ** 2


def _ambient_expectation(beta: float, chi: ChiFunction, s_max: float, n: int) -> float:
    """E[chi] under exp(-beta f) on the solid torus, in cylindrical coordinates."""
    theta, w_theta = np.polynomial.legendre.leggauss(n)
    theta, w_theta = 0.5 * math.pi * theta, 0.5 * math.pi * w_theta
    t, w_t = np.polynomial.legendre.leggauss(n)
    phi = np.arange(2 * n) * (TWO_PI / (2 * n))

    th, tt, ph = np.meshgrid(theta, t, phi, indexing="ij")
    rho = 1.0 + s_max * np.sin(th)
    half_width = s_max * np.cos(th)
    z = half_width * tt
    x = np.stack([rho * np.cos(ph), rho * np.sin(ph), z], axis=-1)

    weight = (w_theta[:, None, None] * w_t[None, :, None]) * rho * half_width * s_max * np.cos(th)
    density = weight * np.exp(-beta * ((rho - 1.0) ** 2 + z ** 2))
    return float(np.sum(density * _chi(chi, x)) / np.sum(density))


def _iterated_expectation(beta: float, chi: ChiFunction, s_max: float, n: int) -> float:
    """E_q E_{level set}[chi] with q(s, v) weighted by exp(-beta s^2) / det(dF) times level-set length."""
    s, w_s = np.polynomial.legendre.leggauss(n)
    s, w_s = 0.5 * s_max * (s + 1.0), 0.5 * s_max * w_s
    v = np.arange(2 * n) * (TWO_PI / (2 * n))
    u = np.arange(2 * n) * (TWO_PI / (2 * n))

    sg, vg = np.meshgrid(s, v, indexing="ij")
    det = _determinant_grid(sg, vg, get_settings().FD_STEP)
    length = TWO_PI * (1.0 + sg * np.cos(vg))
    q = w_s[:, None] * np.exp(-beta * sg ** 2) / det * length

    x = _point_array(sg[..., None], u[None, None, :], vg[..., None])
    inner = _chi(chi, x).mean(axis=-1)
    return float(np.sum(q * inner) / np.sum(q))


def torus_decomposition_check(
    beta: float,
    chi: ChiFunction,
    s_max: float,
    nodes: Optional[int] = None,
    tol: Optional[float] = None,
) -> DecompositionCheck:
    """Both sides of E_p[chi] = E_q E_{p|level}[chi], each checked against a half-resolution rerun."""
    if not (0 < s_max < 1):
        raise DomainError("s_max must lie in (0, 1)")
    settings = get_settings()
    n = nodes or settings.QUADRATURE_NODES
    tol = settings.QUADRATURE_TOL if tol is None else tol
    chi = ChiFunction(chi)

    lhs, lhs_coarse = (_ambient_expectation(beta, chi, s_max, m) for m in (n, n // 2))
    rhs, rhs_coarse = (_iterated_expectation(beta, chi, s_max, m) for m in (n, n // 2))
    converged = all(abs(a - b) <= tol * max(1.0, abs(a)) for a, b in ((lhs, lhs_coarse), (rhs, rhs_coarse)))
    if not converged:
        logger.warning("Torus quadrature not converged", chi=chi.value, lhs=lhs, lhs_coarse=lhs_coarse, rhs=rhs, rhs_coarse=rhs_coarse)
    return DecompositionCheck(chi=chi, lhs=lhs, rhs=rhs, lhs_coarse=lhs_coarse, rhs_coarse=rhs_coarse, converged=converged)


# --- CHAIN ---

def torus_langevin(
    beta: float,
    h: float,
    steps: int,
    chains: int,
    rng: RngStream,
    thin: int = 1,
    burnin: int = 0,
    start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Batched Euler chains on the torus loss; returns retained samples (records x chains x 3)."""
    objective = TorusObjective()
    x = np.tile(np.array([1.0, 0.0, 0.0]) if start is None else np.asarray(start, dtype=float), (chains, 1))
    kept = []
    scale = math.sqrt(2.0 * h)
    for step in range(1, steps + 1):
        x = x - h * beta * objective.gradient(x) + scale * rng.standard_normal(x.shape)
        if step > burnin and (step - burnin) % thin == 0:
            kept.append(x.copy())
    if not kept:
        return np.empty((0, chains, 3))
    return np.stack(kept)


def torus_marginals(samples: np.ndarray, beta: float, bins: int = 20, s_max: float = 1.0) -> Dict[str, np.ndarray]:
    """
    Histogram densities of u and s with their references: uniform on
    [0, 2pi) for u, and 2 beta s exp(-beta s^2) (truncated to s_max) for s.
    """
    c = _coords_array(samples.reshape(-1, 3))
    s, u = c[:, 0], c[:, 1]

    u_edges = np.linspace(0.0, TWO_PI, bins + 1)
    u_density, _ = np.histogram(u, bins=u_edges, density=True)

    s_edges = np.linspace(0.0, s_max, bins + 1)
    s_density, _ = np.histogram(s, bins=s_edges, density=True)
    mass = 1.0 - math.exp(-beta * s_max ** 2)
    s_ref = np.diff(-np.exp(-beta * s_edges ** 2)) / (np.diff(s_edges) * mass)

    return {
        "u_edges": u_edges,
        "u_density": u_density,
        "u_reference": np.full(bins, 1.0 / TWO_PI),
        "s_edges": s_edges,
        "s_density": s_density,
        "s_reference": s_ref,
    }
