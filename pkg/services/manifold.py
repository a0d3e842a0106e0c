"""
Geometry of the optima orbits E_1, E_2 = {X0 U : U in O(k), det U = +/-1}.

Covers the branch-constrained Procrustes projection, tangent and normal
bases, the (S, Y, U) normal-coordinate chart and its inverse, and the
numeric normal determinant of the level-set map F(X) = (S, Y).
"""
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Tuple

import numpy as np
import structlog
from scipy.linalg import null_space

from config import get_settings
from errors import DegenerateProjection, DomainError, SizeError, TubeExceeded
from models import Variant
from services.rng import RngStream, haar_orthonormal

logger = structlog.get_logger("manifold")


# --- TYPES ---

@dataclass(frozen=True, eq=False)
class OrbitSpec:
    x0: np.ndarray
    branch: int = 1

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim != 2 or x0.shape[1] > x0.shape[0]:
            raise SizeError(f"x0 must be d x k with k <= d, got {x0.shape}")
        if self.branch not in (1, 2):
            raise DomainError(f"branch must be 1 or 2, got {self.branch}")
        if np.linalg.matrix_rank(x0) < x0.shape[1]:
            raise DomainError("x0 must have full column rank")
        object.__setattr__(self, "x0", x0)

    @property
    def d(self) -> int:
        return self.x0.shape[0]

    @property
    def k(self) -> int:
        return self.x0.shape[1]

    @property
    def sign(self) -> float:
        return 1.0 if self.branch == 1 else -1.0

    @cached_property
    def gram(self) -> np.ndarray:
        return self.x0.T @ self.x0

    @cached_property
    def gram_inv(self) -> np.ndarray:
        return np.linalg.inv(self.gram)

    @cached_property
    def sigma_min(self) -> float:
        return float(np.linalg.svd(self.x0, compute_uv=False)[-1])

    @cached_property
    def complement(self) -> np.ndarray:
        """Fixed orthonormal basis Y0 (d x (d-k)) of colspan(x0)^perp."""
        return null_space(self.x0.T)

    def other_branch(self) -> "OrbitSpec":
        return OrbitSpec(self.x0, 2 if self.branch == 1 else 1)


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    pi_x: np.ndarray
    u: np.ndarray
    branch: int
    distance: float


@dataclass(frozen=True, eq=False)
class NormalCoordinates:
    s: np.ndarray
    y: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class NormalDeterminant:
    value: float
    condition: float
    warning: Optional[str] = None


def _check_shape(spec: OrbitSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape != spec.x0.shape:
        raise SizeError(f"expected {spec.x0.shape} matrix, got {X.shape}")
    return X


# --- PROJECTION ---

def project_to_orbit(spec: OrbitSpec, X: np.ndarray) -> ProjectionResult:
    """
    Nearest point of the requested branch.

    Writes X = X0 R + V, takes the SVD A S B^T of R^T X0^T X0 and returns
    O = B A^T, flipping the column of B paired with the smallest singular
    value when det(O) has the wrong sign.
    """
    X = _check_shape(spec, X)
    if not np.all(np.isfinite(X)):
        raise DomainError("projection input must be finite")

    r = spec.gram_inv @ (spec.x0.T @ X)
    a, sv, bt = np.linalg.svd(r.T @ spec.gram)
    b = bt.T

    tol = get_settings().PROJECTION_RANK_TOL
    if sv[0] == 0.0 or sv[-1] <= tol * sv[0]:
        raise DegenerateProjection(
            f"R^T X0^T X0 is rank-deficient (singular values {sv[-1]:.3g} / {sv[0]:.3g})"
        )

    o = b @ a.T
    if np.sign(np.linalg.det(o)) != spec.sign:
        b[:, -1] *= -1.0
        o = b @ a.T

    pi_x = spec.x0 @ o
    return ProjectionResult(pi_x=pi_x, u=o, branch=spec.branch, distance=float(np.linalg.norm(X - pi_x)))


def eta(spec: OrbitSpec, X: np.ndarray) -> float:
    """Squared distance to the branch, ||X - Pi(X)||_F^2."""
    return project_to_orbit(spec, X).distance ** 2


def nearest_branch(x0: np.ndarray, X: np.ndarray) -> ProjectionResult:
    """Projection onto whichever branch is closer; ties go to branch 1."""
    first = project_to_orbit(OrbitSpec(x0, 1), X)
    second = project_to_orbit(OrbitSpec(x0, 2), X)
    return first if first.distance <= second.distance else second


def orbit_angle(u: np.ndarray) -> float:
    """Chart angle atan2(U21, U11) in [0, 2pi) for k = 2."""
    return float(math.atan2(u[1, 0], u[0, 0]) % (2.0 * math.pi))


def separation_lower_bound(spec: OrbitSpec) -> float:
    return 2.0 * spec.sigma_min / spec.k


def tubular_radius(spec: OrbitSpec, D: float = 1.0) -> float:
    if D <= 0:
        raise ValueError("D must be positive")
    return 2.0 * spec.sigma_min / (spec.k * D)


# --- TANGENT / NORMAL SPACES ---

def skew_basis(k: int) -> List[np.ndarray]:
    """A^{ij} = (e_i e_j^T - e_j e_i^T)/sqrt(2), i < j."""
    out = []
    for i in range(k):
        for j in range(i + 1, k):
            a = np.zeros((k, k))
            a[i, j], a[j, i] = 1.0, -1.0
            out.append(a / math.sqrt(2.0))
    return out


def sym_basis(k: int) -> List[np.ndarray]:
    """Orthonormal basis of Sym^k: e_i e_i^T and (e_i e_j^T + e_j e_i^T)/sqrt(2)."""
    out = []
    for i in range(k):
        for j in range(i, k):
            s = np.zeros((k, k))
            if i == j:
                s[i, i] = 1.0
            else:
                s[i, j] = s[j, i] = 1.0 / math.sqrt(2.0)
            out.append(s)
    return out


def _require_on_orbit(spec: OrbitSpec, X: np.ndarray) -> None:
    X = _check_shape(spec, X)
    scale = float(np.sum(X * X))
    dist2 = eta(spec, X) if scale > 0 else 0.0
    # 1e-16 relative on the squared distance
    if scale == 0.0 or dist2 >= 1e-16 * scale:
        raise DomainError(f"point is not on the orbit (eta = {dist2:.3g})")


def tangent_basis(spec: OrbitSpec, X_on_orbit: np.ndarray) -> List[np.ndarray]:
    """Orthonormalized {X A^{ij}} spanning T_X = {X R : R skew}."""
    _require_on_orbit(spec, X_on_orbit)
    X = np.asarray(X_on_orbit, dtype=float)
    gens = [X @ a for a in skew_basis(spec.k)]
    if not gens:
        return []
    mat = np.stack([g.reshape(-1) for g in gens], axis=1)
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))
    return [q[:, i].reshape(X.shape) for i in range(q.shape[1])]


def normal_basis(spec: OrbitSpec, X_on_orbit: np.ndarray) -> List[np.ndarray]:
    """Orthonormal basis of the orthogonal complement of the tangent space (N - m vectors)."""
    tangent = tangent_basis(spec, X_on_orbit)
    shape = spec.x0.shape
    n_amb = shape[0] * shape[1]
    if not tangent:
        basis = np.eye(n_amb)
    else:
        basis = null_space(np.stack([t.reshape(-1) for t in tangent], axis=0))
    return [basis[:, i].reshape(shape) for i in range(basis.shape[1])]


# --- NORMAL COORDINATES ---

def decompose(spec: OrbitSpec, X: np.ndarray, radius: Optional[float] = None) -> NormalCoordinates:
    """
    Inverse of the chart (S, Y, U) -> X0 U + X0 (X0^T X0)^{-1} S U + Y U.

    Raises TubeExceeded when the distance to the branch is not below radius
    (default: tubular_radius with D = 1).
    """
    proj = project_to_orbit(spec, X)
    radius = tubular_radius(spec) if radius is None else radius
    if proj.distance >= radius:
        raise TubeExceeded(proj.distance, radius)

    u = proj.u
    w = (np.asarray(X, dtype=float) - proj.pi_x) @ u.T
    c = spec.x0.T @ w
    s = 0.5 * (c + c.T)
    y = w - spec.x0 @ (spec.gram_inv @ c)
    return NormalCoordinates(s=s, y=y, u=u)


def recompose(spec: OrbitSpec, coords: NormalCoordinates) -> np.ndarray:
    base = spec.x0 + spec.x0 @ spec.gram_inv @ coords.s + coords.y
    return base @ coords.u


def normal_norms(spec: OrbitSpec, coords: NormalCoordinates) -> Tuple[float, float]:
    """(||X0 (X0^T X0)^{-1} S||_F, ||Y||_F)."""
    return (
        float(np.linalg.norm(spec.x0 @ spec.gram_inv @ coords.s)),
        float(np.linalg.norm(coords.y)),
    )


def normal_coordinate_vector(spec: OrbitSpec, coords: NormalCoordinates) -> np.ndarray:
    """(S, Y) flattened into N - m numbers: S on the orthonormal Sym basis, Y on Y0."""
    s_part = np.array([np.sum(coords.s * e) for e in sym_basis(spec.k)])
    y_part = (spec.complement.T @ coords.y).reshape(-1)
    return np.concatenate([s_part, y_part])


# --- NORMAL DETERMINANT ---

def central_jacobian(
    fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    step: float,
    periodic: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Central differences of fn along the standard (orthonormal) basis of x's
    ambient space. Output rows flagged in `periodic` are angles and their
    differences are wrapped to (-pi, pi].
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        diff = np.asarray(fn((flat + e).reshape(x.shape))) - np.asarray(fn((flat - e).reshape(x.shape)))
        if periodic is not None:
            diff = np.where(periodic, (diff + math.pi) % (2 * math.pi) - math.pi, diff)
        cols.append(diff / (2.0 * step))
    return np.stack(cols, axis=1)


def restricted_determinant(jac: np.ndarray, rank: int) -> NormalDeterminant:
    """|det| of jac restricted to the complement of its kernel: product of the top `rank` singular values."""
    sv = np.linalg.svd(jac, compute_uv=False)[:rank]
    value = float(np.prod(sv))
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    warning = None
    if condition > get_settings().CONDITION_WARNING:
        warning = f"restricted Jacobian is ill-conditioned (condition {condition:.3g})"
        logger.warning("Ill-conditioned normal Jacobian", condition=condition)
    return NormalDeterminant(value=value, condition=condition, warning=warning)


def normal_determinant(
    spec: OrbitSpec,
    X: np.ndarray,
    radius: Optional[float] = None,
    step: Optional[float] = None,
) -> NormalDeterminant:
    """Numeric det(dF restricted to ker(dF)^perp) for F(X) = (S, Y)."""
    X = _check_shape(spec, X)
    decompose(spec, X, radius)
    step = (step or get_settings().FD_STEP) * float(np.linalg.norm(X))

    def coords(z: np.ndarray) -> np.ndarray:
        return normal_coordinate_vector(spec, decompose(spec, z, math.inf))

    d, k = spec.x0.shape
    return restricted_determinant(central_jacobian(coords, X, step), d * k - k * (k - 1) // 2)


def normal_determinant_closed_form(spec: OrbitSpec) -> float:
    """
    Exact value of the normal determinant on the orbit.

    With g the eigenvalues of X0^T X0, the S block contributes
    prod_{i<=j} sqrt(2 g_i g_j / (g_i + g_j)); the Y block contributes 1.
    """
    g = np.linalg.eigvalsh(spec.gram)
    total = 1.0
    for i in range(g.size):
        for j in range(i, g.size):
            total *= math.sqrt(2.0 * g[i] * g[j] / (g[i] + g[j]))
    return total


# --- SAMPLING / REFERENCE RADII ---

def random_rotation(rng: RngStream, k: int, branch: int = 1) -> np.ndarray:
    """Haar rotation on the requested branch of O(k)."""
    q = haar_orthonormal(rng, k, k)
    want = 1.0 if branch == 1 else -1.0
    if np.sign(np.linalg.det(q)) != want:
        q[:, 0] *= -1.0
    return q


def sample_tube_points(spec: OrbitSpec, n: int, radius: float, rng: RngStream) -> List[np.ndarray]:
    """X0 U + r N with U Haar on the branch, N a random unit normal, r ~ U(0, radius)."""
    points = []
    for _ in range(n):
        u = random_rotation(rng, spec.k, spec.branch)
        base = spec.x0 @ u
        normals = normal_basis(spec, base)
        coef = rng.standard_normal(len(normals))
        direction = sum(c * v for c, v in zip(coef, normals))
        direction = direction / np.linalg.norm(direction)
        points.append(base + rng.uniform(0.0, radius) * direction)
    return points


def theoretical_tube_radius(
    variant: Variant,
    d: int,
    k: int,
    sigma_min: float,
    kappa: float,
    beta: float,
    epsilon: float,
    L: Optional[int] = None,
    p: Optional[float] = None,
) -> float:
    """Nearness-region radius with the constant 100; for reporting only."""
    log_eps = math.log(1.0 / epsilon)
    if variant == Variant.FACTORIZATION:
        core = k * kappa / sigma_min * math.sqrt(d * math.log(d) * log_eps)
    elif variant == Variant.SENSING:
        core = math.sqrt(d * k * math.log(L) * log_eps) * kappa / sigma_min
    else:
        core = math.sqrt(d * k**3 * math.log(d) * log_eps) * kappa**3 / (sigma_min * p)
    return 100.0 * core / math.sqrt(beta)


def initialization_radius(
    variant: Variant,
    d: int,
    k: int,
    sigma_min: float,
    beta: float,
    L: Optional[int] = None,
    p: Optional[float] = None,
) -> float:
    """Distance from the optimum that a strict-saddle-avoiding start reaches, constant 40."""
    if variant == Variant.FACTORIZATION:
        core = math.sqrt(d * k * math.log(d))
    elif variant == Variant.SENSING:
        core = math.sqrt(d * k * math.log(L) / L)
    else:
        core = math.sqrt(d * k * math.log(d)) / p
    return 40.0 * core / (math.sqrt(beta) * sigma_min)
