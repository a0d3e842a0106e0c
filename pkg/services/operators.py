import math
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence, Set, Tuple

import numpy as np
import structlog

from config import get_settings
from errors import EmptyMask, SizeError
from models import Dims, SpectrumSpec, Variant
from services.rng import RngStream, haar_orthonormal

logger = structlog.get_logger("operators")


# --- MEASUREMENT OPERATOR ---

@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """
    Linear map from symmetric d x d matrices to observation vectors.

    Factorization observes every entry (row-major vec), sensing observes
    Tr(A_i^T M) for dense Gaussian A_i, completion observes M_ij on the
    mask, ordered row-major over the sorted index pairs.
    """

    variant: Variant
    d: int
    a_matrices: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None
    cols: Optional[np.ndarray] = None
    p: Optional[float] = None

    @classmethod
    def factorization(cls, d: int) -> "MeasurementOperator":
        return cls(Variant.FACTORIZATION, d)

    @classmethod
    def sensing(cls, a_matrices: np.ndarray) -> "MeasurementOperator":
        a = np.asarray(a_matrices, dtype=float)
        if a.ndim != 3 or a.shape[1] != a.shape[2] or a.shape[0] < 1:
            raise SizeError(f"sensing matrices must have shape (L, d, d), got {a.shape}")
        return cls(Variant.SENSING, a.shape[1], a_matrices=a)

    @classmethod
    def completion(cls, d: int, mask: Iterable[Tuple[int, int]], p: float) -> "MeasurementOperator":
        pairs = sorted({(int(i), int(j)) for i, j in mask})
        if any(not (0 <= i < d and 0 <= j < d) for i, j in pairs):
            raise SizeError(f"mask index outside {d}x{d}")
        rows = np.array([i for i, _ in pairs], dtype=np.int64)
        cols = np.array([j for _, j in pairs], dtype=np.int64)
        return cls(Variant.COMPLETION, d, rows=rows, cols=cols, p=float(p))

    @property
    def output_size(self) -> int:
        if self.variant == Variant.FACTORIZATION:
            return self.d * self.d
        if self.variant == Variant.SENSING:
            return self.a_matrices.shape[0]
        return int(self.rows.size)

    @property
    def mask(self) -> Set[Tuple[int, int]]:
        if self.variant != Variant.COMPLETION:
            return set()
        return set(zip(self.rows.tolist(), self.cols.tolist()))


def apply_operator(op: MeasurementOperator, M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != (op.d, op.d):
        raise SizeError(f"expected {op.d}x{op.d} matrix, got {M.shape}")

    if op.variant == Variant.FACTORIZATION:
        return M.reshape(-1).copy()
    if op.variant == Variant.SENSING:
        return np.einsum("lij,ij->l", op.a_matrices, M)
    return M[op.rows, op.cols]


def adjoint_operator(op: MeasurementOperator, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (op.output_size,):
        raise SizeError(f"expected vector of length {op.output_size}, got {v.shape}")

    if op.variant == Variant.FACTORIZATION:
        return v.reshape(op.d, op.d).copy()
    if op.variant == Variant.SENSING:
        return np.einsum("l,lij->ij", v, op.a_matrices)
    out = np.zeros((op.d, op.d))
    out[op.rows, op.cols] = v
    return out


# --- INSTANCE ---

@dataclass(frozen=True, eq=False)
class Instance:
    dims: Dims
    x_star: np.ndarray
    operator: MeasurementOperator
    b: np.ndarray
    beta: float
    seed: int
    spectrum: SpectrumSpec
    noiseless: bool = False
    incoherence_mu: Optional[float] = None

    @property
    def variant(self) -> Variant:
        return self.operator.variant

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape != (self.dims.d, self.dims.k):
            raise SizeError(f"expected {self.dims.d}x{self.dims.k} factor, got {X.shape}")
        return X

    def residual(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return apply_operator(self.operator, X @ X.T) - self.b


def loss(inst: Instance, X: np.ndarray) -> float:
    """f(X) = ||A(X X^T) - b||^2."""
    r = inst.residual(X)
    return float(r @ r)


def gradient(inst: Instance, X: np.ndarray) -> np.ndarray:
    """grad f(X) = 2 (G + G^T) X with G = A*(A(X X^T) - b)."""
    X = inst._check(X)
    g = adjoint_operator(inst.operator, inst.residual(X))
    return 2.0 * (g + g.T) @ X


class Objective(Protocol):
    def loss(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class InstanceObjective:
    inst: Instance

    def loss(self, x: np.ndarray) -> float:
        return loss(self.inst, x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return gradient(self.inst, x)


@dataclass(frozen=True)
class QuadraticObjective:
    """f(x) = scale * ||x||^2, the Gaussian oracle."""

    scale: float = 1.0

    def loss(self, x: np.ndarray) -> float:
        return float(self.scale * np.sum(np.square(x)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.scale * np.asarray(x, dtype=float)


# --- GENERATION ---

def incoherence(x_star: np.ndarray) -> float:
    """(d/k) max_i ||e_i^T U||^2 for the left singular vectors U of X*."""
    d, k = x_star.shape
    u = np.linalg.svd(x_star, full_matrices=False)[0]
    return float(d / k * np.max(np.sum(u * u, axis=1)))


def _draw_mask(d: int, p: float, rng: RngStream, regenerate: bool) -> np.ndarray:
    attempts = get_settings().MASK_MAX_ATTEMPTS if regenerate else 1
    for attempt in range(attempts):
        mask = rng.random((d, d)) < p
        if mask.any():
            if attempt:
                logger.info("Completion mask redrawn", attempts=attempt + 1)
            return mask
    raise EmptyMask(f"completion mask empty after {attempts} draw(s) at p={p}")


def generate_instance(
    dims: Dims,
    spectrum: SpectrumSpec,
    variant: Variant,
    beta: float,
    rng: RngStream,
    *,
    L: Optional[int] = None,
    p: Optional[float] = None,
    noiseless: bool = False,
    regenerate_empty_mask: bool = True,
) -> Instance:
    """Draw X* = U diag(spectrum) V^T, the operator, and b = A(X* X*^T) + n."""
    d, k = dims.d, dims.k
    if k > d:
        raise SizeError(f"k={k} exceeds d={d}")
    if len(spectrum.singular_values) != k:
        raise SizeError(f"spectrum has {len(spectrum.singular_values)} values, expected k={k}")
    if beta <= 0:
        raise ValueError("beta must be positive")

    u = haar_orthonormal(rng, d, k)
    v = haar_orthonormal(rng, k, k)
    x_star = u @ np.diag(spectrum.singular_values) @ v.T

    variant = Variant(variant)
    mu = None
    if variant == Variant.FACTORIZATION:
        op = MeasurementOperator.factorization(d)
    elif variant == Variant.SENSING:
        if L is None or L < 1:
            raise ValueError("sensing requires L >= 1")
        op = MeasurementOperator.sensing(rng.standard_normal((L, d, d)) / math.sqrt(L))
    else:
        if p is None or not (0 < p <= 1):
            raise ValueError("completion requires p in (0, 1]")
        mask = _draw_mask(d, p, rng, regenerate_empty_mask)
        op = MeasurementOperator.completion(d, zip(*np.nonzero(mask)), p)
        mu = incoherence(x_star)

    b = apply_operator(op, x_star @ x_star.T)
    if not noiseless:
        b = b + rng.standard_normal(b.shape) / math.sqrt(beta)

    logger.info(
        "Instance generated",
        variant=variant.value, d=d, k=k, observations=op.output_size, beta=beta, noiseless=noiseless,
    )
    return Instance(
        dims=dims, x_star=x_star, operator=op, b=b, beta=float(beta), seed=rng.seed,
        spectrum=spectrum, noiseless=noiseless, incoherence_mu=mu,
    )


def rip_ratios(op: MeasurementOperator, matrices: Sequence[np.ndarray]) -> np.ndarray:
    """||A(M)||^2 / ||M||_F^2 for each matrix."""
    out = []
    for M in matrices:
        a = apply_operator(op, M)
        out.append(float(a @ a) / float(np.sum(M * M)))
    return np.array(out)


def gradient_correlation_form(inst: Instance) -> float:
    """
    Noise term of the gradient-correlation bound for this variant.

    Shape over beta^2; absolute constants are fitted by diagnostics.
    """
    d, k = inst.dims.d, inst.dims.k
    kappa = inst.spectrum.kappa
    if inst.variant == Variant.FACTORIZATION:
        shape = k**2 * kappa**2 * d
    elif inst.variant == Variant.SENSING:
        shape = d * k * kappa**2 * math.log(max(inst.operator.output_size, 2))
    else:
        shape = d * kappa**2 * k**3 * math.log(max(d, 2)) / inst.operator.p
    return shape / inst.beta ** 2
