"""
Empirical checks on sampled trajectories: nearness to the optima orbit,
uniformity along it, constancy of f and of the normal determinant over
level sets, gradient correlation, mixing proxies and the CIR fit of eta.
"""
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import structlog
from scipy import stats
from sentry_sdk import capture_exception

from config import get_settings
from errors import DomainError, InsufficientSamples, OrbitLangevinError, Unsupported
from models import CirFit, DiagnosticsReport, RunConfig
from services.manifold import (
    OrbitSpec,
    normal_determinant,
    normal_determinant_closed_form,
    project_to_orbit,
    sample_tube_points,
)
from services.operators import Instance, InstanceObjective, Objective, gradient_correlation_form
from services.processes import fit_cir
from services.rng import RngStream, haar_orthonormal
from services.sampler import Trajectory, reference_radii, run_chain

logger = structlog.get_logger("diagnostics")

ORBIT_DISTANCE_TOL = 1e-10

Trajectories = Union[Trajectory, Sequence[Trajectory]]


@dataclass(frozen=True)
class NearnessResult:
    fraction_inside: float
    max_eta: float
    flips: int


@dataclass(frozen=True)
class IactResult:
    value: float
    raw: float
    note: Optional[str] = None


@dataclass(frozen=True, eq=False)
class GradCorrelationResult:
    ratios: np.ndarray
    c1: float
    c2: float
    noise_term: float
    violation_fraction: float


@dataclass(frozen=True)
class DetConstancy:
    cv: float
    mean: float
    closed_form: float
    warnings: List[str] = field(default_factory=list)

    @property
    def rel_error(self) -> float:
        return abs(self.mean - self.closed_form) / self.closed_form


@dataclass(frozen=True)
class StepSizeResult:
    mean_h: float
    mean_half: float
    se_h: float
    se_half: float
    z: float = 3.0

    @property
    def band(self) -> float:
        return self.z * math.hypot(self.se_h, self.se_half)

    @property
    def passed(self) -> bool:
        return abs(self.mean_h - self.mean_half) <= self.band


def _as_list(trajs: Trajectories) -> List[Trajectory]:
    return [trajs] if isinstance(trajs, Trajectory) else list(trajs)


# --- NEARNESS ---

def nearness_check(traj: Trajectory, radius: float) -> NearnessResult:
    """Fraction of records with sqrt(eta) <= radius, the largest eta, and branch changes."""
    if len(traj) == 0:
        raise DomainError(f"chain {traj.chain} has no records")
    inside = np.sqrt(traj.eta) <= radius
    flips = int(np.count_nonzero(np.diff(traj.branch)))
    return NearnessResult(fraction_inside=float(np.mean(inside)), max_eta=float(np.max(traj.eta)), flips=flips)


def pooled_nearness(trajs: Trajectories, radius: float) -> NearnessResult:
    """Record-weighted nearness over chains; flips are summed, never counted across chain boundaries."""
    results = [(len(t), nearness_check(t, radius)) for t in _as_list(trajs) if len(t)]
    if not results:
        raise DomainError("no chain has records")
    total = sum(n for n, _ in results)
    return NearnessResult(
        fraction_inside=sum(n * r.fraction_inside for n, r in results) / total,
        max_eta=max(r.max_eta for _, r in results),
        flips=sum(r.flips for _, r in results),
    )


# --- UNIFORMITY ---

def angle_series(trajs: Trajectories) -> np.ndarray:
    chains = _as_list(trajs)
    if any(t.angle is None for t in chains):
        raise Unsupported("orbit angle is only defined for k = 2")
    return np.concatenate([t.angle for t in chains]) if chains else np.array([])


def ks_uniform(angles: np.ndarray) -> float:
    """KS distance between the angles and Uniform[0, 2pi)."""
    return float(stats.kstest(np.asarray(angles) / (2.0 * math.pi), "uniform").statistic)


def orbit_uniformity(trajs: Trajectories) -> float:
    angles = angle_series(trajs)
    needed = get_settings().MIN_DIAGNOSTIC_SAMPLES
    if angles.size < needed:
        raise InsufficientSamples(f"{angles.size} angle samples, need at least {needed}")
    return ks_uniform(angles)


# --- GRADIENT CORRELATION ---

def grad_correlation_check(
    inst: Instance,
    spec: OrbitSpec,
    samples: Sequence[np.ndarray],
    epsilon: float = 0.05,
) -> GradCorrelationResult:
    """
    Fits <grad f(X), X - Pi(X)> >= c1 sigma_min^2 eta - c2 T with T the
    variant's noise term: c1 by least squares through the origin, c2 as the
    epsilon-quantile of the residuals. Reports the fraction below the fit.
    """
    if not samples:
        raise DomainError("gradient correlation needs at least one tube point")
    objective = InstanceObjective(inst)
    lhs, etas = [], []
    for X in samples:
        proj = project_to_orbit(spec, X)
        # Points on the orbit keep a roundoff-sized distance after projection
        if proj.distance <= ORBIT_DISTANCE_TOL * max(1.0, float(np.linalg.norm(X))):
            raise DomainError(f"tube point lies on the orbit (distance {proj.distance:.3g})")
        lhs.append(float(np.sum(objective.gradient(X) * (X - proj.pi_x))))
        etas.append(proj.distance ** 2)

    lhs, etas = np.array(lhs), np.array(etas)
    a = spec.sigma_min ** 2 * etas
    c1 = float(a @ lhs / (a @ a))
    resid = lhs - c1 * a

    noise = gradient_correlation_form(inst)
    floor = min(0.0, float(np.quantile(resid, epsilon)))
    c2 = -floor / noise if noise > 0 else 0.0
    slack = 1e-12 * float(np.max(np.abs(lhs)))
    violations = float(np.mean(resid < floor - slack))
    return GradCorrelationResult(ratios=lhs / etas, c1=c1, c2=c2, noise_term=noise, violation_fraction=violations)


# --- MIXING ---

def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x - x.mean(), n=size)
    return np.fft.irfft(spec * np.conjugate(spec), n=size)[:n] / n


def iact(series: Iterable[float]) -> IactResult:
    """
    Integrated autocorrelation time 1/2 + sum_{t>=1} rho_t, truncated by
    Geyer's initial positive sequence with the monotone adjustment.
    """
    x = np.asarray(list(series) if not isinstance(series, np.ndarray) else series, dtype=float)
    needed = get_settings().MIN_DIAGNOSTIC_SAMPLES
    if x.size < needed:
        raise InsufficientSamples(f"series of length {x.size}, need at least {needed}")
    if not np.all(np.isfinite(x)):
        raise DomainError("series contains non-finite values")

    acov = _autocovariance(x)
    if acov[0] <= 0.0:
        return IactResult(value=0.5, raw=math.nan, note="constant series; IACT set to 0.5")

    rho = acov / acov[0]
    pairs = rho[: 2 * (rho.size // 2)].reshape(-1, 2).sum(axis=1)
    nonpositive = np.flatnonzero(pairs <= 0.0)
    cut = int(nonpositive[0]) if nonpositive.size else pairs.size
    kept = np.minimum.accumulate(pairs[:cut])
    raw = float(kept.sum() - 0.5)

    if raw < 0.5:
        return IactResult(value=0.5, raw=raw, note=f"IACT estimate {raw:.3g} below 0.5 (negative correlation); clamped")
    return IactResult(value=raw, raw=raw)


def _mean_se(series: Sequence[np.ndarray]) -> tuple:
    """Pooled mean over chains and its IACT-corrected standard error."""
    means, variances = [], []
    for x in series:
        tau = iact(x).value
        means.append(float(np.mean(x)))
        variances.append(float(np.var(x)) * 2.0 * tau / x.size)
    c = len(means)
    return float(np.mean(means)), math.sqrt(sum(variances)) / c


# --- LEVEL-SET CONSTANCY ---

def f_constancy(
    objective: Objective,
    points: Sequence[np.ndarray],
    rotations: int,
    rng: RngStream,
) -> float:
    """
    Largest coefficient of variation std/|mean| of f over {X U}, U Haar in O(k).

    A point whose f vanishes on its whole orbit contributes its absolute spread.
    """
    if not points:
        raise DomainError("f constancy needs at least one point")
    worst = 0.0
    for X in points:
        k = X.shape[1]
        values = [objective.loss(X)] + [objective.loss(X @ haar_orthonormal(rng, k, k)) for _ in range(rotations)]
        values = np.array(values)
        spread, scale = float(np.std(values)), abs(float(np.mean(values)))
        worst = max(worst, spread / scale if scale > 0 else spread)
    return worst


def det_constancy(spec: OrbitSpec, points: Sequence[np.ndarray], radius: Optional[float] = None) -> DetConstancy:
    if not points:
        raise DomainError("determinant constancy needs at least one point")
    dets = [normal_determinant(spec, X, radius) for X in points]
    values = np.array([d.value for d in dets])
    mean = float(np.mean(values))
    return DetConstancy(
        cv=float(np.std(values) / mean),
        mean=mean,
        closed_form=normal_determinant_closed_form(spec),
        warnings=sorted({d.warning for d in dets if d.warning}),
    )


def step_size_consistency(
    objective: Objective,
    spec: OrbitSpec,
    cfg: RunConfig,
    x0: np.ndarray,
    max_norm: Optional[float] = None,
    z: float = 3.0,
) -> StepSizeResult:
    """Mean eta at h and at h/2 over the same horizon, with IACT-corrected standard errors."""
    out = []
    for run in (cfg, cfg.halved()):
        trajs = [run_chain(objective, run, x0, c, spec, max_norm) for c in range(run.chains)]
        if any(t.diverged for t in trajs):
            raise DomainError(f"a chain diverged at h={run.h}")
        out.append(_mean_se([t.eta for t in trajs]))
    (mean_h, se_h), (mean_half, se_half) = out
    result = StepSizeResult(mean_h=mean_h, mean_half=mean_half, se_h=se_h, se_half=se_half, z=z)
    logger.info("Step-size consistency", h=cfg.h, mean_h=mean_h, mean_half=mean_half, band=result.band)
    return result


# --- REPORT ---

def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _fraction(name: str, value: Optional[float], notes: List[str]) -> Optional[float]:
    value = _finite(value)
    if value is not None and not (0.0 <= value <= 1.0):
        notes.append(f"{name}={value:.6g} outside [0, 1]; clamped")
        value = min(1.0, max(0.0, value))
    return value


def assemble_report(
    nearness: Optional[NearnessResult] = None,
    tube_radius: Optional[float] = None,
    ks_angle: Optional[float] = None,
    f_cv: Optional[float] = None,
    det: Optional[DetConstancy] = None,
    grad: Optional[GradCorrelationResult] = None,
    iact_eta: Optional[IactResult] = None,
    iact_angle: Optional[IactResult] = None,
    cir_fit: Optional[CirFit] = None,
    notes: Sequence[str] = (),
) -> DiagnosticsReport:
    """Pure aggregation; out-of-range values are clamped and noted."""
    notes = list(notes)
    if det is not None:
        notes.extend(det.warnings)
    for result in (iact_eta, iact_angle):
        if result is not None and result.note:
            notes.append(result.note)

    return DiagnosticsReport(
        nearness_fraction=_fraction("nearness_fraction", nearness.fraction_inside if nearness else None, notes),
        max_eta=_finite(nearness.max_eta) if nearness else None,
        tube_radius_used=_finite(tube_radius),
        branch_flips=nearness.flips if nearness else None,
        ks_uniform_angle=_fraction("ks_uniform_angle", ks_angle, notes),
        f_constancy_cv=_finite(f_cv),
        det_constancy_cv=_finite(det.cv) if det else None,
        grad_corr_violations=_fraction("grad_corr_violations", grad.violation_fraction if grad else None, notes),
        iact_eta=max(0.5, iact_eta.value) if iact_eta else None,
        iact_angle=max(0.5, iact_angle.value) if iact_angle else None,
        cir_fit=cir_fit,
        notes=notes,
    )


class _Notes:
    """Collects component failures as report notes."""

    def __init__(self):
        self.items: List[str] = []

    def run(self, name: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (OrbitLangevinError, ValueError, np.linalg.LinAlgError) as e:
            logger.error("Diagnostic failed", component=name, error=str(e))
            capture_exception(e)
            self.items.append(f"{name}: {e}")
            return None


def _pooled_iact(name: str, series: List[np.ndarray], notes: _Notes) -> Optional[IactResult]:
    results = [r for r in (notes.run(f"{name}[{c}]", iact, x) for c, x in enumerate(series)) if r is not None]
    if not results:
        return None
    value = float(np.mean([r.value for r in results]))
    note = "; ".join(sorted({r.note for r in results if r.note})) or None
    return IactResult(value=value, raw=float(np.mean([r.raw for r in results])), note=note)


def diagnose_run(
    inst: Instance,
    trajs: Sequence[Trajectory],
    spec: OrbitSpec,
    cfg: RunConfig,
    radius: float,
    rng: RngStream,
    tube_points: int = 20,
    rotations: int = 20,
) -> DiagnosticsReport:
    """Every diagnostic on one sampled run; component failures become notes."""
    notes = _Notes()
    trajs = list(trajs)
    for t in trajs:
        if t.diverged or t.interrupted:
            notes.items.append(f"chain {t.chain}: {t.message}")
    reference = notes.run("reference_radii", reference_radii, inst, spec.x0, cfg.beta, cfg.epsilon)
    if reference is not None:
        notes.items.append("reference: " + ", ".join(f"{key}={value:.6g}" for key, value in reference.items()))

    nearness = notes.run("nearness", pooled_nearness, trajs, radius)
    ks = notes.run("orbit_uniformity", orbit_uniformity, trajs) if spec.k == 2 else None

    points = notes.run("tube_points", sample_tube_points, spec, tube_points, radius, rng.child(0)) or []
    f_cv = notes.run("f_constancy", f_constancy, InstanceObjective(inst), points, rotations, rng.child(1)) if points else None
    grad = notes.run("grad_correlation", grad_correlation_check, inst, spec, points, cfg.epsilon) if points else None

    # Determinant constancy at the posterior's own scale
    etas = np.concatenate([t.eta for t in trajs]) if trajs else np.array([])
    finite = etas[np.isfinite(etas)]
    det_radius = min(radius, math.sqrt(float(np.median(finite)))) if finite.size and np.median(finite) > 0 else radius
    det_points = notes.run("det_points", sample_tube_points, spec, tube_points, det_radius, rng.child(2)) or []
    det = notes.run("det_constancy", det_constancy, spec, det_points, radius) if det_points else None

    live = [t for t in trajs if len(t)]
    iact_eta = _pooled_iact("iact_eta", [t.eta for t in live], notes)
    iact_angle = _pooled_iact("iact_angle", [t.angle for t in live], notes) if spec.k == 2 else None
    cir = notes.run("cir_fit", fit_cir, [t.eta for t in live], cfg.h * cfg.thin) if live else None

    report = assemble_report(
        nearness=nearness, tube_radius=radius, ks_angle=ks, f_cv=f_cv, det=det, grad=grad,
        iact_eta=iact_eta, iact_angle=iact_angle, cir_fit=cir, notes=notes.items,
    )
    logger.info("Diagnostics assembled", chains=len(trajs), notes=len(report.notes))
    return report
