import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
import structlog

from config import get_settings
from errors import DegenerateProjection, DivergedChain, InitFailed
from models import RunConfig, Variant
from services.manifold import (
    OrbitSpec,
    decompose,
    initialization_radius,
    nearest_branch,
    normal_norms,
    orbit_angle,
    project_to_orbit,
    theoretical_tube_radius,
    tubular_radius,
)
from services.operators import Instance, InstanceObjective, Objective
from services.rng import RngStream

logger = structlog.get_logger("sampler")

TRAJECTORY_COLUMNS = ("step", "time", "eta", "f", "branch", "angle", "s_norm", "y_norm")


@dataclass
class ChainState:
    x: np.ndarray
    step_index: int
    rng: RngStream


@dataclass
class Trajectory:
    """Observables of the retained (post burn-in, thinned) steps of one chain."""

    chain: int
    h: float
    step: np.ndarray
    eta: np.ndarray
    f: np.ndarray
    branch: np.ndarray
    angle: Optional[np.ndarray]
    s_norm: np.ndarray
    y_norm: np.ndarray
    x: Optional[np.ndarray] = None
    diverged: bool = False
    interrupted: bool = False
    message: Optional[str] = None

    @classmethod
    def failed(cls, chain: int, h: float, k: int, message: str) -> "Trajectory":
        empty = np.array([], dtype=float)
        return cls(
            chain=chain, h=h, step=np.array([], dtype=np.int64), eta=empty, f=empty,
            branch=np.array([], dtype=np.int64), angle=empty if k == 2 else None,
            s_norm=empty, y_norm=empty, diverged=True, message=message,
        )

    @property
    def time(self) -> np.ndarray:
        return self.step * self.h

    def __len__(self) -> int:
        return int(self.step.size)


class _Recorder:
    """Accumulates per-record observables relative to a fixed reference branch."""

    def __init__(self, objective: Objective, orbit: OrbitSpec, radius: float, keep_x: bool):
        self.objective = objective
        self.orbit = orbit
        self.other = orbit.other_branch()
        self.radius = radius
        self.keep_x = keep_x
        self.rows = {name: [] for name in ("step", "eta", "f", "branch", "angle", "s_norm", "y_norm")}
        self.xs = []

    def record(self, step: int, x: np.ndarray) -> None:
        proj = project_to_orbit(self.orbit, x)
        rival = project_to_orbit(self.other, x)
        nearer = self.orbit.branch if proj.distance <= rival.distance else self.other.branch
        s_norm = y_norm = math.nan
        if proj.distance < self.radius:
            s_norm, y_norm = normal_norms(self.orbit, decompose(self.orbit, x, self.radius))

        self.rows["step"].append(step)
        self.rows["eta"].append(proj.distance ** 2)
        self.rows["f"].append(self.objective.loss(x))
        self.rows["branch"].append(nearer)
        self.rows["angle"].append(orbit_angle(proj.u) if self.orbit.k == 2 else math.nan)
        self.rows["s_norm"].append(s_norm)
        self.rows["y_norm"].append(y_norm)
        if self.keep_x:
            self.xs.append(x.copy())

    def build(self, chain: int, h: float) -> Trajectory:
        return Trajectory(
            chain=chain,
            h=h,
            step=np.array(self.rows["step"], dtype=np.int64),
            eta=np.array(self.rows["eta"], dtype=float),
            f=np.array(self.rows["f"], dtype=float),
            branch=np.array(self.rows["branch"], dtype=np.int64),
            angle=np.array(self.rows["angle"], dtype=float) if self.orbit.k == 2 else None,
            s_norm=np.array(self.rows["s_norm"], dtype=float),
            y_norm=np.array(self.rows["y_norm"], dtype=float),
            x=np.stack(self.xs) if self.keep_x and self.xs else None,
        )


# --- UPDATE ---

def langevin_step(
    objective: Objective,
    cfg: RunConfig,
    state: ChainState,
    noise: bool = True,
    max_norm: Optional[float] = None,
) -> ChainState:
    """X <- X - h beta grad f(X) + sqrt(2h) xi, with xi drawn from the state's stream."""
    x = state.x - cfg.h * cfg.beta * objective.gradient(state.x)
    if noise:
        x = x + math.sqrt(2.0 * cfg.h) * state.rng.standard_normal(x.shape)

    step = state.step_index + 1
    norm = float(np.linalg.norm(x))
    if not np.isfinite(norm) or (max_norm is not None and norm > max_norm):
        raise DivergedChain(step, norm)
    return ChainState(x=x, step_index=step, rng=state.rng)


# --- INITIALIZATION ---

def _eta_to_truth(inst: Instance, x: np.ndarray) -> float:
    try:
        return nearest_branch(inst.x_star, x).distance ** 2
    except DegenerateProjection:
        return math.inf


def init_gradient_descent(
    inst: Instance,
    rng: RngStream,
    tol: float,
    max_iters: int,
    start: Optional[np.ndarray] = None,
    start_scale: float = 1e-2,
) -> np.ndarray:
    """
    Perturbed gradient descent with backtracking.

    The step is 1/L with L doubled until the Armijo condition holds and
    halved after each accepted step. At a stationary point (|grad| <= tol, or
    an accepted step that leaves f unchanged because of roundoff)
    an isotropic perturbation of norm tol is injected once; if the escape
    episode does not lower f by more than tol^2 the stored point is returned.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    objective = InstanceObjective(inst)
    d, k = inst.dims.d, inst.dims.k
    if start is not None:
        x = np.array(start, dtype=float)
        if np.linalg.norm(objective.gradient(x)) <= tol:
            return x
    else:
        x = start_scale * inst.spectrum.sigma_max * rng.standard_normal((d, k)) / math.sqrt(d * k)

    lipschitz = 1.0
    f = objective.loss(x)
    g = objective.gradient(x)
    anchor = None  # (x, f) of the stationary point being escaped from
    stalled = False

    for it in range(max_iters):
        gnorm2 = float(np.sum(g * g))
        if gnorm2 <= tol * tol or stalled:
            if stalled:
                logger.debug("Gradient descent stalled at roundoff", iterations=it, grad_norm=math.sqrt(gnorm2))
            stalled = False
            if anchor is not None and f >= anchor[1] - tol * tol:
                logger.info("Gradient descent converged", iterations=it, f=anchor[1])
                return anchor[0]
            anchor = (x.copy(), f)
            direction = rng.standard_normal((d, k))
            x = x + tol * direction / np.linalg.norm(direction)
            f, g = objective.loss(x), objective.gradient(x)
            continue

        while True:
            candidate = x - g / lipschitz
            f_new = objective.loss(candidate)
            if f_new <= f - gnorm2 / (2.0 * lipschitz):
                break
            lipschitz *= 2.0

        # An accepted step that moves nothing means the gradient sits at the roundoff floor of f
        stalled = f_new >= f or np.array_equal(candidate, x)
        x, f = candidate, f_new
        g = objective.gradient(x)
        lipschitz = max(lipschitz / 2.0, 1e-12)

    grad_norm = float(np.linalg.norm(g))
    raise InitFailed(grad_norm, _eta_to_truth(inst, x), max_iters)


# --- SINGLE CHAIN ---

def run_chain(
    objective: Objective,
    cfg: RunConfig,
    x0: np.ndarray,
    chain: int,
    orbit: OrbitSpec,
    max_norm: Optional[float] = None,
    should_stop: Optional[Callable[[], bool]] = None,
) -> Trajectory:
    """One chain on stream (cfg.seed, chain); divergence truncates and flags the trajectory."""
    radius = cfg.tube_radius or tubular_radius(orbit)
    recorder = _Recorder(objective, orbit, radius, cfg.keep_x)
    state = ChainState(x=np.array(x0, dtype=float), step_index=0, rng=RngStream(cfg.seed, chain))

    diverged = interrupted = False
    message = None
    try:
        for _ in range(cfg.steps):
            if should_stop is not None and should_stop():
                interrupted = True
                message = f"interrupted at step {state.step_index}"
                break
            state = langevin_step(objective, cfg, state, max_norm=max_norm)
            n = state.step_index
            if n > cfg.burnin and (n - cfg.burnin) % cfg.thin == 0:
                recorder.record(n, state.x)
    except (DivergedChain, DegenerateProjection) as e:
        diverged = True
        message = str(e)
        logger.error("Chain diverged", chain=chain, error=message)

    traj = recorder.build(chain, cfg.h)
    traj.diverged = diverged
    traj.interrupted = interrupted
    traj.message = message
    return traj


def divergence_bound(inst: Instance, cfg: RunConfig) -> float:
    factor = cfg.divergence_factor or get_settings().DIVERGENCE_FACTOR
    return factor * float(np.linalg.norm(inst.x_star))


def reference_radii(inst: Instance, x0: np.ndarray, beta: float, epsilon: float) -> Dict[str, float]:
    """
    Analytic radius shapes next to where the initializer actually landed.

    Reported, never enforced: the constants in both shapes are loose.
    """
    d, k = inst.dims.d, inst.dims.k
    L = inst.operator.output_size if inst.variant == Variant.SENSING else None
    p = inst.operator.p if inst.variant == Variant.COMPLETION else None
    sigma_min = inst.spectrum.sigma_min
    init_radius = initialization_radius(inst.variant, d, k, sigma_min, beta, L=L, p=p)
    init_distance = math.sqrt(_eta_to_truth(inst, x0))
    return {
        "theoretical_tube_radius": theoretical_tube_radius(
            inst.variant, d, k, sigma_min, inst.spectrum.kappa, beta, epsilon, L=L, p=p,
        ),
        "initialization_radius": init_radius,
        "init_distance": init_distance,
        "init_distance_ratio": init_distance / init_radius if init_radius > 0 else math.inf,
    }
