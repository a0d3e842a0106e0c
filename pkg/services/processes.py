"""
Cox-Ingersoll-Ross comparison process.

    dY = (n_tilde - gamma Y) dt + sigma sqrt(Y) dB

simulated by full-truncation Euler, and exactly as a sum of squared
Ornstein-Uhlenbeck components dZ = -(gamma/2) Z dt + (sigma/2) dB when
4 n_tilde / sigma^2 is a positive integer.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from config import get_settings
from errors import DomainError
from models import CirFit, CirParams
from services.rng import RngStream

logger = structlog.get_logger("processes")

BLOCK_SIZE = 2048
MAX_RECORDED_POINTS = 1000
QUANTILES = (0.5, 0.9, 0.99)


@dataclass(frozen=True, eq=False)
class ProcessPaths:
    times: np.ndarray
    values: np.ndarray  # paths x len(times)

    def at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[idx], t, rel_tol=1e-9, abs_tol=1e-12):
            raise DomainError(f"time {t} is not on the recorded grid")
        return self.values[:, idx]


@dataclass(frozen=True)
class EnvelopeResult:
    empirical: float
    analytic: float
    epsilon: float


@dataclass(frozen=True, eq=False)
class DominanceReport:
    times: np.ndarray
    observed: np.ndarray   # windows x quantiles
    reference: np.ndarray
    band: np.ndarray
    flags: np.ndarray
    resampled: bool

    @property
    def flagged_fraction(self) -> float:
        return float(np.mean(self.flags)) if self.flags.size else 0.0


# --- CLOSED FORMS ---

def cir_mean(params: CirParams, t):
    decay = np.exp(-params.gamma * np.asarray(t, dtype=float))
    return params.y0 * decay + params.n_tilde / params.gamma * (1.0 - decay)


def cir_variance(params: CirParams, t):
    g, s2 = params.gamma, params.sigma ** 2
    decay = np.exp(-g * np.asarray(t, dtype=float))
    return params.y0 * s2 / g * (decay - decay ** 2) + params.n_tilde * s2 / (2.0 * g * g) * (1.0 - decay) ** 2


def ou_components(params: CirParams) -> int:
    """Number of squared OU components, 4 n_tilde / sigma^2."""
    n = 4.0 * params.n_tilde / params.sigma ** 2
    if n < 1 - 1e-9 or abs(n - round(n)) > 1e-9:
        raise DomainError(f"4*n_tilde/sigma^2 = {n:.6g} must be a positive integer for the OU representation")
    return int(round(n))


def _stride(params: CirParams) -> int:
    return max(1, params.n_steps // MAX_RECORDED_POINTS)


def _blocks(paths: int) -> List[Tuple[int, int]]:
    return [(start, min(start + BLOCK_SIZE, paths)) for start in range(0, paths, BLOCK_SIZE)]


def _run_blocks(fn, paths: int, threads: Optional[int]):
    blocks = list(enumerate(_blocks(paths)))
    with ThreadPoolExecutor(max_workers=threads or 1) as pool:
        return list(pool.map(lambda item: fn(item[0], item[1][1] - item[1][0]), blocks))


# --- SIMULATORS ---

def _cir_block(params: CirParams, rng: RngStream, n: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    h, g, nt, sigma = params.h, params.gamma, params.n_tilde, params.sigma
    y = np.full(n, params.y0, dtype=float)
    sup = y.copy()
    out = [y.copy()]
    for step in range(1, params.n_steps + 1):
        pos = np.maximum(y, 0.0)
        y = y + (nt - g * pos) * h + sigma * np.sqrt(pos * h) * rng.standard_normal(n)
        clipped = np.maximum(y, 0.0)
        np.maximum(sup, clipped, out=sup)
        if step % stride == 0:
            out.append(clipped)
    return np.stack(out, axis=1), sup


def _check_step(params: CirParams) -> None:
    limit = get_settings().CIR_ACCURACY_FACTOR / params.gamma
    if params.h > limit:
        logger.warning("CIR step size above accuracy limit", h=params.h, limit=limit)


def cir_simulate(params: CirParams, rng: RngStream, paths: int, threads: Optional[int] = None) -> ProcessPaths:
    """Full-truncation Euler paths recorded on a grid of at most ~1000 points."""
    if paths < 1:
        raise ValueError("paths must be positive")
    _check_step(params)
    stride = _stride(params)
    blocks = _run_blocks(lambda b, n: _cir_block(params, rng.child(b), n, stride)[0], paths, threads)
    values = np.concatenate(blocks, axis=0)
    times = np.arange(values.shape[1]) * stride * params.h
    return ProcessPaths(times=times, values=values)


def ou_transition(z: np.ndarray, params: CirParams, dt: float, rng: RngStream) -> np.ndarray:
    """Exact Gaussian transition of dZ = -(gamma/2) Z dt + (sigma/2) dB over dt."""
    decay = math.exp(-0.5 * params.gamma * dt)
    std = 0.5 * params.sigma * math.sqrt((1.0 - math.exp(-params.gamma * dt)) / params.gamma)
    return z * decay + std * rng.standard_normal(z.shape)


def _ou_block(params: CirParams, rng: RngStream, n: int, components: int, dt: float, points: int) -> np.ndarray:
    z = np.full((n, components), math.sqrt(params.y0 / components))
    out = [np.sum(z * z, axis=1)]
    for _ in range(points):
        z = ou_transition(z, params, dt, rng)
        out.append(np.sum(z * z, axis=1))
    return np.stack(out, axis=1)


def ou_squares_simulate(params: CirParams, rng: RngStream, paths: int, threads: Optional[int] = None) -> ProcessPaths:
    """Sum of squared OU components sampled exactly on the same grid as cir_simulate."""
    if paths < 1:
        raise ValueError("paths must be positive")
    components = ou_components(params)
    stride = _stride(params)
    dt = stride * params.h
    points = params.n_steps // stride
    blocks = _run_blocks(lambda b, n: _ou_block(params, rng.child(b), n, components, dt, points), paths, threads)
    values = np.concatenate(blocks, axis=0)
    return ProcessPaths(times=np.arange(values.shape[1]) * dt, values=values)


def cir_envelope_quantile(
    params: CirParams,
    epsilon: float,
    horizon: float,
    rng: RngStream,
    paths: int = 10_000,
    threads: Optional[int] = None,
) -> EnvelopeResult:
    """(1 - epsilon) quantile of sup_{t <= horizon} Y_t next to 4 sqrt(y0^2 + n_tilde log(1/epsilon)/gamma)."""
    if not (0 < epsilon < 1):
        raise ValueError("epsilon must lie in (0, 1)")
    run = params.model_copy(update={"horizon": horizon})
    _check_step(run)
    sups = _run_blocks(lambda b, n: _cir_block(run, rng.child(b), n, run.n_steps)[1], paths, threads)
    empirical = float(np.quantile(np.concatenate(sups), 1.0 - epsilon))
    return EnvelopeResult(empirical=empirical, analytic=cir_envelope(params, epsilon), epsilon=epsilon)


def cir_envelope(params: CirParams, epsilon: float) -> float:
    return 4.0 * math.sqrt(params.y0 ** 2 + params.n_tilde * math.log(1.0 / epsilon) / params.gamma)


# --- FITTING / COMPARISON ---

def fit_cir(series: Union[np.ndarray, Sequence[np.ndarray]], dt: float) -> CirFit:
    """Least-squares fit of (Y_{n+1} - Y_n)/dt = n_tilde - gamma Y_n; sigma from the residual scale."""
    if isinstance(series, np.ndarray) and series.ndim == 1:
        series = [series]
    levels, rates = [], []
    for s in series:
        s = np.asarray(s, dtype=float)
        s = s[np.isfinite(s)]
        if s.size < 2:
            continue
        levels.append(s[:-1])
        rates.append(np.diff(s) / dt)
    if not levels:
        raise DomainError("need at least one series with two finite points")

    y = np.concatenate(levels)
    r = np.concatenate(rates)
    design = np.column_stack([np.ones_like(y), y])
    (intercept, slope), *_ = np.linalg.lstsq(design, r, rcond=None)

    resid = (r - intercept - slope * y) * dt
    positive = y > 0
    sigma_hat = float(np.sqrt(np.mean(resid[positive] ** 2 / (y[positive] * dt)))) if positive.any() else None
    return CirFit(gamma_hat=float(-slope), n_tilde_hat=float(intercept), sigma_hat=sigma_hat)


def _bootstrap_se(values: np.ndarray, rng: RngStream, replicates: int) -> np.ndarray:
    if values.size < 2:
        return np.zeros(len(QUANTILES))
    draws = np.empty((replicates, len(QUANTILES)))
    for b in range(replicates):
        sample = values[rng.integers(0, values.size, values.size)]
        draws[b] = np.quantile(sample, QUANTILES)
    return draws.std(axis=0)


def _window_bounds(n: int, windows: int) -> List[Tuple[int, int]]:
    edges = np.linspace(0, n, windows + 1).astype(int)
    return [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _windowed(values: np.ndarray, bounds: List[Tuple[int, int]]) -> List[np.ndarray]:
    out = []
    for lo, hi in bounds:
        pooled = values[:, lo:hi].reshape(-1)
        out.append(pooled[:: max(1, pooled.size // 20000)])
    return out


def dominance_compare(
    observed: np.ndarray,
    params: CirParams,
    rng: RngStream,
    observed_dt: Optional[float] = None,
    paths: int = 2000,
    windows: int = 20,
    z: float = 3.0,
) -> DominanceReport:
    """
    Marginal check that observed eta quantiles (50/90/99%) stay below the
    CIR quantiles, window by window, up to a bootstrap band of z standard
    errors. `observed` is one series or a (paths x times) array.
    """
    obs = np.atleast_2d(np.asarray(observed, dtype=float))
    dt = observed_dt or params.h
    obs_times = np.arange(obs.shape[1]) * dt

    run = params.model_copy(update={"horizon": max(obs_times[-1], params.h)})
    ref = cir_simulate(run, rng, paths)

    resampled = not (obs.shape[1] == ref.times.size and np.allclose(obs_times, ref.times))
    if resampled:
        logger.warning("Observed grid differs from CIR grid; interpolating", observed=obs.shape[1], reference=ref.times.size)
        obs = np.stack([np.interp(ref.times, obs_times, row) for row in obs])

    replicates = get_settings().BOOTSTRAP_REPLICATES
    bounds = _window_bounds(ref.times.size, windows)
    obs_windows = _windowed(obs, bounds)
    ref_windows = _windowed(ref.values, bounds)
    centers = np.array([ref.times[lo:hi].mean() for lo, hi in bounds])

    observed_q, reference_q, band = [], [], []
    for i, (o, r) in enumerate(zip(obs_windows, ref_windows)):
        observed_q.append(np.quantile(o, QUANTILES))
        reference_q.append(np.quantile(r, QUANTILES))
        se_o = _bootstrap_se(o, rng.child(1_000_000 + i), replicates)
        se_r = _bootstrap_se(r, rng.child(2_000_000 + i), replicates)
        band.append(z * np.sqrt(se_o ** 2 + se_r ** 2))

    observed_q, reference_q, band = np.array(observed_q), np.array(reference_q), np.array(band)
    flags = observed_q - reference_q > band
    if flags.any():
        logger.info("Dominance exceedances", flagged=int(flags.sum()), total=int(flags.size))
    return DominanceReport(
        times=centers, observed=observed_q, reference=reference_q, band=band, flags=flags, resampled=resampled,
    )


def summarize_paths(paths: ProcessPaths) -> np.ndarray:
    """Columns time, q50, q90, q99, mean."""
    q = np.quantile(paths.values, QUANTILES, axis=0)
    return np.column_stack([paths.times, q.T, paths.values.mean(axis=0)])
