# worker.py
import asyncio
import os
import signal
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import numpy as np
import structlog
from prometheus_client import Counter, Histogram
from sentry_sdk import capture_exception

from config import get_settings
from models import RunConfig
from services.manifold import OrbitSpec
from services.operators import Instance, InstanceObjective, Objective
from services.sampler import Trajectory, divergence_bound, run_chain

logger = structlog.get_logger("worker")

# --- METRICS ---
CHAINS_FINISHED = Counter('orbit_langevin_chains_total', 'Chains finished', ['status'])
STEPS_EXECUTED = Counter('orbit_langevin_steps_total', 'Langevin steps executed', ['status'])
CHAIN_SECONDS = Histogram('orbit_langevin_chain_seconds', 'Wall time per chain', buckets=[0.1, 1, 5, 30, 120, 600])


def resolve_threads(threads: Optional[int] = None) -> int:
    """Flag, then ORBIT_LANGEVIN_THREADS, then the machine's core count."""
    return threads or get_settings().ORBIT_LANGEVIN_THREADS or os.cpu_count() or 1


class ChainWorker:
    """Runs independent chains on a thread pool; results are ordered by chain index."""

    def __init__(self, threads: Optional[int] = None):
        self.worker_id = str(uuid.uuid4())[:8]
        self.threads = resolve_threads(threads)
        self.running = True

    async def run(
        self,
        objective: Objective,
        cfg: RunConfig,
        x0: np.ndarray,
        orbit: OrbitSpec,
        max_norm: Optional[float] = None,
    ) -> List[Trajectory]:
        logger.info("Chains starting", id=self.worker_id, chains=cfg.chains, threads=self.threads, steps=cfg.steps)
        loop = asyncio.get_running_loop()

        with ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="chain") as pool:
            tasks = [
                loop.run_in_executor(pool, self._run_one, objective, cfg, x0, chain, orbit, max_norm)
                for chain in range(cfg.chains)
            ]
            results = await asyncio.gather(*tasks, return_exceptions=True)

        trajectories = []
        for chain, result in enumerate(results):
            if isinstance(result, BaseException):
                logger.error("Chain failed", chain=chain, error=str(result))
                capture_exception(result)
                CHAINS_FINISHED.labels(status="error").inc()
                trajectories.append(Trajectory.failed(chain, cfg.h, orbit.k, str(result)))
            else:
                trajectories.append(result)

        logger.info("Chains finished", id=self.worker_id, diverged=sum(t.diverged for t in trajectories))
        return trajectories

    def _run_one(self, objective, cfg, x0, chain, orbit, max_norm) -> Trajectory:
        with CHAIN_SECONDS.time():
            traj = run_chain(objective, cfg, x0, chain, orbit, max_norm, should_stop=lambda: not self.running)

        status = "diverged" if traj.diverged else "interrupted" if traj.interrupted else "success"
        CHAINS_FINISHED.labels(status=status).inc()
        STEPS_EXECUTED.labels(status=status).inc(cfg.steps if status == "success" else int(traj.step[-1]) if len(traj) else 0)
        if traj.diverged:
            logger.warning("Trajectory truncated", chain=chain, reason=traj.message)
        return traj

    def shutdown(self):
        logger.info("Worker shutting down...", id=self.worker_id)
        self.running = False


async def run_with_signals(worker: ChainWorker, *args, **kwargs) -> List[Trajectory]:
    """ChainWorker.run with SIGINT/SIGTERM wired to a graceful stop."""
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        try:
            loop.add_signal_handler(sig, worker.shutdown)
        except (NotImplementedError, RuntimeError, ValueError):
            pass
    return await worker.run(*args, **kwargs)


def run_chains(
    inst: Instance,
    cfg: RunConfig,
    x0: np.ndarray,
    threads: Optional[int] = None,
    orbit: Optional[OrbitSpec] = None,
) -> List[Trajectory]:
    """
    cfg.chains independent chains from x0, chain c drawing from stream
    (cfg.seed, c). Observables are measured against `orbit`
    (default: branch 1 through x0).
    """
    orbit = orbit or OrbitSpec(np.asarray(x0, dtype=float), 1)
    worker = ChainWorker(threads)
    return asyncio.run(
        run_with_signals(worker, InstanceObjective(inst), cfg, x0, orbit, divergence_bound(inst, cfg))
    )
