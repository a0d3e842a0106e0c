import argparse
from pathlib import Path

import structlog
from prometheus_client import REGISTRY, write_to_textfile

from errors import UsageError
from models import RunConfig
from services.manifold import OrbitSpec, tubular_radius
from services.rng import RngStream
from services.sampler import init_gradient_descent, reference_radii
from services.storage import chain_file, iterate_file, load_instance, save_run, write_iterates, write_trajectory
from worker import run_chains

logger = structlog.get_logger("cmd.sample")

# Stream index for the initializer, derived from the run seed
INIT_STREAM = 1 << 20


def add_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("sample", help="Run Langevin chains and write chain_<c>.csv + run.json")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--burnin", type=int, default=None)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--beta", type=float, default=None, help="defaults to the instance's beta")
    p.add_argument("--init", choices=["gd", "xstar"], default="gd")
    p.add_argument("--gd-tol", type=float, default=1e-8)
    p.add_argument("--gd-iters", type=int, default=100_000)
    p.add_argument("--tube-radius", type=float, default=None)
    p.add_argument("--keep-x", action="store_true", help="also write the retained iterates to chain_<c>_x.csv")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--metrics-out", type=Path, default=None)
    return p


def run(args: argparse.Namespace) -> int:
    inst = load_instance(args.instance)
    cfg = RunConfig(
        beta=args.beta or inst.beta,
        h=args.h,
        steps=args.steps,
        burnin=args.burnin,
        thin=args.thin,
        chains=args.chains,
        seed=args.seed,
        tube_radius=args.tube_radius,
        keep_x=args.keep_x,
    )

    if args.gd_tol <= 0 or args.gd_iters < 1:
        raise UsageError("--gd-tol must be positive and --gd-iters at least 1")
    if args.init == "xstar":
        x0 = inst.x_star
    else:
        x0 = init_gradient_descent(inst, RngStream(cfg.seed).child(INIT_STREAM), args.gd_tol, args.gd_iters)
    orbit = OrbitSpec(x0, 1)
    radius = cfg.tube_radius or tubular_radius(orbit)
    reference = reference_radii(inst, x0, cfg.beta, cfg.epsilon)
    logger.info("Initial point", **reference)

    trajs = run_chains(inst, cfg, x0, threads=args.threads, orbit=orbit)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for t in trajs:
        write_trajectory(chain_file(args.out_dir, t.chain), t)
        if t.x is not None:
            write_iterates(iterate_file(args.out_dir, t.chain), t)
    save_run(args.out_dir / "run.json", x0, orbit.branch, cfg, trajs, radius, reference=reference)
    if args.metrics_out:
        write_to_textfile(str(args.metrics_out), REGISTRY)

    failed = [t.chain for t in trajs if t.diverged or t.interrupted]
    if failed:
        logger.error("Run incomplete", chains=failed)
        return 1
    logger.info("Run written", out_dir=str(args.out_dir), chains=len(trajs))
    return 0
