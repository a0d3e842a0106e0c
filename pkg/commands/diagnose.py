import argparse
from pathlib import Path

import structlog

from errors import UsageError
from services.diagnostics import diagnose_run
from services.manifold import OrbitSpec
from services.rng import RngStream
from services.storage import chain_file, load_instance, load_run, read_trajectory, save_report

logger = structlog.get_logger("cmd.diagnose")


def add_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("diagnose", help="Compute report.json from a sampled run")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--tube-points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return p


def run(args: argparse.Namespace) -> int:
    inst = load_instance(args.instance)
    run_file = args.run_dir / "run.json"
    if not run_file.exists():
        raise UsageError(f"{run_file} not found")
    x0, branch, cfg, chains, radius = load_run(run_file)
    spec = OrbitSpec(x0, branch)

    trajs = []
    for meta in chains:
        t = read_trajectory(chain_file(args.run_dir, meta["chain"]), meta["chain"], cfg.h, spec.k)
        t.diverged = bool(meta["diverged"])
        t.interrupted = bool(meta["interrupted"])
        t.message = meta["message"]
        trajs.append(t)

    report = diagnose_run(inst, trajs, spec, cfg, radius, RngStream(args.seed), tube_points=args.tube_points)
    save_report(args.out, report)
    logger.info("Report written", path=str(args.out), notes=len(report.notes))
    return 0
