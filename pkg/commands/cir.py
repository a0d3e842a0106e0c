import argparse
from pathlib import Path

import structlog

from errors import DomainError
from models import CirParams, CirRequest
from services.processes import (
    cir_envelope_quantile,
    cir_simulate,
    ou_components,
    ou_squares_simulate,
    summarize_paths,
)
from services.rng import RngStream
from services.storage import write_json, write_matrix

logger = structlog.get_logger("cmd.cir")

SUMMARY_HEADER = ("time", "q50", "q90", "q99", "mean")


def add_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("cir", help="Simulate the CIR comparison process")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--n-tilde", type=float, required=True)
    p.add_argument("--y0", type=float, required=True)
    p.add_argument("--t", type=float, required=True, help="horizon")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    return p


def run(args: argparse.Namespace) -> int:
    request = CirRequest(
        params=CirParams(gamma=args.gamma, n_tilde=args.n_tilde, y0=args.y0, h=args.h, horizon=args.t, sigma=args.sigma),
        paths=args.paths,
        epsilon=args.epsilon,
        seed=args.seed,
    )
    params, paths = request.params, request.paths
    root = RngStream(request.seed)

    cir = cir_simulate(params, root.spawn(0), paths, threads=args.threads)
    write_matrix(args.out_dir / "cir.csv", SUMMARY_HEADER, summarize_paths(cir))

    try:
        components = ou_components(params)
    except DomainError as e:
        logger.info("OU-squares representation skipped", reason=str(e))
    else:
        ou = ou_squares_simulate(params, root.spawn(1), paths, threads=args.threads)
        write_matrix(args.out_dir / "ou_squares.csv", SUMMARY_HEADER, summarize_paths(ou))
        logger.info("OU-squares written", components=components)

    env = cir_envelope_quantile(params, request.epsilon, params.horizon, root.spawn(2), paths=paths, threads=args.threads)
    write_json(args.out_dir / "envelope.json", {
        "epsilon": env.epsilon,
        "empirical_sup_quantile": env.empirical,
        "analytic_envelope": env.analytic,
        "params": params.model_dump(mode="json"),
    })
    logger.info("CIR outputs written", out_dir=str(args.out_dir))
    return 0
