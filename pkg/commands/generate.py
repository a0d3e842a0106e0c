import argparse
from pathlib import Path

import structlog

from models import Dims, ExperimentConfig, SpectrumSpec, Variant
from services.operators import generate_instance
from services.rng import RngStream
from services.storage import save_instance

logger = structlog.get_logger("cmd.generate")


def add_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("generate", help="Draw a problem instance and write instance.json")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--operator", choices=[v.value for v in Variant], required=True)
    p.add_argument("--L", type=int, default=None, help="number of sensing matrices (sensing only)")
    p.add_argument("--p", type=float, default=None, help="observation probability (completion only)")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--sigma-min", type=float, default=1.0)
    p.add_argument("--sigma-max", type=float, default=1.0)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    return p


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    dims = Dims(d=args.d, k=args.k)
    return ExperimentConfig(
        dims=dims,
        spectrum=SpectrumSpec.geometric(dims.k, args.sigma_max, args.sigma_min),
        variant=Variant(args.operator),
        L=args.L,
        p=args.p,
        beta=args.beta,
        noiseless=args.noiseless,
        seed=args.seed,
        out=args.out,
    )


def run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    inst = generate_instance(
        cfg.dims, cfg.spectrum, cfg.variant, cfg.beta, RngStream(cfg.seed),
        L=cfg.L, p=cfg.p, noiseless=cfg.noiseless,
    )
    path = save_instance(cfg.out, inst)
    logger.info("Instance written", path=str(path))
    return 0
