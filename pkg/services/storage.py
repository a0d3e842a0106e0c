"""
On-disk formats: JSON through orjson (sorted keys, two-space indent,
shortest round-trip floats) and CSV through the csv module with repr floats.
"""
import csv
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
import structlog

from errors import SizeError
from models import DiagnosticsReport, Dims, RunConfig, SpectrumSpec, Variant
from services.operators import Instance, MeasurementOperator
from services.sampler import TRAJECTORY_COLUMNS, Trajectory

logger = structlog.get_logger("storage")

JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2
PathLike = Union[str, Path]


# --- JSON ---

def dumps(payload: Any) -> bytes:
    return orjson.dumps(payload, option=JSON_OPTIONS) + b"\n"


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(payload))
    return path


def read_json(path: PathLike) -> Any:
    return orjson.loads(Path(path).read_bytes())


def instance_to_dict(inst: Instance) -> Dict[str, Any]:
    op = inst.operator
    operator: Dict[str, Any] = {"variant": op.variant.value, "d": op.d}
    if op.variant == Variant.SENSING:
        operator["a_matrices"] = op.a_matrices.tolist()
    elif op.variant == Variant.COMPLETION:
        operator["mask"] = [[int(i), int(j)] for i, j in zip(op.rows, op.cols)]
        operator["p"] = op.p
    return {
        "d": inst.dims.d,
        "k": inst.dims.k,
        "x_star": inst.x_star.tolist(),
        "operator": operator,
        "b": inst.b.tolist(),
        "beta": inst.beta,
        "seed": inst.seed,
        "spectrum": list(inst.spectrum.singular_values),
        "noiseless": inst.noiseless,
        "incoherence_mu": inst.incoherence_mu,
    }


def instance_from_dict(data: Dict[str, Any]) -> Instance:
    dims = Dims(d=data["d"], k=data["k"])
    raw = data["operator"]
    variant = Variant(raw["variant"])
    if variant == Variant.FACTORIZATION:
        op = MeasurementOperator.factorization(raw["d"])
    elif variant == Variant.SENSING:
        op = MeasurementOperator.sensing(np.array(raw["a_matrices"], dtype=float))
    else:
        op = MeasurementOperator.completion(raw["d"], [tuple(pair) for pair in raw["mask"]], raw["p"])

    x_star = np.array(data["x_star"], dtype=float)
    b = np.array(data["b"], dtype=float)
    if x_star.shape != (dims.d, dims.k) or b.shape != (op.output_size,):
        raise SizeError("instance arrays do not match the declared dimensions")
    return Instance(
        dims=dims, x_star=x_star, operator=op, b=b, beta=float(data["beta"]), seed=int(data["seed"]),
        spectrum=SpectrumSpec(singular_values=data["spectrum"]), noiseless=bool(data["noiseless"]),
        incoherence_mu=data.get("incoherence_mu"),
    )


def save_instance(path: PathLike, inst: Instance) -> Path:
    return write_json(path, instance_to_dict(inst))


def load_instance(path: PathLike) -> Instance:
    return instance_from_dict(read_json(path))


def save_report(path: PathLike, report: DiagnosticsReport) -> Path:
    return write_json(path, report.model_dump(mode="json"))


def load_report(path: PathLike) -> DiagnosticsReport:
    return DiagnosticsReport.model_validate(read_json(path))


def save_run(
    path: PathLike,
    x0: np.ndarray,
    branch: int,
    cfg: RunConfig,
    trajs: Sequence[Trajectory],
    tube_radius: float,
    reference: Optional[Dict[str, float]] = None,
) -> Path:
    payload = {
        "x0": np.asarray(x0).tolist(),
        "branch": branch,
        "config": cfg.model_dump(mode="json"),
        "tube_radius": tube_radius,
        "chains": [
            {
                "chain": t.chain,
                "records": len(t),
                "diverged": t.diverged,
                "interrupted": t.interrupted,
                "message": t.message,
            }
            for t in trajs
        ],
    }
    if reference is not None:
        payload["reference"] = reference
    return write_json(path, payload)


def load_run(path: PathLike) -> Tuple[np.ndarray, int, RunConfig, List[Dict[str, Any]], float]:
    data = read_json(path)
    return (
        np.array(data["x0"], dtype=float),
        int(data["branch"]),
        RunConfig.model_validate(data["config"]),
        data["chains"],
        float(data["tube_radius"]),
    )


# --- CSV ---

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_trajectory(path: PathLike, traj: Trajectory) -> Path:
    time = traj.time
    angle = traj.angle if traj.angle is not None else [None] * len(traj)
    rows = zip(traj.step, time, traj.eta, traj.f, traj.branch, angle, traj.s_norm, traj.y_norm)
    return write_csv(path, TRAJECTORY_COLUMNS, rows)


def _column(rows: List[Dict[str, str]], name: str) -> np.ndarray:
    return np.array([float(r[name]) if r[name] != "" else math.nan for r in rows], dtype=float)


def read_trajectory(path: PathLike, chain: int, h: float, k: int) -> Trajectory:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != TRAJECTORY_COLUMNS:
        raise SizeError(f"{path}: unexpected columns {tuple(rows[0].keys())}")
    return Trajectory(
        chain=chain,
        h=h,
        step=np.array([int(r["step"]) for r in rows], dtype=np.int64),
        eta=_column(rows, "eta"),
        f=_column(rows, "f"),
        branch=np.array([int(r["branch"]) for r in rows], dtype=np.int64),
        angle=_column(rows, "angle") if k == 2 else None,
        s_norm=_column(rows, "s_norm"),
        y_norm=_column(rows, "y_norm"),
    )


def read_csv_columns(path: PathLike) -> Dict[str, np.ndarray]:
    """Numeric columns of a CSV by header name; empty cells become NaN."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {name: _column(rows, name) for name in rows[0].keys()}


def write_matrix(path: PathLike, header: Sequence[str], matrix: np.ndarray) -> Path:
    return write_csv(path, header, np.asarray(matrix).tolist())


def chain_file(out_dir: PathLike, chain: int) -> Path:
    return Path(out_dir) / f"chain_{chain}.csv"


def iterate_file(out_dir: PathLike, chain: int) -> Path:
    return Path(out_dir) / f"chain_{chain}_x.csv"


def write_iterates(path: PathLike, traj: Trajectory) -> Path:
    """Retained iterates, one row per record: step then X row-major as x_<i>_<j>."""
    if traj.x is None:
        raise SizeError(f"chain {traj.chain} kept no iterates")
    n, d, k = traj.x.shape
    header = ("step", *(f"x_{i}_{j}" for i in range(d) for j in range(k)))
    flat = traj.x.reshape(n, d * k).tolist()
    return write_csv(path, header, ([int(s), *row] for s, row in zip(traj.step, flat)))
