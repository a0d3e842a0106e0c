from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Variant(str, Enum):
    FACTORIZATION = "factorization"
    SENSING = "sensing"
    COMPLETION = "completion"


# --- DIMENSIONS ---

class Dims(BaseModel):
    """Ambient rows d and rank k; N and m are always derived."""

    d: int = Field(..., ge=1)
    k: int = Field(..., ge=1)
    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _rank_fits(self):
        if self.k > self.d:
            raise ValueError(f"k={self.k} exceeds d={self.d}")
        return self

    @property
    def N(self) -> int:
        return self.d * self.k

    @property
    def m(self) -> int:
        return self.k * (self.k - 1) // 2


class SpectrumSpec(BaseModel):
    singular_values: List[float]
    model_config = ConfigDict(frozen=True)

    @field_validator("singular_values")
    @classmethod
    def _positive_nonincreasing(cls, values: List[float]) -> List[float]:
        if not values:
            raise ValueError("spectrum must not be empty")
        if any(v <= 0 for v in values):
            raise ValueError("singular values must be positive")
        if any(a < b for a, b in zip(values, values[1:])):
            raise ValueError("singular values must be nonincreasing")
        return values

    @classmethod
    def geometric(cls, k: int, sigma_max: float, sigma_min: float) -> "SpectrumSpec":
        """k values spaced geometrically from sigma_max down to sigma_min."""
        if k == 1:
            return cls(singular_values=[float(sigma_max)])
        return cls(singular_values=[float(v) for v in np.geomspace(sigma_max, sigma_min, k)])

    @property
    def sigma_max(self) -> float:
        return self.singular_values[0]

    @property
    def sigma_min(self) -> float:
        return self.singular_values[-1]

    @property
    def kappa(self) -> float:
        return self.sigma_max / self.sigma_min


# --- RUN CONFIGURATION ---

class RunConfig(BaseModel):
    beta: float = Field(..., gt=0)
    h: float = Field(..., gt=0)
    steps: int = Field(..., ge=1)
    burnin: Optional[int] = Field(default=None, ge=0)
    thin: int = Field(default=10, ge=1)
    chains: int = Field(default=1, ge=1)
    seed: int = Field(..., ge=0, lt=2**64)
    epsilon: float = Field(default=0.05, gt=0, lt=1)

    # Optional knobs
    tube_radius: Optional[float] = Field(default=None, gt=0)
    keep_x: bool = False
    divergence_factor: Optional[float] = Field(default=None, gt=0)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="before")
    @classmethod
    def _burnin_default(cls, data):
        if isinstance(data, dict) and data.get("burnin") is None and isinstance(data.get("steps"), int):
            data = {**data, "burnin": data["steps"] // 10}
        return data

    @model_validator(mode="after")
    def _burnin_below_steps(self):
        if self.burnin is None or self.burnin >= self.steps:
            raise ValueError(f"burnin={self.burnin} must be smaller than steps={self.steps}")
        return self

    def halved(self) -> "RunConfig":
        """Same physical horizon at half the step size."""
        return self.model_copy(update={
            "h": self.h / 2,
            "steps": self.steps * 2,
            "burnin": self.burnin * 2,
            "thin": self.thin * 2,
        })


class CirParams(BaseModel):
    """dY = (n_tilde - gamma*Y) dt + sigma*sqrt(Y) dB on a uniform grid of step h."""

    gamma: float = Field(..., gt=0)
    n_tilde: float = Field(..., ge=0)
    y0: float = Field(..., ge=0)
    h: float = Field(..., gt=0)
    horizon: float = Field(..., gt=0)
    sigma: float = Field(default=1.0, gt=0)
    model_config = ConfigDict(frozen=True)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.h)))

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h


# --- REPORTS ---

class CirFit(BaseModel):
    gamma_hat: float
    n_tilde_hat: float
    sigma_hat: Optional[float] = None


class DiagnosticsReport(BaseModel):
    nearness_fraction: Optional[float] = Field(default=None, ge=0, le=1)
    max_eta: Optional[float] = None
    tube_radius_used: Optional[float] = None
    branch_flips: Optional[int] = Field(default=None, ge=0)
    ks_uniform_angle: Optional[float] = Field(default=None, ge=0, le=1)
    f_constancy_cv: Optional[float] = None
    det_constancy_cv: Optional[float] = None
    grad_corr_violations: Optional[float] = Field(default=None, ge=0, le=1)
    iact_eta: Optional[float] = Field(default=None, ge=0.5)
    iact_angle: Optional[float] = Field(default=None, ge=0.5)
    cir_fit: Optional[CirFit] = None
    notes: List[str] = Field(default_factory=list)


# --- CLI ---

class ExperimentConfig(BaseModel):
    """Validated union of the generation parameters, the run parameters and output paths."""

    dims: Optional[Dims] = None
    spectrum: Optional[SpectrumSpec] = None
    variant: Optional[Variant] = None
    L: Optional[int] = Field(default=None, ge=1)
    p: Optional[float] = Field(default=None, gt=0, le=1)
    beta: Optional[float] = Field(default=None, gt=0)
    noiseless: bool = False
    run: Optional[RunConfig] = None
    seed: int = Field(..., ge=0, lt=2**64)
    threads: Optional[int] = Field(default=None, ge=1)
    out: Path

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _variant_params(self):
        if self.variant is None:
            return self
        if self.variant == Variant.SENSING and self.L is None:
            raise ValueError("--L is required for sensing")
        if self.variant != Variant.SENSING and self.L is not None:
            raise ValueError("--L is only valid for sensing")
        if self.variant == Variant.COMPLETION and self.p is None:
            raise ValueError("--p is required for completion")
        if self.variant != Variant.COMPLETION and self.p is not None:
            raise ValueError("--p is only valid for completion")
        if self.spectrum is not None and self.dims is not None and len(self.spectrum.singular_values) != self.dims.k:
            raise ValueError("spectrum length must equal k")
        return self


class CirRequest(BaseModel):
    """Flags of the cir subcommand, validated before any path is simulated."""

    params: CirParams
    paths: int = Field(..., ge=1)
    epsilon: float = Field(..., gt=0, lt=1)
    seed: int = Field(..., ge=0, lt=2**64)

    model_config = ConfigDict(frozen=True)


class TorusRequest(BaseModel):
    """Flags of the torus subcommand; s_max stays inside the unit tube around the circle."""

    beta: float = Field(..., gt=0)
    s_max: float = Field(..., gt=0, lt=1)
    h: float = Field(..., gt=0)
    steps: int = Field(..., ge=1)
    chains: int = Field(..., ge=1)
    thin: int = Field(..., ge=1)
    bins: int = Field(..., ge=1)
    seed: int = Field(..., ge=0, lt=2**64)

    model_config = ConfigDict(frozen=True)
