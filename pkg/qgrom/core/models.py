import hashlib
import itertools
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from qgrom.core.config import settings

VARIABLES: Tuple[str, ...] = ("q1", "q2", "psi1", "psi2")
Variable = Literal["q1", "q2", "psi1", "psi2"]

# Canonical order of the physical parameters that may vary in a sweep.
PARAMETER_NAMES: Tuple[str, ...] = ("delta", "sigma", "Fr")

# Sample lists of the parametric study.
STUDY_DELTA = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6]
STUDY_SIGMA = [0.006, 0.007, 0.008, 0.009, 0.010]
STUDY_FR = [0.07, 0.08, 0.09, 0.10, 0.11]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(StrictModel):
    nx: int = Field(64, ge=2)
    ny: int = Field(128, ge=2)
    x0: float = 0.0
    xf: float = 1.0
    y_lo: float = -1.0
    y_hi: float = 1.0

    @model_validator(mode="after")
    def _check_extent(self):
        if self.xf <= self.x0 or self.y_hi <= self.y_lo:
            raise ValueError("domain extent must be positive in x and y")
        return self


class ForcingSpec(StrictModel):
    """Wind forcing F(x, y) = amplitude * sin(pi * y) for the double gyre, or none."""

    kind: Literal["double_gyre", "none"] = "double_gyre"
    amplitude: float = 1.0


class PhysParams(StrictModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    Re: float = Field(450.0, gt=0)
    Ro: float = Field(0.001, gt=0)
    Fr: float = Field(0.1, ge=0)
    delta: float = Field(0.5, gt=0, lt=1)
    sigma: float = Field(0.006, ge=0)
    alpha1: float = Field(1.0 / 64, ge=0)
    alpha2: float = Field(1.0 / 64, ge=0)
    forcing: ForcingSpec = Field(default_factory=ForcingSpec)

    def with_parameters(self, names: Tuple[str, ...], values) -> "PhysParams":
        return self.model_copy(update={n: float(v) for n, v in zip(names, values)})


class SolverConfig(StrictModel):
    tol: float = Field(default_factory=lambda: settings.SOLVER_TOL, gt=0)
    max_iter_factor: int = Field(default_factory=lambda: settings.SOLVER_MAX_ITER_FACTOR, ge=1)
    progress_every: int = Field(default_factory=lambda: settings.PROGRESS_EVERY, ge=1)


class SimulationConfig(StrictModel):
    """Run configuration of a single full order simulation."""

    grid: GridConfig = Field(default_factory=GridConfig)
    params: PhysParams = Field(default_factory=PhysParams)
    dt: float = Field(2.5e-5, gt=0)
    t_end: float = Field(50.0, ge=0)
    window_start: float = Field(10.0, ge=0)
    stride: float = Field(0.1, gt=0)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    output_dir: Optional[str] = None


class SweepPlan(StrictModel):
    grid: GridConfig = Field(default_factory=GridConfig)
    params: PhysParams = Field(default_factory=PhysParams)
    delta_values: List[float] = Field(default_factory=lambda: list(STUDY_DELTA), min_length=1)
    sigma_values: List[float] = Field(default_factory=lambda: [0.006], min_length=1)
    fr_values: List[float] = Field(default_factory=lambda: [0.1], min_length=1)
    delta_box: Optional[Tuple[float, float]] = None
    sigma_box: Optional[Tuple[float, float]] = None
    fr_box: Optional[Tuple[float, float]] = None
    dt: float = Field(2.5e-5, gt=0)
    window_start: float = Field(10.0, ge=0)
    window_end: float = Field(50.0, gt=0)
    stride: float = Field(0.1, gt=0)
    predict_end: float = Field(100.0, gt=0)
    solver: SolverConfig = Field(default_factory=SolverConfig)

    @model_validator(mode="after")
    def _check_plan(self):
        if self.window_end < self.window_start:
            raise ValueError("window_end must not precede window_start")
        if self.predict_end < self.window_end:
            raise ValueError("predict_end must not precede window_end")
        for name, values in self.sample_lists().items():
            lo, hi = self.box(name)
            if lo > hi:
                raise ValueError(f"{name} box is empty: {(lo, hi)}")
            outside = [v for v in values if v < lo or v > hi]
            if outside:
                raise ValueError(f"{name} samples {outside} lie outside the box {(lo, hi)}")
        return self

    def sample_lists(self) -> Dict[str, List[float]]:
        return {"delta": self.delta_values, "sigma": self.sigma_values, "Fr": self.fr_values}

    def box(self, name: str) -> Tuple[float, float]:
        declared = {"delta": self.delta_box, "sigma": self.sigma_box, "Fr": self.fr_box}[name]
        values = self.sample_lists()[name]
        return tuple(declared) if declared is not None else (min(values), max(values))

    @property
    def parameter_names(self) -> Tuple[str, ...]:
        """Parameters with more than one sample; they form the vector mu."""
        return tuple(n for n in PARAMETER_NAMES if len(self.sample_lists()[n]) > 1)

    def samples(self) -> np.ndarray:
        """Cartesian product of the sample lists, delta-major; shape (M, d)."""
        lists = self.sample_lists()
        names = self.parameter_names
        rows = [
            [combo[PARAMETER_NAMES.index(n)] for n in names]
            for combo in itertools.product(*(lists[n] for n in PARAMETER_NAMES))
        ]
        return np.asarray(rows, dtype=float).reshape(len(rows), len(names))

    def params_for(self, mu) -> PhysParams:
        fixed = {n: self.sample_lists()[n][0] for n in PARAMETER_NAMES}
        base = self.params.with_parameters(PARAMETER_NAMES, [fixed[n] for n in PARAMETER_NAMES])
        return base.with_parameters(self.parameter_names, mu)

    def simulation_for(self, mu, t_end: Optional[float] = None,
                       window_start: Optional[float] = None) -> SimulationConfig:
        return SimulationConfig(
            grid=self.grid,
            params=self.params_for(mu),
            dt=self.dt,
            t_end=self.window_end if t_end is None else t_end,
            window_start=self.window_start if window_start is None else window_start,
            stride=self.stride,
            solver=self.solver,
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def preset(cls, name: str) -> "SweepPlan":
        h = 1.0 / 64
        study = dict(
            params=PhysParams(Re=450.0, Ro=0.001, Fr=0.1, sigma=0.006, alpha1=h, alpha2=h),
            delta_box=(0.2, 0.6),
            sigma_box=(0.006, 0.01),
            fr_box=(0.07, 0.11),
        )
        if name == "delta":
            return cls(**study)
        if name == "delta_sigma":
            return cls(sigma_values=list(STUDY_SIGMA), **study)
        if name == "delta_sigma_fr":
            return cls(sigma_values=list(STUDY_SIGMA), fr_values=list(STUDY_FR), **study)
        if name == "desk":
            hd = 1.0 / 16
            return cls(
                grid=GridConfig(nx=16, ny=32),
                params=PhysParams(Re=450.0, Ro=0.001, Fr=0.1, sigma=0.006, alpha1=hd, alpha2=hd),
                delta_values=[0.3, 0.45, 0.6],
                dt=1e-3,
                window_start=2.0,
                window_end=6.0,
                stride=0.1,
                predict_end=10.0,
            )
        raise ValueError(f"unknown sweep preset '{name}'")


class RpodConfig(StrictModel):
    rank: int = Field(default_factory=lambda: settings.N_MODES, ge=1)
    oversample: int = Field(default_factory=lambda: settings.RPOD_OVERSAMPLE, ge=0)
    power: int = Field(default_factory=lambda: settings.RPOD_POWER, ge=1)
    seed: int = 0


class LstmHyper(StrictModel):
    layers: int = Field(1, ge=1)
    cells_per_layer: int = Field(100, ge=1)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(500, ge=1)
    activation: Literal["tanh"] = "tanh"
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    loss: Literal["mse"] = "mse"
    learning_rate: float = Field(1e-3, gt=0)
    dropout: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(1e-5, ge=0)
    lookback: int = Field(default_factory=lambda: settings.LOOKBACK, ge=1)

    @classmethod
    def preset(cls, name: str, **overrides) -> "LstmHyper":
        presets = {
            "M_q": dict(layers=1, cells_per_layer=100, batch_size=8, dropout=0.0),
            "M_psi": dict(layers=3, cells_per_layer=50, batch_size=16, dropout=0.1),
        }
        if name not in presets:
            raise ValueError(f"unknown LSTM preset '{name}'")
        return cls(**{**presets[name], **overrides})


class LstmConfig(StrictModel):
    """Hyperparameters per variable family; partial JSON objects override the presets."""

    q: LstmHyper = Field(default_factory=lambda: LstmHyper.preset("M_q"))
    psi: LstmHyper = Field(default_factory=lambda: LstmHyper.preset("M_psi"))
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _merge_presets(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            for key, preset in (("q", "M_q"), ("psi", "M_psi")):
                if isinstance(data.get(key), dict):
                    data[key] = LstmHyper.preset(preset, **data[key])
        return data

    def for_variable(self, variable: str) -> LstmHyper:
        return self.q if variable.startswith("q") else self.psi


class EvaluationConfig(StrictModel):
    n_test_points: int = Field(3, ge=1)
    seed: int = 0
    scale_nearest: bool = False


class RunConfig(StrictModel):
    """Command configuration document; sections not used by a command may be omitted."""

    plan: Optional[SweepPlan] = None
    preset: Optional[Literal["delta", "delta_sigma", "delta_sigma_fr", "desk"]] = None
    simulation: Optional[SimulationConfig] = None
    rpod: RpodConfig = Field(default_factory=RpodConfig)
    lstm: LstmConfig = Field(default_factory=LstmConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    output_dir: Optional[str] = None

    def resolved_plan(self) -> SweepPlan:
        if self.plan is not None:
            return self.plan
        if self.preset is not None:
            return SweepPlan.preset(self.preset)
        raise ValueError("config needs either 'plan' or 'preset'")


# --- online prediction API payloads ----------------------------------------

class PredictRequest(BaseModel):
    mu: List[float]
    variable: Variable = "psi1"
    horizon_steps: Optional[int] = Field(None, ge=0)


class PredictResponse(BaseModel):
    variable: str
    mu: List[float]
    nearest_sample: int
    nearest_mu: List[float]
    nx: int
    ny: int
    values: List[float]
    processing_time: float


class NearestRequest(BaseModel):
    mu: List[float]


class NearestResponse(BaseModel):
    index: int
    mu: List[float]


class HealthResponse(BaseModel):
    status: str
    manifest_loaded: bool
    fingerprint: Optional[str] = None
    variables: List[str] = []
