import copy
import json
import os
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from forecasters import BASELINE_METHOD, METHODS, RNN_METHODS
from image_io import SyntheticSpec
from optical_flow import FlowParams
from warping import WarpParams

load_dotenv()

DEFAULT_OUT_DIR = os.getenv("BREATHCAST_OUT_DIR", "results")
DEFAULT_N_JOBS = int(os.getenv("BREATHCAST_N_JOBS", "1"))
DEFAULT_LOG_LEVEL = os.getenv("BREATHCAST_LOG_LEVEL", "INFO")

MAX_HORIZON = 7

# hyper-parameters each method is searched over
GRID_KEYS = {
    "rtrl": {"eta", "L", "q"},
    "uoro": {"eta", "L", "q"},
    "snap1": {"eta", "L", "q"},
    "dni": {"eta", "L", "q"},
    "frozen_rnn": {"eta", "L", "q"},
    "lms": {"eta", "L"},
    "linreg": {"L"},
}

# methods whose runs are identical for every seed
DETERMINISTIC_METHODS = ("lms", "linreg")


class ConfigError(Exception):
    pass


class RunCounts(BaseModel):
    n_cv: int = Field(10, ge=1)
    n_warp: int = Field(5, ge=1)
    n_test_pca: int = Field(10, ge=1)


class ForecastSpec(BaseModel):
    """Single forecasting run driven from the CLI."""

    method: str = "snap1"
    eta: float = Field(0.01, ge=0)
    L: int = Field(12, ge=1)
    q: int = Field(10, ge=1)
    h: int = Field(1, ge=1, le=MAX_HORIZON)

    @field_validator("method")
    @classmethod
    def _known(cls, method: str) -> str:
        allowed = METHODS + (BASELINE_METHOD,)
        if method not in allowed:
            raise ValueError(f"unknown method '{method}'; choose from {list(allowed)}")
        return method


class ExperimentConfig(BaseModel):
    m_train: int = 90
    m_train_linreg: int = 160
    m_cv: int = 180
    horizons: List[int]
    methods: List[str]
    grids: Dict[str, Dict[str, List[Union[int, float]]]]
    n_cp_range: List[int] = [1, 2, 3, 4]
    runs: Dict[str, RunCounts] = {}
    seed: int = 42
    flow_grid: Dict[str, List[Union[int, float]]]
    # fixed flow parameters skip the flow grid search
    flow_params: Optional[FlowParams] = None
    warp: WarpParams = WarpParams()
    weight_eval_n_cp: int = Field(3, ge=1)
    persist_state: bool = True
    save_frames: List[int] = []
    sequences: List[str] = []
    synthetic: SyntheticSpec = SyntheticSpec()
    n_jobs: int = DEFAULT_N_JOBS
    forecast: ForecastSpec = ForecastSpec()

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods: List[str]) -> List[str]:
        if not methods:
            raise ValueError("at least one forecasting method is required")
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        return methods

    @field_validator("horizons")
    @classmethod
    def _horizon_range(cls, horizons: List[int]) -> List[int]:
        if not horizons or any(h < 1 or h > MAX_HORIZON for h in horizons):
            raise ValueError(f"horizons must be a non-empty subset of 1..{MAX_HORIZON}, got {horizons}")
        return horizons

    @field_validator("n_cp_range")
    @classmethod
    def _positive_ncp(cls, values: List[int]) -> List[int]:
        if not values or min(values) < 1:
            raise ValueError(f"n_cp_range must hold positive integers, got {values}")
        return sorted(set(values))

    @model_validator(mode="after")
    def _consistent(self):
        if not 2 <= self.m_train < self.m_cv:
            raise ValueError(f"need 2 <= m_train < m_cv, got m_train={self.m_train}, m_cv={self.m_cv}")
        if not self.m_train <= self.m_train_linreg < self.m_cv:
            raise ValueError(f"m_train_linreg ({self.m_train_linreg}) must lie in [m_train, m_cv)")
        for method in self.methods:
            grid = self.grids.get(method)
            if not grid or any(len(v) == 0 for v in grid.values()):
                raise ValueError(f"grid for '{method}' is missing or has an empty range")
            missing = GRID_KEYS[method] - set(grid)
            if missing:
                raise ValueError(f"grid for '{method}' lacks {sorted(missing)}")
        if not self.flow_grid and self.flow_params is None:
            raise ValueError("either flow_grid or flow_params must be given")
        return self

    def runs_for(self, method: str) -> RunCounts:
        if method in DETERMINISTIC_METHODS:
            return RunCounts(n_cv=1, n_warp=1, n_test_pca=1)
        return self.runs.get(method, RunCounts())

    def m_train_for(self, method: str) -> int:
        return self.m_train_linreg if method == "linreg" else self.m_train


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_PAPER_RNN_GRID = {
    "eta": [0.005, 0.01, 0.015, 0.02],
    "L": [6, 12, 18, 24, 30],
    "q": [10, 30, 50, 70, 90, 110],
}

_DESK_RNN_GRID = {"eta": [0.01, 0.02], "L": [6, 12], "q": [10]}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "horizons": [1, 3, 6],
        "methods": ["rtrl", "uoro", "snap1", "dni", "lms", "linreg", "frozen_rnn"],
        "grids": {
            **{m: _DESK_RNN_GRID for m in RNN_METHODS},
            "lms": {"eta": [0.05, 0.1], "L": [6, 12]},
            "linreg": {"L": [6, 12]},
        },
        "n_cp_range": [1, 2, 3, 4],
        "runs": {m: {"n_cv": 10, "n_warp": 5, "n_test_pca": 10} for m in RNN_METHODS},
        "flow_grid": {
            "sigma_init": [0.1],
            "sigma_sub": [0.5, 1.0],
            "sigma_lk": [2.0, 3.0],
            "n_layers": [2, 3],
            "n_iter": [1],
        },
        "save_frames": [181, 200],
        "synthetic": {"n_frames": 200, "noise_std": 0.5},
    },
    "paper": {
        "horizons": [1, 2, 3, 4, 5, 6, 7],
        "methods": ["rtrl", "uoro", "snap1", "dni", "lms", "linreg", "frozen_rnn"],
        "grids": {
            **{m: _PAPER_RNN_GRID for m in RNN_METHODS},
            "lms": {"eta": [0.02, 0.05, 0.1, 0.2], "L": [6, 12, 18, 24, 30]},
            "linreg": {"L": [6, 12, 18, 24, 30]},
        },
        "n_cp_range": [1, 2, 3, 4],
        "runs": {
            **{m: {"n_cv": 250, "n_warp": 25, "n_test_pca": 250} for m in RNN_METHODS},
            "rtrl": {"n_cv": 10, "n_warp": 5, "n_test_pca": 10},
        },
        "flow_grid": {
            "sigma_init": [0.1, 0.5, 1.0],
            "sigma_sub": [0.1, 0.5, 1.0],
            "sigma_lk": [1.0, 2.0, 3.0, 4.0],
            "n_layers": [1, 2, 3],
            "n_iter": [1, 2, 3],
        },
        "save_frames": [181, 200],
        "synthetic": {"n_frames": 200, "height": 128, "width": 128, "noise_std": 0.5},
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key in ("grids", "runs", "synthetic", "forecast") and isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[str] = None, profile: str = "desk",
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Preset, then JSON file, then explicit overrides."""
    if profile not in PRESETS:
        raise ConfigError(f"unknown profile '{profile}'; choose from {sorted(PRESETS)}")
    raw = copy.deepcopy(PRESETS[profile])

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r") as f:
                raw = _merge(raw, json.load(f))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    if overrides:
        raw = _merge(raw, {k: v for k, v in overrides.items() if v is not None})

    try:
        return ExperimentConfig(**raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
