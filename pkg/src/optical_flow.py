import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from sklearn.model_selection import ParameterGrid

from image_io import ImageSequence, pixel_grid, sample_bilinear, sample_displaced, zero_field
from metrics import ground_truth_registration_error

logger = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 8
# Gaussian windows are cut at 3 sigma
TRUNCATE = 3.0
REGULARIZATION = 1e-6
CENTRAL_DIFF = [-0.5, 0.0, 0.5]


class FlowError(Exception):
    pass


class FlowParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_init: float = Field(0.1, ge=0)
    sigma_sub: float = Field(0.5, gt=0)
    sigma_lk: float = Field(2.0, gt=0)
    n_layers: int = Field(2, ge=1)
    n_iter: int = Field(1, ge=1)


@dataclass(frozen=True)
class DvfSeries:
    fields: np.ndarray   # (K, H, W, 2), field k maps frame 1 onto frame k
    params: FlowParams

    def __post_init__(self):
        if self.fields.ndim != 4 or self.fields.shape[-1] != 2:
            raise FlowError(f"DVF series must be (K, H, W, 2), got {self.fields.shape}")
        if np.any(self.fields[0] != 0):
            raise FlowError("first field of a DVF series must be the zero field")

    def __len__(self) -> int:
        return self.fields.shape[0]

    def field(self, k: int) -> np.ndarray:
        """Field of 1-based frame k."""
        return self.fields[k - 1]


def _smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma, mode="nearest", truncate=TRUNCATE)


def gaussian_pyramid(image: np.ndarray, n_layers: int, sigma_sub: float) -> List[np.ndarray]:
    if n_layers < 1:
        raise FlowError(f"n_layers must be >= 1, got {n_layers}")
    levels = [np.asarray(image, dtype=np.float64)]
    for _ in range(n_layers - 1):
        # slicing with step 2 keeps ceil(n / 2) samples
        levels.append(_smooth(levels[-1], sigma_sub)[::2, ::2])
    if min(levels[-1].shape) < MIN_LEVEL_SIZE:
        raise FlowError(
            f"coarsest pyramid level is {levels[-1].shape[0]}x{levels[-1].shape[1]}, "
            f"needs at least {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}; reduce n_layers ({n_layers})"
        )
    return levels


def _upsample_flow(flow: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    rows, cols = pixel_grid(shape)
    up = np.empty(shape + (2,))
    for ch in range(2):
        up[..., ch] = 2.0 * sample_bilinear(flow[..., ch], rows / 2.0, cols / 2.0)
    return up


def _refine_level(reference: np.ndarray, target: np.ndarray, flow: np.ndarray,
                  sigma_lk: float, n_iter: int) -> np.ndarray:
    ix = ndimage.correlate1d(reference, CENTRAL_DIFF, axis=1, mode="nearest")
    iy = ndimage.correlate1d(reference, CENTRAL_DIFF, axis=0, mode="nearest")

    # windowed moment matrix [[a, b], [b, c]]
    a = _smooth(ix * ix, sigma_lk)
    b = _smooth(ix * iy, sigma_lk)
    c = _smooth(iy * iy, sigma_lk)
    trace = a + c
    eps = REGULARIZATION * trace / 2.0
    a = a + eps
    c = c + eps
    flat = trace <= 0.0
    det = np.where(flat, 1.0, a * c - b * b)

    for _ in range(n_iter):
        mismatch = reference - sample_displaced(target, flow)
        bx = _smooth(ix * mismatch, sigma_lk)
        by = _smooth(iy * mismatch, sigma_lk)
        dx = np.where(flat, 0.0, (c * bx - b * by) / det)
        dy = np.where(flat, 0.0, (a * by - b * bx) / det)
        flow = flow + np.stack([dx, dy], axis=-1)
    return flow


def lucas_kanade_dense(reference: np.ndarray, target: np.ndarray, params: FlowParams) -> np.ndarray:
    """Pyramidal iterative LK: u such that reference(x) ~ target(x + u(x))."""
    reference = np.asarray(reference, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if reference.shape != target.shape or reference.ndim != 2:
        raise FlowError(f"reference {reference.shape} and target {target.shape} must be matching 2D grids")

    if params.sigma_init > 0:
        reference = _smooth(reference, params.sigma_init)
        target = _smooth(target, params.sigma_init)

    ref_levels = gaussian_pyramid(reference, params.n_layers, params.sigma_sub)
    tgt_levels = gaussian_pyramid(target, params.n_layers, params.sigma_sub)

    flow = None
    for ref_l, tgt_l in zip(reversed(ref_levels), reversed(tgt_levels)):
        flow = zero_field(ref_l.shape) if flow is None else _upsample_flow(flow, ref_l.shape)
        flow = _refine_level(ref_l, tgt_l, flow, params.sigma_lk, params.n_iter)
    return flow


def register_sequence(seq: ImageSequence, params: FlowParams, last_frame: Optional[int] = None,
                      n_jobs: int = 1) -> DvfSeries:
    """Register frames 2..last_frame (default: all) onto frame 1."""
    last = seq.n_frames if last_frame is None else last_frame
    if not 1 <= last <= seq.n_frames:
        raise FlowError(f"last_frame {last} outside 1..{seq.n_frames}")

    reference = seq.frame(1)
    estimated = Parallel(n_jobs=n_jobs)(
        delayed(lucas_kanade_dense)(reference, seq.frame(k), params) for k in range(2, last + 1)
    )
    fields = np.stack([zero_field(seq.shape)] + list(estimated))
    logger.debug("Registered %s frames 2..%d with %s", seq.name, last, params)
    return DvfSeries(fields=fields, params=params)


def expand_flow_grid(grid: Union[Dict[str, list], Sequence[FlowParams]]) -> List[FlowParams]:
    if isinstance(grid, dict):
        return [FlowParams(**combo) for combo in ParameterGrid(grid)]
    return list(grid)


def _grid_point_error(seq: ImageSequence, params: FlowParams, m_train: int) -> float:
    dvfs = register_sequence(seq, params, last_frame=m_train)
    return ground_truth_registration_error(dvfs.fields, seq, m_train)


def evaluate_flow_grid(seq: ImageSequence, grid: Union[Dict[str, list], Sequence[FlowParams]],
                       m_train: int, n_jobs: int = 1) -> pd.DataFrame:
    """E_gt over frames 2..m_train for every grid point, one row each in grid order."""
    candidates = expand_flow_grid(grid)
    if not candidates:
        raise FlowError("flow parameter grid is empty")
    if not 2 <= m_train <= seq.n_frames:
        raise FlowError(f"m_train must lie in 2..{seq.n_frames}, got {m_train}")

    errors = Parallel(n_jobs=n_jobs)(
        delayed(_grid_point_error)(seq, params, m_train) for params in candidates
    )
    table = pd.DataFrame([p.model_dump() for p in candidates])
    table["e_gt"] = errors
    return table


def optimize_flow_params(seq: ImageSequence, grid: Union[Dict[str, list], Sequence[FlowParams]],
                         m_train: int, n_jobs: int = 1) -> Tuple[FlowParams, float]:
    candidates = expand_flow_grid(grid)
    table = evaluate_flow_grid(seq, candidates, m_train, n_jobs=n_jobs)
    # idxmin keeps the first minimum, i.e. grid order breaks ties
    best = int(table["e_gt"].idxmin())
    logger.info("✔ Best flow params for %s: %s (E_gt = %.4f)", seq.name, candidates[best], table["e_gt"][best])
    return candidates[best], float(table["e_gt"][best])
