import logging
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from image_io import ImageSequence, check_field, sample_displaced

logger = logging.getLogger(__name__)

# SSIM constants (11x11 Gaussian window, sigma 1.5)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 255.0

Z_95 = 1.96


class MetricError(Exception):
    pass


def _normalized_rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if truth.size == 0:
        raise MetricError("cannot compute nRMSE over an empty range")
    denom = np.sum((truth - truth.mean(axis=0)) ** 2)
    if denom == 0:
        raise MetricError("nRMSE undefined: ground truth is constant over the range")
    return float(np.sqrt(np.sum((pred - truth) ** 2) / denom))


def weight_nrmse(pred: np.ndarray, truth: np.ndarray, rows: Optional[slice] = None) -> float:
    """nRMSE of weight series (time x component); the mean is taken per component over `rows`."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    if rows is not None:
        pred, truth = pred[rows], truth[rows]
    return _normalized_rmse(pred, truth)


def image_nrmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    return _normalized_rmse(pred, truth)


# ---------------------------------------------------------------------------
# Registration errors
# ---------------------------------------------------------------------------

def instant_registration_error(field: np.ndarray, seq: ImageSequence, k: int) -> np.ndarray:
    """Per-pixel |I(x + u(x), t_k) - I(x, t_1)| for frame k >= 2."""
    if k < 2:
        raise MetricError(f"registration error needs a frame index >= 2, got {k}")
    field = check_field(field, seq.shape, error=MetricError)
    return np.abs(sample_displaced(seq.frame(k), field) - seq.frame(1))


def instant_nrmse(field: np.ndarray, seq: ImageSequence, k: int) -> float:
    reference = seq.frame(1)
    spread = np.sqrt(np.mean((reference - reference.mean()) ** 2))
    if spread == 0:
        raise MetricError("normalized registration error undefined: frame 1 is constant")
    delta = instant_registration_error(field, seq, k)
    return float(np.sqrt(np.mean(delta ** 2)) / spread)


def mean_pred_registration_error(run_fields: Sequence[np.ndarray], seq: ImageSequence,
                                 frames: Sequence[int]) -> float:
    """E_pred: mean normalized registration error over runs and frames.

    run_fields[i][j] is the predicted field of run i at frame frames[j].
    """
    if len(run_fields) < 1:
        raise MetricError("E_pred needs at least one run")
    errors = [
        instant_nrmse(fields[j], seq, k)
        for fields in run_fields
        for j, k in enumerate(frames)
    ]
    if not errors:
        raise MetricError("E_pred needs at least one frame")
    return float(np.mean(errors))


def ground_truth_registration_error(fields: np.ndarray, seq: ImageSequence, m_train: int) -> float:
    """E_gt: RMS of the registration error over all pixels of frames 2..m_train.

    fields[k - 1] is the field of frame k.
    """
    if not 2 <= m_train <= min(len(fields), seq.n_frames):
        raise MetricError(f"m_train {m_train} outside 2..{min(len(fields), seq.n_frames)}")
    squared = [np.mean(instant_registration_error(fields[k - 1], seq, k) ** 2) for k in range(2, m_train + 1)]
    return float(np.sqrt(np.mean(squared)))


# ---------------------------------------------------------------------------
# Image similarity
# ---------------------------------------------------------------------------

def cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"images differ in size: {a.size} vs {b.size}")
    if np.std(a) == 0 or np.std(b) == 0:
        raise MetricError("cross-correlation undefined for a constant image")
    return float(np.corrcoef(a, b)[0, 1])


def gauss_2d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM with a Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"images differ in shape: {a.shape} vs {b.shape}")

    window = gauss_2d()
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2

    def _filter(img):
        return ndimage.convolve(img, window, mode="reflect")

    mu_a = _filter(a)
    mu_b = _filter(b)
    var_a = _filter(a * a) - mu_a ** 2
    var_b = _filter(b * b) - mu_b ** 2
    cov = _filter(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


# ---------------------------------------------------------------------------
# Geometry and statistics
# ---------------------------------------------------------------------------

def dvf_endpoint_errors(pred: np.ndarray, truth: np.ndarray,
                        spacing_mm: Tuple[float, float] = (1.0, 1.0)) -> Tuple[float, float]:
    """Mean and max Euclidean endpoint error in mm; spacing is (x, y)."""
    pred = check_field(pred, error=MetricError)
    truth = check_field(truth, pred.shape[:2], error=MetricError)
    diff = (pred - truth) * np.asarray(spacing_mm, dtype=np.float64)
    norms = np.sqrt(np.sum(diff ** 2, axis=-1))
    return float(norms.mean()), float(norms.max())


def confidence_half_range(samples: Iterable[float]) -> float:
    values = np.asarray(list(samples), dtype=np.float64)
    if values.size < 2:
        raise MetricError(f"confidence half-range needs at least 2 samples, got {values.size}")
    return float(Z_95 * values.std(ddof=1) / np.sqrt(values.size))


def summarize(runs: pd.DataFrame, keys: List[str], columns: List[str]) -> pd.DataFrame:
    """Per-group mean and 95% half-range of each metric column.

    Half-ranges are NaN for groups with a single run.
    """
    def _half_range(values: pd.Series) -> float:
        values = values.dropna()
        return confidence_half_range(values) if len(values) >= 2 else np.nan

    grouped = runs.groupby(keys, sort=False)
    means = grouped[columns].mean()
    halves = grouped[columns].agg(_half_range)
    halves.columns = [f"{c}_ci95" for c in columns]
    summary = pd.concat([means, halves], axis=1)
    summary.insert(0, "n_runs", grouped.size())
    return summary.reset_index()


def parameter_influence(table: pd.DataFrame, params: List[str], score: str) -> pd.DataFrame:
    """Best score reachable at each value of each parameter.

    For a parameter value the score is minimized over every combination of the
    other parameters. `spread` is the std of those minima per parameter, scaled
    so that the spreads of the table sum to 1.
    """
    rows = []
    for param in params:
        best = table.groupby(param, sort=True)[score].min()
        for value, best_score in best.items():
            rows.append({"parameter": param, "value": value, "best_score": float(best_score)})
    influence = pd.DataFrame(rows, columns=["parameter", "value", "best_score"])
    if influence.empty:
        influence["spread"] = []
        return influence
    std = influence.groupby("parameter", sort=False)["best_score"].std(ddof=0).fillna(0.0)
    total = std.sum()
    spread = std / total if total > 0 else std
    influence["spread"] = influence["parameter"].map(spread)
    return influence
