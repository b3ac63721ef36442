import datetime
import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.model_selection import ParameterGrid

from experiment_config import ExperimentConfig
from forecasters import BASELINE_METHOD, ForecastDivergence, forecast_series, predict_baseline_previous
from image_io import (ImageSequence, generate_synthetic_sequence, load_sequence, save_dvf_series,
                      save_synthetic, write_pgm)
from metrics import (cross_correlation, dvf_endpoint_errors, image_nrmse, mean_pred_registration_error,
                     parameter_influence, ssim, summarize, weight_nrmse)
from optical_flow import DvfSeries, evaluate_flow_grid, expand_flow_grid, register_sequence
from pca_model import (MotionModel, build_data_matrix, fit_motion_model, project_series,
                       reconstruct_series, save_motion_model, save_weights)
from warping import WarpParams, warp_image

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["weight_nrmse", "image_nrmse", "cross_correlation", "ssim",
                  "mean_dvf_error_mm", "max_dvf_error_mm"]
REPORT_KEYS = ["sequence", "method", "h", "horizon_s"]
FLOAT_FORMAT = "%.10g"


class ExperimentError(Exception):
    pass


# ---------------------------------------------------------------------------
# Split + seeding
# ---------------------------------------------------------------------------

def split_indices(n_frames: int, m_train: int, m_cv: int) -> Tuple[range, range, range]:
    """1-based frame ranges (train, cv, test)."""
    if m_train < 2:
        raise ExperimentError(f"training range needs at least 2 frames, got m_train={m_train}")
    if m_cv <= m_train:
        raise ExperimentError(f"empty cross-validation range: m_train={m_train}, m_cv={m_cv}")
    if m_cv >= n_frames:
        raise ExperimentError(f"empty test range: m_cv={m_cv} with only {n_frames} frames")
    return range(1, m_train + 1), range(m_train + 1, m_cv + 1), range(m_cv + 1, n_frames + 1)


def run_seed(global_seed: int, method: str, h: int, n_cp: int, grid_index: int, run_index: int) -> int:
    key = [global_seed, zlib.crc32(method.encode("utf-8")), h, n_cp, grid_index, run_index]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Per-sequence data: LK fields, PCA models, ground-truth weights
# ---------------------------------------------------------------------------

class SequenceContext:
    """Registered sequence with PCA models fitted lazily per (m_train, n_cp)."""

    def __init__(self, seq: ImageSequence, dvfs: DvfSeries):
        self.seq = seq
        self.dvfs = dvfs
        self._models: Dict[Tuple[int, int], MotionModel] = {}
        self._weights: Dict[Tuple[int, int], np.ndarray] = {}

    def model(self, m_train: int, n_cp: int) -> MotionModel:
        key = (m_train, n_cp)
        if key not in self._models:
            self._models[key] = fit_motion_model(build_data_matrix(self.dvfs.fields, m_train), n_cp)
        return self._models[key]

    def weights(self, m_train: int, n_cp: int) -> np.ndarray:
        """Projections of every LK field onto the model: the forecasting ground truth."""
        key = (m_train, n_cp)
        if key not in self._weights:
            self._weights[key] = project_series(self.model(m_train, n_cp), self.dvfs.fields)
        return self._weights[key]


def _predict(method: str, weights: np.ndarray, params: Dict[str, Any], h: int, m_train: int,
             seed: int, last_frame: int, reset_after: Optional[int] = None) -> Optional[np.ndarray]:
    """Predicted weight series, or None when the run diverged."""
    if method == BASELINE_METHOD:
        return predict_baseline_previous(weights[:last_frame], h)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            result = forecast_series(
                method, weights, L=int(params["L"]), h=h, m_train=m_train,
                eta=float(params.get("eta", 0.0)), q=int(params.get("q", 1)), seed=seed,
                last_frame=last_frame, reset_after=reset_after,
            )
        return result.predictions
    except ForecastDivergence as exc:
        logger.warning("⚠ %s run diverged (h=%d, %s, seed=%d): %s", method, h, params, seed, exc)
        return None


# ---------------------------------------------------------------------------
# Hyper-parameter grid search
# ---------------------------------------------------------------------------

@dataclass
class GridCellResult:
    method: str
    h: int
    n_cp: int
    params: Dict[str, Any]
    grid_index: int
    cv_nrmse: float
    table: pd.DataFrame


def _cv_run(method: str, weights: np.ndarray, params: Dict[str, Any], h: int, seed: int,
            m_train: int, m_cv: int) -> float:
    pred = _predict(method, weights, params, h, m_train, seed, last_frame=m_cv)
    if pred is None:
        return np.nan
    return weight_nrmse(pred[m_train:m_cv], weights[m_train:m_cv])


def run_grid_search(weights: np.ndarray, method: str, h: int, n_cp: int, grid: Dict[str, List[Any]],
                    runs: int, seed: int, m_train: int, m_cv: int, n_jobs: int = 1) -> GridCellResult:
    """Run-averaged cv weight nRMSE of every combination; the first minimum wins."""
    combos = list(ParameterGrid(grid)) if grid else [{}]
    jobs = [(g, i) for g in range(len(combos)) for i in range(runs)]
    scores = Parallel(n_jobs=n_jobs)(
        delayed(_cv_run)(method, weights, combos[g], h, run_seed(seed, method, h, n_cp, g, i), m_train, m_cv)
        for g, i in jobs
    )
    scores = np.asarray(scores, dtype=np.float64).reshape(len(combos), runs)

    table = pd.DataFrame(combos) if combos != [{}] else pd.DataFrame(index=[0])
    valid = np.isfinite(scores)
    table["n_failed"] = (~valid).sum(axis=1)
    table["cv_nrmse"] = [row[ok].mean() if ok.any() else np.nan for row, ok in zip(scores, valid)]
    for g in np.flatnonzero(~valid.any(axis=1)):
        logger.warning("⚠ %s h=%d n_cp=%d: every run of %s diverged, combo skipped", method, h, n_cp, combos[g])

    if table["cv_nrmse"].isna().all():
        raise ExperimentError(f"{method} h={h} n_cp={n_cp}: all hyper-parameter combinations diverged")
    best = int(table["cv_nrmse"].idxmin())
    return GridCellResult(method=method, h=h, n_cp=n_cp, params=combos[best], grid_index=best,
                          cv_nrmse=float(table["cv_nrmse"][best]), table=table)


# ---------------------------------------------------------------------------
# Number of components
# ---------------------------------------------------------------------------

def choose_n_cp(errors: Dict[int, float]) -> int:
    """argmin of E_pred; ties go to the smaller n_cp, NaN entries are ignored."""
    finite = {n: e for n, e in errors.items() if np.isfinite(e)}
    if not finite:
        raise ExperimentError("no n_cp candidate produced a finite E_pred")
    best = None
    for n_cp in sorted(finite):
        if best is None or finite[n_cp] < finite[best]:
            best = n_cp
    return best


@dataclass
class NcpSelection:
    method: str
    h: int
    n_cp: int
    errors: Dict[int, float]


def select_n_cp(ctx: SequenceContext, method: str, h: int, cells: Dict[int, GridCellResult],
                n_warp: int, seed: int, m_train: int, m_cv: int, pca_m_train: Optional[int] = None) -> NcpSelection:
    """Pick the n_cp whose predicted fields best register the cv frames (lowest E_pred)."""
    pca_m_train = m_train if pca_m_train is None else pca_m_train
    cv_frames = list(range(m_train + 1, m_cv + 1))
    errors: Dict[int, float] = {}
    for n_cp, cell in sorted(cells.items()):
        model = ctx.model(pca_m_train, n_cp)
        weights = ctx.weights(pca_m_train, n_cp)
        run_fields = []
        for i in range(n_warp):
            seed_i = run_seed(seed, method, h, n_cp, cell.grid_index, i)
            pred = _predict(method, weights, cell.params, h, m_train, seed_i, last_frame=m_cv)
            if pred is not None:
                run_fields.append(reconstruct_series(model, pred[np.asarray(cv_frames) - 1]))
        errors[n_cp] = (mean_pred_registration_error(run_fields, ctx.seq, cv_frames)
                        if run_fields else np.nan)
    chosen = choose_n_cp(errors)
    logger.info("%s h=%d: n_cp=%d (E_pred %s)", method, h, chosen,
                ", ".join(f"{n}: {e:.4f}" for n, e in errors.items()))
    return NcpSelection(method=method, h=h, n_cp=chosen, errors=errors)


# ---------------------------------------------------------------------------
# Test evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    runs: pd.DataFrame
    aggregate: pd.DataFrame

    @classmethod
    def from_rows(cls, rows: List[Dict[str, Any]]) -> "MetricsReport":
        runs = pd.DataFrame(rows, columns=REPORT_KEYS + ["n_cp", "run"] + METRIC_COLUMNS)
        return cls(runs=runs, aggregate=summarize(runs, REPORT_KEYS, METRIC_COLUMNS))


@dataclass
class MethodChoice:
    """Everything needed to replay a method at one horizon."""
    method: str
    h: int
    n_cp: int
    params: Dict[str, Any]
    grid_index: int
    m_train: int        # forecaster training range
    pca_m_train: int    # frames the PCA was fitted on


def _image_scores(predicted: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    return {
        "image_nrmse": image_nrmse(predicted, truth),
        "cross_correlation": cross_correlation(predicted, truth),
        "ssim": ssim(predicted, truth),
    }


def _mean_scores(per_frame: List[Dict[str, float]]) -> Dict[str, float]:
    return {key: float(np.mean([s[key] for s in per_frame])) for key in per_frame[0]}


def evaluate_test(ctx: SequenceContext, choices: List[MethodChoice], config: ExperimentConfig,
                  out_dir: Optional[str] = None) -> MetricsReport:
    """Test-range metrics per run for each chosen method, plus the image baselines."""
    seq = ctx.seq
    _, _, test = split_indices(seq.n_frames, config.m_train, config.m_cv)
    reference = seq.frame(1)
    reset_after = None if config.persist_state else config.m_cv
    rows: List[Dict[str, Any]] = []

    for choice in choices:
        model = ctx.model(choice.pca_m_train, choice.n_cp)
        truth_weights = ctx.weights(choice.pca_m_train, choice.n_cp)
        n_runs = 1 if choice.method == BASELINE_METHOD else config.runs_for(choice.method).n_warp
        failed = 0
        for i in range(n_runs):
            seed_i = run_seed(config.seed, choice.method, choice.h, choice.n_cp, choice.grid_index, i)
            pred = _predict(choice.method, truth_weights, choice.params, choice.h, choice.m_train,
                            seed_i, last_frame=seq.n_frames, reset_after=reset_after)
            if pred is None:
                failed += 1
                continue
            fields = reconstruct_series(model, pred[test.start - 1:])
            per_frame = []
            for field, k in zip(fields, test):
                predicted = warp_image(reference, field, config.warp)
                scores = _image_scores(predicted, seq.frame(k))
                scores["mean_dvf_error_mm"], scores["max_dvf_error_mm"] = dvf_endpoint_errors(
                    field, ctx.dvfs.field(k), seq.pixel_spacing_mm)
                per_frame.append(scores)
                if out_dir and i == 0 and k in config.save_frames:
                    write_pgm(os.path.join(out_dir, "frames", f"{choice.method}_h{choice.h}_frame{k:04d}.pgm"),
                              predicted)
            if out_dir:
                save_weights(os.path.join(out_dir, "weights", f"{choice.method}_h{choice.h}_run{i:02d}.csv"),
                             pred[test.start - 1:], first_frame=test.start)
            rows.append({
                "sequence": seq.name, "method": choice.method, "h": choice.h,
                "horizon_s": choice.h / seq.sampling_hz, "n_cp": choice.n_cp, "run": i,
                "weight_nrmse": weight_nrmse(pred[test.start - 1:], truth_weights[test.start - 1:]),
                **_mean_scores(per_frame),
            })
        if failed:
            logger.warning("⚠ %s h=%d: %d of %d test runs diverged and were excluded",
                           choice.method, choice.h, failed, n_runs)

    rows.extend(_image_baseline_rows(ctx, sorted({c.h for c in choices}), test, config.warp))
    return MetricsReport.from_rows(rows)


def _image_baseline_rows(ctx: SequenceContext, horizons: List[int], test: range,
                         warp: WarpParams) -> List[Dict[str, Any]]:
    seq = ctx.seq
    reference = seq.frame(1)
    # warping with the registered field bounds what any forecaster can reach
    original = _mean_scores([
        _image_scores(warp_image(reference, ctx.dvfs.field(k), warp), seq.frame(k)) for k in test
    ])
    rows = []
    for h in horizons:
        previous = _mean_scores([_image_scores(seq.frame(k - h), seq.frame(k)) for k in test])
        for method, scores in (("previous_image", previous), ("original_dvf", original)):
            rows.append({
                "sequence": seq.name, "method": method, "h": h, "horizon_s": h / seq.sampling_hz,
                "n_cp": np.nan, "run": 0, "weight_nrmse": np.nan,
                "mean_dvf_error_mm": np.nan, "max_dvf_error_mm": np.nan, **scores,
            })
    return rows


def evaluate_weight_forecasts(ctx: SequenceContext, choices: List[MethodChoice],
                              config: ExperimentConfig) -> MetricsReport:
    """Test weight nRMSE with a fixed component count over n_test_pca runs."""
    seq = ctx.seq
    _, _, test = split_indices(seq.n_frames, config.m_train, config.m_cv)
    rows = []
    for choice in choices:
        weights = ctx.weights(choice.pca_m_train, choice.n_cp)
        n_runs = 1 if choice.method == BASELINE_METHOD else config.runs_for(choice.method).n_test_pca
        for i in range(n_runs):
            seed_i = run_seed(config.seed, choice.method, choice.h, choice.n_cp, choice.grid_index, i)
            pred = _predict(choice.method, weights, choice.params, choice.h, choice.m_train, seed_i,
                            last_frame=seq.n_frames,
                            reset_after=None if config.persist_state else config.m_cv)
            if pred is None:
                continue
            rows.append({
                "sequence": seq.name, "method": choice.method, "h": choice.h,
                "horizon_s": choice.h / seq.sampling_hz, "n_cp": choice.n_cp, "run": i,
                "weight_nrmse": weight_nrmse(pred[test.start - 1:], weights[test.start - 1:]),
            })
    runs = pd.DataFrame(rows, columns=REPORT_KEYS + ["n_cp", "run", "weight_nrmse"])
    return MetricsReport(runs=runs, aggregate=summarize(runs, REPORT_KEYS, ["weight_nrmse"]))


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------

@dataclass
class SequenceOutcome:
    name: str
    flow_params: Dict[str, Any]
    e_gt: float
    grid_cells: List[GridCellResult] = field(default_factory=list)
    selections: List[NcpSelection] = field(default_factory=list)
    choices: List[MethodChoice] = field(default_factory=list)
    report: Optional[MetricsReport] = None
    weight_report: Optional[MetricsReport] = None


def _to_csv(table: pd.DataFrame, path: str) -> None:
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _load_sequences(config: ExperimentConfig, out_dir: str) -> List[ImageSequence]:
    if config.sequences:
        return [load_sequence(path) for path in config.sequences]
    truth = generate_synthetic_sequence(config.synthetic)
    data_dir = os.path.join(out_dir, truth.sequence.name, "sequence")
    save_synthetic(truth, data_dir)
    return [truth.sequence]


def _register(seq: ImageSequence, config: ExperimentConfig, seq_dir: str) -> Tuple[DvfSeries, float]:
    if config.flow_params is not None:
        params, e_gt = config.flow_params, float("nan")
    else:
        grid = expand_flow_grid(config.flow_grid)
        table = evaluate_flow_grid(seq, grid, config.m_train, n_jobs=config.n_jobs)
        _to_csv(table, os.path.join(seq_dir, "flow_grid.csv"))
        param_names = [c for c in table.columns if c != "e_gt"]
        _to_csv(parameter_influence(table, param_names, "e_gt"), os.path.join(seq_dir, "flow_influence.csv"))
        best = int(table["e_gt"].idxmin())
        params, e_gt = grid[best], float(table["e_gt"][best])
        logger.info("✔ %s flow params %s (E_gt = %.4f)", seq.name, params.model_dump(), e_gt)
    dvfs = register_sequence(seq, params, n_jobs=config.n_jobs)
    save_dvf_series(dvfs.fields, os.path.join(seq_dir, "dvf"))
    return dvfs, e_gt


def _grid_cell(ctx: SequenceContext, config: ExperimentConfig, cache: Dict[Tuple, GridCellResult],
               method: str, h: int, n_cp: int, pca_m_train: int) -> GridCellResult:
    key = (method, h, n_cp, pca_m_train)
    if key not in cache:
        weights = ctx.weights(pca_m_train, n_cp)
        if method == BASELINE_METHOD:
            cache[key] = GridCellResult(method, h, n_cp, {}, 0, float(weight_nrmse(
                predict_baseline_previous(weights, h)[config.m_train:config.m_cv],
                weights[config.m_train:config.m_cv])), pd.DataFrame())
        else:
            cache[key] = run_grid_search(
                weights, method, h, n_cp, config.grids[method], config.runs_for(method).n_cv,
                config.seed, config.m_train_for(method), config.m_cv, n_jobs=config.n_jobs,
            )
    return cache[key]


def run_sequence(seq: ImageSequence, config: ExperimentConfig, out_dir: str) -> SequenceOutcome:
    seq_dir = os.path.join(out_dir, seq.name)
    os.makedirs(seq_dir, exist_ok=True)
    split_indices(seq.n_frames, config.m_train, config.m_cv)
    if config.m_train_linreg >= seq.n_frames:
        raise ExperimentError(f"m_train_linreg={config.m_train_linreg} leaves no frames in {seq.name}")

    # 1. registration
    dvfs, e_gt = _register(seq, config, seq_dir)
    ctx = SequenceContext(seq, dvfs)
    outcome = SequenceOutcome(name=seq.name, flow_params=dvfs.params.model_dump(), e_gt=e_gt)
    cache: Dict[Tuple, GridCellResult] = {}

    # 2-5. PCA, weight forecasting grid search and n_cp selection
    methods = list(config.methods) + [BASELINE_METHOD]
    for pca_m_train in sorted({config.m_train_for(m) for m in methods}):
        for n_cp in config.n_cp_range:
            save_motion_model(ctx.model(pca_m_train, n_cp), os.path.join(seq_dir, "pca", f"m{pca_m_train}_ncp{n_cp}"))
    for method in methods:
        pca_m_train = config.m_train_for(method)
        for h in config.horizons:
            cells = {n: _grid_cell(ctx, config, cache, method, h, n, pca_m_train) for n in config.n_cp_range}
            n_warp = 1 if method == BASELINE_METHOD else config.runs_for(method).n_warp
            selection = select_n_cp(ctx, method, h, cells, n_warp, config.seed,
                                    config.m_train_for(method), config.m_cv, pca_m_train)
            chosen = cells[selection.n_cp]
            outcome.grid_cells.extend(cells.values())
            outcome.selections.append(selection)
            outcome.choices.append(MethodChoice(method, h, selection.n_cp, chosen.params, chosen.grid_index,
                                                config.m_train_for(method), pca_m_train))

    # 6. image prediction on the test range
    outcome.report = evaluate_test(ctx, outcome.choices, config, out_dir=seq_dir)

    # weight forecasting with a fixed number of components, PCA from m_train frames
    n_cp = config.weight_eval_n_cp
    fixed = []
    for method in list(config.methods) + [BASELINE_METHOD]:
        for h in config.horizons:
            cell = _grid_cell(ctx, config, cache, method, h, n_cp, config.m_train)
            fixed.append(MethodChoice(method, h, n_cp, cell.params, cell.grid_index,
                                      config.m_train_for(method), config.m_train))
    outcome.weight_report = evaluate_weight_forecasts(ctx, fixed, config)

    _write_sequence_tables(outcome, seq, seq_dir)
    return outcome


def _write_sequence_tables(outcome: SequenceOutcome, seq: ImageSequence, seq_dir: str) -> None:
    grid_rows, influence = [], []
    for cell in outcome.grid_cells:
        if cell.table.empty:
            continue
        table = cell.table.copy()
        table.insert(0, "n_cp", cell.n_cp)
        table.insert(0, "h", cell.h)
        table.insert(0, "method", cell.method)
        grid_rows.append(table)
        params = [c for c in cell.table.columns if c not in ("cv_nrmse", "n_failed")]
        if params:
            infl = parameter_influence(cell.table.dropna(subset=["cv_nrmse"]), params, "cv_nrmse")
            infl.insert(0, "n_cp", cell.n_cp)
            infl.insert(0, "h", cell.h)
            infl.insert(0, "method", cell.method)
            influence.append(infl)
    if grid_rows:
        _to_csv(pd.concat(grid_rows, ignore_index=True), os.path.join(seq_dir, "grid_search.csv"))
    if influence:
        _to_csv(pd.concat(influence, ignore_index=True), os.path.join(seq_dir, "hyperparameter_influence.csv"))

    selection_rows = [
        {"method": s.method, "h": s.h, "horizon_s": s.h / seq.sampling_hz, "n_cp": n, "e_pred": e,
         "selected": n == s.n_cp}
        for s in outcome.selections for n, e in sorted(s.errors.items())
    ]
    _to_csv(pd.DataFrame(selection_rows), os.path.join(seq_dir, "ncp_selection.csv"))


def run_experiment(config: ExperimentConfig, out_dir: str) -> Dict[str, Any]:
    """Full pipeline on every configured sequence; returns the JSON summary."""
    os.makedirs(out_dir, exist_ok=True)
    outcomes = [run_sequence(seq, config, out_dir) for seq in _load_sequences(config, out_dir)]

    metrics_runs = pd.concat([o.report.runs for o in outcomes], ignore_index=True)
    weight_runs = pd.concat([o.weight_report.runs for o in outcomes], ignore_index=True)
    _to_csv(metrics_runs, os.path.join(out_dir, "metrics_runs.csv"))
    _to_csv(summarize(metrics_runs, REPORT_KEYS, METRIC_COLUMNS), os.path.join(out_dir, "metrics_aggregate.csv"))
    _to_csv(weight_runs, os.path.join(out_dir, "weight_forecast_runs.csv"))
    _to_csv(summarize(weight_runs, REPORT_KEYS, ["weight_nrmse"]),
            os.path.join(out_dir, "weight_forecast_aggregate.csv"))

    summary = {
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "seed": config.seed,
        "sequences": [
            {
                "name": o.name,
                "flow_params": o.flow_params,
                "e_gt": None if np.isnan(o.e_gt) else o.e_gt,
                "choices": [
                    {"method": c.method, "h": c.h, "n_cp": c.n_cp,
                     "params": {k: (v.item() if hasattr(v, "item") else v) for k, v in c.params.items()}}
                    for c in o.choices
                ],
            }
            for o in outcomes
        ],
        "config": config.model_dump(),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    logger.info("✔ Experiment finished: %d sequence(s), reports in %s", len(outcomes), out_dir)
    return summary
