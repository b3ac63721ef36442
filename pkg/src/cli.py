import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
if BASE_DIR not in sys.path:
    sys.path.append(BASE_DIR)

from experiment_config import (DEFAULT_LOG_LEVEL, DEFAULT_OUT_DIR, ConfigError, ExperimentConfig,
                               ForecastSpec, load_config)
from forecasters import ForecastError, forecast_series, predict_baseline_previous, BASELINE_METHOD
from image_io import (SequenceError, generate_synthetic_sequence, load_dvf_series, load_sequence,
                      read_dvf, read_pgm, save_dvf_series, save_synthetic, write_pgm)
from metrics import (MetricError, cross_correlation, dvf_endpoint_errors, image_nrmse, parameter_influence,
                     ssim, weight_nrmse)
from optical_flow import FlowError, FlowParams, evaluate_flow_grid, expand_flow_grid, register_sequence
from pca_model import (MotionModelError, build_data_matrix, fit_motion_model, load_motion_model, load_weights,
                       project_series, reconstruct_series, save_motion_model, save_weights)
from pipeline import ExperimentError, run_experiment
from warping import WarpError, WarpParams, warp_image

logger = logging.getLogger(__name__)

KNOWN_ERRORS = (ConfigError, SequenceError, FlowError, MotionModelError, ForecastError,
                WarpError, MetricError, ExperimentError)


# ----------------------------------------
# Subcommands
# ----------------------------------------

def cmd_synth(args, config: ExperimentConfig) -> Dict[str, Any]:
    spec = config.synthetic if args.seed is None else config.synthetic.model_copy(update={"seed": args.seed})
    truth = generate_synthetic_sequence(spec)
    manifest = save_synthetic(truth, args.out_dir)
    save_weights(os.path.join(args.out_dir, "weight_signals.csv"), truth.weight_signals)
    return {"manifest": manifest, "frames": truth.sequence.n_frames}


def cmd_flow(args, config: ExperimentConfig) -> Dict[str, Any]:
    seq = load_sequence(args.manifest)
    params = config.flow_params or FlowParams()
    dvfs = register_sequence(seq, params, n_jobs=config.n_jobs)
    paths = save_dvf_series(dvfs.fields, os.path.join(args.out_dir, "dvf"))
    return {"dvf_dir": os.path.dirname(paths[0]), "fields": len(paths), "params": params.model_dump()}


def cmd_flow_grid(args, config: ExperimentConfig) -> Dict[str, Any]:
    seq = load_sequence(args.manifest)
    grid = expand_flow_grid(config.flow_grid)
    table = evaluate_flow_grid(seq, grid, config.m_train, n_jobs=config.n_jobs)
    os.makedirs(args.out_dir, exist_ok=True)
    table.to_csv(os.path.join(args.out_dir, "flow_grid.csv"), index=False, float_format="%.10g")
    params = [c for c in table.columns if c != "e_gt"]
    parameter_influence(table, params, "e_gt").to_csv(
        os.path.join(args.out_dir, "flow_influence.csv"), index=False, float_format="%.10g")

    best = int(table["e_gt"].idxmin())
    result = {"params": grid[best].model_dump(), "e_gt": float(table["e_gt"][best])}
    with open(os.path.join(args.out_dir, "flow_params.json"), "w") as f:
        json.dump(result, f, indent=2)
    return result


def cmd_fit_pca(args, config: ExperimentConfig) -> Dict[str, Any]:
    fields = load_dvf_series(args.dvf_dir)
    m_train = args.m_train or config.m_train
    model = fit_motion_model(build_data_matrix(fields, m_train), args.n_cp)
    save_motion_model(model, args.out_dir)
    save_weights(os.path.join(args.out_dir, "weights.csv"), project_series(model, fields))
    return {"model_dir": args.out_dir, "n_cp": model.n_cp,
            "explained_variance_ratio": model.explained_variance_ratio.tolist()}


def cmd_forecast(args, config: ExperimentConfig) -> Dict[str, Any]:
    flags = {"method": args.method, "h": args.h, "L": args.L, "eta": args.eta, "q": args.q}
    try:
        spec = ForecastSpec.model_validate(
            {**config.forecast.model_dump(), **{k: v for k, v in flags.items() if v is not None}})
    except ValidationError as exc:
        raise ConfigError(f"invalid forecast options: {exc}") from exc
    weights = load_weights(args.weights)
    if spec.method == BASELINE_METHOD:
        predictions = predict_baseline_previous(weights, spec.h)
    else:
        predictions = forecast_series(
            spec.method, weights, L=spec.L, h=spec.h, m_train=config.m_train_for(spec.method),
            eta=spec.eta, q=spec.q, seed=config.seed,
            reset_after=None if config.persist_state else config.m_cv,
        ).predictions
    out_path = os.path.join(args.out_dir, f"forecast_{spec.method}_h{spec.h}.csv")
    save_weights(out_path, predictions)

    test = slice(config.m_cv, len(weights))
    result = {"predictions": out_path, **spec.model_dump()}
    if config.m_cv < len(weights):
        result["test_weight_nrmse"] = weight_nrmse(predictions[test], weights[test])
    return result


def cmd_warp(args, config: ExperimentConfig) -> Dict[str, Any]:
    try:
        params = WarpParams(
            sigma_warp=args.sigma_warp if args.sigma_warp is not None else config.warp.sigma_warp,
            cutoff_radius=args.cutoff_radius if args.cutoff_radius is not None else config.warp.cutoff_radius,
            fallback=args.fallback or config.warp.fallback,
        )
    except ValidationError as exc:
        raise WarpError(f"invalid warp parameters: {exc}") from exc
    warped = warp_image(read_pgm(args.reference), read_dvf(args.dvf), params)
    write_pgm(args.output, warped)
    return {"output": args.output, **params.model_dump()}


def cmd_evaluate(args, config: ExperimentConfig) -> Dict[str, Any]:
    seq = load_sequence(args.manifest)
    fields = load_dvf_series(args.dvf_dir)
    model = load_motion_model(args.model_dir)
    table = pd.read_csv(args.weights, index_col="frame")
    predicted = table.to_numpy(dtype=np.float64)
    frames = table.index.to_numpy()
    usable = np.all(np.isfinite(predicted), axis=1) & (frames >= 2)
    if not usable.any():
        raise MetricError(f"{args.weights} holds no finite predictions for frames >= 2")

    truth_weights = project_series(model, fields)[frames[usable] - 1]
    pred_fields = reconstruct_series(model, predicted[usable])
    rows: List[Dict[str, Any]] = []
    for k, field in zip(frames[usable], pred_fields):
        image = warp_image(seq.frame(1), field, config.warp)
        mean_mm, max_mm = dvf_endpoint_errors(field, fields[k - 1], seq.pixel_spacing_mm)
        rows.append({
            "frame": int(k),
            "image_nrmse": image_nrmse(image, seq.frame(k)),
            "cross_correlation": cross_correlation(image, seq.frame(k)),
            "ssim": ssim(image, seq.frame(k)),
            "mean_dvf_error_mm": mean_mm,
            "max_dvf_error_mm": max_mm,
        })
    report = pd.DataFrame(rows)
    os.makedirs(args.out_dir, exist_ok=True)
    report.to_csv(os.path.join(args.out_dir, "evaluation.csv"), index=False, float_format="%.10g")

    summary = {col: float(report[col].mean()) for col in report.columns if col != "frame"}
    if usable.sum() >= 2:
        summary["weight_nrmse"] = weight_nrmse(predicted[usable], truth_weights)
    return summary


def cmd_experiment(args, config: ExperimentConfig) -> Dict[str, Any]:
    summary = run_experiment(config, args.out_dir)
    return {"out_dir": args.out_dir, "sequences": [s["name"] for s in summary["sequences"]]}


# ----------------------------------------
# Parser
# ----------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file layered over the profile")
    common.add_argument("--profile", choices=["desk", "paper"], default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=DEFAULT_OUT_DIR)
    common.add_argument("--log-level", default=DEFAULT_LOG_LEVEL)

    parser = argparse.ArgumentParser(prog="breathcast", description="Chest cine-MR future frame prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic sequence").set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", parents=[common], help="register every frame onto frame 1")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("flow-grid", parents=[common], help="grid search over Lucas-Kanade parameters")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_flow_grid)

    p = sub.add_parser("fit-pca", parents=[common], help="fit the PCA motion model")
    p.add_argument("--dvf-dir", required=True)
    p.add_argument("--n-cp", type=int, required=True)
    p.add_argument("--m-train", type=int)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("forecast", parents=[common], help="forecast a PCA weight series")
    p.add_argument("--weights", required=True)
    p.add_argument("--method")
    p.add_argument("--h", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--q", type=int)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("warp", parents=[common], help="warp a reference frame with a DVF")
    p.add_argument("--reference", required=True)
    p.add_argument("--dvf", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma-warp", type=float)
    p.add_argument("--cutoff-radius", type=float)
    p.add_argument("--fallback", choices=["nearest-source", "reference-intensity"])
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("evaluate", parents=[common], help="score predicted weights as images and fields")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dvf-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_evaluate)

    sub.add_parser("experiment", parents=[common], help="run the full pipeline").set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config, args.profile, overrides={"seed": args.seed})
        logger.debug("Running %s with profile %s, seed %d", args.command, args.profile, config.seed)
        result = args.func(args, config)
    except KNOWN_ERRORS as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1

    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
