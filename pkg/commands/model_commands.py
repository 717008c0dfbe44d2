import logging
import sys
from typing import Any, Dict

import numpy as np

from checkpoint import load_checkpoint_with_meta, save_checkpoint
from config import VERSION, RunConfig, effective_config
from errors import IndexOutOfRange, InvalidSpec, ShapeMismatch
from features import load_feature_series
from storage import dumps_json, write_csv, write_json
from tables import configure_ledger, record_reports
from training import clamp_forecast, evaluate, prepare_experiment, train_personalized

logger = logging.getLogger(__name__)


def _model_overrides(args) -> Dict[str, Dict[str, Any]]:
    return {
        "model": {"epochs": getattr(args, "epochs", None), "forecast_length": getattr(args, "horizon", None)},
        "experiment": {"train_cycles": getattr(args, "train_cycles", None), "target": getattr(args, "target", None)},
    }


# ------------------ train ------------------
def run_train(args, config: RunConfig) -> int:
    series = load_feature_series(args.features)
    spec = config.experiment
    horizon = config.model.forecast_length
    prepared = prepare_experiment(series, spec, config.model, horizon)
    model, history = train_personalized(series, spec, config.model, horizon, prepared=prepared)

    meta = {"subject_id": series.subject_id, "target": spec.target, "train_cycles": spec.train_cycles,
            "split": list(spec.split), "version": VERSION}
    save_checkpoint(model, args.out, meta)
    history_path = args.history or f"{args.out}.history.json"
    write_json(history_path, {
        "subject_id": series.subject_id,
        "epochs": history.epochs,
        "best_epoch": history.best_epoch,
        "train_loss": history.train_loss,
        "val_loss": history.val_loss,
        "effective_config": effective_config(config),
        "version": VERSION,
    })
    logger.info(f"{series.subject_id}: training history -> {history_path}")
    return 0


# ------------------ forecast ------------------
def forecast_at(model, series, at: int, horizon: int, target: str = "sbp") -> Dict[str, Any]:
    """Forecast the ``horizon`` cycles starting at table row ``at`` from the ``input_length`` rows before it."""
    length = model.config.input_length
    if model.config.n_features != series.features.shape[1]:
        raise ShapeMismatch(f"checkpoint expects {model.config.n_features} features, "
                            f"table has {series.features.shape[1]}")
    if horizon < 1 or horizon > model.config.forecast_length:
        raise InvalidSpec(f"--horizon must be in [1, {model.config.forecast_length}] for this checkpoint, "
                          f"got {horizon}")
    if at < length or at > len(series):
        raise IndexOutOfRange(f"--at {at} outside [{length}, {len(series)}] for a {length}-cycle input window")

    values = series.target(target)
    window = model.prepare_window(series.features[at - length : at], values[at - length : at])
    prediction = model.predict(window)[:horizon].astype(np.float64)
    prediction, clamped = clamp_forecast(prediction, series.subject_id)
    payload = {"subject_id": series.subject_id, "at": at, "horizon": horizon, "target": target,
               "predictions": prediction.tolist(), "clamped": clamped}
    if at + horizon <= len(series):
        payload["truth"] = values[at : at + horizon].tolist()
    return payload


def run_forecast(args, config: RunConfig) -> int:
    model, meta = load_checkpoint_with_meta(args.checkpoint)
    series = load_feature_series(args.features)
    horizon = args.horizon or model.config.forecast_length
    payload = forecast_at(model, series, args.at, horizon, meta.get("target", "sbp"))
    payload.update(checkpoint_config=model.config.model_dump(mode="json"),
                   effective_config=effective_config(config), version=VERSION)
    if args.out:
        write_json(args.out, payload)
    sys.stdout.write(dumps_json(payload))
    return 0


# ------------------ evaluate ------------------
def run_evaluate(args, config: RunConfig) -> int:
    model, meta = load_checkpoint_with_meta(args.checkpoint)
    series = load_feature_series(args.features)
    spec = config.experiment.model_copy(update={
        "input_length": model.config.input_length,
        "train_cycles": int(meta.get("train_cycles", config.experiment.train_cycles)),
        "split": tuple(meta.get("split", config.experiment.split)),
        "target": meta.get("target", config.experiment.target),
    })
    prepared = prepare_experiment(series, spec, model.config, model.config.forecast_length)
    resolved = effective_config(config)
    report = evaluate(model, prepared.test, series.subject_id, train_cycles=spec.train_cycles,
                      effective_config=resolved, version=VERSION)
    write_json(args.out, report.model_dump(mode="json"))
    if args.series:
        write_csv(args.series, report.series_frame())
    logger.info(f"{series.subject_id}: MAE {report.mae_mmHg:.3f} SD {report.sd_mmHg:.3f} ME {report.me_mmHg:.3f} "
                f"mmHg, AAMI {'pass' if report.aami_pass else 'fail'} -> {args.out}")

    configure_ledger(args.ledger)
    record_reports("evaluate", [report], resolved)
    return 0


def register(subparsers) -> None:
    train = subparsers.add_parser("train", help="Train one personalised model on a feature table")
    train.add_argument("--features", required=True)
    train.add_argument("--out", required=True, help="Checkpoint path")
    train.add_argument("--history", default=None, help="History JSON (default: <checkpoint>.history.json)")
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--horizon", type=int, default=None)
    train.add_argument("--train-cycles", type=int, default=None)
    train.add_argument("--target", choices=("sbp", "dbp"), default=None)
    train.set_defaults(handler=run_train, overrides=_model_overrides)

    forecast = subparsers.add_parser("forecast", help="Forecast BP from a given cycle onwards")
    forecast.add_argument("--checkpoint", required=True)
    forecast.add_argument("--features", required=True)
    forecast.add_argument("--at", type=int, required=True, help="First forecast cycle (table row index)")
    forecast.add_argument("--horizon", type=int, default=None)
    forecast.add_argument("--out", default=None, help="Also write the JSON to this path")
    forecast.set_defaults(handler=run_forecast, overrides=lambda args: {})

    evaluate_parser = subparsers.add_parser("evaluate", help="Score a checkpoint on the test split")
    evaluate_parser.add_argument("--checkpoint", required=True)
    evaluate_parser.add_argument("--features", required=True)
    evaluate_parser.add_argument("--out", required=True, help="Report JSON")
    evaluate_parser.add_argument("--series", default=None, help="Per-window series CSV")
    evaluate_parser.set_defaults(handler=run_evaluate, overrides=lambda args: {})
