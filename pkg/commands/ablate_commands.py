import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import pandas as pd

from config import VERSION, RunConfig, effective_config
from errors import InvalidSpec
from features import load_feature_series
from grid import BASELINES, MODEL_VARIANTS, GridResult, run_comparison, run_grid, search_hyperparameters
from storage import read_json, write_csv, write_json
from tables import configure_ledger, record_reports

logger = logging.getLogger(__name__)


def scenario_map(manifest_paths: Sequence[str]) -> Dict[str, str]:
    """subject_id -> scenario label, read from synth manifests."""
    mapping: Dict[str, str] = {}
    for path in manifest_paths or ():
        manifest = read_json(path)
        for subject in manifest.get("subjects", []):
            mapping[subject["subject_id"]] = subject.get("scenario") or manifest.get("scenario", "all")
    return mapping


def frame_records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return frame.astype(object).where(frame.notna(), None).to_dict(orient="records")


def grid_failures(result: GridResult, models: Sequence[str]) -> List[Tuple[str, str, int, int, str]]:
    return [(subject, name, train_cycles, horizon, outcome.error)
            for (subject, train_cycles, horizon), outcome in result.outcomes.items()
            if outcome.status != "ok" for name in models]


def _write_result(out_dir: Path, stem: str, result: GridResult, resolved: Dict[str, Any]) -> None:
    write_csv(out_dir / f"{stem}.csv", result.table)
    write_csv(out_dir / f"{stem}_long.csv", result.long)
    write_json(out_dir / f"{stem}.json", {
        "table": frame_records(result.table),
        "cells": frame_records(result.long),
        "effective_config": resolved,
        "version": VERSION,
    })


# ------------------ ablate ------------------
def run_ablate(args, config: RunConfig) -> int:
    series_set = [load_feature_series(path) for path in args.features]
    ids = [s.subject_id for s in series_set]
    if len(set(ids)) != len(ids):
        raise InvalidSpec(f"feature tables must belong to distinct subjects, got {ids}")
    out_dir = Path(args.out)
    spec, grid = config.experiment, config.grid
    model_config = config.model

    if args.search:
        if not grid.search:
            raise InvalidSpec("--search needs hyperparameter axes in the [grid] search key")
        search = search_hyperparameters(series_set, spec, model_config, grid.search, grid)
        write_csv(out_dir / "search.csv", search.table)
        model_config = search.best_config
        config = config.model_copy(update={"model": model_config})
        logger.info(f"Hyperparameter search selected {search.best_config.model_dump()}")
    resolved = effective_config(config)

    result = run_grid(series_set, spec, model_config, grid)
    _write_result(out_dir, "grid", result, resolved)
    reports = result.reports()
    failures = grid_failures(result, grid.models)

    if not args.skip_comparison:
        comparison = run_comparison(series_set, spec, model_config, grid, scenario_map(args.manifest))
        _write_result(out_dir, "comparison", comparison, resolved)
        reports += comparison.reports()
        failures += grid_failures(comparison, MODEL_VARIANTS + BASELINES)

    logger.info(f"Ablation finished: {len(reports)} report(s), {len(failures)} failed model cell(s) -> {out_dir}")
    configure_ledger(args.ledger)
    record_reports("ablate", reports, resolved, failures)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="Training-length x horizon grid, baselines and model comparison")
    parser.add_argument("--features", nargs="+", required=True, help="Feature tables, one per subject")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--manifest", nargs="*", default=(), help="Synth manifests mapping subjects to scenarios")
    parser.add_argument("--search", action="store_true", help="Run the hyperparameter search first")
    parser.add_argument("--skip-comparison", action="store_true")
    parser.add_argument("--epochs", type=int, default=None)
    parser.set_defaults(handler=run_ablate, overrides=lambda args: {"model": {"epochs": args.epochs}})
