"""Experiment grids: training length x horizon tables, the fixed-protocol
comparison of model variants, and hyperparameter search.

Cells run as one-shot jobs on an APScheduler background scheduler backed by
a thread pool. Each cell derives its own seed from (base seed, subject, cell
key), so results do not depend on the worker count or completion order.
"""
import hashlib
import itertools
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pytz
from apscheduler.events import EVENT_JOB_ERROR, EVENT_JOB_EXECUTED, EVENT_JOB_MISSED
from apscheduler.executors.pool import ThreadPoolExecutor
from apscheduler.jobstores.memory import MemoryJobStore
from apscheduler.schedulers.background import BackgroundScheduler
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from baselines import baseline_linear, baseline_persistence
from errors import InvalidSpec, TabForecastError
from features import CycleFeatureSeries
from tabnet import TabNetConfig, TabNetModel
from training import ExperimentSpec, ForecastReport, PersonalizedTrainer, evaluate, prepare_experiment

logger = logging.getLogger(__name__)

MODEL_VARIANTS = ("tabnet", "tabnet_no_attention")
BASELINES = ("persistence", "linear")


class GridSpec(BaseModel):
    """The [grid] config section."""

    model_config = ConfigDict(extra="forbid")

    train_cycles: Tuple[int, ...] = (60, 180, 300, 420)
    horizons: Tuple[int, ...] = (5, 10, 20)
    models: Tuple[str, ...] = ("tabnet", "persistence", "linear")
    jobs: int = Field(1, ge=1)
    comparison_train_cycles: int = 420
    comparison_horizon: int = 20
    search: Dict[str, List[Any]] = {}


def derive_seed(base_seed: int, subject_id: str, cell_key: str) -> int:
    digest = hashlib.sha256(f"{base_seed}|{subject_id}|{cell_key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


# ------------------ Runner ------------------
class GridRunner:
    """Runs a batch of independent callables as immediate scheduler jobs."""

    def __init__(self, jobs: int = 1):
        self.jobs = max(1, int(jobs))

    def _build_scheduler(self) -> BackgroundScheduler:
        return BackgroundScheduler(
            jobstores={"default": MemoryJobStore()},
            executors={"default": ThreadPoolExecutor(max_workers=self.jobs)},
            job_defaults={"coalesce": False, "max_instances": 1, "misfire_grace_time": None},
            timezone=pytz.utc,
        )

    def run(self, tasks: Mapping[Hashable, Callable[[], Any]]) -> Dict[Hashable, Any]:
        if not tasks:
            return {}
        ids = {f"cell-{i}": key for i, key in enumerate(tasks)}
        results: Dict[Hashable, Any] = {}
        lock = threading.Lock()
        done = threading.Event()

        def on_event(event):
            key = ids.get(event.job_id)
            if key is None:
                return
            with lock:
                if event.code == EVENT_JOB_EXECUTED:
                    results[key] = event.retval
                else:
                    reason = event.exception if event.code == EVENT_JOB_ERROR else "job missed its run time"
                    logger.error(f"Grid cell {key} did not complete: {reason}")
                    results[key] = CellOutcome.failure(str(reason))
                if len(results) == len(ids):
                    done.set()

        scheduler = self._build_scheduler()
        scheduler.add_listener(on_event, EVENT_JOB_EXECUTED | EVENT_JOB_ERROR | EVENT_JOB_MISSED)
        scheduler.start()
        try:
            for job_id, key in ids.items():
                scheduler.add_job(tasks[key], id=job_id, name=str(key))
            done.wait()
        finally:
            scheduler.shutdown(wait=True)
        return {key: results[key] for key in tasks}


# ------------------ Cells ------------------
@dataclass
class CellOutcome:
    status: str = "ok"
    reports: Dict[str, ForecastReport] = field(default_factory=dict)
    val_loss: Dict[str, float] = field(default_factory=dict)
    error: str = ""

    @classmethod
    def failure(cls, message: str) -> "CellOutcome":
        return cls(status="failed", error=message)


def _variant_config(config: TabNetConfig, variant: str, seed: int) -> TabNetConfig:
    data = config.model_dump()
    data.update(seed=seed, use_attention=(variant != "tabnet_no_attention"))
    return TabNetConfig.model_validate(data)


def run_experiment_cell(series: CycleFeatureSeries, spec: ExperimentSpec, config: TabNetConfig,
                        train_cycles: int, horizon: int, models: Sequence[str],
                        epochs: Optional[int] = None) -> CellOutcome:
    """Train/evaluate every requested model on one subject at one grid point."""
    cell_key = f"{train_cycles}/{horizon}"
    try:
        cell_spec = spec.model_copy(update={"train_cycles": train_cycles})
        prepared = prepare_experiment(series, cell_spec, config, horizon)
        outcome = CellOutcome()
        extra = {"train_cycles": train_cycles}
        for name in models:
            if name in MODEL_VARIANTS:
                seed = derive_seed(spec.seed, series.subject_id, f"{cell_key}/{name}")
                cfg = _variant_config(prepared.config, name, seed)
                model = TabNetModel(cfg, scaler=prepared.scaler)
                trainer = PersonalizedTrainer(cfg, series.subject_id, epochs)
                history = trainer.fit(model, prepared.train.model_inputs(model), prepared.train.targets,
                                      prepared.val.model_inputs(model), prepared.val.targets)
                outcome.val_loss[name] = min(history.val_loss)
                outcome.reports[name] = evaluate(model, prepared.test, series.subject_id, model=name, **extra)
            elif name == "persistence":
                outcome.reports[name] = baseline_persistence(prepared.test, series.subject_id, **extra)
            elif name == "linear":
                outcome.reports[name] = baseline_linear(prepared.test, series.subject_id, **extra)
            else:
                raise InvalidSpec(f"unknown model '{name}'")
        logger.info(f"{series.subject_id}: cell {cell_key} finished ({', '.join(outcome.reports)})")
        return outcome
    except TabForecastError as e:
        logger.error(f"{series.subject_id}: cell {cell_key} failed: {e}")
        return CellOutcome.failure(f"{type(e).__name__}: {e}")
    except Exception as e:
        logger.error(f"{series.subject_id}: cell {cell_key} failed unexpectedly: {str(e)}")
        return CellOutcome.failure(f"{type(e).__name__}: {e}")


# ------------------ Tables ------------------
@dataclass
class GridResult:
    long: pd.DataFrame
    table: pd.DataFrame
    outcomes: Dict[Tuple[str, int, int], CellOutcome]

    def reports(self) -> List[ForecastReport]:
        return [r for o in self.outcomes.values() for r in o.reports.values()]


LONG_COLUMNS = ["subject_id", "model", "train_cycles", "horizon", "mae_mmHg", "sd_mmHg", "me_mmHg",
                "aami_pass", "n_windows", "status", "error"]


def _long_rows(outcomes: Mapping[Tuple[str, int, int], CellOutcome], models: Sequence[str]) -> pd.DataFrame:
    rows = []
    for (subject, train_cycles, horizon), outcome in outcomes.items():
        for name in models:
            report = outcome.reports.get(name)
            if report is None:
                rows.append([subject, name, train_cycles, horizon, np.nan, np.nan, np.nan, False, 0,
                             "failed", outcome.error])
            else:
                rows.append([subject, name, train_cycles, horizon, report.mae_mmHg, report.sd_mmHg,
                             report.me_mmHg, report.aami_pass, report.n_windows, "ok", ""])
    return pd.DataFrame(rows, columns=LONG_COLUMNS)


def summarize_grid(long: pd.DataFrame) -> pd.DataFrame:
    """Mean MAE/SD over subjects: rows (model, train_cycles), columns mae_h{H}, sd_h{H}."""
    ok = long[long["status"] == "ok"]
    means = ok.groupby(["model", "train_cycles", "horizon"])[["mae_mmHg", "sd_mmHg"]].mean()
    index = pd.MultiIndex.from_product(
        [list(dict.fromkeys(long["model"])), sorted(int(t) for t in long["train_cycles"].unique())],
        names=["model", "train_cycles"])
    table = pd.DataFrame(index=index)
    for horizon in sorted(int(h) for h in long["horizon"].unique()):
        for metric, column in (("mae", "mae_mmHg"), ("sd", "sd_mmHg")):
            table[f"{metric}_h{horizon}"] = [means[column].get((model, tc, horizon), np.nan) for model, tc in index]
    return table.reset_index()


def run_grid(series_set: Sequence[CycleFeatureSeries], spec: ExperimentSpec, config: TabNetConfig,
             grid: Optional[GridSpec] = None, epochs: Optional[int] = None) -> GridResult:
    grid = grid or GridSpec()
    tasks = {}
    for series in series_set:
        for train_cycles in grid.train_cycles:
            for horizon in grid.horizons:
                tasks[(series.subject_id, train_cycles, horizon)] = (
                    lambda s=series, tc=train_cycles, h=horizon:
                    run_experiment_cell(s, spec, config, tc, h, grid.models, epochs))
    logger.info(f"Running {len(tasks)} grid cell(s) on {grid.jobs} worker(s)")
    outcomes = GridRunner(grid.jobs).run(tasks)
    failed = sum(1 for o in outcomes.values() if o.status != "ok")
    if failed:
        logger.warning(f"{failed} of {len(outcomes)} grid cell(s) failed")
    long = _long_rows(outcomes, grid.models)
    return GridResult(long=long, table=summarize_grid(long), outcomes=outcomes)


def run_comparison(series_set: Sequence[CycleFeatureSeries], spec: ExperimentSpec, config: TabNetConfig,
                   grid: Optional[GridSpec] = None, scenarios: Optional[Mapping[str, str]] = None,
                   epochs: Optional[int] = None) -> GridResult:
    """Fixed-protocol comparison of both network variants and the baselines, per scenario."""
    grid = grid or GridSpec()
    models = MODEL_VARIANTS + BASELINES
    scenarios = scenarios or {}
    tasks = {
        (s.subject_id, grid.comparison_train_cycles, grid.comparison_horizon): (
            lambda s=s: run_experiment_cell(s, spec, config, grid.comparison_train_cycles,
                                            grid.comparison_horizon, models, epochs))
        for s in series_set
    }
    outcomes = GridRunner(grid.jobs).run(tasks)
    long = _long_rows(outcomes, models)
    long.insert(1, "scenario", [scenarios.get(subject, "all") for subject in long["subject_id"]])

    ok = long[long["status"] == "ok"]
    means = ok.groupby(["model", "scenario"])[["mae_mmHg", "sd_mmHg"]].mean()
    table = pd.DataFrame(index=pd.Index(list(models), name="model"))
    for scenario in sorted(long["scenario"].unique()):
        for metric, column in (("mae", "mae_mmHg"), ("sd", "sd_mmHg")):
            table[f"{metric}_{scenario}"] = [means[column].get((model, scenario), np.nan) for model in models]
    return GridResult(long=long, table=table.reset_index(), outcomes=outcomes)


# ------------------ Hyperparameter search ------------------
@dataclass
class SearchResult:
    best_config: TabNetConfig
    table: pd.DataFrame


def search_hyperparameters(series_set: Sequence[CycleFeatureSeries], spec: ExperimentSpec, config: TabNetConfig,
                           axes: Mapping[str, Sequence[Any]], grid: Optional[GridSpec] = None,
                           epochs: Optional[int] = None) -> SearchResult:
    """Pick the TabNetConfig on the declared axes with the lowest mean validation loss."""
    grid = grid or GridSpec()
    unknown = [name for name in axes if name not in TabNetConfig.model_fields]
    if unknown:
        raise InvalidSpec(f"unknown hyperparameter axes: {unknown}")
    names = list(axes)
    candidates: List[TabNetConfig] = []
    for values in itertools.product(*(axes[name] for name in names)):
        data = config.model_dump()
        data.update(dict(zip(names, values)))
        try:
            candidates.append(TabNetConfig.model_validate(data))
        except ValidationError as e:
            raise InvalidSpec(f"hyperparameter combination {dict(zip(names, values))} is invalid: {e}") from e

    tasks = {}
    for index, candidate in enumerate(candidates):
        for series in series_set:
            tasks[(index, series.subject_id)] = (
                lambda s=series, c=candidate: run_experiment_cell(
                    s, spec, c, grid.comparison_train_cycles, grid.comparison_horizon, ("tabnet",), epochs))
    outcomes = GridRunner(grid.jobs).run(tasks)

    rows = []
    for index, candidate in enumerate(candidates):
        losses = [outcomes[(index, s.subject_id)].val_loss.get("tabnet", math.inf) for s in series_set]
        rows.append({**{name: getattr(candidate, name) for name in names}, "mean_val_loss": float(np.mean(losses))})
    table = pd.DataFrame(rows)
    best = int(np.argmin(table["mean_val_loss"].to_numpy())) if len(table) else 0
    logger.info(f"Hyperparameter search: {len(candidates)} candidate(s), best {rows[best] if rows else config}")
    return SearchResult(best_config=candidates[best] if candidates else config, table=table)
