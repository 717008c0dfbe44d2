"""Windowing, chronological splits, personalised training and evaluation."""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from engine import Adam, mse_loss, no_grad
from errors import DivergedLoss, EmptyTestSet, InvalidSpec, TooFewCycles, TooFewWindows
from features import CycleFeatureSeries
from tabnet import FeatureScaler, TabNetConfig, TabNetModel

logger = logging.getLogger(__name__)

AAMI_MAX_MEAN_ERROR = 5.0
AAMI_MAX_SD = 8.0
FORECAST_BAND = (40.0, 260.0)


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_cycles: int = Field(420, ge=1)
    input_length: int = Field(30, ge=2)
    horizons: Tuple[int, ...] = (5, 10, 20)
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    target: Literal["sbp", "dbp"] = "sbp"
    seed: int = Field(0, ge=0)

    @field_validator("horizons")
    @classmethod
    def positive_horizons(cls, horizons):
        if not horizons or any(h < 1 for h in horizons):
            raise ValueError(f"horizons must be positive, got {list(horizons)}")
        return tuple(horizons)

    @model_validator(mode="after")
    def check_split(self):
        if any(p <= 0 for p in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split proportions must be positive and sum to 1, got {list(self.split)}")
        return self

    def segment_length(self) -> int:
        """Cycles needed so the training split covers ``train_cycles``."""
        return int(math.ceil(self.train_cycles / self.split[0] - 1e-9))

    def tabnet_config(self, config: TabNetConfig, horizon: int) -> TabNetConfig:
        if self.train_cycles < self.input_length + horizon + config.batch_size:
            raise InvalidSpec(f"train_cycles={self.train_cycles} is shorter than input_length + horizon + "
                              f"batch_size ({self.input_length + horizon + config.batch_size})")
        data = config.model_dump()
        data.update(input_length=self.input_length, forecast_length=horizon)
        return TabNetConfig.model_validate(data)


# ------------------ Windows ------------------
@dataclass(frozen=True)
class WindowSet:
    """Sliding windows over one subject, in chronological order."""

    features: np.ndarray  # [n, L_in, M] raw feature rows
    history: np.ndarray  # [n, L_in] target history
    targets: np.ndarray  # [n, H] future target values
    starts: np.ndarray  # [n] first cycle of each input window

    def __len__(self) -> int:
        return int(self.starts.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.targets.shape[1])

    def take(self, lo: int, hi: int) -> "WindowSet":
        return WindowSet(self.features[lo:hi], self.history[lo:hi], self.targets[lo:hi], self.starts[lo:hi])

    def model_inputs(self, model: TabNetModel) -> np.ndarray:
        return np.stack([model.prepare_window(f, h) for f, h in zip(self.features, self.history)]) \
            if len(self) else np.zeros((0, model.config.input_length, model.config.channels), dtype=model.dtype)


def make_windows(series: CycleFeatureSeries, input_length: int, horizon: int, target: str = "sbp") -> WindowSet:
    length = len(series)
    if length < input_length + horizon:
        raise TooFewCycles(f"{series.subject_id}: {length} cycles cannot fill an input of {input_length} "
                           f"plus a horizon of {horizon}")
    values = series.target(target)
    starts = np.arange(length - input_length - horizon + 1)
    return WindowSet(
        features=np.stack([series.features[s : s + input_length] for s in starts]),
        history=np.stack([values[s : s + input_length] for s in starts]),
        targets=np.stack([values[s + input_length : s + input_length + horizon] for s in starts]),
        starts=starts,
    )


def split_sizes(n: int, proportions: Tuple[float, float, float] = (0.7, 0.1, 0.2)) -> Tuple[int, int, int]:
    n_train = int(math.floor(proportions[0] * n + 1e-9))
    n_val = int(math.floor(proportions[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def chronological_split(windows: WindowSet, proportions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
                        ) -> Tuple[WindowSet, WindowSet, WindowSet]:
    n = len(windows)
    if n < 10:
        raise TooFewWindows(f"need at least 10 windows for a chronological split, got {n}")
    n_train, n_val, _ = split_sizes(n, proportions)
    return windows.take(0, n_train), windows.take(n_train, n_train + n_val), windows.take(n_train + n_val, n)


@dataclass
class PreparedExperiment:
    subject_id: str
    config: TabNetConfig
    scaler: FeatureScaler
    train: WindowSet
    val: WindowSet
    test: WindowSet


def prepare_experiment(series: CycleFeatureSeries, spec: ExperimentSpec, config: TabNetConfig,
                       horizon: Optional[int] = None) -> PreparedExperiment:
    """Segment, window and split one subject; fit the feature scaler on training rows only."""
    horizon = horizon or config.forecast_length
    model_config = spec.tabnet_config(config, horizon)
    needed = spec.segment_length()
    if len(series) < needed:
        raise TooFewCycles(f"{series.subject_id}: {len(series)} cycles, {needed} needed for "
                           f"{spec.train_cycles} training cycles")
    windows = make_windows(series.head(needed), spec.input_length, horizon, spec.target)
    train, val, test = chronological_split(windows, spec.split)
    train_rows = int(train.starts[-1]) + spec.input_length if len(train) else spec.input_length
    scaler = FeatureScaler.fit(series.features[:train_rows])
    return PreparedExperiment(series.subject_id, model_config, scaler, train, val, test)


# ------------------ Training ------------------
class TrainingHistory(BaseModel):
    train_loss: List[float] = []
    val_loss: List[float] = []
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


class PersonalizedTrainer:
    """Mini-batch Adam on normalised-target MSE with best-validation selection."""

    def __init__(self, config: TabNetConfig, subject_id: str = "subject", epochs: Optional[int] = None):
        self.config = config
        self.subject_id = subject_id
        self.epochs = epochs or config.epochs

    def _window_loss(self, model: TabNetModel, window: np.ndarray, target: np.ndarray):
        prediction, stats = model.forward_with_stats(window)
        channel = model.config.channels - 1
        normalized = (np.asarray(target, dtype=np.float64) - stats.mean[channel]) / stats.divisor[channel]
        return mse_loss(prediction, normalized.astype(model.dtype))

    def _batch_loss(self, model: TabNetModel, inputs: np.ndarray, targets: np.ndarray):
        total = None
        for window, target in zip(inputs, targets):
            loss = self._window_loss(model, window, target)
            total = loss if total is None else total + loss
        return total * (1.0 / inputs.shape[0])

    def validation_loss(self, model: TabNetModel, inputs: np.ndarray, targets: np.ndarray) -> float:
        if inputs.shape[0] == 0:
            return float("nan")
        with no_grad():
            losses = [self._window_loss(model, w, t).item() for w, t in zip(inputs, targets)]
        return float(np.mean(losses))

    def fit(self, model: TabNetModel, train_inputs: np.ndarray, train_targets: np.ndarray,
            val_inputs: Optional[np.ndarray] = None, val_targets: Optional[np.ndarray] = None
            ) -> TrainingHistory:
        n = train_inputs.shape[0]
        if n == 0:
            raise TooFewWindows(f"{self.subject_id}: no training windows")
        has_val = val_inputs is not None and val_inputs.shape[0] > 0
        optimizer = Adam(model.named_parameters(), lr=self.config.lr)
        rng = np.random.default_rng([self.config.seed, 1])
        history = TrainingHistory()
        best_loss, best_state = math.inf, model.state_dict()
        batch_size = self.config.batch_size

        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for batch_no, lo in enumerate(range(0, n, batch_size), start=1):
                idx = order[lo : lo + batch_size]
                optimizer.zero_grad()
                loss = self._batch_loss(model, train_inputs[idx], train_targets[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergedLoss(f"{self.subject_id}: non-finite loss {value} at epoch {epoch}, "
                                       f"batch {batch_no}", epoch=epoch, batch=batch_no)
                loss.backward()
                optimizer.step()
                epoch_loss += value * idx.shape[0]
                logger.debug(f"{self.subject_id}: epoch {epoch} batch {batch_no} loss={value:.6f}")

            train_loss = epoch_loss / n
            val_loss = self.validation_loss(model, val_inputs, val_targets) if has_val else train_loss
            history.train_loss.append(train_loss)
            history.val_loss.append(val_loss)
            if val_loss < best_loss:
                best_loss, best_state, history.best_epoch = val_loss, model.state_dict(), epoch
            logger.info(f"{self.subject_id}: epoch {epoch}/{self.epochs} train={train_loss:.5f} val={val_loss:.5f}")

        model.load_state_dict(best_state)
        return history


def train_personalized(series: CycleFeatureSeries, spec: ExperimentSpec, config: TabNetConfig,
                       horizon: Optional[int] = None, epochs: Optional[int] = None,
                       prepared: Optional[PreparedExperiment] = None) -> Tuple[TabNetModel, TrainingHistory]:
    prepared = prepared or prepare_experiment(series, spec, config, horizon)
    model = TabNetModel(prepared.config, scaler=prepared.scaler)
    trainer = PersonalizedTrainer(prepared.config, series.subject_id, epochs)
    history = trainer.fit(model, prepared.train.model_inputs(model), prepared.train.targets,
                          prepared.val.model_inputs(model), prepared.val.targets)
    logger.info(f"{series.subject_id}: best validation loss at epoch {history.best_epoch}")
    return model, history


# ------------------ Evaluation ------------------
class ForecastReport(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    subject_id: str
    model: str = "tabnet"
    horizon: int
    train_cycles: Optional[int] = None
    mae_mmHg: float
    sd_mmHg: float
    me_mmHg: float
    aami_pass: bool
    n_windows: int
    clamped: int = 0
    fallbacks: int = 0
    truth: List[List[float]] = []
    prediction: List[List[float]] = []
    effective_config: Dict[str, Any] = {}
    version: str = ""

    def series_frame(self) -> pd.DataFrame:
        rows = [(w, step, t, p) for w, (truth, pred) in enumerate(zip(self.truth, self.prediction))
                for step, (t, p) in enumerate(zip(truth, pred), start=1)]
        return pd.DataFrame(rows, columns=["window_idx", "step", "truth_mmHg", "pred_mmHg"])


def aami_verdict(me: float, sd: float) -> bool:
    return abs(me) <= AAMI_MAX_MEAN_ERROR and sd <= AAMI_MAX_SD


def build_report(subject_id: str, truth: np.ndarray, prediction: np.ndarray, **extra) -> ForecastReport:
    """MAE, mean error and sample SD (n-1) of signed errors over every window and step."""
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.ndim != 2 or truth.shape[0] == 0:
        raise EmptyTestSet(f"{subject_id}: no test windows to evaluate")
    errors = prediction - truth
    mae = float(np.mean(np.abs(errors)))
    me = float(np.mean(errors))
    sd = float(np.std(errors, ddof=1)) if errors.size > 1 else 0.0
    return ForecastReport(subject_id=subject_id, horizon=truth.shape[1], mae_mmHg=mae, sd_mmHg=sd, me_mmHg=me,
                          aami_pass=aami_verdict(me, sd), n_windows=truth.shape[0], truth=truth.tolist(),
                          prediction=prediction.tolist(), **extra)


def clamp_forecast(prediction: np.ndarray, subject_id: str = "") -> Tuple[np.ndarray, int]:
    low, high = FORECAST_BAND
    outside = int(np.count_nonzero((prediction < low) | (prediction > high)))
    if outside:
        logger.warning(f"{subject_id}: {outside} forecast value(s) outside [{low}, {high}] mmHg clamped")
    return np.clip(prediction, low, high), outside


def evaluate(model: TabNetModel, /, windows: WindowSet, subject_id: str = "subject", **extra) -> ForecastReport:
    if len(windows) == 0:
        raise EmptyTestSet(f"{subject_id}: no test windows to evaluate")
    inputs = windows.model_inputs(model)
    prediction = np.stack([model.predict(window) for window in inputs]).astype(np.float64)
    prediction, clamped = clamp_forecast(prediction, subject_id)
    return build_report(subject_id, windows.targets, prediction, clamped=clamped, **extra)
