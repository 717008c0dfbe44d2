"""Per-heartbeat feature extraction.

Each retained cycle yields 38 time-domain and nonlinear features of the ECG
and PPG plus SBP/DBP targets from the ABP channel.
"""
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from scipy.integrate import trapezoid
from scipy.signal import correlate, correlation_lags

from errors import (CorruptPayload, DegenerateSignal, MissingAbp, ShapeMismatch, SignalTooShort, TooFewCycles,
                    UnparseableRow)
from preprocess import BeatAnnotation, FilterDefaults, detect_beats, preprocess_record
from storage import PathLike, write_csv
from waveforms import WaveformRecord

logger = logging.getLogger(__name__)

FEATURE_NAMES: Tuple[str, ...] = (
    "pat_foot_ms", "pat_peak_ms", "pat_slope_ms", "delta_pat_foot_ms", "hr_bpm", "rr_ms",
    "ppg_peak_amp", "ppg_foot_amp", "ppg_peak_foot_diff", "ppg_half_width_ms", "ppg_rise_time_ms",
    "ppg_fall_time_ms",
    "ecg_mean", "ecg_abs_sum", "ecg_var", "ecg_sum_sq", "ecg_max",
    "ppg_mean", "ppg_abs_sum", "ppg_var", "ppg_sum_sq", "ppg_max",
    "ecg_min", "ppg_min", "ecg_skew", "ppg_skew", "ecg_kurtosis", "ppg_kurtosis",
    "xcorr_coef", "xcorr_lag_ms", "ecg_fuzzy_en", "ppg_fuzzy_en",
    "ppg_d1_max", "ppg_d2_max", "pat_rr_ratio", "ppg_integral", "ppg_systolic_area", "ppg_diastolic_area",
)
N_FEATURES = len(FEATURE_NAMES)
TARGET_COLUMNS = ("sbp", "dbp", "cycle_time_s")
SBP_RANGE = (40.0, 260.0)
DBP_RANGE = (20.0, 200.0)


class FuzzyEntropyParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m: int = Field(2, ge=1)
    r_frac: float = Field(0.2, gt=0, lt=1)
    n: float = Field(2.0, gt=0)


class FeatureSettings(BaseModel):
    """The [features] config section."""

    model_config = ConfigDict(extra="forbid")

    fuzzy_m: int = Field(2, ge=1)
    fuzzy_r_frac: float = Field(0.2, gt=0, lt=1)
    fuzzy_n: float = Field(2.0, gt=0)
    drop_edge_cycles: bool = True

    @property
    def fuzzy(self) -> FuzzyEntropyParams:
        return FuzzyEntropyParams(m=self.fuzzy_m, r_frac=self.fuzzy_r_frac, n=self.fuzzy_n)


def fuzzy_entropy(signal: np.ndarray, params: Optional[FuzzyEntropyParams] = None) -> float:
    """ln(phi_m) - ln(phi_{m+1}) over mean-removed templates.

    Both template lengths use the first N - m start positions; similarity is
    exp(-(d/r)^n) with d the Chebyshev distance, averaged over ordered pairs
    i != j. r = r_frac * population SD.
    """
    params = params or FuzzyEntropyParams()
    x = np.asarray(signal, dtype=np.float64)
    m = params.m
    if x.ndim != 1 or x.shape[0] < m + 2:
        raise SignalTooShort(f"fuzzy entropy with m={m} needs at least {m + 2} samples, got {x.shape[0]}")
    sd = x.std()
    if np.ptp(x) == 0 or sd == 0:
        logger.warning("fuzzy_entropy: constant signal, returning 0")
        return 0.0
    r = params.r_frac * sd
    count = x.shape[0] - m

    def phi(k: int) -> float:
        templates = sliding_window_view(x, k)[:count]
        templates = templates - templates.mean(axis=1, keepdims=True)
        distance = np.max(np.abs(templates[:, None, :] - templates[None, :, :]), axis=2)
        similarity = np.exp(-((distance / r) ** params.n))
        return (similarity.sum() - np.trace(similarity)) / (count * (count - 1))

    with np.errstate(divide="ignore"):
        return float(np.log(phi(m)) - np.log(phi(m + 1)))


def cross_correlation_peak(x: np.ndarray, y: np.ndarray, max_lag: Optional[int] = None) -> Tuple[float, int]:
    """Maximum normalised cross-correlation and its lag.

    c(L) = sum_t x~[t] * y~[t+L] / (|x~| |y~|) on mean-removed inputs; a
    positive lag means y trails x. Ties resolve to the most negative lag.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch(f"cross_correlation_peak needs equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.shape[0] < 4:
        raise SignalTooShort(f"cross_correlation_peak needs at least 4 samples, got {x.shape[0]}")
    max_lag = x.shape[0] // 2 if max_lag is None else int(max_lag)
    if not 0 <= max_lag < x.shape[0]:
        raise ShapeMismatch(f"max_lag {max_lag} must lie in [0, {x.shape[0]})")
    x = x - x.mean()
    y = y - y.mean()
    norm = np.linalg.norm(x) * np.linalg.norm(y)
    if norm == 0:
        raise DegenerateSignal("cross-correlation of a zero-variance signal is undefined")

    coefficients = correlate(y, x, mode="full", method="direct") / norm
    lags = correlation_lags(y.shape[0], x.shape[0], mode="full")
    window = np.abs(lags) <= max_lag
    best = int(np.argmax(coefficients[window]))
    return float(np.clip(coefficients[window][best], -1.0, 1.0)), int(lags[window][best])


# ------------------ Feature series ------------------
@dataclass
class CycleFeatureSeries:
    subject_id: str
    features: np.ndarray
    sbp: np.ndarray
    dbp: np.ndarray
    cycle_times_s: np.ndarray
    feature_names: Tuple[str, ...] = field(default=FEATURE_NAMES)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.sbp = np.asarray(self.sbp, dtype=np.float64)
        self.dbp = np.asarray(self.dbp, dtype=np.float64)
        self.cycle_times_s = np.asarray(self.cycle_times_s, dtype=np.float64)
        self.feature_names = tuple(self.feature_names)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise ShapeMismatch(f"{self.subject_id}: expected an L x {N_FEATURES} feature matrix, "
                                f"got {self.features.shape}")
        if len(self.feature_names) != N_FEATURES or len(set(self.feature_names)) != N_FEATURES:
            raise ShapeMismatch(f"{self.subject_id}: feature names must be {N_FEATURES} unique labels")
        if any(a.shape != (n,) for a in (self.sbp, self.dbp, self.cycle_times_s)):
            raise ShapeMismatch(f"{self.subject_id}: targets must have one entry per cycle ({n})")
        if not (np.isfinite(self.features).all() and np.isfinite(self.sbp).all() and np.isfinite(self.dbp).all()):
            raise ShapeMismatch(f"{self.subject_id}: feature series contains NaN or Inf")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def target(self, name: str = "sbp") -> np.ndarray:
        if name not in ("sbp", "dbp"):
            raise ShapeMismatch(f"unknown target '{name}'")
        return self.sbp if name == "sbp" else self.dbp

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]

    def head(self, n_cycles: int) -> "CycleFeatureSeries":
        return CycleFeatureSeries(self.subject_id, self.features[:n_cycles], self.sbp[:n_cycles],
                                  self.dbp[:n_cycles], self.cycle_times_s[:n_cycles], self.feature_names)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=list(self.feature_names))
        frame["sbp"] = self.sbp
        frame["dbp"] = self.dbp
        frame["cycle_time_s"] = self.cycle_times_s
        return frame


def save_feature_series(series: CycleFeatureSeries, path: PathLike) -> Path:
    return write_csv(path, series.to_frame(), header_line=f"subject_id={series.subject_id}")


def load_feature_series(path: PathLike) -> CycleFeatureSeries:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorruptPayload(f"cannot read feature table {path}: {e}") from e
    first_line = text.split("\n", 1)[0]
    subject_id = path.stem
    skip = 0
    if first_line.startswith("#"):
        key, _, value = first_line.lstrip("#").strip().partition("=")
        if key.strip() == "subject_id":
            subject_id = value.strip()
        skip = 1
    frame = pd.read_csv(io.StringIO(text), skiprows=skip)
    expected = list(FEATURE_NAMES) + list(TARGET_COLUMNS)
    if list(frame.columns) != expected:
        missing = [c for c in expected if c not in frame.columns]
        raise ShapeMismatch(f"{path}: feature table header does not match the 38-feature layout "
                            f"(missing: {missing[:5]})")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = np.flatnonzero(numeric.isna().any(axis=1).to_numpy())
    if bad_rows.size:
        raise UnparseableRow(f"{path}: non-numeric feature value", line=int(bad_rows[0]) + skip + 2)
    return CycleFeatureSeries(
        subject_id=subject_id,
        features=numeric[list(FEATURE_NAMES)].to_numpy(dtype=np.float64),
        sbp=numeric["sbp"].to_numpy(dtype=np.float64),
        dbp=numeric["dbp"].to_numpy(dtype=np.float64),
        cycle_times_s=numeric["cycle_time_s"].to_numpy(dtype=np.float64),
    )


# ------------------ Extraction ------------------
def _segment_stats(segment: np.ndarray) -> List[float]:
    return [segment.mean(), np.abs(segment).sum(), segment.var(), np.sum(segment * segment), segment.max()]


def _half_width(ppg: np.ndarray, foot: int, peak: int, next_foot: int) -> int:
    level = ppg[foot] + 0.5 * (ppg[peak] - ppg[foot])
    rising = np.flatnonzero(ppg[foot : peak + 1] < level)
    left = foot + (rising[-1] + 1 if rising.size else 0)
    falling = np.flatnonzero(ppg[peak : next_foot + 1] < level)
    right = peak + (falling[0] if falling.size else next_foot - peak)
    return right - left


def _cycle_features(ecg: np.ndarray, ppg: np.ndarray, fs: float, start: int, end: int,
                    foot: int, peak: int, slope: int, fuzzy: FuzzyEntropyParams) -> List[float]:
    to_ms = 1000.0 / fs
    rr_ms = (end - start) * to_ms
    pat_foot = (foot - start) * to_ms
    search_end = min(ppg.shape[0], end + (peak - start) + 1)
    next_foot = peak + int(np.argmin(ppg[peak:search_end]))

    ecg_seg = ecg[start:end]
    ppg_seg = ppg[start:end]
    try:
        coef, lag = cross_correlation_peak(ecg_seg, ppg_seg)
    except DegenerateSignal:
        coef, lag = np.nan, 0
    d1 = np.diff(ppg_seg) * fs
    d2 = np.diff(ppg_seg, n=2) * fs * fs

    return [
        pat_foot,
        (peak - start) * to_ms,
        (slope - start) * to_ms,
        np.nan,  # delta PAT, filled from the previous retained cycle
        60000.0 / rr_ms,
        rr_ms,
        ppg[peak],
        ppg[foot],
        ppg[peak] - ppg[foot],
        _half_width(ppg, foot, peak, next_foot) * to_ms,
        (peak - foot) * to_ms,
        (next_foot - peak) * to_ms,
        *_segment_stats(ecg_seg),
        *_segment_stats(ppg_seg),
        ecg_seg.min(),
        ppg_seg.min(),
        stats.skew(ecg_seg),
        stats.skew(ppg_seg),
        stats.kurtosis(ecg_seg),
        stats.kurtosis(ppg_seg),
        coef,
        lag * to_ms,
        fuzzy_entropy(ecg_seg, fuzzy),
        fuzzy_entropy(ppg_seg, fuzzy),
        d1.max(),
        d2.max() if d2.size else np.nan,
        pat_foot / rr_ms,
        trapezoid(ppg_seg, dx=1.0 / fs),
        trapezoid(ppg[foot : peak + 1] - ppg[foot], dx=1.0 / fs),
        trapezoid(ppg[peak : next_foot + 1] - ppg[foot], dx=1.0 / fs),
    ]


def extract_features(record: WaveformRecord, annotation: BeatAnnotation,
                     settings: Optional[FeatureSettings] = None) -> CycleFeatureSeries:
    """Feature rows for the retained cycles of a filtered record.

    The first and last retained cycles are dropped as filter edges. A cycle
    whose immediate predecessor (by ``cycle_index``) was not retained has no
    PAT change and is dropped too; this always includes the first remaining
    cycle. Cycles producing any non-finite value or implausible targets are
    skipped, but still serve as the PAT reference for their successor.
    """
    settings = settings or FeatureSettings()
    if record.abp is None:
        raise MissingAbp(f"{record.subject_id}: ABP channel is required for SBP/DBP targets")
    minimum = 5 if settings.drop_edge_cycles else 3
    if annotation.n_cycles < minimum:
        raise TooFewCycles(f"{record.subject_id}: {annotation.n_cycles} retained cycles, need at least {minimum}")

    fs = record.sample_rate_hz
    ecg = record.ecg.astype(np.float64)
    ppg = record.ppg.astype(np.float64)
    abp = record.abp.astype(np.float64)
    selected = range(1, annotation.n_cycles - 1) if settings.drop_edge_cycles else range(annotation.n_cycles)

    rows, sbp, dbp, times = [], [], [], []
    previous: Optional[Tuple[int, float]] = None  # (cycle_index, PAT_foot) of the cycle just visited
    dropped = 0
    for i in selected:
        start, end = (int(v) for v in annotation.cycles[i])
        row = _cycle_features(ecg, ppg, fs, start, end, int(annotation.ppg_feet[i]),
                              int(annotation.ppg_peaks[i]), int(annotation.ppg_max_slopes[i]), settings.fuzzy)
        index, pat = int(annotation.cycle_index[i]), row[0]
        adjacent = previous is not None and previous[0] == index - 1
        delta = pat - previous[1] if adjacent else None
        previous = (index, pat)
        if delta is None:
            # no beat-to-beat PAT change after a gap in the retained cycles
            continue
        row[3] = delta

        cycle_sbp, cycle_dbp = abp[start:end].max(), abp[start:end].min()
        plausible = (SBP_RANGE[0] <= cycle_sbp <= SBP_RANGE[1] and DBP_RANGE[0] <= cycle_dbp <= DBP_RANGE[1]
                     and cycle_sbp >= cycle_dbp)
        if not plausible or not np.all(np.isfinite(row)):
            dropped += 1
            continue
        rows.append(row)
        sbp.append(cycle_sbp)
        dbp.append(cycle_dbp)
        times.append(start / fs)

    if len(rows) < 1:
        raise TooFewCycles(f"{record.subject_id}: no cycle produced a complete feature row")
    if dropped:
        logger.warning(f"{record.subject_id}: dropped {dropped} cycle(s) with non-finite features or implausible BP")
    series = CycleFeatureSeries(subject_id=record.subject_id, features=np.asarray(rows), sbp=np.asarray(sbp),
                                dbp=np.asarray(dbp), cycle_times_s=np.asarray(times))
    logger.info(f"{record.subject_id}: extracted {len(series)} feature rows")
    return series


@dataclass
class ProcessedRecord:
    filtered: WaveformRecord
    annotation: BeatAnnotation
    series: CycleFeatureSeries


def process_record(record: WaveformRecord, filters: Optional[FilterDefaults] = None,
                   settings: Optional[FeatureSettings] = None) -> ProcessedRecord:
    """Filter, detect beats and extract features for one record."""
    filtered = preprocess_record(record, filters)
    annotation = detect_beats(filtered.ecg, filtered.ppg, filtered.sample_rate_hz, filters)
    return ProcessedRecord(filtered, annotation, extract_features(filtered, annotation, settings))
