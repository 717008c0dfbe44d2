"""Zero-phase filtering, R-peak detection and PPG landmark segmentation."""
import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import butter, find_peaks, sosfiltfilt

from errors import InvalidCutoff, NoBeatsFound, SignalTooShort
from storage import PathLike, write_csv
from waveforms import WaveformRecord

logger = logging.getLogger(__name__)


class FilterSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["bandpass", "lowpass"]
    low_cut_hz: Optional[float] = None
    high_cut_hz: float
    order: int = Field(4, ge=1)
    sample_rate_hz: float = Field(..., gt=0)


class FilterDefaults(BaseModel):
    """The [filters] config section: cutoffs plus beat-exclusion rules."""

    model_config = ConfigDict(extra="forbid")

    ecg_low_hz: float = 5.0
    ecg_high_hz: float = 40.0
    ppg_high_hz: float = 10.0
    order: int = Field(4, ge=1)
    refractory_ms: float = Field(250.0, gt=0)
    hr_min_bpm: float = 30.0
    hr_max_bpm: float = 220.0
    min_amplitude_frac: float = Field(0.1, ge=0, lt=1)
    ppg_onset_frac: float = Field(0.02, ge=0, lt=1)

    def ecg_spec(self, sample_rate_hz: float) -> FilterSpec:
        return FilterSpec(kind="bandpass", low_cut_hz=self.ecg_low_hz, high_cut_hz=self.ecg_high_hz,
                          order=self.order, sample_rate_hz=sample_rate_hz)

    def ppg_spec(self, sample_rate_hz: float) -> FilterSpec:
        return FilterSpec(kind="lowpass", high_cut_hz=self.ppg_high_hz, order=self.order,
                          sample_rate_hz=sample_rate_hz)


@dataclass(frozen=True)
class FilterCoefficients:
    sos: np.ndarray
    spec: FilterSpec

    @property
    def order(self) -> int:
        return self.spec.order


def design_filter(spec: FilterSpec) -> FilterCoefficients:
    """Butterworth second-order sections for forward-backward application."""
    nyquist = spec.sample_rate_hz / 2.0
    if spec.kind == "bandpass":
        low = spec.low_cut_hz
        if low is None or not (0 < low < spec.high_cut_hz < nyquist):
            raise InvalidCutoff(f"bandpass needs 0 < low ({low}) < high ({spec.high_cut_hz}) < Nyquist ({nyquist})")
        sos = butter(spec.order, [low, spec.high_cut_hz], btype="bandpass", fs=spec.sample_rate_hz, output="sos")
    else:
        if not (0 < spec.high_cut_hz < nyquist):
            raise InvalidCutoff(f"lowpass needs 0 < cutoff ({spec.high_cut_hz}) < Nyquist ({nyquist})")
        sos = butter(spec.order, spec.high_cut_hz, btype="lowpass", fs=spec.sample_rate_hz, output="sos")
    return FilterCoefficients(sos=sos, spec=spec)


def apply_filter(signal: np.ndarray, coeffs: FilterCoefficients) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.shape[0] <= 3 * coeffs.order:
        raise SignalTooShort(f"filtering needs more than {3 * coeffs.order} samples, got {signal.shape[-1]}")
    padlen = min(3 * (2 * coeffs.sos.shape[0] + 1), signal.shape[0] - 1)
    return sosfiltfilt(coeffs.sos, signal, padlen=padlen)


def preprocess_record(record: WaveformRecord, defaults: Optional[FilterDefaults] = None) -> WaveformRecord:
    """Bandpass the ECG, lowpass the PPG; ABP is left untouched."""
    defaults = defaults or FilterDefaults()
    fs = record.sample_rate_hz
    ecg = apply_filter(record.ecg, design_filter(defaults.ecg_spec(fs)))
    ppg = apply_filter(record.ppg, design_filter(defaults.ppg_spec(fs)))
    return record.replace_channels(ecg=ecg, ppg=ppg)


# ------------------ Beat detection ------------------
@dataclass(frozen=True)
class BeatAnnotation:
    """R-peaks plus PPG landmarks of the retained cycles.

    ``cycle_index[i]`` is the position of retained cycle i among all
    consecutive R-peak pairs; landmark arrays align with ``cycles``.
    """

    r_peaks: np.ndarray
    cycles: np.ndarray
    cycle_index: np.ndarray
    ppg_feet: np.ndarray
    ppg_peaks: np.ndarray
    ppg_max_slopes: np.ndarray
    excluded: int
    sample_rate_hz: float

    @property
    def n_cycles(self) -> int:
        return int(self.cycles.shape[0])

    def all_cycles(self) -> np.ndarray:
        return np.column_stack([self.r_peaks[:-1], self.r_peaks[1:]])


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    return np.convolve(x, np.ones(width) / width, mode="same")


def detect_r_peaks(ecg: np.ndarray, sample_rate_hz: float, refractory_ms: float = 250.0) -> np.ndarray:
    """Derivative, squaring and moving-window integration with an adaptive threshold."""
    ecg = np.asarray(ecg, dtype=np.float64)
    fs = sample_rate_hz
    integrated = _moving_average(np.gradient(ecg) ** 2, max(1, int(round(0.150 * fs))))
    if not np.any(integrated > 0):
        return np.array([], dtype=np.int64)

    distance = max(1, int(round(refractory_ms / 1000.0 * fs)))
    candidates, _ = find_peaks(integrated, distance=distance)
    if candidates.size == 0:
        return np.array([], dtype=np.int64)

    learning = integrated[: int(2 * fs)]
    spki = learning.max() / 3.0
    npki = learning.mean() / 2.0
    accepted = []
    for idx in candidates:
        value = integrated[idx]
        threshold = npki + 0.25 * (spki - npki)
        if value > threshold:
            accepted.append(idx)
            spki = 0.125 * value + 0.875 * spki
        else:
            npki = 0.125 * value + 0.875 * npki

    half = max(1, int(round(0.100 * fs)))
    refined = []
    for idx in accepted:
        lo, hi = max(0, idx - half), min(ecg.shape[0], idx + half + 1)
        peak = lo + int(np.argmax(ecg[lo:hi]))
        if not refined or peak - refined[-1] >= distance:
            refined.append(peak)
    return np.asarray(refined, dtype=np.int64)


def _ppg_landmarks(ppg: np.ndarray, start: int, end: int, onset_frac: float = 0.02):
    """Foot, peak and max-slope sample of one cycle.

    The foot is the last sample of the pre-upstroke trough: the latest point
    before the peak still within ``onset_frac`` of the pulse amplitude above
    the trough minimum. ``onset_frac=0`` gives the plain argmin.
    """
    segment = ppg[start:end]
    peak = int(np.argmax(segment))
    if peak == 0 or peak == segment.shape[0] - 1:
        return None
    trough = int(np.argmin(segment[: peak + 1]))
    if trough == peak:
        return None
    level = segment[trough] + onset_frac * (segment[peak] - segment[trough])
    foot = trough + int(np.flatnonzero(segment[trough : peak + 1] <= level)[-1])
    if foot >= peak:
        return None
    slope = foot + int(np.argmax(np.diff(segment[foot : peak + 1])))
    return start + foot, start + peak, start + slope


def detect_beats(ecg: np.ndarray, ppg: np.ndarray, sample_rate_hz: float,
                 defaults: Optional[FilterDefaults] = None) -> BeatAnnotation:
    defaults = defaults or FilterDefaults()
    ecg = np.asarray(ecg, dtype=np.float64)
    ppg = np.asarray(ppg, dtype=np.float64)
    fs = sample_rate_hz

    r_peaks = detect_r_peaks(ecg, fs, defaults.refractory_ms)
    if r_peaks.shape[0] < 2:
        raise NoBeatsFound(f"found {r_peaks.shape[0]} R-peak(s); at least 2 are needed to form a cycle")

    rr_s = np.diff(r_peaks) / fs
    hr = 60.0 / rr_s
    hr_ok = (hr >= defaults.hr_min_bpm) & (hr <= defaults.hr_max_bpm)

    landmarks = [_ppg_landmarks(ppg, int(s), int(e), defaults.ppg_onset_frac)
                 for s, e in zip(r_peaks[:-1], r_peaks[1:])]
    has_landmarks = np.array([lm is not None for lm in landmarks])
    amplitude = np.array([ppg[lm[1]] - ppg[lm[0]] if lm is not None else np.nan for lm in landmarks])
    candidates = hr_ok & has_landmarks
    median_amp = float(np.median(amplitude[candidates])) if candidates.any() else 0.0
    amp_ok = np.zeros_like(candidates)
    amp_ok[candidates] = amplitude[candidates] >= defaults.min_amplitude_frac * median_amp
    retained = candidates & amp_ok

    index = np.flatnonzero(retained)
    kept = [landmarks[i] for i in index]
    annotation = BeatAnnotation(
        r_peaks=r_peaks,
        cycles=np.column_stack([r_peaks[:-1], r_peaks[1:]])[index],
        cycle_index=index,
        ppg_feet=np.array([lm[0] for lm in kept], dtype=np.int64),
        ppg_peaks=np.array([lm[1] for lm in kept], dtype=np.int64),
        ppg_max_slopes=np.array([lm[2] for lm in kept], dtype=np.int64),
        excluded=int((~retained).sum()),
        sample_rate_hz=fs,
    )
    logger.info(f"Detected {r_peaks.shape[0]} R-peaks, retained {annotation.n_cycles} cycles "
                f"({annotation.excluded} excluded: {int((~hr_ok).sum())} HR out of range, "
                f"{int((hr_ok & ~has_landmarks).sum())} missing PPG landmarks)")
    return annotation


def save_annotation_csv(annotation: BeatAnnotation, path: PathLike):
    frame = pd.DataFrame({
        "cycle_idx": annotation.cycle_index,
        "r_peak": annotation.cycles[:, 0] if annotation.n_cycles else np.array([], dtype=np.int64),
        "ppg_foot": annotation.ppg_feet,
        "ppg_peak": annotation.ppg_peaks,
        "ppg_max_slope": annotation.ppg_max_slopes,
    })
    return write_csv(path, frame)
