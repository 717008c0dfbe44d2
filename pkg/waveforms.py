"""Synchronised ECG/PPG/ABP records: validation, file formats and synthesis."""
import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import (
    CorruptPayload,
    InvalidSpec,
    MissingChannel,
    MissingSampleRate,
    NonMonotonicTime,
    ShapeMismatch,
    UnparseableRow,
    VersionMismatch,
)
from storage import PathLike, atomic_write_bytes, write_csv

logger = logging.getLogger(__name__)

CHANNELS = ("ecg", "ppg", "abp")
NATIVE_RATES = (125.0, 250.0, 1000.0)
BINARY_MAGIC = b"TFWF"
BINARY_VERSION = 1
_NON_FINITE_TOKENS = {"", "nan", "+nan", "-nan", "inf", "+inf", "-inf", "infinity", "+infinity", "-infinity"}


@dataclass(frozen=True)
class WaveformRecord:
    subject_id: str
    sample_rate_hz: float
    channels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise MissingSampleRate(f"{self.subject_id}: sample rate must be positive, got {self.sample_rate_hz}")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise MissingChannel(f"{self.subject_id}: unknown channel(s) {sorted(unknown)}")
        for name in ("ecg", "ppg"):
            if name not in self.channels:
                raise MissingChannel(f"{self.subject_id}: required channel '{name}' is absent")
        arrays = {name: np.ascontiguousarray(self.channels[name], dtype=np.float32) for name in CHANNELS
                  if name in self.channels}
        lengths = {a.shape[0] for a in arrays.values()}
        if any(a.ndim != 1 for a in arrays.values()) or len(lengths) != 1:
            raise ShapeMismatch(f"{self.subject_id}: channels must be 1-d with equal length, got {sorted(lengths)}")
        if lengths.pop() < 2:
            raise ShapeMismatch(f"{self.subject_id}: a record needs at least 2 samples")
        if not all(np.isfinite(a).all() for a in arrays.values()):
            raise ShapeMismatch(f"{self.subject_id}: channels contain NaN or Inf samples")
        if float(self.sample_rate_hz) not in NATIVE_RATES:
            logger.debug(f"{self.subject_id}: non-native sample rate {self.sample_rate_hz} Hz")
        object.__setattr__(self, "channels", arrays)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def n_samples(self) -> int:
        return int(self.channels["ecg"].shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def ecg(self) -> np.ndarray:
        return self.channels["ecg"]

    @property
    def ppg(self) -> np.ndarray:
        return self.channels["ppg"]

    @property
    def abp(self) -> Optional[np.ndarray]:
        return self.channels.get("abp")

    def replace_channels(self, **channels: np.ndarray) -> "WaveformRecord":
        merged = dict(self.channels)
        merged.update(channels)
        return WaveformRecord(subject_id=self.subject_id, sample_rate_hz=self.sample_rate_hz, channels=merged)


# ------------------ Synthetic generation ------------------
class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    n_beats: int = Field(640, ge=10)
    base_hr_bpm: float = Field(75.0, ge=40, le=180)
    hr_drift: float = 10.0
    pat_to_bp_gain: float = 0.5
    bp_baseline_mmHg: float = 120.0
    dbp_baseline_mmHg: float = 80.0
    noise_sd: float = Field(2.0, ge=0)
    sample_rate_hz: float = Field(250.0, gt=80)
    pat_ms: float = Field(200.0, gt=0)
    pat_hr_slope_ms: float = 1.0
    interventions: int = Field(0, ge=0)
    scenario: str = "custom"

    @classmethod
    def for_scenario(cls, name: str, **overrides) -> "SynthSpec":
        if name not in SCENARIOS:
            raise InvalidSpec(f"unknown scenario '{name}', expected one of {sorted(SCENARIOS)}")
        try:
            return cls(**{**SCENARIOS[name], "scenario": name, **overrides})
        except ValidationError as e:
            raise InvalidSpec(f"invalid synthetic spec for scenario '{name}': {e}") from e


SCENARIOS: Dict[str, Dict[str, float]] = {
    # laboratory protocol: posture and stress interventions
    "multi_states": {"sample_rate_hz": 1000.0, "base_hr_bpm": 72.0, "hr_drift": 12.0, "noise_sd": 2.0,
                     "interventions": 5},
    "intraoperative": {"sample_rate_hz": 250.0, "base_hr_bpm": 68.0, "hr_drift": 18.0, "noise_sd": 3.0,
                       "pat_to_bp_gain": 0.6, "interventions": 2},
    "icu": {"sample_rate_hz": 125.0, "base_hr_bpm": 85.0, "hr_drift": 6.0, "noise_sd": 1.5, "interventions": 0},
}


@dataclass(frozen=True)
class SyntheticBeats:
    """Per-beat ground truth behind a synthetic record."""

    r_times_s: np.ndarray
    hr_bpm: np.ndarray
    pat_ms: np.ndarray
    sbp_mmHg: np.ndarray
    dbp_mmHg: np.ndarray


def _latent_drift(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_beats
    beats = np.arange(n)
    period = rng.uniform(40.0, 90.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    drift = np.sin(2 * np.pi * beats / period + phase)

    ar = np.zeros(n)
    shocks = rng.normal(0.0, 0.1, size=n)
    for i in range(1, n):
        ar[i] = 0.95 * ar[i - 1] + shocks[i]
    drift = drift + ar

    if spec.interventions:
        edges = np.linspace(0, n, spec.interventions + 2).astype(int)[1:-1]
        offsets = rng.uniform(-1.0, 1.0, size=spec.interventions)
        for edge, offset in zip(edges, offsets):
            drift[edge:] += offset
    return drift


def synthetic_beats(spec: SynthSpec) -> SyntheticBeats:
    rng = np.random.default_rng(spec.seed)
    drift = _latent_drift(spec, rng)
    hr = np.clip(spec.base_hr_bpm + spec.hr_drift * drift, 35.0, 210.0)
    rr_s = 60.0 / hr
    r_times = 0.5 + np.concatenate([[0.0], np.cumsum(rr_s[:-1])])
    pat = spec.pat_ms - spec.pat_hr_slope_ms * (hr - spec.base_hr_bpm)
    noise = rng.normal(0.0, 1.0, size=spec.n_beats) * spec.noise_sd
    sbp = spec.bp_baseline_mmHg - spec.pat_to_bp_gain * (pat - pat.mean()) + noise
    dbp = spec.dbp_baseline_mmHg + 0.6 * (sbp - spec.bp_baseline_mmHg)
    return SyntheticBeats(r_times_s=r_times, hr_bpm=hr, pat_ms=pat, sbp_mmHg=sbp, dbp_mmHg=dbp)


def _pulse_kernel(tau: np.ndarray) -> np.ndarray:
    """Raised-cosine systolic pulse over 300 ms plus a slow diastolic runoff."""
    systolic = np.where((tau >= 0) & (tau <= 0.3), 0.5 * (1 - np.cos(2 * np.pi * tau / 0.3)), 0.0)
    runoff = np.where(tau <= 0.15, 0.15 * (1 - np.cos(np.pi * np.clip(tau, 0, 0.15) / 0.15)),
                      0.3 * np.exp(-(tau - 0.15) / 0.4))
    return systolic + np.where(tau >= 0, runoff, 0.0)


def _plateau_shape(phase: np.ndarray) -> np.ndarray:
    """0 -> 1 -> 0 over one cycle with an exact flat top between 15% and 35%."""
    shape = np.zeros_like(phase)
    rise = (phase >= 0.05) & (phase < 0.15)
    shape[rise] = 0.5 * (1 - np.cos(np.pi * (phase[rise] - 0.05) / 0.10))
    shape[(phase >= 0.15) & (phase <= 0.35)] = 1.0
    fall = (phase > 0.35) & (phase < 0.6)
    shape[fall] = 0.5 * (1 + np.cos(np.pi * (phase[fall] - 0.35) / 0.25))
    return shape


def generate_synthetic(spec: SynthSpec, subject_id: Optional[str] = None) -> WaveformRecord:
    """Seeded ECG spike train, delayed PPG pulses and a per-beat ABP plateau."""
    beats = synthetic_beats(spec)
    fs = spec.sample_rate_hz
    n_samples = int(math.ceil((beats.r_times_s[-1] + 1.0) * fs))
    t = np.arange(n_samples) / fs
    rng = np.random.default_rng([spec.seed, 1])
    drift = (beats.hr_bpm - spec.base_hr_bpm) / max(abs(spec.hr_drift), 1.0)

    ecg = np.zeros(n_samples)
    ppg = np.zeros(n_samples)
    sigma = 0.010
    for i, r_time in enumerate(beats.r_times_s):
        lo, hi = int((r_time - 5 * sigma) * fs), int(math.ceil((r_time + 5 * sigma) * fs)) + 1
        span = t[max(lo, 0):min(hi, n_samples)]
        ecg[max(lo, 0):min(hi, n_samples)] += np.exp(-0.5 * ((span - r_time) / sigma) ** 2)

        onset = r_time + beats.pat_ms[i] / 1000.0
        lo, hi = int(onset * fs), min(int(math.ceil((onset + 1.5) * fs)), n_samples)
        amplitude = 1.0 + 0.05 * drift[i]
        ppg[lo:hi] += amplitude * _pulse_kernel(t[lo:hi] - onset)

    abp = np.empty(n_samples)
    edges = np.concatenate([[0.0], beats.r_times_s[1:], [t[-1] + 1.0 / fs]])
    rr = np.diff(np.concatenate([beats.r_times_s, [beats.r_times_s[-1] + 60.0 / beats.hr_bpm[-1]]]))
    abp[: int(math.ceil(beats.r_times_s[0] * fs))] = beats.dbp_mmHg[0]
    for i, r_time in enumerate(beats.r_times_s):
        lo = int(math.ceil(r_time * fs))
        hi = min(int(math.ceil(edges[i + 1] * fs)), n_samples)
        phase = (t[lo:hi] - r_time) / rr[i]
        pulse = beats.sbp_mmHg[i] - beats.dbp_mmHg[i]
        abp[lo:hi] = beats.dbp_mmHg[i] + pulse * _plateau_shape(phase)

    measurement_sd = 0.01 * spec.noise_sd
    if measurement_sd > 0:
        ecg += rng.normal(0.0, measurement_sd, size=n_samples)
        ppg += rng.normal(0.0, measurement_sd, size=n_samples)

    subject = subject_id or f"synth-{spec.seed}"
    logger.debug(f"{subject}: synthesised {spec.n_beats} beats, {n_samples} samples at {fs} Hz")
    return WaveformRecord(subject_id=subject, sample_rate_hz=fs, channels={"ecg": ecg, "ppg": ppg, "abp": abp})


def derive_subject_seed(base_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{base_seed}:subject:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def subject_spec(base: SynthSpec, index: int) -> SynthSpec:
    """Per-subject variant of a base spec: own seed and jittered physiology."""
    seed = derive_subject_seed(base.seed, index)
    rng = np.random.default_rng(seed)
    return base.model_copy(update={
        "seed": seed,
        "base_hr_bpm": float(np.clip(base.base_hr_bpm + rng.uniform(-8.0, 8.0), 40.0, 180.0)),
        "bp_baseline_mmHg": base.bp_baseline_mmHg + rng.uniform(-10.0, 10.0),
        "pat_ms": max(100.0, base.pat_ms + rng.uniform(-20.0, 20.0)),
    })


# ------------------ File formats ------------------
def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def _read_rate_line(first_line: str) -> Optional[float]:
    line = first_line.strip()
    if not line.startswith("#"):
        return None
    key, _, value = line.lstrip("#").strip().partition("=")
    if key.strip() != "sample_rate_hz":
        return None
    try:
        return float(value)
    except ValueError as e:
        raise UnparseableRow(f"bad sample rate '{value.strip()}'", line=1) from e


def _load_csv(path: Path, sample_rate_hz: Optional[float], subject_id: str) -> WaveformRecord:
    text = path.read_text(encoding="utf-8")
    first_line = text.split("\n", 1)[0]
    file_rate = _read_rate_line(first_line)
    has_meta = first_line.lstrip().startswith("#")
    rate = sample_rate_hz if sample_rate_hz is not None else file_rate
    if rate is None:
        raise MissingSampleRate(f"{path}: no '# sample_rate_hz=' line and no sample rate given")

    frame = pd.read_csv(io.StringIO(text), skiprows=1 if has_meta else 0, dtype=str,
                        keep_default_na=False, skipinitialspace=True)
    frame.columns = [c.strip().lower() for c in frame.columns]
    known = [c for c in frame.columns if c in ("time",) + CHANNELS]
    if len(known) < 2:
        raise MissingChannel(f"{path}: header must name at least two of time, ecg, ppg, abp")
    for name in ("ecg", "ppg"):
        if name not in frame.columns:
            raise MissingChannel(f"{path}: column '{name}' is absent")

    first_data_line = 3 if has_meta else 2
    numeric = {}
    rejected = np.zeros(len(frame), dtype=bool)
    for column in known:
        raw = frame[column].astype(str).str.strip()
        values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = np.isnan(values) & ~raw.str.lower().isin(_NON_FINITE_TOKENS).to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise UnparseableRow(f"{path}: column '{column}' value '{raw.iloc[row]}' is not a number",
                                 line=first_data_line + row)
        rejected |= ~np.isfinite(values)
        numeric[column] = values

    if rejected.any():
        logger.warning(f"{path}: rejected {int(rejected.sum())} row(s) containing NaN/Inf samples")
    keep = ~rejected
    if "time" in numeric:
        times = numeric["time"][keep]
        if np.any(np.diff(times) <= 0):
            row = int(np.flatnonzero(np.diff(times) <= 0)[0]) + 1
            raise NonMonotonicTime(f"{path}: time stops increasing at data row {row + 1}")
    channels = {name: numeric[name][keep] for name in CHANNELS if name in numeric}
    return WaveformRecord(subject_id=subject_id, sample_rate_hz=rate, channels=channels)


def _load_binary(path: Path, subject_id: Optional[str]) -> WaveformRecord:
    blob = path.read_bytes()
    if blob[:4] != BINARY_MAGIC:
        raise CorruptPayload(f"{path}: not a waveform file (bad magic)")
    try:
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != BINARY_VERSION:
            raise VersionMismatch(f"{path}: waveform format version {version}, expected {BINARY_VERSION}")
        offset = 6
        (n,) = struct.unpack_from("<H", blob, offset)
        stored_subject = blob[offset + 2 : offset + 2 + n].decode("utf-8")
        offset += 2 + n
        rate, n_channels = struct.unpack_from("<dB", blob, offset)
        offset += 9
        channels = {}
        for _ in range(n_channels):
            (n,) = struct.unpack_from("<B", blob, offset)
            name = blob[offset + 1 : offset + 1 + n].decode("ascii")
            offset += 1 + n
            (count,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            end = offset + 4 * count
            if end > len(blob):
                raise CorruptPayload(f"{path}: channel '{name}' is truncated")
            channels[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32)
            offset = end
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptPayload(f"{path}: waveform header unreadable: {e}") from e

    shortest = min(a.shape[0] for a in channels.values()) if channels else 0
    if any(a.shape[0] != shortest for a in channels.values()):
        logger.warning(f"{path}: channel lengths differ, truncating to {shortest} samples")
    channels = {name: a[:shortest] for name, a in channels.items()}
    return WaveformRecord(subject_id=subject_id or stored_subject, sample_rate_hz=rate, channels=channels)


def load_record(path: PathLike, format: Optional[Literal["csv", "binary"]] = None,
                sample_rate_hz: Optional[float] = None, subject_id: Optional[str] = None) -> WaveformRecord:
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        if fmt == "csv":
            record = _load_csv(path, sample_rate_hz, subject_id or path.stem)
        elif fmt == "binary":
            record = _load_binary(path, subject_id)
        else:
            raise InvalidSpec(f"unknown record format '{fmt}'")
    except OSError as e:
        raise CorruptPayload(f"cannot read record {path}: {e}") from e
    logger.info(f"Loaded {record.subject_id}: {record.n_samples} samples at {record.sample_rate_hz} Hz "
                f"({record.duration_s:.1f} s)")
    return record


def save_record(record: WaveformRecord, path: PathLike, format: Optional[Literal["csv", "binary"]] = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "csv":
        columns = {"time": np.arange(record.n_samples) / record.sample_rate_hz}
        columns.update({name: record.channels[name] for name in CHANNELS if name in record.channels})
        return write_csv(path, pd.DataFrame(columns), header_line=f"sample_rate_hz={record.sample_rate_hz!r}")
    if fmt != "binary":
        raise InvalidSpec(f"unknown record format '{fmt}'")

    subject = record.subject_id.encode("utf-8")
    parts = [BINARY_MAGIC, struct.pack("<H", BINARY_VERSION), struct.pack("<H", len(subject)), subject,
             struct.pack("<dB", record.sample_rate_hz, len(record.channels))]
    for name in CHANNELS:
        if name not in record.channels:
            continue
        data = np.ascontiguousarray(record.channels[name], dtype="<f4")
        parts += [struct.pack("<B", len(name)), name.encode("ascii"), struct.pack("<Q", data.shape[0]), data.tobytes()]
    return atomic_write_bytes(path, b"".join(parts))
