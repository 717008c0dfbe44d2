import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import InvalidCutoff, NoBeatsFound, SignalTooShort
from preprocess import (
    FilterDefaults,
    FilterSpec,
    apply_filter,
    design_filter,
    detect_beats,
    detect_r_peaks,
    preprocess_record,
    save_annotation_csv,
)
from waveforms import SynthSpec, generate_synthetic, synthetic_beats


def rms(x):
    return float(np.sqrt(np.mean(x * x)))


class TestBandpass:
    @pytest.fixture
    def ecg_filter(self):
        return design_filter(FilterDefaults().ecg_spec(1000.0))

    def test_rejects_baseline_wander(self, ecg_filter):
        t = np.arange(20000) / 1000.0
        tone = np.sin(2 * np.pi * 0.2 * t)
        out = apply_filter(tone, ecg_filter)
        middle = slice(5000, 15000)
        assert 20 * np.log10(rms(out[middle]) / rms(tone[middle])) <= -20.0

    def test_passes_qrs_band_without_lag(self, ecg_filter):
        t = np.arange(4000) / 1000.0
        tone = np.sin(2 * np.pi * 20.0 * t)
        out = apply_filter(tone, ecg_filter)
        middle = slice(1000, 3000)
        assert abs(20 * np.log10(rms(out[middle]) / rms(tone[middle]))) <= 3.0
        lags = range(-5, 6)
        scores = [np.dot(tone[middle], np.roll(out, -lag)[middle]) for lag in lags]
        assert abs(list(lags)[int(np.argmax(scores))]) <= 1

    def test_invalid_cutoffs(self):
        with pytest.raises(InvalidCutoff):
            design_filter(FilterSpec(kind="bandpass", low_cut_hz=5.0, high_cut_hz=40.0, sample_rate_hz=60.0))
        with pytest.raises(InvalidCutoff):
            design_filter(FilterSpec(kind="bandpass", low_cut_hz=40.0, high_cut_hz=5.0, sample_rate_hz=1000.0))
        with pytest.raises(InvalidCutoff):
            design_filter(FilterSpec(kind="lowpass", high_cut_hz=0.0, sample_rate_hz=1000.0))

    def test_too_short(self, ecg_filter):
        with pytest.raises(SignalTooShort):
            apply_filter(np.ones(12), ecg_filter)

    def test_lowpass_keeps_dc(self):
        coeffs = design_filter(FilterDefaults().ppg_spec(250.0))
        assert_allclose(apply_filter(np.full(500, 3.0), coeffs), 3.0, atol=1e-9)

    def test_lowpass_stop_band_at_125_hz(self):
        coeffs = design_filter(FilterDefaults().ppg_spec(125.0))
        t = np.arange(2500) / 125.0
        tone = np.sin(2 * np.pi * 50.0 * t)
        out = apply_filter(tone, coeffs)
        middle = slice(500, 2000)
        assert 20 * np.log10(rms(out[middle]) / rms(tone[middle])) <= -20.0

    def test_linearity(self, ecg_filter, rng):
        x, y = rng.normal(size=3000), rng.normal(size=3000)
        a, b = 2.5, -0.75
        combined = apply_filter(a * x + b * y, ecg_filter)
        separate = a * apply_filter(x, ecg_filter) + b * apply_filter(y, ecg_filter)
        assert_allclose(combined, separate, rtol=1e-6, atol=1e-9 * np.max(np.abs(separate)))


class TestBeatDetection:
    def test_r_peaks_match_synthetic_beats(self, synthetic_record):
        filtered = preprocess_record(synthetic_record)
        peaks = detect_r_peaks(filtered.ecg, filtered.sample_rate_hz)
        truth = np.round(synthetic_beats(SynthSpec(seed=7, n_beats=40, noise_sd=1.0)).r_times_s * 250.0)
        assert abs(len(peaks) - len(truth)) <= 1
        assert max(np.min(np.abs(truth - p)) for p in peaks) <= 3

    def test_landmarks_ordered_within_cycles(self, synthetic_record):
        filtered = preprocess_record(synthetic_record)
        annotation = detect_beats(filtered.ecg, filtered.ppg, filtered.sample_rate_hz)
        assert annotation.n_cycles >= 30
        starts, ends = annotation.cycles[:, 0], annotation.cycles[:, 1]
        assert np.all(starts <= annotation.ppg_feet)
        assert np.all(annotation.ppg_feet <= annotation.ppg_max_slopes)
        assert np.all(annotation.ppg_max_slopes < annotation.ppg_peaks)
        assert np.all(annotation.ppg_peaks < ends)
        assert annotation.n_cycles + annotation.excluded == len(annotation.r_peaks) - 1

    def test_hr_rule_excludes_cycles(self, synthetic_record):
        filtered = preprocess_record(synthetic_record)
        strict = FilterDefaults(hr_min_bpm=200.0, hr_max_bpm=220.0)
        annotation = detect_beats(filtered.ecg, filtered.ppg, filtered.sample_rate_hz, strict)
        assert annotation.n_cycles == 0

    def test_flat_ecg(self):
        with pytest.raises(NoBeatsFound):
            detect_beats(np.zeros(2000), np.zeros(2000), 250.0)

    def test_annotation_csv(self, tmp_path, synthetic_record):
        filtered = preprocess_record(synthetic_record)
        annotation = detect_beats(filtered.ecg, filtered.ppg, filtered.sample_rate_hz)
        save_annotation_csv(annotation, tmp_path / "beats.csv")
        frame = pd.read_csv(tmp_path / "beats.csv")
        assert list(frame.columns) == ["cycle_idx", "r_peak", "ppg_foot", "ppg_peak", "ppg_max_slope"]
        assert len(frame) == annotation.n_cycles

    def test_noise_free_record_yields_every_cycle(self):
        spec = SynthSpec(seed=4, n_beats=60, noise_sd=0.0)
        filtered = preprocess_record(generate_synthetic(spec))
        annotation = detect_beats(filtered.ecg, filtered.ppg, filtered.sample_rate_hz)
        assert len(annotation.r_peaks) - 1 in (59, 60)
        truth = synthetic_beats(spec).r_times_s
        times = annotation.r_peaks / filtered.sample_rate_hz
        assert max(np.min(np.abs(truth - t)) for t in times) <= 0.020

    @pytest.mark.parametrize("scenario,seed", [
        ("icu", 2), ("icu", 11), ("intraoperative", 1), ("intraoperative", 9), ("multi_states", 3),
    ])
    def test_feet_track_pulse_arrival(self, scenario, seed):
        spec = SynthSpec.for_scenario(scenario, seed=seed, n_beats=60)
        beats = synthetic_beats(spec)
        filtered = preprocess_record(generate_synthetic(spec))
        fs = filtered.sample_rate_hz
        annotation = detect_beats(filtered.ecg, filtered.ppg, fs)
        assert annotation.n_cycles >= 50

        starts = annotation.cycles[:, 0]
        nearest = np.array([int(np.argmin(np.abs(beats.r_times_s * fs - s))) for s in starts])
        assert np.max(np.abs(starts / fs - beats.r_times_s[nearest])) <= 0.020
        measured = (annotation.ppg_feet - starts) * 1000.0 / fs
        assert np.max(np.abs(measured - beats.pat_ms[nearest])) <= 20.0

    def test_constant_arrival_time_at_125_hz(self):
        spec = SynthSpec(seed=5, n_beats=60, hr_drift=0.0, noise_sd=1.5, sample_rate_hz=125.0)
        filtered = preprocess_record(generate_synthetic(spec))
        annotation = detect_beats(filtered.ecg, filtered.ppg, filtered.sample_rate_hz)
        measured = (annotation.ppg_feet - annotation.cycles[:, 0]) * 1000.0 / filtered.sample_rate_hz
        assert annotation.n_cycles >= 50
        assert np.all((measured >= 180.0) & (measured <= 220.0))

    def test_onset_fraction_bounds_foot(self, synthetic_record):
        filtered = preprocess_record(synthetic_record)
        fs, ppg = filtered.sample_rate_hz, filtered.ppg
        plain = detect_beats(filtered.ecg, ppg, fs, FilterDefaults(ppg_onset_frac=0.0))
        for (start, _), foot, peak in zip(plain.cycles, plain.ppg_feet, plain.ppg_peaks):
            assert foot == start + int(np.argmin(ppg[start : peak + 1]))

        refined = detect_beats(filtered.ecg, ppg, fs)
        assert_array_equal(refined.cycle_index, plain.cycle_index)
        assert np.all(refined.ppg_feet >= plain.ppg_feet)
        amplitude = ppg[refined.ppg_peaks] - ppg[plain.ppg_feet]
        assert np.all(ppg[refined.ppg_feet] <= ppg[plain.ppg_feet] + 0.02 * amplitude + 1e-12)
