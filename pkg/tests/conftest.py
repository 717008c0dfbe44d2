import numpy as np
import pytest

from features import N_FEATURES, CycleFeatureSeries
from tabnet import TabNetConfig
from waveforms import SynthSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    """One-layer network small enough for finite-difference checks."""
    return TabNetConfig(input_length=12, forecast_length=4, n_features=3, channels=4, d_model=8, n_layers=1,
                        top_k=2, inception_kernels=(1, 3), batch_size=2, epochs=2, seed=3)


@pytest.fixture
def synthetic_record():
    return generate_synthetic(SynthSpec(seed=7, n_beats=40, noise_sd=1.0), subject_id="fixture")


def make_series(n_cycles: int, subject_id: str = "series", seed: int = 0) -> CycleFeatureSeries:
    """Smooth feature table whose SBP follows a slow sinusoid plus its first feature."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_cycles)
    wave = np.sin(2 * np.pi * t / 24.0)
    features = rng.normal(0.0, 1.0, size=(n_cycles, N_FEATURES)) * 0.1
    features[:, 0] = 200.0 - 10.0 * wave
    sbp = 120.0 + 8.0 * wave + rng.normal(0.0, 0.5, size=n_cycles)
    dbp = 80.0 + 0.6 * (sbp - 120.0)
    return CycleFeatureSeries(subject_id=subject_id, features=features, sbp=sbp, dbp=dbp,
                              cycle_times_s=t * 0.8)


@pytest.fixture
def feature_series():
    return make_series(120, subject_id="subject-a")
