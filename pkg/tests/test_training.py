import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from conftest import make_series
from errors import DivergedLoss, EmptyTestSet, InvalidSpec, TooFewCycles, TooFewWindows
from tabnet import TabNetConfig, TabNetModel
from training import (
    ExperimentSpec,
    PersonalizedTrainer,
    aami_verdict,
    build_report,
    chronological_split,
    clamp_forecast,
    evaluate,
    make_windows,
    prepare_experiment,
    split_sizes,
    train_personalized,
)


@pytest.fixture
def series_config():
    return TabNetConfig(input_length=12, forecast_length=4, d_model=8, n_layers=1, top_k=2,
                        inception_kernels=(1, 3), batch_size=4, epochs=2, lr=1e-3, seed=5)


@pytest.fixture
def short_spec():
    return ExperimentSpec(train_cycles=30, input_length=12)


class TestWindows:
    def test_counts_and_alignment(self, feature_series):
        windows = make_windows(feature_series, input_length=12, horizon=4)
        assert len(windows) == 120 - 12 - 4 + 1
        assert windows.features.shape == (105, 12, 38)
        assert_array_equal(windows.history[3], feature_series.sbp[3:15])
        assert_array_equal(windows.targets[3], feature_series.sbp[15:19])
        assert windows.horizon == 4

    def test_dbp_target(self, feature_series):
        windows = make_windows(feature_series, 12, 4, target="dbp")
        assert_array_equal(windows.targets[0], feature_series.dbp[12:16])

    def test_too_short(self):
        with pytest.raises(TooFewCycles):
            make_windows(make_series(15), 12, 4)

    def test_split_sizes(self):
        assert split_sizes(105) == (73, 10, 22)
        assert split_sizes(10) == (7, 1, 2)
        assert split_sizes(20) == (14, 2, 4)
        assert sum(split_sizes(61, (0.5, 0.25, 0.25))) == 61

    def test_chronological_split_is_contiguous(self, feature_series):
        train, val, test = chronological_split(make_windows(feature_series, 12, 4))
        assert (len(train), len(val), len(test)) == (73, 10, 22)
        assert train.starts[-1] + 1 == val.starts[0]
        assert val.starts[-1] + 1 == test.starts[0]

    def test_too_few_windows(self):
        windows = make_windows(make_series(24), 12, 4)
        assert len(windows) == 9
        with pytest.raises(TooFewWindows):
            chronological_split(windows)


class TestExperimentSpec:
    def test_segment_length(self):
        assert ExperimentSpec().segment_length() == 600
        assert ExperimentSpec(train_cycles=60).segment_length() == 86

    def test_invalid_split(self):
        with pytest.raises(ValidationError):
            ExperimentSpec(split=(0.5, 0.3, 0.3))
        with pytest.raises(ValidationError):
            ExperimentSpec(horizons=(5, 0))

    def test_train_cycles_shorter_than_window(self, series_config):
        with pytest.raises(InvalidSpec):
            ExperimentSpec(train_cycles=15, input_length=12).tabnet_config(series_config, 4)

    def test_tabnet_config_takes_lengths(self, series_config):
        config = ExperimentSpec(input_length=20).tabnet_config(series_config, 10)
        assert (config.input_length, config.forecast_length) == (20, 10)
        assert config.d_model == series_config.d_model

    def test_prepare_fits_scaler_on_training_rows(self, feature_series, series_config):
        spec = ExperimentSpec(train_cycles=70, input_length=12)
        prepared = prepare_experiment(feature_series, spec, series_config)
        assert (len(prepared.train), len(prepared.val), len(prepared.test)) == (59, 8, 18)
        assert_allclose(prepared.scaler.mean, feature_series.features[:70].mean(axis=0))

    def test_prepare_needs_full_segment(self, series_config):
        with pytest.raises(TooFewCycles):
            prepare_experiment(make_series(90), ExperimentSpec(train_cycles=70, input_length=12), series_config)


class TestReport:
    def test_metrics_match_direct_computation(self, rng):
        truth = rng.normal(120.0, 10.0, size=(7, 5))
        prediction = truth + rng.normal(1.0, 3.0, size=(7, 5))
        errors = (prediction - truth).ravel()
        report = build_report("s", truth, prediction)
        assert report.mae_mmHg == pytest.approx(sum(abs(e) for e in errors) / 35)
        assert report.me_mmHg == pytest.approx(sum(errors) / 35)
        mean = sum(errors) / 35
        assert report.sd_mmHg == pytest.approx((sum((e - mean) ** 2 for e in errors) / 34) ** 0.5)
        assert (report.n_windows, report.horizon) == (7, 5)

    def test_aami_thresholds(self):
        assert aami_verdict(5.0, 8.0)
        assert aami_verdict(-5.0, 0.0)
        assert not aami_verdict(5.0001, 1.0)
        assert not aami_verdict(-5.0001, 1.0)
        assert not aami_verdict(0.0, 8.0001)

    @pytest.mark.parametrize("offset, passes", [(4.999, True), (5.001, False), (-5.001, False)])
    def test_aami_on_constant_offset(self, offset, passes):
        truth = np.full((4, 3), 120.0)
        assert build_report("s", truth, truth + offset).aami_pass is passes

    def test_hand_computed_errors(self):
        report = build_report("s", [[120.0, 120.0]], [[122.0, 123.0]])
        assert (report.mae_mmHg, report.me_mmHg) == (2.5, 2.5)
        assert report.sd_mmHg == pytest.approx(0.5 ** 0.5)

    def test_perfect_forecast(self):
        report = build_report("s", [[118.0, 121.0, 119.0]], [[118.0, 121.0, 119.0]])
        assert (report.mae_mmHg, report.sd_mmHg, report.aami_pass) == (0.0, 0.0, True)

    def test_empty(self):
        with pytest.raises(EmptyTestSet):
            build_report("s", np.zeros((0, 3)), np.zeros((0, 3)))

    def test_series_frame(self):
        report = build_report("s", [[1.0, 2.0], [3.0, 4.0]], [[1.5, 2.5], [3.5, 4.5]])
        frame = report.series_frame()
        assert list(frame.columns) == ["window_idx", "step", "truth_mmHg", "pred_mmHg"]
        assert len(frame) == 4 and frame["step"].tolist() == [1, 2, 1, 2]

    def test_clamp(self):
        clamped, count = clamp_forecast(np.array([30.0, 100.0, 300.0, 260.0]))
        assert_array_equal(clamped, [40.0, 100.0, 260.0, 260.0])
        assert count == 2


class TestTrainer:
    def test_same_seed_same_weights(self, feature_series, series_config, short_spec):
        first, history_a = train_personalized(feature_series, short_spec, series_config)
        second, history_b = train_personalized(feature_series, short_spec, series_config)
        assert history_a.train_loss == history_b.train_loss
        for name, value in first.state_dict().items():
            assert_array_equal(second.state_dict()[name], value)

    def test_restores_best_validation_epoch(self, feature_series, series_config, short_spec):
        prepared = prepare_experiment(feature_series, short_spec, series_config)
        model = TabNetModel(prepared.config, scaler=prepared.scaler)
        trainer = PersonalizedTrainer(prepared.config, "s", epochs=4)
        val_inputs = prepared.val.model_inputs(model)
        history = trainer.fit(model, prepared.train.model_inputs(model), prepared.train.targets,
                              val_inputs, prepared.val.targets)
        assert history.epochs == 4
        assert history.best_epoch == int(np.argmin(history.val_loss)) + 1
        assert trainer.validation_loss(model, val_inputs, prepared.val.targets) == pytest.approx(
            min(history.val_loss), rel=1e-6)

    def test_loss_decreases_on_small_set(self, feature_series, series_config):
        config = series_config.model_copy(update={"lr": 5e-3, "batch_size": 8})
        model = TabNetModel(config)
        windows = make_windows(feature_series, 12, 4).take(0, 8)
        history = PersonalizedTrainer(config, "s", epochs=60).fit(model, windows.model_inputs(model), windows.targets)
        assert history.train_loss[-1] < 0.5 * history.train_loss[0]

    def test_non_finite_loss(self, feature_series, series_config):
        model = TabNetModel(series_config)
        windows = make_windows(feature_series, 12, 4).take(0, 4)
        targets = windows.targets.copy()
        targets[:] = np.nan
        with pytest.raises(DivergedLoss) as info:
            PersonalizedTrainer(series_config, "s").fit(model, windows.model_inputs(model), targets)
        assert (info.value.epoch, info.value.batch) == (1, 1)

    def test_no_training_windows(self, series_config):
        model = TabNetModel(series_config)
        with pytest.raises(TooFewWindows):
            PersonalizedTrainer(series_config).fit(model, np.zeros((0, 12, 39)), np.zeros((0, 4)))

    def test_evaluate_report(self, feature_series, series_config, short_spec):
        prepared = prepare_experiment(feature_series, short_spec, series_config)
        model = TabNetModel(prepared.config, scaler=prepared.scaler)
        report = evaluate(model, prepared.test, "subject-a", train_cycles=30)
        assert report.n_windows == len(prepared.test)
        assert report.horizon == 4 and report.model == "tabnet" and report.train_cycles == 30
        assert np.array(report.prediction).shape == prepared.test.targets.shape
