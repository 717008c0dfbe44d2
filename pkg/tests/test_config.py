import json

import pytest

from config import CONFIG_ENV, RunConfig, effective_config, load_config, read_config_file, seed_overrides
from errors import InvalidSpec, UnknownConfigKey

CONFIG_TEXT = """
[model]
d_model = 16
inception_kernels = [1, 3]

[experiment]
target = dbp
horizons = [5, 10]

[grid]
search = {"lr": [0.001, 0.0001]}
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG_TEXT)
    return path


class TestReadConfigFile:
    def test_values_are_json_literals_or_strings(self, config_file):
        data = read_config_file(config_file)
        assert data["model"] == {"d_model": 16, "inception_kernels": [1, 3]}
        assert data["experiment"]["target"] == "dbp"
        assert data["grid"]["search"] == {"lr": [0.001, 0.0001]}

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[optimizer]\nlr = 0.1\n")
        with pytest.raises(UnknownConfigKey):
            read_config_file(path)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nwidth = 3\n")
        with pytest.raises(UnknownConfigKey):
            read_config_file(path)

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("d_model = 3\n")
        with pytest.raises(InvalidSpec):
            read_config_file(path)


class TestLoadConfig:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv(CONFIG_ENV, raising=False)
        config = load_config()
        assert config == RunConfig()
        assert config.experiment.train_cycles == 420
        assert config.model.lr == pytest.approx(1e-4)

    def test_file_values(self, config_file):
        config = load_config(str(config_file))
        assert config.model.d_model == 16
        assert config.model.inception_kernels == (1, 3)
        assert config.experiment.horizons == (5, 10)
        assert config.model.n_layers == 2

    def test_flags_override_file(self, config_file):
        config = load_config(str(config_file), {"model": {"d_model": 24, "epochs": None}})
        assert config.model.d_model == 24
        assert config.model.epochs == 10

    def test_path_from_environment(self, monkeypatch, config_file):
        monkeypatch.setenv(CONFIG_ENV, str(config_file))
        assert load_config().experiment.target == "dbp"

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidSpec):
            load_config(str(tmp_path / "absent.ini"))

    def test_invalid_value_names_location(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nd_model = 2\n")
        with pytest.raises(InvalidSpec, match="model.d_model"):
            load_config(str(path))

    def test_unknown_override(self, monkeypatch):
        monkeypatch.delenv(CONFIG_ENV, raising=False)
        with pytest.raises(UnknownConfigKey):
            load_config(overrides={"model": {"width": 3}})

    def test_seed_reaches_every_section(self, monkeypatch):
        monkeypatch.delenv(CONFIG_ENV, raising=False)
        config = load_config(overrides=seed_overrides(17))
        assert (config.synth.seed, config.experiment.seed, config.model.seed) == (17, 17, 17)
        assert seed_overrides(None) == {}

    def test_effective_config_is_json(self, config_file):
        resolved = effective_config(load_config(str(config_file)))
        assert json.loads(json.dumps(resolved))["model"]["d_model"] == 16
        assert set(resolved) == {"synth", "filters", "features", "model", "experiment", "grid"}
