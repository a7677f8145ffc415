import json

import pytest

from config import CONFIG_ENV, JOBS_ENV, PipelineConfig, config_hash, load_config
from errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    monkeypatch.delenv(JOBS_ENV, raising=False)


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config.n_trees == 1000
        assert config.max_features == 7
        assert config.window_duration_s == 30.0
        assert config.hmm_epsilon == 1e-6
        assert config.forest_config().seed == 42
        assert config.nonwear_rule().min_duration_s == 5400.0

    def test_upper_case_file_keys(self, tmp_path):
        (tmp_path / "config.json").write_text(json.dumps({"N_TREES": 50, "SEED": 3, "SUBGROUPS": ["sex"]}))
        config = load_config(str(tmp_path / "config.json"))
        assert config.n_trees == 50
        assert config.forest_config().seed == 3
        assert config.subgroups == ["sex"]

    def test_env_path_and_overrides(self, tmp_path, monkeypatch):
        (tmp_path / "c.json").write_text(json.dumps({"N_TREES": 50, "SEED": 3}))
        monkeypatch.setenv(CONFIG_ENV, str(tmp_path / "c.json"))
        config = load_config(overrides={"seed": 9, "jobs": None})
        assert config.n_trees == 50
        assert config.seed == 9
        assert config.jobs == 1

    def test_jobs_from_env(self, monkeypatch):
        monkeypatch.setenv(JOBS_ENV, "3")
        assert load_config().jobs == 3

    @pytest.mark.parametrize("content", [
        "{not json",
        json.dumps({"N_TREES": 0}),
        json.dumps({"UNKNOWN_KEY": 1}),
        json.dumps({"NONWEAR_MIN_DURATION_S": 5, "NONWEAR_WINDOW_S": 10}),
        json.dumps(["N_TREES"]),
    ])
    def test_invalid(self, tmp_path, content):
        (tmp_path / "config.json").write_text(content)
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "config.json"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))


class TestPipelineConfig:
    def test_paths_default_to_output_dir(self, tmp_path):
        config = PipelineConfig(output_dir=str(tmp_path))
        assert config.recordings_path == tmp_path / "recordings"
        assert config.label_mapping_path == tmp_path / "label_mapping.csv"

    def test_hash_tracks_values(self):
        assert config_hash(PipelineConfig()) == config_hash(PipelineConfig())
        assert config_hash(PipelineConfig()) != config_hash(PipelineConfig(seed=1))

    def test_json_dict_round_trip(self):
        config = PipelineConfig(n_trees=12, target_rate_hz=50.0)
        assert PipelineConfig.model_validate(config.to_json_dict()) == config
