"""Tests de la configuration JSON et des surcharges d'environnement"""
import json

import pytest

from app.core.errors import ConfigurationError
from app.core.networks import ModelConfig
from app.data.images import TissueTask
from app.utils.config import (
    CONFIG_VERSION, ENV_LOG_LEVEL, ENV_OUTPUT_ROOT, ENV_REGISTRY, SNAPSHOT_NAME, RunConfig, SplitConfig,
    load_config, log_level, write_snapshot
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in (ENV_OUTPUT_ROOT, ENV_REGISTRY, ENV_LOG_LEVEL):
        monkeypatch.delenv(name, raising=False)


def write_json(path, data):
    path.write_text(json.dumps(data), encoding='utf-8')
    return path


class TestRunConfig:

    def test_defaults(self):
        config = RunConfig()
        assert config.tissue_task is TissueTask.FIVE_TISSUE
        assert config.model.num_classes == 6
        assert config.hyperparams.seed == config.seed == 0
        assert config.split.ratios == (70.0, 10.0, 20.0)

    def test_round_trip(self):
        config = RunConfig(experiment='rt', seed=4, model=ModelConfig.from_preset('tiny', input_size=32))
        data = json.loads(json.dumps(config.to_dict()))
        assert data['config_version'] == CONFIG_VERSION
        assert 'seed' not in data['hyperparams']
        assert RunConfig.from_dict(data) == config

    def test_top_level_seed_wins(self):
        config = RunConfig.from_dict({'seed': 9, 'hyperparams': {'seed': 2, 'max_epochs': 4}})
        assert config.hyperparams.seed == 9
        assert config.hyperparams.max_epochs == 4

    @pytest.mark.parametrize("data, match", [
        ({'optimizer': 'sgd'}, "optimizer"),
        ({'corpus': {'n_patients': 3}}, "corpus"),
        ({'model': {'depth': 3}}, "model"),
        ({'config_version': 2}, "Version"),
        ({'task': 'three_tissue'}, "Tâche inconnue"),
        ({'task': 'four_tissue'}, "classes"),
    ])
    def test_invalid(self, data, match):
        with pytest.raises(ConfigurationError, match=match):
            RunConfig.from_dict(data)

    def test_reduced_task_with_matching_model(self):
        config = RunConfig.from_dict({'task': 'four_tissue', 'model': {'num_classes': 5}})
        assert config.tissue_task is TissueTask.FOUR_TISSUE

    def test_phantom_size_must_fit_the_network(self):
        with pytest.raises(ConfigurationError, match="non divisible"):
            RunConfig.from_dict({'phantom': {'height': 34, 'width': 34}})

    def test_fold_out_of_range(self):
        with pytest.raises(ConfigurationError):
            SplitConfig(k=5, fold=5)


class TestLoadConfig:

    def test_file_and_env(self, tmp_path, monkeypatch):
        path = write_json(tmp_path / 'run.json', {'experiment': 'env', 'paths': {'output_dir': 'here'}})
        assert load_config(path, env_file=str(tmp_path / 'none.env')).paths.output_dir == 'here'
        monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path / 'out'))
        monkeypatch.setenv(ENV_REGISTRY, str(tmp_path / 'reg.json'))
        config = load_config(path, env_file=str(tmp_path / 'none.env'))
        assert config.output_dir == tmp_path / 'out' / 'env'
        assert config.paths.registry == str(tmp_path / 'reg.json')

    def test_dotenv_file(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_REGISTRY, "unset")
        monkeypatch.delenv(ENV_REGISTRY)
        env = tmp_path / '.env'
        env.write_text(f"{ENV_REGISTRY}={tmp_path / 'from_dotenv.json'}\n", encoding='utf-8')
        config = load_config(None, env_file=str(env))
        assert config.paths.registry == str(tmp_path / 'from_dotenv.json')

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text("{not json", encoding='utf-8')
        with pytest.raises(ConfigurationError, match="JSON invalide"):
            load_config(path, env_file=str(tmp_path / 'none.env'))

    def test_log_level(self, monkeypatch):
        assert log_level() == 'INFO'
        monkeypatch.setenv(ENV_LOG_LEVEL, 'debug')
        assert log_level() == 'DEBUG'
        assert log_level('warning') == 'WARNING'


def test_snapshot(tmp_path):
    config = RunConfig(experiment='snap')
    path = write_snapshot(config, tmp_path / 'run')
    assert path.name == SNAPSHOT_NAME
    assert RunConfig.from_dict(json.loads(path.read_text(encoding='utf-8'))) == config
