import json
from pathlib import Path

import pytest

from switchid.config import ConfigError, RunConfig, default_output_dir


@pytest.fixture
def path_config(tmp_path):
    file_path = tmp_path / "config.json"
    file_path.write_text(
        json.dumps({"k": 3, "t_w": 2, "state_layers": [4, 4], "state_activations": ["tanh"] * 3})
    )
    return file_path


def test_defaults_are_valid():
    config = RunConfig().validate()
    assert (config.k, config.t_w, config.epochs, config.max_iterations) == (2, 3, 10, 10)


def test_from_file(path_config):
    config = RunConfig.from_file(path_config)
    assert config.k == 3
    assert config.state_layers == (4, 4)
    assert config.state_activations == ("tanh", "tanh", "tanh")
    config.validate()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(tmp_path / "absent.json")


@pytest.mark.parametrize("content", ["{k: 2}", "[1, 2]", '{"k": 2, "window": 3}'])
def test_invalid_file(tmp_path, content):
    file_path = tmp_path / "config.json"
    file_path.write_text(content)
    with pytest.raises(ConfigError):
        RunConfig.from_file(file_path)


def test_merged_ignores_none(path_config):
    config = RunConfig.from_file(path_config).merged(k=None, t_w=1, seed=None, epochs=5)
    assert (config.k, config.t_w, config.epochs, config.seed) == (3, 1, 5, 0)
    with pytest.raises(ConfigError):
        RunConfig().merged(window=3)


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"k": 0}, "k"),
        ({"k": True}, "k"),
        ({"workers": "2"}, "workers"),
        ({"t_w": 0}, "t_w"),
        ({"epochs": 0}, "epochs"),
        ({"max_iterations": 0}, "max_iterations"),
        ({"sigma_theta_decay": 1.5}, "sigma_theta_decay"),
        ({"state_activations": ("arctan", "softplus")}, "softplus"),
        ({"sigma1": [[1.0, 0.0], [0.0, 1.0]]}, "sigma1"),
    ],
)
def test_validate_names_field(overrides, field):
    with pytest.raises(ConfigError, match=field):
        RunConfig(**overrides).validate()


def test_matrix_noise():
    RunConfig(n_x=2, sigma1=[[1e-3, 0.0], [0.0, 2e-3]]).validate()


def test_derived_settings():
    config = RunConfig(t_w=2, epochs=4, seed=7, joseph=True, max_candidates=64)
    em_config = config.em_config()
    assert (em_config.t_w, em_config.seed, em_config.max_candidates) == (2, 7, 64)
    assert em_config.ekf.epochs == 4 and em_config.ekf.joseph
    assert not em_config.continue_on_cost_increase
    assert RunConfig(continue_on_cost_increase=True).em_config().continue_on_cost_increase
    assert config.window_config().t_w == 2
    template = config.template()
    assert template.n_x == 3 and template.state_layers == (6,)


def test_output_dir(tmp_path, monkeypatch):
    assert RunConfig().resolved_output_dir() == tmp_path / "default-output"
    assert RunConfig(output_dir="runs").resolved_output_dir() == Path("runs")
    monkeypatch.delenv("SWITCHID_OUTPUT_DIR")
    assert default_output_dir() == Path("switchid-output")


def test_model_path(tmp_path):
    assert RunConfig().resolved_model_path() == tmp_path / "default-output" / "model.json"
    assert RunConfig(output_dir="runs").resolved_model_path() == Path("runs") / "model.json"
    assert RunConfig(output_dir="runs", model="k2.json").resolved_model_path() == Path("k2.json")


def test_to_dict_round_trip():
    config = RunConfig(k=3, state_layers=(5, 2), sigma1=0.5)
    content = json.loads(json.dumps(config.to_dict()))
    assert content["state_layers"] == [5, 2]
    assert RunConfig.from_mapping(content) == config
