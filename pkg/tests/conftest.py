import numpy as np
import pytest

from switchid.dataset import dataset_to_csv
from switchid.em import ModelTemplate
from switchid.model import NetParams, NetSpec, Submodel, SwitchingModel, TransitionMatrix
from switchid.model_format import save_model
from switchid.simulate import BenchmarkSpec, make_rng, simulate_benchmark, simulate_model


def linear_submodel(a, b, c, d):
    """Scalar linear submodel ``x+ = a x + b u``, ``y = c x + d u``"""
    spec = NetSpec(2, (1,), ("identity",), 1)
    return Submodel(
        spec,
        NetParams((np.array([[a, b]]),), (np.zeros(1),)),
        spec,
        NetParams((np.array([[c, d]]),), (np.zeros(1),)),
    )


@pytest.fixture(autouse=True)
def output_dir_env(tmp_path, monkeypatch):
    """Keep default outputs of the unit tests inside the test directory"""
    monkeypatch.setenv("SWITCHID_OUTPUT_DIR", str(tmp_path / "default-output"))


@pytest.fixture
def linear_model():
    """Two scalar linear modes with equal |A| and |C|, so every mode path has the same S"""
    return SwitchingModel(
        (linear_submodel(0.8, 1.0, 1.0, 0.5), linear_submodel(-0.8, 0.3, -1.0, 0.5)),
        TransitionMatrix(np.array([[0.9, 0.1], [0.1, 0.9]]), np.array([0.5, 0.5])),
        1e-3 * np.eye(1),
        1e-3 * np.eye(1),
        np.zeros(1),
    )


@pytest.fixture
def linear_dataset(linear_model):
    """Noise-free data of the linear model with a few mode switches"""
    modes = np.array([0] * 10 + [1] * 8 + [0] * 12)
    return simulate_model(linear_model, len(modes), seed=5, noise=False, modes=modes)


@pytest.fixture
def single_mode_dataset(linear_model):
    return simulate_model(linear_model, 20, seed=2, noise=False, modes=np.zeros(20, dtype=int))


@pytest.fixture
def small_model():
    """Random 2-mode arctan model with a non-uniform transition matrix"""
    template = ModelTemplate(n_x=2, state_layers=(3,), output_layers=(3,), weight_std=0.5)
    model = template.build(2, 1, 1, make_rng(3))
    return model.with_transition(
        TransitionMatrix(np.array([[0.9, 0.2], [0.1, 0.8]]), np.array([0.6, 0.4]))
    )


@pytest.fixture
def benchmark_dataset():
    return simulate_benchmark(BenchmarkSpec(T=40, noise_var=1e-3, seed=1))


@pytest.fixture
def path_dataset(tmp_path, linear_dataset):
    """Linear model data written as dataset CSV"""
    file_path = tmp_path / "data" / "linear.csv"
    dataset_to_csv(linear_dataset, file_path)
    return file_path


@pytest.fixture
def path_model(tmp_path, linear_model):
    file_path = tmp_path / "models" / "linear.json"
    save_model(linear_model, file_path)
    return file_path
