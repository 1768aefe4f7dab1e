"""Seeded simulation of switching systems

Every random draw comes from a ``numpy.random.Generator`` over the
counter-based ``Philox`` bit generator. A simulation seed is split with
``SeedSequence.spawn`` into independent streams for the modes, the inputs,
the process noise and the measurement noise, so fixing for instance the mode
sequence leaves the noise draws unchanged.
"""
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.linalg import cholesky

from switchid.dataset import Dataset
from switchid.model import (
    ModeSequence,
    StructuralError,
    SwitchingModel,
    TransitionMatrix,
    ValidationError,
)
from switchid.rnn import forward_output, forward_state

STREAMS = ("modes", "inputs", "process_noise", "measurement_noise")

BENCHMARK_NAME = "nonlinear2"
BENCHMARK_ALIASES = ("eq27",)
BENCHMARK_A = np.array(
    [
        [[0.8, 0.2, -0.1], [0.0, 0.9, 0.1], [0.1, -0.1, 0.7]],
        [[0.5, -0.2, -0.1], [0.0, 0.9, 0.1], [-0.1, -0.3, 0.8]],
    ]
)
BENCHMARK_B = np.array([[-1.0, 0.5, 1.0], [-0.5, 0.1, 0.5]])
BENCHMARK_C = np.array([[-1.0, 1.5, 0.5], [-0.1, -0.5, 0.8]])
BENCHMARK_D = np.array([0.1, -0.1])
BENCHMARK_OFFSET = -2.0
BENCHMARK_TRANSITION = TransitionMatrix(
    np.array([[0.98, 0.02], [0.02, 0.98]]), np.array([0.5, 0.5])
)


def make_rng(seed) -> np.random.Generator:
    """Generator over Philox, seeded by an int or a SeedSequence"""
    return np.random.Generator(np.random.Philox(seed))


def spawn_streams(seed) -> Dict[str, np.random.Generator]:
    """One independent generator per entry of ``STREAMS``"""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: make_rng(child) for name, child in zip(STREAMS, children)}


def spawn_seeds(seed, n: int) -> Sequence[int]:
    """``n`` independent integer seeds derived from ``seed``"""
    return [
        int(child.generate_state(1, dtype=np.uint64)[0])
        for child in np.random.SeedSequence(seed).spawn(n)
    ]


def uniform_inputs(rng: np.random.Generator, T: int, n_u: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(T, n_u))


def gaussian_inputs(rng: np.random.Generator, T: int, n_u: int) -> np.ndarray:
    return rng.standard_normal((T, n_u))


def binary_inputs(rng: np.random.Generator, T: int, n_u: int) -> np.ndarray:
    return rng.integers(0, 2, size=(T, n_u)).astype(float)


INPUT_LAWS: Dict[str, Callable[[np.random.Generator, int, int], np.ndarray]] = {
    "uniform": uniform_inputs,
    "gaussian": gaussian_inputs,
    "binary": binary_inputs,
}


def simulate_markov_modes(
    transition: TransitionMatrix,
    T: int,
    seed=None,
    rng: Optional[np.random.Generator] = None,
) -> ModeSequence:
    """Draw ``s_1 ~ pi0`` and ``s_t ~ pi[:, s_{t-1}]``

    Each step consumes one uniform draw, inverted through the cumulative
    distribution of the current column.
    """
    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}.")
    rng = rng if rng is not None else make_rng(seed)
    draws = rng.random(T)
    K = transition.K
    pi0_cdf = np.cumsum(transition.pi0)
    pi_cdf = np.cumsum(transition.pi, axis=0)
    modes = np.empty(T, dtype=int)
    modes[0] = min(int(np.searchsorted(pi0_cdf, draws[0], side="right")), K - 1)
    for t in range(1, T):
        column = pi_cdf[:, modes[t - 1]]
        modes[t] = min(int(np.searchsorted(column, draws[t], side="right")), K - 1)
    return ModeSequence(modes, K)


@dataclass(frozen=True)
class BenchmarkSpec:
    """Settings of the two-mode benchmark system

    Parameters
    ----------
    T : int
        Number of samples.
    noise_var : float
        Variance of the process and measurement noise, each ``noise_var * I``.
    seed : int
    x0 : tuple of float
        Initial state, zero by default.
    input_law : str
        Key of ``INPUT_LAWS``.
    """

    T: int = 1000
    noise_var: float = 1e-3
    seed: int = 0
    x0: tuple = (0.0, 0.0, 0.0)
    input_law: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if self.T < 1:
            raise ValidationError(f"T must be at least 1, got {self.T}.")
        if not self.noise_var >= 0:
            raise ValidationError(f"noise_var must be >= 0, got {self.noise_var}.")
        if len(self.x0) != 3:
            raise StructuralError("The benchmark state has 3 components.")
        if self.input_law not in INPUT_LAWS:
            raise ValidationError(
                f"Unknown input law '{self.input_law}', choose from {sorted(INPUT_LAWS)}."
            )

    def to_dict(self) -> dict:
        content = asdict(self)
        content["x0"] = list(self.x0)
        return content


def _resolve_modes(modes, streams, transition, T) -> np.ndarray:
    if modes is None:
        return simulate_markov_modes(transition, T, rng=streams["modes"]).modes
    modes = np.asarray(getattr(modes, "modes", modes), dtype=int)
    if modes.shape != (T,):
        raise StructuralError(f"Expected {T} modes, got {modes.shape}.")
    return modes


def _resolve_inputs(u, streams, law, T, n_u) -> np.ndarray:
    if u is None:
        return INPUT_LAWS[law](streams["inputs"], T, n_u)
    u = np.asarray(u, dtype=float).reshape(T, n_u)
    return u


def simulate_benchmark(spec: BenchmarkSpec, modes=None, u=None) -> Dataset:
    """Simulate the two-mode benchmark

    ``x(t+1) = A_s tanh(x(t)) + B_s u(t) + zeta`` and
    ``y(t) = C_s sin(x(t)) + D_s u(t) - 2 + xi`` with elementwise tanh and sin.

    Parameters
    ----------
    spec : BenchmarkSpec
    modes : ModeSequence or array-like, optional
        Overrides the simulated Markov mode sequence (0-based).
    u : array-like, optional
        Overrides the simulated inputs.

    Returns
    -------
    Dataset
        With ``true_modes`` and ``true_states``.
    """
    T = spec.T
    streams = spawn_streams(spec.seed)
    modes = _resolve_modes(modes, streams, BENCHMARK_TRANSITION, T)
    u = _resolve_inputs(u, streams, spec.input_law, T, 1)
    scale = np.sqrt(spec.noise_var)
    zeta = scale * streams["process_noise"].standard_normal((T, 3))
    xi = scale * streams["measurement_noise"].standard_normal(T)

    states = np.empty((T, 3))
    y = np.empty((T, 1))
    x = np.array(spec.x0)
    for t in range(T):
        s = modes[t]
        states[t] = x
        y[t, 0] = (
            BENCHMARK_C[s] @ np.sin(x) + BENCHMARK_D[s] * u[t, 0] + BENCHMARK_OFFSET + xi[t]
        )
        x = BENCHMARK_A[s] @ np.tanh(x) + BENCHMARK_B[s] * u[t, 0] + zeta[t]
    return Dataset(u, y, modes, states)


def simulate_model(
    model: SwitchingModel,
    T: int,
    seed=0,
    input_law: str = "uniform",
    x0=None,
    noise: bool = True,
    modes=None,
    u=None,
) -> Dataset:
    """Simulate a switching model through its own networks and noise covariances

    Parameters
    ----------
    model : SwitchingModel
    T : int
    seed : int
    input_law : str
        Key of ``INPUT_LAWS``, ignored when ``u`` is given.
    x0 : array-like, optional
        Initial state, ``model.x0`` by default.
    noise : bool
        Add process and measurement noise drawn from ``sigma1`` and ``sigma2``.
    modes, u : optional
        Override the simulated modes (0-based) and inputs.
    """
    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}.")
    if u is None and input_law not in INPUT_LAWS:
        raise ValidationError(f"Unknown input law '{input_law}'.")
    streams = spawn_streams(seed)
    modes = _resolve_modes(modes, streams, model.transition, T)
    if modes.size and modes.max() >= model.K:
        raise ValidationError(f"Mode labels must lie in 1..{model.K}.")
    u = _resolve_inputs(u, streams, input_law, T, model.n_u)
    zeta = streams["process_noise"].standard_normal((T, model.n_x))
    xi = streams["measurement_noise"].standard_normal((T, model.n_y))
    if noise:
        zeta = zeta @ cholesky(model.sigma1, lower=True).T
        xi = xi @ cholesky(model.sigma2, lower=True).T
    else:
        zeta = np.zeros_like(zeta)
        xi = np.zeros_like(xi)

    states = np.empty((T, model.n_x))
    y = np.empty((T, model.n_y))
    x = np.array(model.x0 if x0 is None else x0, dtype=float)
    for t in range(T):
        submodel = model.submodels[modes[t]]
        states[t] = x
        y[t] = forward_output(submodel.output_spec, submodel.output_params, x, u[t]) + xi[t]
        x = forward_state(submodel.state_spec, submodel.state_params, x, u[t]) + zeta[t]
    return Dataset(u, y, modes, states)


def benchmark_trajectories(
    seeds: Sequence[int], T: int, noise_var: float, x0_scale: float = 1.0
):
    """Benchmark datasets for several seeds, each from its own random initial state

    The initial state of seed ``s`` is drawn uniformly from
    ``[-x0_scale, x0_scale]^3`` by ``make_rng(s)``, a stream separate from the
    simulation streams of that seed.

    Yields
    ------
    seed : int
    dataset : Dataset
    """
    for seed in seeds:
        x0 = make_rng(seed).uniform(-x0_scale, x0_scale, size=3)
        yield seed, simulate_benchmark(BenchmarkSpec(T, noise_var, seed, tuple(x0)))
