import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from switchid.dataset import Dataset
from switchid.ekf import AugmentedBelief, predict
from switchid.em import ModelTemplate
from switchid.model import (
    NetParams,
    NetSpec,
    Submodel,
    SwitchingModel,
    TransitionMatrix,
    ValidationError,
)
from switchid.modes import (
    CandidateLimitError,
    WindowConfig,
    exhaustive_estimate,
    initial_mode,
    moving_window_estimate,
    moving_window_trace,
    sequence_cost,
    sequence_terms,
    step_nll,
    window_decode,
)
from switchid.simulate import (
    BENCHMARK_A,
    BENCHMARK_B,
    BENCHMARK_C,
    BENCHMARK_D,
    BENCHMARK_OFFSET,
    BENCHMARK_TRANSITION,
    BenchmarkSpec,
    make_rng,
    simulate_benchmark,
    simulate_model,
)

from conftest import linear_submodel


def _constant_output_model(b=0.3):
    """Zero-weight output net with bias ``b``, so S = sigma2 = 1"""
    sub = linear_submodel(0.5, 0.0, 0.0, 0.0)
    output_params = NetParams(sub.output_params.weights, (np.array([b]),))
    return SwitchingModel(
        (replace(sub, output_params=output_params),),
        TransitionMatrix.uniform(1),
        np.eye(1),
        np.eye(1),
        np.zeros(1),
    )


def _random_problem(seed, T, K=2):
    rng = make_rng(seed)
    template = ModelTemplate(n_x=2, state_layers=(3,), output_layers=(3,), weight_std=0.8)
    model = template.build(K, 1, 1, rng)
    stay = float(rng.uniform(0.6, 0.95))
    pi = np.full((K, K), (1 - stay) / (K - 1))
    np.fill_diagonal(pi, stay)
    model = model.with_transition(TransitionMatrix(pi, np.full(K, 1.0 / K)))
    data = simulate_model(model, T, seed=seed + 1)
    return model, data


def _naive_window_cost(model, data, belief, t, prev_mode, path):
    """Cost of one window candidate, filtering step by step"""
    terms, prior, previous = [], belief, prev_mode
    for depth, mode in enumerate(path):
        cost, posterior = step_nll(model, mode, prior, data.u[t + depth], data.y[t + depth])
        terms += [cost, -math.log(model.transition.pi[mode, previous])]
        prior = predict(posterior, model, mode, data.u[t + depth])
        previous = mode
    return math.fsum(terms)


def _linearized_benchmark():
    """Benchmark maps with the state nonlinearity dropped, exact at ``x = 0``"""
    state_spec = NetSpec(4, (3,), ("identity",), 3)
    output_spec = NetSpec(4, (1,), ("identity",), 1)
    submodels = [
        Submodel(
            state_spec,
            NetParams((np.column_stack([BENCHMARK_A[k], BENCHMARK_B[k]]),), (np.zeros(3),)),
            output_spec,
            NetParams(
                (np.append(BENCHMARK_C[k], BENCHMARK_D[k])[None, :],),
                (np.array([BENCHMARK_OFFSET]),),
            ),
        )
        for k in range(2)
    ]
    return SwitchingModel(
        submodels, BENCHMARK_TRANSITION, 1e-3 * np.eye(3), 1e-3 * np.eye(1), np.zeros(3)
    )


def _shifted_step_nll(shift):
    def shifted(*args, **kwargs):
        cost, posterior = step_nll(*args, **kwargs)
        return cost + shift, posterior

    return shifted


class TestStepNll:
    def test_zero_innovation(self):
        model = _constant_output_model(0.3)
        cost, _ = step_nll(model, 0, AugmentedBelief.state_only(model), [0.0], [0.3])
        assert cost == 0.0

    def test_unit_innovation(self):
        model = _constant_output_model(0.3)
        cost, _ = step_nll(model, 0, AugmentedBelief.state_only(model), [0.0], [1.3])
        assert cost == pytest.approx(0.5, abs=1e-15)

    def test_missing_output(self, linear_model):
        belief = AugmentedBelief.state_only(linear_model)
        cost, posterior = step_nll(linear_model, 1, belief, [0.5], [np.nan])
        assert cost == 0.0
        assert posterior is belief

    def test_true_path_is_cheaper(self, linear_model, linear_dataset):
        true_cost = sequence_cost(linear_model, linear_dataset, linear_dataset.true_modes)
        for constant in range(2):
            modes = np.full(len(linear_dataset), constant)
            assert true_cost < sequence_cost(linear_model, linear_dataset, modes)

    def test_sequence_cost_sums_terms(self, small_model, benchmark_dataset):
        modes = np.arange(len(benchmark_dataset)) % 2
        steps, transitions = sequence_terms(small_model, benchmark_dataset, modes)
        assert sequence_cost(small_model, benchmark_dataset, modes) == math.fsum(
            list(steps) + list(transitions)
        )
        assert transitions[0] == pytest.approx(-math.log(0.6))
        assert transitions[1] == pytest.approx(-math.log(0.1))

    def test_sequence_length_mismatch(self, small_model, benchmark_dataset):
        with pytest.raises(ValidationError):
            sequence_cost(small_model, benchmark_dataset, np.zeros(3, dtype=int))


class TestWindowConfig:
    def test_window_must_be_positive(self):
        with pytest.raises(ValidationError):
            WindowConfig(0)

    def test_check(self):
        WindowConfig(3).check(4, 2)
        with pytest.raises(ValidationError):
            WindowConfig(3).check(3, 2)
        with pytest.raises(ValidationError):
            WindowConfig(1).check(1, 2)
        with pytest.raises(CandidateLimitError):
            WindowConfig(4, max_candidates=80).check(10, 3)


class TestInitialMode:
    def test_tie_goes_to_first_mode(self, linear_model, linear_dataset):
        model = linear_model.with_submodels([linear_model.submodels[1]] * 2)
        mode, scores = initial_mode(model, linear_dataset)
        assert mode == 0
        assert scores[0] == scores[1]

    @pytest.mark.parametrize("pi0, expected", [([1.0, 0.0], 0), ([0.0, 1.0], 1)])
    def test_degenerate_prior(self, linear_model, linear_dataset, pi0, expected):
        model = linear_model.with_transition(
            TransitionMatrix(linear_model.transition.pi, np.array(pi0))
        )
        assert initial_mode(model, linear_dataset)[0] == expected

    @pytest.mark.parametrize("start", [0, 1])
    def test_benchmark_start_mode(self, start):
        model = _linearized_benchmark()
        data = simulate_benchmark(
            BenchmarkSpec(5, 1e-3, seed=11), modes=np.full(5, start), u=np.ones((5, 1))
        )
        p0_state = 1e-2
        mode, scores = initial_mode(model, data, p0_state=p0_state)
        expected = []
        for k in range(2):
            S = p0_state * BENCHMARK_C[k] @ BENCHMARK_C[k] + 1e-3
            e = data.y[0, 0] - (BENCHMARK_D[k] * data.u[0, 0] + BENCHMARK_OFFSET)
            expected.append(0.5 * e**2 / S + 0.5 * math.log(S) - math.log(0.5))
        np.testing.assert_allclose(scores, expected, rtol=1e-10)
        assert mode == start == int(np.argmin(expected))


class TestWindowDecode:
    @pytest.mark.parametrize("t_w", [1, 2, 3])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, seed, t_w):
        model, data = _random_problem(seed, 8)
        belief = AugmentedBelief.state_only(model)
        result = window_decode(model, data, belief, 2, 1, t_w, keep_candidates=True)
        costs = {
            path: _naive_window_cost(model, data, belief, 2, 1, path)
            for path in itertools.product(range(2), repeat=t_w)
        }
        assert result.candidates == 2**t_w
        assert result.candidate_costs == costs
        assert result.sequence == min(costs, key=lambda path: (costs[path], path))
        assert all(result.cost <= cost for cost in costs.values())

    def test_greedy_window(self, small_model, benchmark_dataset):
        data = benchmark_dataset
        belief = AugmentedBelief.state_only(small_model)
        result = window_decode(small_model, data, belief, 5, 1, 1)
        scores = [
            step_nll(small_model, k, belief, data.u[5], data.y[5])[0]
            - small_model.transition.log_pi[k, 1]
            for k in range(2)
        ]
        assert result.sequence == (int(np.argmin(scores)),)

    def test_candidate_limit(self, small_model, benchmark_dataset):
        belief = AugmentedBelief.state_only(small_model)
        with pytest.raises(CandidateLimitError):
            window_decode(small_model, benchmark_dataset, belief, 0, 0, 3, max_candidates=7)

    def test_window_past_end(self, small_model, benchmark_dataset):
        belief = AugmentedBelief.state_only(small_model)
        with pytest.raises(ValidationError):
            window_decode(small_model, benchmark_dataset, belief, 39, 0, 2)


class TestMovingWindow:
    @pytest.mark.parametrize("seed", range(20))
    def test_full_window_equals_exhaustive(self, seed):
        T = 3 + seed % 6
        model, data = _random_problem(seed, T)
        modes, _ = moving_window_estimate(model, data, WindowConfig(T - 1))
        assert modes == exhaustive_estimate(model, data)

    @pytest.mark.parametrize("T", [50, 100, 200])
    @pytest.mark.parametrize("t_w", [1, 2, 3])
    @pytest.mark.parametrize("K", [2, 3])
    def test_candidate_count(self, linear_model, T, t_w, K):
        rng = make_rng(T + t_w + K)
        submodels = [linear_model.submodels[k % 2] for k in range(K)]
        model = SwitchingModel(
            submodels, TransitionMatrix.uniform(K), np.eye(1), np.eye(1), np.zeros(1)
        )
        data = Dataset(rng.uniform(size=(T, 1)), rng.normal(size=(T, 1)))
        _, candidates = moving_window_estimate(model, data, WindowConfig(t_w))
        assert candidates == (T - t_w) * K**t_w + K

    def test_single_mode(self, linear_model, single_mode_dataset):
        model = SwitchingModel(
            linear_model.submodels[:1], TransitionMatrix.uniform(1), np.eye(1), np.eye(1), np.zeros(1)
        )
        trace = moving_window_trace(model, single_mode_dataset, WindowConfig(3))
        assert not trace.modes.modes.any()
        assert not trace.transition_costs.any()
        assert trace.cost == math.fsum(trace.step_costs)

    def test_noiseless_single_mode_data(self, linear_model, single_mode_dataset):
        modes, _ = moving_window_estimate(linear_model, single_mode_dataset, WindowConfig(3))
        assert not modes.modes.any()

    def test_decodes_switching_data(self, linear_model, linear_dataset):
        modes, _ = moving_window_estimate(linear_model, linear_dataset, WindowConfig(3))
        assert modes.changes(linear_dataset.true_mode_sequence(2)) <= 2

    def test_identical_submodels_stay_constant(self, linear_model, linear_dataset):
        model = linear_model.with_submodels([linear_model.submodels[1]] * 2)
        modes, _ = moving_window_estimate(model, linear_dataset, WindowConfig(2))
        assert not modes.modes.any()

    def test_labels_and_length(self, small_model, benchmark_dataset):
        modes, _ = moving_window_estimate(small_model, benchmark_dataset, WindowConfig(2))
        assert len(modes) == len(benchmark_dataset)
        assert set(modes.labels.tolist()) <= {1, 2}

    def test_window_longer_than_data(self, small_model, benchmark_dataset):
        with pytest.raises(ValidationError):
            moving_window_estimate(small_model, benchmark_dataset, WindowConfig(40))

    def test_missing_outputs_follow_transitions(self, linear_model, linear_dataset):
        y = np.array(linear_dataset.y)
        y[12:15] = np.nan
        data = Dataset(linear_dataset.u, y)
        modes, _ = moving_window_estimate(linear_model, data, WindowConfig(2))
        assert len(modes) == len(data)


class TestExhaustive:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_independent_enumeration(self, seed):
        model, data = _random_problem(seed, 6)
        costs = {
            path: sequence_cost(model, data, path)
            for path in itertools.product(range(2), repeat=6)
        }
        best = min(costs, key=lambda path: (costs[path], path))
        assert tuple(exhaustive_estimate(model, data, anchor_initial=False).modes) == best

    @pytest.mark.parametrize("seed", range(5))
    def test_free_initial_mode_is_never_worse(self, seed):
        model, data = _random_problem(seed, 6)
        anchored = exhaustive_estimate(model, data)
        free = exhaustive_estimate(model, data, anchor_initial=False)
        assert sequence_cost(model, data, free) <= sequence_cost(model, data, anchored)

    def test_single_sample(self, small_model, benchmark_dataset):
        data = Dataset(benchmark_dataset.u[:1], benchmark_dataset.y[:1])
        modes = exhaustive_estimate(small_model, data)
        assert modes.modes[0] == initial_mode(small_model, data)[0]

    def test_candidate_limit(self, small_model, benchmark_dataset):
        with pytest.raises(CandidateLimitError):
            exhaustive_estimate(small_model, benchmark_dataset)


class TestConstantShift:
    @pytest.mark.parametrize("shift", [-3.5, 7.25])
    @pytest.mark.parametrize("seed", range(3))
    def test_decoders_ignore_constant_step_offset(self, monkeypatch, seed, shift):
        model, data = _random_problem(seed, 6)
        reference = (
            initial_mode(model, data)[0],
            moving_window_estimate(model, data, WindowConfig(2)),
            exhaustive_estimate(model, data).modes,
            exhaustive_estimate(model, data, anchor_initial=False).modes,
        )
        monkeypatch.setattr("switchid.modes.step_nll", _shifted_step_nll(shift))
        assert initial_mode(model, data)[0] == reference[0]
        modes, candidates = moving_window_estimate(model, data, WindowConfig(2))
        np.testing.assert_array_equal(modes.modes, reference[1][0].modes)
        assert candidates == reference[1][1]
        np.testing.assert_array_equal(exhaustive_estimate(model, data).modes, reference[2])
        np.testing.assert_array_equal(
            exhaustive_estimate(model, data, anchor_initial=False).modes, reference[3]
        )
