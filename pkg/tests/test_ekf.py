from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import inv

from switchid.dataset import Dataset
from switchid.ekf import (
    AugmentedBelief,
    EkfConfig,
    FilterDivergenceError,
    filter_step,
    gain,
    information_gain,
    innovation,
    long_form_covariance,
    predict,
    train,
    train_pass,
    update,
)
from switchid.model import (
    ModeSequence,
    StructuralError,
    SwitchingModel,
    TransitionMatrix,
    ValidationError,
)
from switchid.rnn import forward_output
from switchid.simulate import make_rng, simulate_model

from conftest import linear_submodel

NO_JITTER = EkfConfig(jitter=0.0)


def _scalar_model(a=1.0, sigma1=0.1, sigma2=1.0):
    return SwitchingModel(
        (linear_submodel(a, 0.0, 1.0, 0.0),),
        TransitionMatrix.uniform(1),
        sigma1 * np.eye(1),
        sigma2 * np.eye(1),
        np.zeros(1),
    )


def _random_spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def _random_problem(rng, max_dim=20):
    n = int(rng.integers(1, max_dim + 1))
    m = int(rng.integers(1, min(n, 6) + 1))
    prior = AugmentedBelief(rng.normal(size=n), _random_spd(rng, n), n)
    return prior, rng.normal(size=(m, n)), _random_spd(rng, m)


class TestEkfConfig:
    def test_sigma_theta_decays(self):
        config = EkfConfig(sigma_theta0=1e-2, sigma_theta_decay=0.5)
        assert config.sigma_theta(0) == 1e-2
        assert config.sigma_theta(2) == pytest.approx(2.5e-3)

    @pytest.mark.parametrize(
        "changes", [{"epochs": 0}, {"sigma_theta_decay": 0.0}, {"p0_param": 0.0}, {"jitter": -1.0}]
    )
    def test_invalid(self, changes):
        with pytest.raises(ValidationError):
            EkfConfig(**changes)


class TestPredict:
    def test_scalar_substitution(self):
        """F=1, P=1, sigma1=0.1 gives P-=1.1"""
        model = _scalar_model()
        belief = AugmentedBelief.state_only(model, 1.0)
        prior = predict(belief, model, 0, [0.0])
        assert prior.cov[0, 0] == pytest.approx(1.1, abs=1e-15)

    def test_linear_dynamics_without_noise(self):
        """Zero process noise and identity dynamics: P- = F P F^T = P"""
        model = _scalar_model(sigma1=1e-300)
        belief = AugmentedBelief.state_only(model, 1.0)
        prior = predict(belief, model, 0, [0.3])
        np.testing.assert_allclose(prior.cov, np.eye(1))
        np.testing.assert_array_equal(prior.state, [0.0])

    def test_matches_textbook_kalman_filter(self, linear_model):
        """State-only predict/update equal the dense linear KF on the same system"""
        rng = make_rng(4)
        belief = AugmentedBelief.state_only(linear_model, 2.0)
        mean, cov = belief.mean.copy(), belief.cov.copy()
        for t in range(15):
            mode = int(rng.integers(0, 2))
            sub = linear_model.submodels[mode]
            a, b = sub.state_params.weights[0][0]
            c, d = sub.output_params.weights[0][0]
            u, y = rng.uniform(), rng.normal()
            e, H = innovation(belief, linear_model, mode, [u], [y])
            belief = update(
                belief, e, H, gain(belief, H, linear_model.sigma2), linear_model.sigma2, NO_JITTER
            )
            S = c * cov * c + linear_model.sigma2
            K = cov * c / S
            mean = mean + K * (y - c * mean - d * u)
            cov = cov - K * c * cov
            np.testing.assert_allclose(belief.mean, mean.ravel(), rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(belief.cov, cov, rtol=1e-10, atol=1e-12)
            belief = predict(belief, linear_model, mode, [u])
            mean = a * mean + b * u
            cov = a * cov * a + linear_model.sigma1
            np.testing.assert_allclose(belief.mean, mean.ravel(), rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(belief.cov, cov, rtol=1e-10, atol=1e-12)

    def test_non_finite_raises(self):
        model = replace(_scalar_model(a=1e200), x0=np.array([1e200]))
        belief = AugmentedBelief.state_only(model, 1.0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(FilterDivergenceError):
                predict(belief, model, 0, [0.0], t=4)


class TestGain:
    def test_scalar(self):
        prior = AugmentedBelief(np.zeros(1), np.eye(1), 1)
        assert gain(prior, np.eye(1), np.eye(1))[0, 0] == pytest.approx(0.5)

    def test_large_measurement_noise(self):
        prior = AugmentedBelief(np.zeros(1), np.eye(1), 1)
        assert np.abs(gain(prior, np.eye(1), 1e12 * np.eye(1))).max() < 1e-10

    @pytest.mark.parametrize("seed", range(100))
    def test_information_form(self, seed):
        """P H^T S^-1 equals (P^-1 + H^T R^-1 H)^-1 H^T R^-1"""
        prior, H, sigma2 = _random_problem(make_rng(seed))
        expected = inv(information_gain(prior.cov, H, sigma2)) @ H.T @ inv(sigma2)
        result = gain(prior, H, sigma2)
        assert np.linalg.norm(result - expected) <= 1e-8 * np.linalg.norm(expected)


class TestUpdate:
    def test_scalar_chain(self):
        prior = AugmentedBelief(np.zeros(1), np.array([[1.1]]), 1)
        H, sigma2 = np.eye(1), np.eye(1)
        gain_matrix = gain(prior, H, sigma2)
        assert gain_matrix[0, 0] == pytest.approx(11 / 21, abs=1e-15)
        posterior = update(prior, np.array([1.0]), H, gain_matrix, sigma2, NO_JITTER)
        assert posterior.cov[0, 0] == pytest.approx((1 - 11 / 21) * 1.1, abs=1e-15)
        assert posterior.mean[0] == pytest.approx(11 / 21, abs=1e-15)

    def test_zero_gain_keeps_prior(self):
        prior, H, sigma2 = _random_problem(make_rng(3))
        posterior = update(prior, np.ones(H.shape[0]), H, np.zeros(H.T.shape), sigma2, NO_JITTER)
        np.testing.assert_array_equal(posterior.mean, prior.mean)
        np.testing.assert_allclose(posterior.cov, prior.cov, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(200))
    def test_long_form_with_optimal_gain(self, seed):
        prior, H, sigma2 = _random_problem(make_rng(seed))
        gain_matrix = gain(prior, H, sigma2)
        posterior = update(prior, np.zeros(H.shape[0]), H, gain_matrix, sigma2, NO_JITTER)
        expanded = long_form_covariance(prior.cov, H, gain_matrix, sigma2)
        assert np.max(np.abs(posterior.cov - expanded)) < 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_joseph_form_agrees(self, seed):
        prior, H, sigma2 = _random_problem(make_rng(seed))
        gain_matrix = gain(prior, H, sigma2)
        e = np.zeros(H.shape[0])
        short = update(prior, e, H, gain_matrix, sigma2, NO_JITTER)
        joseph = update(prior, e, H, gain_matrix, sigma2, EkfConfig(jitter=0.0, joseph=True))
        assert np.max(np.abs(short.cov - joseph.cov)) < 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_posterior_information(self, seed):
        """The inverse posterior covariance is P^-1 + H^T R^-1 H"""
        prior, H, sigma2 = _random_problem(make_rng(seed), max_dim=8)
        posterior = update(prior, np.zeros(H.shape[0]), H, gain(prior, H, sigma2), sigma2, NO_JITTER)
        expected = information_gain(prior.cov, H, sigma2)
        result = inv(posterior.cov)
        assert np.linalg.norm(result - expected) <= 1e-8 * np.linalg.norm(expected)

    def test_covariance_stays_symmetric(self, small_model, benchmark_dataset):
        data = Dataset(benchmark_dataset.u[:15], benchmark_dataset.y[:15] + 2.0)
        belief = AugmentedBelief.initial(small_model, EkfConfig())
        modes = ModeSequence(np.arange(15) % 2, 2)
        _, belief, _ = train_pass(small_model, data, modes, belief, EkfConfig(check_long_form=True))
        assert np.max(np.abs(belief.cov - belief.cov.T)) < 1e-9
        assert np.linalg.eigvalsh(belief.cov).min() > -1e-9


class TestInnovation:
    def test_perfect_prediction(self, small_model):
        belief = AugmentedBelief.initial(small_model, EkfConfig())
        sub = small_model.submodels[1]
        y = forward_output(sub.output_spec, sub.output_params, belief.state, [0.4])
        e, _ = innovation(belief, small_model, 1, [0.4], y)
        np.testing.assert_array_equal(e, np.zeros(1))

    def test_inactive_columns_are_zero(self, small_model):
        belief = AugmentedBelief.initial(small_model, EkfConfig())
        _, H = innovation(belief, small_model, 0, [0.4], [0.1])
        assert not H[:, belief.param_slice(1)].any()
        # the state network of the active mode does not enter the output
        active = belief.param_slice(0)
        assert not H[:, active.start:active.start + small_model.submodels[0].n_state_params].any()
        assert H[:, active.start + small_model.submodels[0].n_state_params:active.stop].any()

    def test_linear_output_jacobian_is_constant(self, linear_model):
        belief = AugmentedBelief.state_only(linear_model)
        moved = replace(belief, mean=np.array([3.0]))
        _, H1 = innovation(belief, linear_model, 1, [0.2], [0.0])
        _, H2 = innovation(moved, linear_model, 1, [0.9], [0.0])
        np.testing.assert_array_equal(H1, H2)


class TestInactiveBlocks:
    @pytest.mark.parametrize(
        "config",
        [EkfConfig(), EkfConfig(joseph=True), EkfConfig(eigen_floor=True, jitter=1e-9)],
    )
    def test_switch_leaves_previous_mode_untouched(self, linear_model, config):
        """Steps in mode 2 correlate the state with its block; a mode-1 step must not move it"""
        rng = make_rng(8)
        belief = AugmentedBelief.initial(linear_model, config)
        for t in range(3):
            u, y = [rng.uniform()], [rng.normal()]
            belief, _ = filter_step(belief, linear_model, 1, u, y, config, t=t)
            belief = predict(belief, linear_model, 1, u, sigma_theta=1e-3, t=t)
        block = belief.param_slice(1)
        assert np.abs(belief.cov[: belief.n_x, block]).max() > 0

        posterior, _ = filter_step(belief, linear_model, 0, [0.3], [0.7], config, t=3)
        np.testing.assert_array_equal(posterior.mean[block], belief.mean[block])
        np.testing.assert_array_equal(posterior.cov[block, block], belief.cov[block, block])
        active = belief.param_slice(0)
        assert not np.array_equal(posterior.mean[active], belief.mean[active])

        advanced = predict(posterior, linear_model, 0, [0.3], sigma_theta=1e-3)
        np.testing.assert_array_equal(advanced.mean[block], belief.mean[block])
        np.testing.assert_array_equal(advanced.cov[block, block], belief.cov[block, block])

    def test_switch_keeps_covariance_symmetric(self, linear_model):
        rng = make_rng(9)
        belief = AugmentedBelief.initial(linear_model, EkfConfig())
        for t, mode in enumerate([1, 1, 0, 1, 0, 0]):
            u, y = [rng.uniform()], [rng.normal()]
            belief, _ = filter_step(
                belief, linear_model, mode, u, y, EkfConfig(check_long_form=True), t=t
            )
            belief = predict(belief, linear_model, mode, u, sigma_theta=1e-3, t=t)
        np.testing.assert_array_equal(belief.cov, belief.cov.T)
        assert np.linalg.eigvalsh(belief.cov).min() > 0

    def test_training_across_switches(self, linear_model, linear_dataset):
        """Mode-2 parameters only move during the mode-2 stretch of the sequence"""
        config = EkfConfig(epochs=1)
        belief = AugmentedBelief.initial(linear_model, config)
        head = Dataset(linear_dataset.u[:19], linear_dataset.y[:19])
        _, after_head, _ = train_pass(
            linear_model, head, ModeSequence(linear_dataset.true_modes[:19], 2), belief, config
        )
        full = Dataset(linear_dataset.u, linear_dataset.y)
        _, after_full, _ = train_pass(
            linear_model, full, ModeSequence(linear_dataset.true_modes, 2), belief, config
        )
        block = belief.param_slice(1)
        np.testing.assert_array_equal(after_full.mean[block], after_head.mean[block])
        np.testing.assert_array_equal(
            after_full.cov[block, block], after_head.cov[block, block]
        )


class TestTraining:
    def test_inactive_blocks_unchanged(self, small_model, benchmark_dataset):
        """Two identical submodels trained on an all-mode-1 sequence leave block 2 untouched"""
        model = small_model.with_submodels([small_model.submodels[0]] * 2)
        data = Dataset(benchmark_dataset.u[:20], benchmark_dataset.y[:20] + 2.0)
        config = EkfConfig(epochs=2)
        belief = AugmentedBelief.initial(model, config)
        trained, posterior, _ = train(model, data, ModeSequence(np.zeros(20), 2), belief, config)
        block = belief.param_slice(1)
        np.testing.assert_array_equal(posterior.mean[block], belief.mean[block])
        np.testing.assert_array_equal(posterior.cov[block, block], belief.cov[block, block])
        assert trained.submodels[1] == model.submodels[1]
        assert trained.submodels[0] != model.submodels[0]

    def test_single_sample(self, linear_model):
        data = Dataset(np.array([[0.5]]), np.array([[0.2]]))
        belief = AugmentedBelief.initial(linear_model, EkfConfig())
        _, posterior, residuals = train_pass(
            linear_model, data, ModeSequence(np.zeros(1), 2), belief, EkfConfig()
        )
        assert posterior.epoch == 1
        assert residuals.shape == (1, 1)

    def test_residuals_decrease_on_linear_system(self):
        true_model = _scalar_model(a=0.5, sigma1=1e-4, sigma2=1e-4)
        true_model = true_model.with_submodels([linear_submodel(0.5, 1.0, 1.0, 0.0)])
        data = simulate_model(true_model, 60, seed=3, noise=False)
        start = true_model.with_submodels([linear_submodel(0.45, 1.05, 1.0, 0.05)])
        _, _, history = train(
            start, data, ModeSequence(np.zeros(60), 1), config=EkfConfig(epochs=4, sigma_theta0=1e-6)
        )
        assert np.all(np.isfinite(history))
        assert np.all(np.diff(history) < 0)
        assert history[-1] < 1e-6

    def test_epoch_counter_and_state_reset(self, linear_model, linear_dataset):
        config = EkfConfig(epochs=3)
        modes = ModeSequence(np.zeros(len(linear_dataset)), 2)
        _, belief, history = train(linear_model, linear_dataset, modes, config=config)
        assert belief.epoch == 3
        assert history.shape == (3,)

    def test_divergence_reports_epoch(self):
        model = replace(_scalar_model(a=1e200), x0=np.array([1e200]))
        data = Dataset(np.zeros((3, 1)), np.zeros((3, 1)))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(FilterDivergenceError) as excinfo:
                train(model, data, ModeSequence(np.zeros(3), 1))
        assert excinfo.value.epoch == 0
        assert excinfo.value.last_stable_model is model
        assert excinfo.value.t is not None

    def test_training_needs_augmented_belief(self, linear_model, linear_dataset):
        with pytest.raises(StructuralError):
            train_pass(
                linear_model,
                linear_dataset,
                ModeSequence(np.zeros(len(linear_dataset)), 2),
                AugmentedBelief.state_only(linear_model),
            )
