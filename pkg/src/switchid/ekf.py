"""Extended Kalman filter over the augmented state ``[x; theta_1; ...; theta_K]``

Training a submodel is filtering: the network parameters of every mode are
appended to the state and estimated jointly with it. At each step only the
active mode's parameter block is propagated and updated, the other blocks are
carried along untouched.

The same primitives run on a state-only belief (no parameter blocks) when the
parameters are frozen, which is how the mode decoder in :mod:`switchid.modes`
scores candidate sequences.

Step order for time index ``t`` (0-based): measurement update with ``y_t``,
then prediction to ``t + 1`` with ``u_t``, both under the mode ``s_t``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from switchid.model import (
    ModeSequence,
    NetParams,
    ParamVector,
    StructuralError,
    SwitchidError,
    SwitchingModel,
    ValidationError,
    devectorize,
    vectorize,
)
from switchid.rnn import linearize_output, linearize_state

logger = logging.getLogger(__name__)


class FilterDivergenceError(SwitchidError):
    """Raised when the filter produces a non-finite or non-positive-definite quantity

    Attributes
    ----------
    t : int or None
        0-based time index where the filter diverged.
    epoch : int or None
        Training epoch during which it diverged.
    last_stable_model : SwitchingModel or None
        Model at the end of the last completed epoch.
    """

    def __init__(self, message, t=None, epoch=None, last_stable_model=None):
        super().__init__(message)
        self.t = t
        self.epoch = epoch
        self.last_stable_model = last_stable_model


@dataclass(frozen=True)
class EkfConfig:
    """Training settings of the augmented EKF

    Parameters
    ----------
    epochs : int
        Number of sweeps over the data per M-step.
    sigma_theta0 : float
        Parameter process noise at the first epoch.
    sigma_theta_decay : float
        Geometric decay of the parameter process noise per epoch, in (0, 1].
    p0_state, p0_param : float
        Initial covariance scales of the state and parameter blocks.
    jitter : float
        Diagonal floor added after every update.
    joseph : bool
        Use the Joseph form of the covariance update.
    eigen_floor : bool
        Clip covariance eigenvalues at ``jitter`` instead of adding it.
    check_long_form : bool
        Cross-check every covariance update against its expanded form.
    """

    epochs: int = 10
    sigma_theta0: float = 1e-2
    sigma_theta_decay: float = 0.9
    p0_state: float = 1.0
    p0_param: float = 0.1
    jitter: float = 1e-12
    joseph: bool = False
    eigen_floor: bool = False
    check_long_form: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}.")
        if not 0 < self.sigma_theta_decay <= 1:
            raise ValidationError(
                f"sigma_theta_decay must lie in (0, 1], got {self.sigma_theta_decay}."
            )
        for name in ("sigma_theta0", "jitter"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0.")
        for name in ("p0_state", "p0_param"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0.")

    def sigma_theta(self, epoch: int) -> float:
        return self.sigma_theta0 * self.sigma_theta_decay**epoch


@dataclass(frozen=True, eq=False)
class AugmentedBelief:
    """Gaussian belief over the (augmented) state

    Parameters
    ----------
    mean : numpy.ndarray
        ``[x; theta_1; ...; theta_K]``, or just ``x`` for a state-only belief.
    cov : numpy.ndarray
        Symmetric positive definite covariance of ``mean``.
    n_x : int
    param_sizes : tuple of int
        Length of every ``theta_k``; empty for a state-only belief.
    epoch : int
        Number of completed training epochs.
    """

    mean: np.ndarray
    cov: np.ndarray
    n_x: int
    param_sizes: Tuple[int, ...] = ()
    epoch: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        dim = self.n_x + sum(self.param_sizes)
        if mean.shape != (dim,) or cov.shape != (dim, dim):
            raise StructuralError(
                f"Belief of dimension {dim} got mean {mean.shape} and cov {cov.shape}."
            )
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "param_sizes", tuple(self.param_sizes))

    @classmethod
    def initial(cls, model: SwitchingModel, config: EkfConfig) -> AugmentedBelief:
        """Belief at the start of training: ``x0`` and the model parameters"""
        vectors = [vectorize(submodel).values for submodel in model.submodels]
        sizes = tuple(v.size for v in vectors)
        mean = np.concatenate([model.x0] + vectors)
        diagonal = np.concatenate(
            [np.full(model.n_x, config.p0_state), np.full(sum(sizes), config.p0_param)]
        )
        return cls(mean, np.diag(diagonal), model.n_x, sizes)

    @classmethod
    def state_only(cls, model: SwitchingModel, p0_state: float = 1.0) -> AugmentedBelief:
        return cls(model.x0, p0_state * np.eye(model.n_x), model.n_x)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_augmented(self) -> bool:
        return bool(self.param_sizes)

    @property
    def state(self) -> np.ndarray:
        return self.mean[: self.n_x]

    @property
    def state_cov(self) -> np.ndarray:
        return self.cov[: self.n_x, : self.n_x]

    def param_slice(self, mode: int) -> slice:
        start = self.n_x + sum(self.param_sizes[:mode])
        return slice(start, start + self.param_sizes[mode])

    def reset_state(self, x0: np.ndarray, p0_state: float) -> AugmentedBelief:
        """Restart the state part at ``x0`` and drop its cross-covariances"""
        mean = self.mean.copy()
        cov = self.cov.copy()
        mean[: self.n_x] = x0
        cov[: self.n_x, :] = 0.0
        cov[:, : self.n_x] = 0.0
        cov[: self.n_x, : self.n_x] = p0_state * np.eye(self.n_x)
        return replace(self, mean=mean, cov=cov)

    def to_model(
        self, model: SwitchingModel, sigma_theta: Optional[float] = None
    ) -> SwitchingModel:
        """Model whose submodel parameters are the posterior parameter means"""
        if not self.is_augmented:
            return model
        submodels = []
        for k, submodel in enumerate(model.submodels):
            vector = ParamVector(
                self.mean[self.param_slice(k)], submodel.state_spec, submodel.output_spec
            )
            submodels.append(devectorize(vector))
        updated = model.with_submodels(submodels)
        if sigma_theta is not None:
            updated = replace(updated, sigma_theta=sigma_theta)
        return updated


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _state_params(belief: AugmentedBelief, model: SwitchingModel, mode: int) -> NetParams:
    submodel = model.submodels[mode]
    if not belief.is_augmented:
        return submodel.state_params
    block = belief.mean[belief.param_slice(mode)]
    return NetParams.from_flat(submodel.state_spec, block[: submodel.n_state_params])


def _output_params(belief: AugmentedBelief, model: SwitchingModel, mode: int) -> NetParams:
    submodel = model.submodels[mode]
    if not belief.is_augmented:
        return submodel.output_params
    block = belief.mean[belief.param_slice(mode)]
    return NetParams.from_flat(submodel.output_spec, block[submodel.n_state_params:])


def _check_mode(model: SwitchingModel, mode: int) -> None:
    if not 0 <= mode < model.K:
        raise ValidationError(f"Mode {mode + 1} out of range 1..{model.K}.")


def predict(
    belief: AugmentedBelief,
    model: SwitchingModel,
    mode: int,
    u,
    sigma_theta: float = 0.0,
    t: Optional[int] = None,
) -> AugmentedBelief:
    """Propagate the belief through the state network of ``mode``

    The transition Jacobian is the identity except for its first ``n_x`` rows,
    which hold the state Jacobian and, for an augmented belief, the Jacobian
    with respect to the active state-network parameters. Process noise
    ``sigma1`` is added to the state block and ``sigma_theta * I`` to the
    active parameter block.
    """
    _check_mode(model, mode)
    submodel = model.submodels[mode]
    n_x = belief.n_x
    x_next, jacobian = linearize_state(
        submodel.state_spec,
        _state_params(belief, model, mode),
        belief.state,
        u,
        with_params=belief.is_augmented,
    )
    rows = np.zeros((n_x, belief.dim))
    rows[:, :n_x] = jacobian.d_wrt_state
    if belief.is_augmented:
        start = belief.param_slice(mode).start
        rows[:, start:start + submodel.n_state_params] = jacobian.d_wrt_params

    # F P F^T with F = I except for its first n_x rows
    left = np.array(belief.cov, dtype=float)
    left[:n_x, :] = rows @ belief.cov
    cov = left.copy()
    cov[:, :n_x] = left @ rows.T
    cov[:n_x, :n_x] += model.sigma1
    if belief.is_augmented and sigma_theta > 0:
        block = cov[belief.param_slice(mode), belief.param_slice(mode)]
        block[np.diag_indices_from(block)] += sigma_theta

    mean = np.array(belief.mean, dtype=float)
    mean[:n_x] = x_next
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise FilterDivergenceError(f"Non-finite prediction at t={t}.", t=t)
    return replace(belief, mean=mean, cov=_symmetrize(cov))


def innovation(
    prior: AugmentedBelief, model: SwitchingModel, mode: int, u, y
) -> Tuple[np.ndarray, np.ndarray]:
    """Innovation ``e = y - N_y(x, u)`` and measurement Jacobian ``H``

    ``H`` holds the output Jacobian over ``x`` and, for an augmented belief,
    over the active output-network parameters; all other columns are zero.
    """
    _check_mode(model, mode)
    submodel = model.submodels[mode]
    y_hat, jacobian = linearize_output(
        submodel.output_spec,
        _output_params(prior, model, mode),
        prior.state,
        u,
        n_x=prior.n_x,
        with_params=prior.is_augmented,
    )
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != y_hat.shape:
        raise StructuralError(f"Expected an output of shape {y_hat.shape}, got {y.shape}.")
    H = np.zeros((y.size, prior.dim))
    H[:, : prior.n_x] = jacobian.d_wrt_state
    if prior.is_augmented:
        block = prior.param_slice(mode)
        H[:, block.start + submodel.n_state_params:block.stop] = jacobian.d_wrt_params
    return y - y_hat, H


def innovation_factor(prior: AugmentedBelief, H: np.ndarray, sigma2: np.ndarray, t=None):
    """``P H^T`` and the Cholesky factor of ``S = H P H^T + sigma2``"""
    cross = prior.cov @ H.T
    S = H @ cross + sigma2
    try:
        factor = cho_factor(_symmetrize(S), lower=True)
    except (LinAlgError, ValueError) as exc:
        raise FilterDivergenceError(
            f"Innovation covariance is not positive definite at t={t}: {exc}", t=t
        )
    return cross, factor


def gain(prior: AugmentedBelief, H: np.ndarray, sigma2: np.ndarray, t=None) -> np.ndarray:
    """Kalman gain ``P H^T S^-1`` solved through a Cholesky factorization of S"""
    cross, factor = innovation_factor(prior, H, sigma2, t=t)
    return cho_solve(factor, cross.T).T


def long_form_covariance(
    prior_cov: np.ndarray, H: np.ndarray, gain_matrix: np.ndarray, sigma2: np.ndarray
) -> np.ndarray:
    """Posterior covariance expanded term by term

    ``P - P H^T G^T - G H P + G H P H^T G^T + G sigma2 G^T``, equal to the
    short form ``P - G H P`` when ``G`` is the optimal gain.
    """
    HP = H @ prior_cov
    return (
        prior_cov
        - HP.T @ gain_matrix.T
        - gain_matrix @ HP
        + gain_matrix @ (HP @ H.T) @ gain_matrix.T
        + gain_matrix @ sigma2 @ gain_matrix.T
    )


def _floor(cov: np.ndarray, config: EkfConfig, touched: np.ndarray) -> np.ndarray:
    """Floor the principal sub-block over ``touched``; other entries are kept exactly"""
    if config.eigen_floor:
        block = np.ix_(touched, touched)
        values, vectors = eigh(cov[block])
        cov[block] = _symmetrize((vectors * np.maximum(values, config.jitter)) @ vectors.T)
        return cov
    if config.jitter > 0:
        cov[touched, touched] += config.jitter
    return cov


def _inactive_rows(prior: AugmentedBelief, mode: Optional[int]) -> np.ndarray:
    """Rows of the parameter blocks of every mode other than ``mode``"""
    inactive = np.zeros(prior.dim, dtype=bool)
    if prior.is_augmented and mode is not None:
        inactive[prior.n_x:] = True
        inactive[prior.param_slice(mode)] = False
    return inactive


def update(
    prior: AugmentedBelief,
    e: np.ndarray,
    H: np.ndarray,
    gain_matrix: np.ndarray,
    sigma2: np.ndarray,
    config: Optional[EkfConfig] = None,
    mode: Optional[int] = None,
    t: Optional[int] = None,
) -> AugmentedBelief:
    """Measurement update ``mean + G e`` and ``P - G H P``

    With ``mode`` given on an augmented belief, the gain rows over the
    parameter blocks of the other modes are zeroed and the covariance follows
    the Joseph form, which holds for any gain. The mean and covariance
    entries of those blocks then come out bit-identical to the prior. The
    covariance is re-symmetrized and floored by ``config.jitter`` on the
    state block and the active parameter block only.
    """
    config = config or EkfConfig()
    inactive = _inactive_rows(prior, mode)
    joseph = config.joseph
    if inactive.any():
        gain_matrix = np.array(gain_matrix, dtype=float)
        gain_matrix[inactive] = 0.0
        joseph = True
    mean = prior.mean + gain_matrix @ e
    if joseph:
        factor = np.eye(prior.dim) - gain_matrix @ H
        cov = factor @ prior.cov @ factor.T + gain_matrix @ sigma2 @ gain_matrix.T
    else:
        cov = prior.cov - gain_matrix @ (H @ prior.cov)
    if config.check_long_form:
        expanded = long_form_covariance(prior.cov, H, gain_matrix, sigma2)
        scale = max(1.0, float(np.max(np.abs(prior.cov))))
        if not np.allclose(cov, expanded, rtol=0.0, atol=1e-9 * scale):
            raise FilterDivergenceError(
                f"Covariance update disagrees with its expanded form at t={t}.", t=t
            )
    cov = _symmetrize(cov)
    if prior.is_augmented and mode is None:
        touched = np.arange(prior.n_x)
    else:
        touched = np.flatnonzero(~inactive)
    cov = _floor(cov, config, touched)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise FilterDivergenceError(f"Non-finite measurement update at t={t}.", t=t)
    return replace(prior, mean=mean, cov=cov)


def filter_step(
    belief: AugmentedBelief,
    model: SwitchingModel,
    mode: int,
    u,
    y,
    config: Optional[EkfConfig] = None,
    t: Optional[int] = None,
) -> Tuple[AugmentedBelief, np.ndarray]:
    """Measurement update at one time step, returning the posterior and the innovation"""
    e, H = innovation(belief, model, mode, u, y)
    gain_matrix = gain(belief, H, model.sigma2, t=t)
    return update(belief, e, H, gain_matrix, model.sigma2, config, mode=mode, t=t), e


def train_pass(
    model: SwitchingModel,
    dataset,
    modes: ModeSequence,
    belief: AugmentedBelief,
    config: Optional[EkfConfig] = None,
) -> Tuple[SwitchingModel, AugmentedBelief, np.ndarray]:
    """One sweep of the augmented EKF over the dataset under a fixed mode sequence

    Parameters
    ----------
    model : SwitchingModel
        Supplies network structure and noise covariances.
    dataset : switchid.dataset.Dataset
    modes : ModeSequence
        Mode assigned to each time step.
    belief : AugmentedBelief
        Augmented prior at the first time step.
    config : EkfConfig

    Returns
    -------
    model : SwitchingModel
        Model carrying the posterior parameter means.
    belief : AugmentedBelief
        Posterior after the last measurement update, epoch incremented.
    residuals : numpy.ndarray
        T x n_y innovations, each taken before its measurement update; NaN
        where the output is missing and the update was skipped.

    Raises
    ------
    FilterDivergenceError
        When a step produces a non-finite or indefinite quantity.
    """
    config = config or EkfConfig()
    if not belief.is_augmented:
        raise StructuralError("Training needs an augmented belief.")
    if len(modes) != len(dataset):
        raise StructuralError(
            f"Mode sequence of length {len(modes)} for a dataset of length {len(dataset)}."
        )
    if modes.K != model.K:
        raise StructuralError(f"Mode sequence has K={modes.K}, model has K={model.K}.")
    sigma_theta = config.sigma_theta(belief.epoch)
    residuals = np.zeros((len(dataset), model.n_y))
    T = len(dataset)
    for t in range(T):
        mode = int(modes.modes[t])
        if np.any(np.isnan(dataset.y[t])):
            residuals[t] = np.nan
        else:
            belief, residuals[t] = filter_step(
                belief, model, mode, dataset.u[t], dataset.y[t], config, t=t
            )
        if t < T - 1:
            belief = predict(belief, model, mode, dataset.u[t], sigma_theta, t=t)
    belief = replace(belief, epoch=belief.epoch + 1)
    return belief.to_model(model, sigma_theta), belief, residuals


def train(
    model: SwitchingModel,
    dataset,
    modes: ModeSequence,
    belief: Optional[AugmentedBelief] = None,
    config: Optional[EkfConfig] = None,
) -> Tuple[SwitchingModel, AugmentedBelief, np.ndarray]:
    """Train all submodels for ``config.epochs`` sweeps under a fixed mode sequence

    Every epoch restarts the state part of the belief at ``model.x0`` while the
    parameter part carries over, with the parameter process noise decayed
    geometrically per epoch.

    Returns
    -------
    model : SwitchingModel
    belief : AugmentedBelief
    residual_mse : numpy.ndarray
        Mean squared innovation of every epoch.

    Raises
    ------
    FilterDivergenceError
        With ``epoch`` and ``last_stable_model`` set to the last completed epoch.
    """
    config = config or EkfConfig()
    belief = belief or AugmentedBelief.initial(model, config)
    last_stable = model
    history = []
    for epoch in range(config.epochs):
        belief = belief.reset_state(model.x0, config.p0_state)
        try:
            last_stable, belief, residuals = train_pass(
                last_stable, dataset, modes, belief, config
            )
        except FilterDivergenceError as exc:
            exc.epoch = epoch
            exc.last_stable_model = last_stable
            logger.warning(f"Filter diverged at t={exc.t} in epoch {epoch + 1}: {exc}")
            raise
        observed = ~np.any(np.isnan(residuals), axis=1)
        residual_mse = float(np.mean(np.sum(residuals[observed] ** 2, axis=1)))
        history.append(residual_mse)
        logger.debug(f"Epoch {epoch + 1}/{config.epochs}: residual MSE {residual_mse:.6g}")
    return last_stable, belief, np.array(history)


def information_gain(prior_cov: np.ndarray, H: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Posterior information matrix ``P^-1 + H^T sigma2^-1 H``

    Used to cross-check the covariance update: the inverse of the posterior
    covariance equals this matrix.
    """
    prior_factor = cho_factor(prior_cov, lower=True)
    noise_factor = cho_factor(sigma2, lower=True)
    return cho_solve(prior_factor, np.eye(prior_cov.shape[0])) + H.T @ cho_solve(
        noise_factor, H
    )


def log_det_from_factor(factor) -> float:
    """``log det S`` from a ``cho_factor`` result"""
    return 2.0 * math.fsum(np.log(np.diag(factor[0])))
