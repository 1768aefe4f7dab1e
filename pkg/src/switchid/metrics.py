"""Prediction quality metrics and model evaluation"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from switchid.ekf import AugmentedBelief, FilterDivergenceError, filter_step, predict
from switchid.model import ModeSequence, StructuralError, SwitchidError, SwitchingModel
from switchid.modes import WindowConfig, initial_mode, moving_window_estimate
from switchid.rnn import forward_output, forward_state

MAX_PERMUTATION_MODES = 6

logger = logging.getLogger(__name__)


class UndefinedMetricError(SwitchidError, ValueError):
    """Raised when a metric is undefined for the given data"""

    pass


def _as_series(values) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    return array[:, None] if array.ndim == 1 else array


def _pair(y_true, y_pred) -> Tuple[np.ndarray, np.ndarray]:
    y_true, y_pred = _as_series(y_true), _as_series(y_pred)
    if y_true.shape != y_pred.shape:
        raise StructuralError(f"Series shapes differ: {y_true.shape} and {y_pred.shape}.")
    return y_true, y_pred


def squared_errors(y_true, y_pred) -> np.ndarray:
    """Squared Euclidean prediction error of every step"""
    y_true, y_pred = _pair(y_true, y_pred)
    return np.sum((y_true - y_pred) ** 2, axis=1)


def mse(y_true, y_pred) -> float:
    """Mean over the steps of the squared Euclidean prediction error

    Examples
    --------
    >>> mse([1.0, 2.0, 3.0], [1.1, 2.1, 3.1])  # doctest: +ELLIPSIS
    0.01...
    """
    return float(np.mean(squared_errors(y_true, y_pred)))


def bfr(y_true, y_pred) -> float:
    """Best fit rate ``100 (1 - ||y - y_hat|| / ||y - mean(y)||)`` in percent

    Raises
    ------
    UndefinedMetricError
        When ``y_true`` is constant.
    """
    y_true, y_pred = _pair(y_true, y_pred)
    spread = float(np.sum((y_true - y_true.mean(axis=0)) ** 2))
    if spread == 0.0:
        raise UndefinedMetricError("The best fit rate is undefined for a constant output.")
    residual = float(np.sum((y_true - y_pred) ** 2))
    return 100.0 * (1.0 - math.sqrt(residual / spread))


def mode_match(true_modes, est_modes, K: int) -> Tuple[float, Tuple[int, ...]]:
    """Share of steps where the modes agree, maximized over relabelings of the estimate

    Parameters
    ----------
    true_modes, est_modes : ModeSequence or array-like
        0-based modes.
    K : int
        Number of modes, at most 6.

    Returns
    -------
    percentage : float
    permutation : tuple of int
        ``permutation[k]`` is the true mode matched to estimated mode ``k``.
        The identity wins ties.
    """
    true_modes = np.asarray(getattr(true_modes, "modes", true_modes), dtype=int)
    est_modes = np.asarray(getattr(est_modes, "modes", est_modes), dtype=int)
    if true_modes.shape != est_modes.shape:
        raise StructuralError("Mode sequences have different lengths.")
    if K > MAX_PERMUTATION_MODES:
        raise UndefinedMetricError(
            f"Permutation search over {K} modes is refused (at most "
            f"{MAX_PERMUTATION_MODES}); align the labels beforehand."
        )
    if true_modes.size == 0:
        raise UndefinedMetricError("The mode match is undefined for empty sequences.")
    best_hits, best_permutation = -1, tuple(range(K))
    for permutation in itertools.permutations(range(K)):
        hits = int(np.count_nonzero(np.asarray(permutation)[est_modes] == true_modes))
        if hits > best_hits:
            best_hits, best_permutation = hits, permutation
    return 100.0 * best_hits / true_modes.size, best_permutation


def one_step_predictions(
    model: SwitchingModel, dataset, modes: ModeSequence, p0_state: float = 1.0
) -> np.ndarray:
    """Output predicted for every step from the filtered state of the step before

    The state-only EKF follows ``modes``; step ``t`` is predicted before its
    output is used. Samples with a missing (NaN) output are predicted without
    a measurement update, as are samples whose update diverges; the latter
    are logged as warnings.
    """
    belief = AugmentedBelief.state_only(model, p0_state)
    predictions = np.empty((len(dataset), model.n_y))
    for t in range(len(dataset)):
        mode = int(modes.modes[t])
        submodel = model.submodels[mode]
        predictions[t] = forward_output(
            submodel.output_spec, submodel.output_params, belief.state, dataset.u[t]
        )
        if np.all(np.isfinite(dataset.y[t])):
            try:
                belief, _ = filter_step(belief, model, mode, dataset.u[t], dataset.y[t], t=t)
            except FilterDivergenceError as exc:
                logger.warning(f"Skipped the update at t={t} in mode {mode + 1}: {exc}")
        if t < len(dataset) - 1:
            belief = predict(belief, model, mode, dataset.u[t], t=t)
    return predictions


def rollout_predictions(
    model: SwitchingModel, dataset, modes: ModeSequence, x0=None
) -> np.ndarray:
    """Free-run outputs: the networks iterated on their own states from ``x0``"""
    x = np.array(model.x0 if x0 is None else x0, dtype=float)
    predictions = np.empty((len(dataset), model.n_y))
    for t in range(len(dataset)):
        submodel = model.submodels[int(modes.modes[t])]
        predictions[t] = forward_output(
            submodel.output_spec, submodel.output_params, x, dataset.u[t]
        )
        x = forward_state(submodel.state_spec, submodel.state_params, x, dataset.u[t])
    return predictions


def decode_modes(
    model: SwitchingModel, dataset, window: Optional[WindowConfig] = None, p0_state=1.0
) -> ModeSequence:
    """Moving-window mode sequence; the window shrinks to fit short datasets"""
    window = window or WindowConfig()
    if len(dataset) == 1:
        first, _ = initial_mode(model, dataset, p0_state=p0_state)
        return ModeSequence(np.array([first]), model.K)
    if window.t_w > len(dataset) - 1:
        window = WindowConfig(len(dataset) - 1, window.max_candidates)
    return moving_window_estimate(model, dataset, window, p0_state=p0_state)[0]


@dataclass
class EvalResult:
    """Metrics of a model on a dataset

    ``mode_match`` and ``permutation`` are None when the dataset carries no
    true modes; the ``rollout_*`` fields are set only when free-run
    predictions were requested.
    """

    mse: float
    bfr: Optional[float]
    errors: np.ndarray
    y_pred: np.ndarray
    modes: ModeSequence
    mode_match: Optional[float] = None
    permutation: Optional[Tuple[int, ...]] = None
    rollout_mse: Optional[float] = None
    rollout_bfr: Optional[float] = None
    rollout_pred: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        """Report content; series are left to the plot data files"""
        return {
            "mse": self.mse,
            "bfr": self.bfr,
            "mode_match": self.mode_match,
            "permutation": None
            if self.permutation is None
            else [label + 1 for label in self.permutation],
            "rollout_mse": self.rollout_mse,
            "rollout_bfr": self.rollout_bfr,
            "T": int(self.errors.shape[0]),
        }

    def aligned_modes(self) -> np.ndarray:
        """Estimated modes mapped onto the true labels (0-based)"""
        if self.permutation is None:
            return self.modes.modes
        return np.asarray(self.permutation)[self.modes.modes]


def _safe_bfr(y_true, y_pred) -> Optional[float]:
    try:
        return bfr(y_true, y_pred)
    except UndefinedMetricError:
        return None


def evaluate(
    model: SwitchingModel,
    dataset,
    window: Optional[WindowConfig] = None,
    rollout: bool = False,
    p0_state: float = 1.0,
) -> EvalResult:
    """Decode the modes, predict one step ahead and score the predictions

    BFR is None for a constant output series.
    """
    dataset.check_model(model)
    modes = decode_modes(model, dataset, window, p0_state)
    y_pred = one_step_predictions(model, dataset, modes, p0_state)
    errors = squared_errors(dataset.y, y_pred)
    result = EvalResult(
        mse=float(np.mean(errors)),
        bfr=_safe_bfr(dataset.y, y_pred),
        errors=errors,
        y_pred=y_pred,
        modes=modes,
    )
    if dataset.true_modes is not None:
        K = max(model.K, int(dataset.true_modes.max()) + 1)
        result.mode_match, result.permutation = mode_match(dataset.true_modes, modes.modes, K)
    if rollout:
        result.rollout_pred = rollout_predictions(model, dataset, modes)
        result.rollout_mse = mse(dataset.y, result.rollout_pred)
        result.rollout_bfr = _safe_bfr(dataset.y, result.rollout_pred)
    return result
