"""Mode sequence estimation with frozen submodel parameters

The cost of a mode sequence is the negative log-likelihood of the outputs
under a state-only EKF that follows the sequence, plus the negative
log-probabilities of its transitions. The moving-window decoder minimizes that
cost over all ``K**t_w`` continuations of a short window and commits the first
mode of the winner, moving one step at a time. The exhaustive decoder
enumerates whole sequences and serves as an oracle on short horizons.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve

from switchid.ekf import (
    AugmentedBelief,
    FilterDivergenceError,
    innovation,
    innovation_factor,
    log_det_from_factor,
    predict,
    update,
)
from switchid.model import ModeSequence, SwitchidError, SwitchingModel, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_MAX_CANDIDATES = 2**20


class CandidateLimitError(SwitchidError):
    """Raised when a search would enumerate more candidates than allowed"""

    pass


@dataclass(frozen=True)
class WindowConfig:
    """Moving-window decoder settings

    Parameters
    ----------
    t_w : int
        Window length, at least 1 and at most ``T - 1``.
    max_candidates : int
        Upper bound on ``K**t_w``.
    """

    t_w: int = 3
    max_candidates: int = DEFAULT_MAX_CANDIDATES

    def __post_init__(self):
        if self.t_w < 1:
            raise ValidationError(f"t_w must be at least 1, got {self.t_w}.")
        if self.max_candidates < 1:
            raise ValidationError("max_candidates must be at least 1.")

    def check(self, T: int, K: int) -> None:
        if T < 2:
            raise ValidationError(f"Mode decoding needs at least 2 samples, got {T}.")
        if self.t_w > T - 1:
            raise ValidationError(f"t_w={self.t_w} exceeds T - 1 = {T - 1}.")
        if K**self.t_w > self.max_candidates:
            raise CandidateLimitError(
                f"A window of {self.t_w} steps over {K} modes has {K**self.t_w} "
                f"candidates, above the limit of {self.max_candidates}; "
                f"use a smaller t_w."
            )


def step_nll(
    model: SwitchingModel, mode: int, belief: AugmentedBelief, u, y
) -> Tuple[float, AugmentedBelief]:
    """Negative log-likelihood of one output under ``mode`` and the updated belief

    The cost is ``0.5 e^T S^-1 e + 0.5 log det S``, the Gaussian negative
    log-likelihood without its ``0.5 n_y log(2 pi)`` constant. A step that
    cannot be evaluated (non-finite or indefinite quantities) costs ``+inf``
    and leaves the belief unchanged. A missing (NaN) output costs 0 and skips
    the update, so only transition costs steer the decoding there.

    Examples
    --------
    With ``S = 1`` a zero innovation costs 0 and a unit innovation 0.5.
    """
    if not np.all(np.isfinite(y)):
        return 0.0, belief
    try:
        e, H = innovation(belief, model, mode, u, y)
        cross, factor = innovation_factor(belief, H, model.sigma2)
        cost = 0.5 * float(e @ cho_solve(factor, e)) + 0.5 * log_det_from_factor(factor)
        gain_matrix = cho_solve(factor, cross.T).T
        posterior = update(belief, e, H, gain_matrix, model.sigma2, mode=mode)
    except FilterDivergenceError:
        return math.inf, belief
    if not math.isfinite(cost):
        return math.inf, belief
    return cost, posterior


def _advance(
    model: SwitchingModel, mode: int, posterior: AugmentedBelief, u
) -> Optional[AugmentedBelief]:
    try:
        return predict(posterior, model, mode, u)
    except FilterDivergenceError:
        return None


def initial_mode(
    model: SwitchingModel, dataset, belief: Optional[AugmentedBelief] = None, p0_state=1.0
) -> Tuple[int, np.ndarray]:
    """Most likely first mode: ``argmin_k step_nll(k) - log pi0[k]``

    Ties go to the smallest label. Returns the 0-based mode and the per-mode scores.
    """
    belief = belief or AugmentedBelief.state_only(model, p0_state)
    scores = np.empty(model.K)
    for k in range(model.K):
        cost, _ = step_nll(model, k, belief, dataset.u[0], dataset.y[0])
        scores[k] = cost - model.transition.log_pi0[k]
    return int(np.argmin(scores)), scores


@dataclass
class WindowResult:
    """Winner of one window search

    ``step_costs``, ``transition_costs`` and ``posteriors`` follow the winning
    sequence; ``candidate_costs`` maps every enumerated sequence to its cost
    when the search was asked to keep them.
    """

    sequence: Tuple[int, ...]
    cost: float
    step_costs: Tuple[float, ...]
    transition_costs: Tuple[float, ...]
    posteriors: Tuple[AugmentedBelief, ...]
    candidates: int
    candidate_costs: Optional[dict] = None


def window_decode(
    model: SwitchingModel,
    dataset,
    belief: AugmentedBelief,
    t: int,
    prev_mode: int,
    t_w: int,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
    keep_candidates: bool = False,
) -> WindowResult:
    """Minimize the cost over all mode sequences of the window ``t .. t + t_w - 1``

    Candidates are visited depth-first in lexicographic order, so shared
    prefixes are filtered once and ties resolve to the lexicographically
    smallest sequence.

    Parameters
    ----------
    belief : AugmentedBelief
        State-only prior at time index ``t`` (0-based).
    prev_mode : int
        Mode committed at ``t - 1``.
    """
    K = model.K
    if K**t_w > max_candidates:
        raise CandidateLimitError(
            f"{K**t_w} candidates exceed the limit of {max_candidates}; use a smaller t_w."
        )
    if t + t_w > len(dataset):
        raise ValidationError(f"Window {t}..{t + t_w - 1} runs past the data end.")
    log_pi = model.transition.log_pi
    best = {"cost": math.inf, "path": None}
    count = 0
    costs = {} if keep_candidates else None

    def search(depth, prior, path, terms):
        nonlocal count
        if depth == t_w:
            count += 1
            cost = math.fsum(value for step, trans, _ in terms for value in (step, trans))
            if costs is not None:
                costs[tuple(path)] = cost
            if best["path"] is None or cost < best["cost"]:
                best.update(cost=cost, path=tuple(path), terms=tuple(terms))
            return
        index = t + depth
        previous = path[-1] if path else prev_mode
        for mode in range(K):
            if prior is None:
                step, posterior = math.inf, None
            else:
                step, posterior = step_nll(
                    model, mode, prior, dataset.u[index], dataset.y[index]
                )
            trans = -float(log_pi[mode, previous])
            next_prior = None
            if depth + 1 < t_w and posterior is not None and math.isfinite(step):
                next_prior = _advance(model, mode, posterior, dataset.u[index])
            search(depth + 1, next_prior, path + [mode], terms + [(step, trans, posterior)])

    search(0, belief, [], [])
    terms = best["terms"]
    return WindowResult(
        sequence=best["path"],
        cost=best["cost"],
        step_costs=tuple(term[0] for term in terms),
        transition_costs=tuple(term[1] for term in terms),
        posteriors=tuple(term[2] for term in terms),
        candidates=count,
        candidate_costs=costs,
    )


@dataclass
class DecodeTrace:
    """Committed mode sequence with its per-step costs

    ``transition_costs[0]`` is ``-log pi0[s_1]``, later entries are
    ``-log pi[s_t, s_{t-1}]``. ``candidates`` counts the window sequences
    scored, including the K initial-mode evaluations.
    """

    modes: ModeSequence
    step_costs: np.ndarray
    transition_costs: np.ndarray
    candidates: int
    window_costs: List[dict] = field(default_factory=list)

    @property
    def cost(self) -> float:
        return math.fsum(self.step_costs) + math.fsum(self.transition_costs)


def _first_step(model, dataset, belief):
    first, _ = initial_mode(model, dataset, belief)
    cost, posterior = step_nll(model, first, belief, dataset.u[0], dataset.y[0])
    return first, cost, posterior


def moving_window_trace(
    model: SwitchingModel,
    dataset,
    window: Optional[WindowConfig] = None,
    belief: Optional[AugmentedBelief] = None,
    p0_state: float = 1.0,
    keep_candidates: bool = False,
) -> DecodeTrace:
    """Moving-window MAP decoding, keeping the committed per-step costs

    The first mode comes from :func:`initial_mode`. Each following window
    commits its first mode and the state belief advances under it; the last
    window, ending at the final sample, commits all of its modes.
    """
    window = window or WindowConfig()
    T = len(dataset)
    window.check(T, model.K)
    belief = belief or AugmentedBelief.state_only(model, p0_state)

    first, cost, posterior = _first_step(model, dataset, belief)
    modes = [first]
    step_costs = [cost]
    transition_costs = [-float(model.transition.log_pi0[first])]
    candidates = model.K
    window_costs = []
    prior = _advance(model, first, posterior, dataset.u[0])

    last_start = T - window.t_w
    for t in range(1, last_start + 1):
        result = window_decode(
            model,
            dataset,
            prior,
            t,
            modes[-1],
            window.t_w,
            window.max_candidates,
            keep_candidates,
        )
        candidates += result.candidates
        if keep_candidates:
            window_costs.append(result.candidate_costs)
        commit = 1 if t < last_start else window.t_w
        modes.extend(result.sequence[:commit])
        step_costs.extend(result.step_costs[:commit])
        transition_costs.extend(result.transition_costs[:commit])
        if t < last_start:
            posterior = result.posteriors[0]
            prior = None if posterior is None else _advance(
                model, result.sequence[0], posterior, dataset.u[t]
            )
    logger.debug(f"Decoded {T} modes scoring {candidates} candidates.")
    return DecodeTrace(
        ModeSequence(np.array(modes), model.K),
        np.array(step_costs),
        np.array(transition_costs),
        candidates,
        window_costs,
    )


def moving_window_estimate(
    model: SwitchingModel,
    dataset,
    window: Optional[WindowConfig] = None,
    belief: Optional[AugmentedBelief] = None,
    p0_state: float = 1.0,
) -> Tuple[ModeSequence, int]:
    """Moving-window MAP mode sequence and the number of candidates scored"""
    trace = moving_window_trace(model, dataset, window, belief, p0_state)
    return trace.modes, trace.candidates


def sequence_terms(
    model: SwitchingModel,
    dataset,
    modes,
    belief: Optional[AugmentedBelief] = None,
    p0_state: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step output costs and transition costs of a full mode sequence"""
    modes = np.asarray(getattr(modes, "modes", modes), dtype=int)
    if modes.shape[0] != len(dataset):
        raise ValidationError(
            f"Mode sequence of length {modes.shape[0]} for {len(dataset)} samples."
        )
    log_pi = model.transition.log_pi
    prior = belief or AugmentedBelief.state_only(model, p0_state)
    steps = np.full(len(dataset), math.inf)
    transitions = np.empty(len(dataset))
    for t, mode in enumerate(modes):
        if t == 0:
            transitions[t] = -float(model.transition.log_pi0[mode])
        else:
            transitions[t] = -float(log_pi[mode, modes[t - 1]])
        if prior is None:
            continue
        steps[t], posterior = step_nll(model, mode, prior, dataset.u[t], dataset.y[t])
        if not math.isfinite(steps[t]):
            prior = None
        elif t < len(dataset) - 1:
            prior = _advance(model, mode, posterior, dataset.u[t])
    return steps, transitions


def sequence_cost(
    model: SwitchingModel,
    dataset,
    modes,
    belief: Optional[AugmentedBelief] = None,
    p0_state: float = 1.0,
) -> float:
    """Cost of a full mode sequence: output costs plus transition costs"""
    steps, transitions = sequence_terms(model, dataset, modes, belief, p0_state)
    return math.fsum(list(steps) + list(transitions))


def exhaustive_estimate(
    model: SwitchingModel,
    dataset,
    anchor_initial: bool = True,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
    belief: Optional[AugmentedBelief] = None,
    p0_state: float = 1.0,
) -> ModeSequence:
    """Minimum-cost mode sequence by enumerating every candidate

    With ``anchor_initial`` the first mode is fixed by :func:`initial_mode`,
    exactly as the moving-window decoder does, and the remaining ``T - 1``
    modes are enumerated; a moving window of length ``T - 1`` then yields the
    same sequence. Without it all ``K**T`` sequences compete, which is the
    joint MAP sequence. Ties resolve to the lexicographically smallest
    sequence.

    Raises
    ------
    CandidateLimitError
        When the number of candidates exceeds ``max_candidates``.
    """
    T = len(dataset)
    belief = belief or AugmentedBelief.state_only(model, p0_state)
    free = T - 1 if anchor_initial else T
    if model.K**free > max_candidates:
        raise CandidateLimitError(
            f"Exhaustive search over {model.K**free} sequences exceeds the limit of "
            f"{max_candidates}; use the moving-window decoder instead."
        )
    prefix: Tuple[int, ...] = ()
    if anchor_initial:
        prefix = (initial_mode(model, dataset, belief)[0],)
    best_cost, best = math.inf, None
    for tail in itertools.product(range(model.K), repeat=free):
        candidate = prefix + tail
        cost = sequence_cost(model, dataset, candidate, belief)
        if best is None or cost < best_cost:
            best_cost, best = cost, candidate
    return ModeSequence(np.array(best), model.K)
