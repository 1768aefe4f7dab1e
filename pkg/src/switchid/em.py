"""Hard EM identification of a switching model

Each iteration decodes the mode sequence under the current model (E-step),
re-estimates the transition matrix from the decoded sequence and trains the
submodels with the augmented EKF under it (M-step). The cost tracked across
iterations is

    J = data negative log-likelihood + parameter prior + mode sequence cost

evaluated on the sequence decoded in the same iteration.
"""
from __future__ import annotations

import functools
import json
import logging
import math
import multiprocessing
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from switchid.ekf import AugmentedBelief, EkfConfig, FilterDivergenceError, train
from switchid.model import (
    ModeSequence,
    NetSpec,
    SwitchingModel,
    TransitionMatrix,
    ValidationError,
    as_covariance,
    vectorize,
)
from switchid.modes import (
    DEFAULT_MAX_CANDIDATES,
    WindowConfig,
    moving_window_trace,
    sequence_terms,
)
from switchid.rnn import init_submodel
from switchid.simulate import make_rng, spawn_seeds

logger = logging.getLogger(__name__)

STOP_TOLERANCE = "tolerance"
STOP_FIXPOINT = "fixpoint"
STOP_MAX_ITERATIONS = "max_iterations"
STOP_COST_INCREASE = "cost_increase"
STOP_DIVERGENCE = "divergence"
MONOTONICITY_TOL = 1e-6


@dataclass(frozen=True)
class ModelTemplate:
    """Network shapes and noise settings used to build the initial model

    ``state_layers`` and ``output_layers`` are the hidden layer widths; the
    output layer (``n_x`` resp. ``n_y`` wide) is appended. Activations cover
    every layer including the output layer.
    """

    n_x: int = 3
    state_layers: Tuple[int, ...] = (6,)
    output_layers: Tuple[int, ...] = (6,)
    state_activations: Tuple[str, ...] = ("arctan", "identity")
    output_activations: Tuple[str, ...] = ("arctan", "identity")
    sigma1: object = 1e-3
    sigma2: object = 1e-3
    x0: Optional[Tuple[float, ...]] = None
    weight_std: float = 0.1

    def specs(self, n_u: int, n_y: int) -> Tuple[NetSpec, NetSpec]:
        state_spec = NetSpec(
            self.n_x + n_u,
            tuple(self.state_layers) + (self.n_x,),
            tuple(self.state_activations),
            self.n_x,
        )
        output_spec = NetSpec(
            self.n_x + n_u,
            tuple(self.output_layers) + (n_y,),
            tuple(self.output_activations),
            n_y,
        )
        return state_spec, output_spec

    def build(self, K: int, n_u: int, n_y: int, rng: np.random.Generator) -> SwitchingModel:
        """Random initial model with uniform transition probabilities"""
        state_spec, output_spec = self.specs(n_u, n_y)
        submodels = tuple(
            init_submodel(state_spec, output_spec, rng, self.weight_std) for _ in range(K)
        )
        x0 = np.zeros(self.n_x) if self.x0 is None else np.asarray(self.x0, dtype=float)
        return SwitchingModel(
            submodels,
            TransitionMatrix.uniform(K),
            as_covariance(self.sigma1, self.n_x, "sigma1"),
            as_covariance(self.sigma2, n_y, "sigma2"),
            x0,
        )


@dataclass(frozen=True)
class EmConfig:
    """Settings of the EM loop

    Parameters
    ----------
    max_iterations : int
        Number of M-steps at most; a final E-step evaluates the last model.
    t_w : int
        Moving-window length of the E-step.
    ekf : EkfConfig
    tol_rel_cost : float
        Stop once the relative cost improvement falls below this value.
    seed : int
        Seed of the initial network weights.
    dirichlet_floor : float
        Pseudo-count added to every transition count.
    max_candidates : int
        Limit on ``K**t_w``.
    continue_on_cost_increase : bool
        Keep iterating from the model whose cost rose instead of stopping. The
        increase is still logged and never committed.
    """

    max_iterations: int = 10
    t_w: int = 3
    ekf: EkfConfig = field(default_factory=EkfConfig)
    tol_rel_cost: float = 1e-4
    seed: int = 0
    dirichlet_floor: float = 1e-3
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    continue_on_cost_increase: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError(
                f"max_iterations must be at least 1, got {self.max_iterations}."
            )
        if self.tol_rel_cost < 0:
            raise ValidationError(f"tol_rel_cost must be >= 0, got {self.tol_rel_cost}.")
        if self.dirichlet_floor < 0:
            raise ValidationError(
                f"dirichlet_floor must be >= 0, got {self.dirichlet_floor}."
            )

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.t_w, self.max_candidates)


@dataclass(frozen=True)
class CostBreakdown:
    data_nll: float
    param_prior: float
    sequence_cost: float

    @property
    def total(self) -> float:
        return math.fsum([self.data_nll, self.param_prior, self.sequence_cost])


@dataclass
class IterationRecord:
    """Bookkeeping of one E-step and the M-step that followed it"""

    iteration: int
    cost: float
    data_nll: float
    param_prior: float
    sequence_cost: float
    transition: List[List[float]]
    pi0: List[float]
    modes_changed: Optional[int]
    candidates: int
    seconds_e_step: float
    seconds_m_step: float = 0.0
    accepted: bool = True

    def progress(self, previous_cost: Optional[float]) -> dict:
        """Machine-readable progress record"""
        return {
            "iteration": self.iteration,
            "J": self.cost,
            "dJ": None if previous_cost is None else self.cost - previous_cost,
            "modes_changed": self.modes_changed,
            "seconds": self.seconds_e_step + self.seconds_m_step,
        }


@dataclass
class EmReport:
    """Outcome of an EM run

    ``status`` is ``"ok"`` or ``"degraded"`` (the filter diverged and the
    best model so far was returned). ``stop_reason`` names the criterion that
    ended the loop.
    """

    records: List[IterationRecord] = field(default_factory=list)
    modes: Optional[ModeSequence] = None
    stop_reason: Optional[str] = None
    status: str = "ok"
    seed: int = 0
    seconds: dict = field(default_factory=lambda: {"e_step": 0.0, "m_step": 0.0})
    message: Optional[str] = None

    @property
    def committed(self) -> List[IterationRecord]:
        return [record for record in self.records if record.accepted]

    @property
    def costs(self) -> List[float]:
        return [record.cost for record in self.committed]

    @property
    def final_cost(self) -> float:
        return self.committed[-1].cost if self.committed else math.inf

    @property
    def degraded(self) -> bool:
        return self.status != "ok"

    def monotonicity_violations(self, tol: float = MONOTONICITY_TOL) -> int:
        """Iterations whose cost exceeds the previous one by more than ``tol`` relative"""
        costs = [record.cost for record in self.records]
        return sum(
            1 for prev, cur in zip(costs, costs[1:]) if cur > prev + tol * abs(prev)
        )

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "stop_reason": self.stop_reason,
            "message": self.message,
            "seed": self.seed,
            "final_cost": self.final_cost,
            "seconds": dict(self.seconds),
            "iterations": [asdict(record) for record in self.records],
            "modes": None if self.modes is None else self.modes.labels.tolist(),
        }


def update_transition(
    decoded: ModeSequence, s0: Optional[int] = None, K: Optional[int] = None, eps: float = 0.0
) -> TransitionMatrix:
    """Transition matrix from the transition counts of a decoded sequence

    ``pi[j, l] = (eps + #{t: s_t = j, s_{t-1} = l}) / sum_j (eps + count)``.
    A column without any count (possible only with ``eps = 0``) is uniform.
    ``pi0`` is the one-hot vector at ``s0`` (the first decoded mode by
    default) smoothed by ``eps``.

    Examples
    --------
    >>> update_transition(ModeSequence.from_labels([1, 1, 2, 2, 1], 2)).pi
    array([[0.5, 0.5],
           [0.5, 0.5]])
    """
    K = decoded.K if K is None else K
    if len(decoded) < 1:
        raise ValidationError("Cannot estimate transitions from an empty sequence.")
    modes = decoded.modes
    counts = np.zeros((K, K))
    np.add.at(counts, (modes[1:], modes[:-1]), 1.0)
    smoothed = counts + eps
    totals = smoothed.sum(axis=0)
    pi = np.full((K, K), 1.0 / K)
    used = totals > 0
    pi[:, used] = smoothed[:, used] / totals[used]
    s0 = int(modes[0]) if s0 is None else int(s0)
    pi0 = np.full(K, eps)
    pi0[s0] += 1.0
    pi0 /= K * eps + 1.0
    return TransitionMatrix(pi, pi0)


def parameter_prior(model: SwitchingModel, p0_param: float) -> float:
    """Negative log of the zero-mean Gaussian prior ``N(0, p0_param I)`` on all parameters"""
    terms = []
    for submodel in model.submodels:
        values = vectorize(submodel).values
        terms.append(0.5 * float(values @ values) / p0_param)
        terms.append(0.5 * values.size * math.log(2.0 * math.pi * p0_param))
    return math.fsum(terms)


def cost_breakdown(
    model: SwitchingModel,
    dataset,
    modes: ModeSequence,
    p0_state: float = 1.0,
    p0_param: float = 0.1,
) -> CostBreakdown:
    steps, transitions = sequence_terms(model, dataset, modes, p0_state=p0_state)
    constant = 0.5 * len(dataset) * model.n_y * math.log(2.0 * math.pi)
    return CostBreakdown(
        data_nll=math.fsum(list(steps) + [constant]),
        param_prior=parameter_prior(model, p0_param),
        sequence_cost=math.fsum(transitions),
    )


def total_cost(
    model: SwitchingModel,
    dataset,
    modes: ModeSequence,
    p0_state: float = 1.0,
    p0_param: float = 0.1,
) -> float:
    """Cost ``J`` of a model and a mode sequence on a dataset

    The data term sums the filtered per-step negative log-likelihoods of the
    outputs (including the ``0.5 n_y log(2 pi)`` constants), the parameter
    term is a Gaussian prior at the scale of the initial parameter covariance
    and the sequence term is ``-log pi0[s_1] - sum log pi[s_t, s_{t-1}]``.
    """
    return cost_breakdown(model, dataset, modes, p0_state, p0_param).total


def _check_dataset(dataset, K: int) -> None:
    if len(dataset) < 2:
        raise ValidationError(f"Identification needs at least 2 samples, got {len(dataset)}.")
    if K < 1:
        raise ValidationError(f"K must be at least 1, got {K}.")
    if not dataset.has_outputs:
        raise ValidationError("Identification needs finite outputs at every sample.")


def run(
    dataset,
    K: int,
    config: Optional[EmConfig] = None,
    template: Optional[ModelTemplate] = None,
    progress: Optional[Callable[[dict], None]] = None,
    initial_model: Optional[SwitchingModel] = None,
) -> Tuple[SwitchingModel, ModeSequence, EmReport]:
    """Identify a K-mode switching model from a dataset

    Parameters
    ----------
    dataset : switchid.dataset.Dataset
    K : int
        Number of modes.
    config : EmConfig
    template : ModelTemplate
        Shapes of the randomly initialized model; ignored when
        ``initial_model`` is given.
    progress : callable, optional
        Called with one record per E-step (see :meth:`IterationRecord.progress`).
    initial_model : SwitchingModel, optional
        Starting model instead of a random one.

    Returns
    -------
    model : SwitchingModel
        Model of the best committed iteration.
    modes : ModeSequence
        Mode sequence decoded under that model.
    report : EmReport

    Notes
    -----
    The loop stops when the relative improvement of J drops below
    ``tol_rel_cost``, when the decoded sequence no longer changes or after
    ``max_iterations`` M-steps. An iteration whose cost rises by more than a
    relative ``1e-6`` is logged and not committed; it ends the loop unless
    ``continue_on_cost_increase`` is set. When the filter diverges, the model
    and sequence of the last committed iteration are returned with
    ``status="degraded"``.
    """
    config = config or EmConfig()
    template = template or ModelTemplate()
    _check_dataset(dataset, K)
    ekf_config = config.ekf
    window = config.window
    window.check(len(dataset), K)

    if initial_model is None:
        model = template.build(K, dataset.n_u, dataset.n_y, make_rng(config.seed))
    else:
        dataset.check_model(initial_model)
        model = initial_model
    belief = AugmentedBelief.initial(model, ekf_config)
    report = EmReport(seed=config.seed)
    best: Optional[Tuple[SwitchingModel, ModeSequence, float]] = None

    for iteration in range(config.max_iterations + 1):
        started = time.perf_counter()
        trace = moving_window_trace(model, dataset, window, p0_state=ekf_config.p0_state)
        modes = trace.modes
        cost = cost_breakdown(model, dataset, modes, ekf_config.p0_state, ekf_config.p0_param)
        e_seconds = time.perf_counter() - started
        report.seconds["e_step"] += e_seconds

        previous = best
        record = IterationRecord(
            iteration=iteration,
            cost=cost.total,
            data_nll=cost.data_nll,
            param_prior=cost.param_prior,
            sequence_cost=cost.sequence_cost,
            transition=model.transition.pi.tolist(),
            pi0=model.transition.pi0.tolist(),
            modes_changed=None if previous is None else modes.changes(previous[1]),
            candidates=trace.candidates,
            seconds_e_step=e_seconds,
        )
        report.records.append(record)

        if previous is None:
            best = (model, modes, cost.total)
        elif cost.total > previous[2] + MONOTONICITY_TOL * abs(previous[2]):
            logger.warning(
                f"Cost increased at iteration {iteration}: "
                f"{previous[2]:.10g} -> {cost.total:.10g}; keeping the last committed "
                f"iteration."
            )
            record.accepted = False
            if not config.continue_on_cost_increase:
                report.stop_reason = STOP_COST_INCREASE
        else:
            best = (model, modes, cost.total)
            improvement = (previous[2] - cost.total) / max(abs(previous[2]), 1e-300)
            if improvement < config.tol_rel_cost:
                report.stop_reason = STOP_TOLERANCE
            elif record.modes_changed == 0:
                report.stop_reason = STOP_FIXPOINT
        if report.stop_reason is None and iteration == config.max_iterations:
            report.stop_reason = STOP_MAX_ITERATIONS

        if report.stop_reason is None:
            started = time.perf_counter()
            transition = update_transition(modes, K=K, eps=config.dirichlet_floor)
            try:
                model, belief, residual_mse = train(
                    model.with_transition(transition), dataset, modes, belief, ekf_config
                )
            except FilterDivergenceError as exc:
                report.status = "degraded"
                report.stop_reason = STOP_DIVERGENCE
                report.message = str(exc)
                logger.warning(
                    f"Filter diverged in the M-step of iteration {iteration}; "
                    f"returning the model of the last committed iteration."
                )
            else:
                logger.debug(
                    f"M-step {iteration}: residual MSE per epoch {residual_mse.tolist()}"
                )
            finally:
                m_seconds = time.perf_counter() - started
                record.seconds_m_step = m_seconds
                report.seconds["m_step"] += m_seconds

        _emit_progress(record, previous, progress)
        if report.stop_reason is not None:
            break

    model, modes, _ = best
    report.modes = modes
    logger.info(
        f"EM stopped ({report.stop_reason}) after {len(report.records)} E-steps, "
        f"J = {report.final_cost:.10g}."
    )
    return model, modes, report


def _emit_progress(record: IterationRecord, previous, progress) -> None:
    message = record.progress(None if previous is None else previous[2])
    logger.info(json.dumps(message))
    if progress is not None:
        progress(message)


def _run_seed(seed: int, dataset, K: int, config: EmConfig, template: ModelTemplate):
    return run(dataset, K, replace(config, seed=seed), template)


def run_restarts(
    dataset,
    K: int,
    config: Optional[EmConfig] = None,
    template: Optional[ModelTemplate] = None,
    restarts: int = 1,
    workers: int = 1,
    progress: Optional[Callable[[dict], None]] = None,
) -> Tuple[SwitchingModel, ModeSequence, EmReport, List[EmReport]]:
    """Best of several EM runs from independent random initializations

    With a single restart the configured seed is used as is; otherwise the
    restart seeds are spawned from it. Runs execute in ``workers`` processes
    and the run with the lowest final cost wins, ties going to the earliest
    restart.

    Returns
    -------
    model, modes, report
        Of the winning run.
    reports : list of EmReport
        Every run, in restart order.
    """
    config = config or EmConfig()
    template = template or ModelTemplate()
    if restarts < 1:
        raise ValidationError(f"restarts must be at least 1, got {restarts}.")
    if restarts == 1:
        model, modes, report = run(dataset, K, config, template, progress)
        return model, modes, report, [report]

    seeds = spawn_seeds(config.seed, restarts)
    worker = functools.partial(
        _run_seed, dataset=dataset, K=K, config=config, template=template
    )
    if workers > 1:
        with multiprocessing.Pool(min(workers, restarts)) as pool:
            results = pool.map(worker, seeds)
    else:
        results = [worker(seed) for seed in seeds]
    for index, (_, _, report) in enumerate(results):
        logger.info(
            f"Restart {index + 1}/{restarts}: J = {report.final_cost:.10g} ({report.status})"
        )
        if progress is not None:
            progress(
                {
                    "restart": index + 1,
                    "seed": report.seed,
                    "J": report.final_cost,
                    "status": report.status,
                }
            )
    best = min(range(restarts), key=lambda index: (results[index][2].final_cost, index))
    model, modes, report = results[best]
    return model, modes, report, [result[2] for result in results]

