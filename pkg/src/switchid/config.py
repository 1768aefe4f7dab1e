"""Run configuration: config files, command-line overrides and environment defaults"""
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from dotenv import load_dotenv

from switchid.ekf import EkfConfig
from switchid.em import EmConfig, ModelTemplate
from switchid.model import SwitchidError, ValidationError, as_covariance
from switchid.modes import DEFAULT_MAX_CANDIDATES, WindowConfig

load_dotenv()

OUTPUT_DIR_ENV = "SWITCHID_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "switchid-output"
DEFAULT_MODEL_FILENAME = "model.json"
_TUPLE_FIELDS = ("state_layers", "output_layers", "state_activations", "output_activations")


class ConfigError(ValidationError):
    """Raised when a run configuration is invalid"""

    pass


def default_output_dir() -> Path:
    """Output directory from ``SWITCHID_OUTPUT_DIR``, or ``./switchid-output``"""
    return Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


@dataclass(frozen=True)
class RunConfig:
    """Every setting of an identification run

    A config file is a flat JSON object whose keys are field names of this
    class. ``sigma1`` and ``sigma2`` accept a scalar ``s`` (meaning ``s * I``)
    or a full matrix as nested lists. ``state_layers`` and ``output_layers``
    are the hidden layer widths.
    """

    dataset: Optional[str] = None
    model: Optional[str] = None
    output_dir: Optional[str] = None
    k: int = 2
    restarts: int = 1
    workers: int = 1
    # EM loop
    max_iterations: int = 10
    tol_rel_cost: float = 1e-4
    seed: int = 0
    dirichlet_floor: float = 1e-3
    continue_on_cost_increase: bool = False
    # E-step
    t_w: int = 3
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    # M-step
    epochs: int = 10
    sigma_theta0: float = 1e-2
    sigma_theta_decay: float = 0.9
    p0_state: float = 1.0
    p0_param: float = 0.1
    jitter: float = 1e-12
    joseph: bool = False
    eigen_floor: bool = False
    # networks and noise
    n_x: int = 3
    state_layers: Tuple[int, ...] = (6,)
    output_layers: Tuple[int, ...] = (6,)
    state_activations: Tuple[str, ...] = ("arctan", "identity")
    output_activations: Tuple[str, ...] = ("arctan", "identity")
    sigma1: object = 1e-3
    sigma2: object = 1e-3
    weight_std: float = 0.1

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            value = getattr(self, name)
            if isinstance(value, (list, tuple)):
                object.__setattr__(self, name, tuple(value))

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build a config from a flat mapping, rejecting unknown keys"""
        if not isinstance(values, dict):
            raise ConfigError("A config must be a flat JSON object.")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}.")
        return cls(**values)

    @classmethod
    def from_file(cls, file_path) -> "RunConfig":
        """Read a JSON config file

        Raises
        ------
        FileNotFoundError
            When the file does not exist.
        ConfigError
            When it is not a flat JSON object of known keys.
        """
        file_path = Path(file_path)
        if not file_path.is_file():
            raise FileNotFoundError(f"Config file {file_path} does not exist.")
        try:
            values = json.loads(file_path.read_text(encoding="utf8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{file_path}: invalid JSON ({exc}).")
        return cls.from_mapping(values)

    def merged(self, **overrides) -> "RunConfig":
        """Copy with the overrides applied; None values leave a field unchanged"""
        changes = {key: value for key, value in overrides.items() if value is not None}
        unknown = sorted(set(changes) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}.")
        return replace(self, **changes)

    def validate(self) -> "RunConfig":
        """Check every field before any computation starts

        Raises
        ------
        ConfigError
            Naming the offending field.
        """
        for name in ("k", "restarts", "workers", "n_x"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}.")
        try:
            self.em_config()
            self.window_config()
            template = self.template()
            template.specs(1, 1)
            as_covariance(self.sigma1, self.n_x, "sigma1")
        except (SwitchidError, TypeError) as exc:
            raise ConfigError(str(exc))
        return self

    def ekf_config(self) -> EkfConfig:
        return EkfConfig(
            epochs=self.epochs,
            sigma_theta0=self.sigma_theta0,
            sigma_theta_decay=self.sigma_theta_decay,
            p0_state=self.p0_state,
            p0_param=self.p0_param,
            jitter=self.jitter,
            joseph=self.joseph,
            eigen_floor=self.eigen_floor,
        )

    def window_config(self) -> WindowConfig:
        return WindowConfig(self.t_w, self.max_candidates)

    def em_config(self) -> EmConfig:
        return EmConfig(
            max_iterations=self.max_iterations,
            t_w=self.t_w,
            ekf=self.ekf_config(),
            tol_rel_cost=self.tol_rel_cost,
            seed=self.seed,
            dirichlet_floor=self.dirichlet_floor,
            max_candidates=self.max_candidates,
            continue_on_cost_increase=self.continue_on_cost_increase,
        )

    def template(self) -> ModelTemplate:
        return ModelTemplate(
            n_x=self.n_x,
            state_layers=self.state_layers,
            output_layers=self.output_layers,
            state_activations=self.state_activations,
            output_activations=self.output_activations,
            sigma1=self.sigma1,
            sigma2=self.sigma2,
            weight_std=self.weight_std,
        )

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else default_output_dir()

    def resolved_model_path(self) -> Path:
        """Model file of an identification run, ``<output dir>/model.json`` by default"""
        if self.model:
            return Path(self.model)
        return self.resolved_output_dir() / DEFAULT_MODEL_FILENAME

    def to_dict(self) -> dict:
        content = asdict(self)
        for name in _TUPLE_FIELDS:
            content[name] = list(content[name])
        return content
