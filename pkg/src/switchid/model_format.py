"""Versioned JSON documents for switching models

A model document carries ``format_version``; :func:`get_model_format` returns
the implementation able to read it. Floats are written with their shortest
round-trip representation, so ``load_model(save_model(m))`` equals ``m``
bit for bit.
"""
import json
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, List

import numpy as np

from switchid.files import ENCODING, write_text
from switchid.model import (
    NetParams,
    NetSpec,
    Submodel,
    SwitchidError,
    SwitchingModel,
    TransitionMatrix,
    ValidationError,
)

CURRENT_FORMAT_VERSION = "v1"


class ModelFormatError(ValidationError):
    """Raised when a model document cannot be read"""

    pass


class ModelFormatVersionError(ModelFormatError):
    """Raised when a non supported model format version is asked"""

    pass


def get_model_format(version: str):
    """Link a format version (v1,..) with its AbstractModelFormat child class

    Parameters
    ----------
    version : str
        e.g. v1

    Returns
    -------
    ModelFormatVx : child class of the AbstractModelFormat

    Raises
    ------
    ModelFormatVersionError : Version of the model format is not supported
    """
    if version == "v1":
        return ModelFormatV1()
    else:
        raise ModelFormatVersionError(f"Model format version {version} not supported.")


def _field(document: dict, key: str, path: str) -> Any:
    if not isinstance(document, dict):
        raise ModelFormatError(f"{path or 'document'}: expected an object.")
    if key not in document:
        raise ModelFormatError(f"{path + '.' if path else ''}{key}: missing field.")
    return document[key]


def _array(value, path: str, ndim: int) -> np.ndarray:
    try:
        array = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{path}: expected numbers.")
    if array.ndim != ndim:
        raise ModelFormatError(f"{path}: expected a {ndim}-dimensional array.")
    if not np.all(np.isfinite(array)):
        raise ModelFormatError(f"{path}: non-finite value.")
    return array


def _count(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ModelFormatError(f"{path}: expected a positive integer, got {value!r}.")
    return value


class AbstractModelFormat(ABC):
    """Abstract class to define the model document layout of a certain version"""

    @property
    @abstractmethod
    def version(self) -> str:
        """Value of the ``format_version`` field"""

    @abstractmethod
    def to_document(self, model: SwitchingModel) -> dict:
        """JSON-compatible document describing the model"""

    @abstractmethod
    def from_document(self, document: dict) -> SwitchingModel:
        """Rebuild the model, raising ModelFormatError with the offending field path"""


class ModelFormatV1(AbstractModelFormat):
    """Model document with the fields ``format_version, n_x, n_u, n_y, K,
    submodels, transition, sigma1, sigma2, x0`` and optional ``sigma_theta``

    Each submodel holds ``state_net`` and ``output_net`` objects of the form
    ``{"spec": {input_dim, layer_dims, activations, output_dim},
    "params": {weights, biases}}``; ``transition`` holds ``pi`` (indexed
    ``[next][prev]``) and ``pi0``.
    """

    @property
    def version(self) -> str:
        return "v1"

    @staticmethod
    def _net_to_document(spec: NetSpec, params: NetParams) -> dict:
        return {
            "spec": {
                "input_dim": spec.input_dim,
                "layer_dims": list(spec.layer_dims),
                "activations": list(spec.activations),
                "output_dim": spec.output_dim,
            },
            "params": {
                "weights": [weight.tolist() for weight in params.weights],
                "biases": [bias.tolist() for bias in params.biases],
            },
        }

    def to_document(self, model: SwitchingModel) -> dict:
        return {
            "format_version": self.version,
            "n_x": model.n_x,
            "n_u": model.n_u,
            "n_y": model.n_y,
            "K": model.K,
            "submodels": [
                {
                    "state_net": self._net_to_document(sub.state_spec, sub.state_params),
                    "output_net": self._net_to_document(sub.output_spec, sub.output_params),
                }
                for sub in model.submodels
            ],
            "transition": {
                "pi": model.transition.pi.tolist(),
                "pi0": model.transition.pi0.tolist(),
            },
            "sigma1": model.sigma1.tolist(),
            "sigma2": model.sigma2.tolist(),
            "x0": model.x0.tolist(),
            "sigma_theta": model.sigma_theta,
        }

    @staticmethod
    def _net_from_document(document: dict, path: str):
        spec_doc = _field(document, "spec", path)
        spec_path = f"{path}.spec"
        activations = _field(spec_doc, "activations", spec_path)
        layer_dims = _field(spec_doc, "layer_dims", spec_path)
        if not isinstance(activations, list) or not isinstance(layer_dims, list):
            raise ModelFormatError(f"{spec_path}: layer_dims and activations must be lists.")
        try:
            spec = NetSpec(
                _count(_field(spec_doc, "input_dim", spec_path), f"{spec_path}.input_dim"),
                tuple(
                    _count(dim, f"{spec_path}.layer_dims[{i}]")
                    for i, dim in enumerate(layer_dims)
                ),
                tuple(activations),
                _count(_field(spec_doc, "output_dim", spec_path), f"{spec_path}.output_dim"),
            )
        except SwitchidError as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"{spec_path}: {exc}")

        params_doc = _field(document, "params", path)
        params_path = f"{path}.params"
        weights = _field(params_doc, "weights", params_path)
        biases = _field(params_doc, "biases", params_path)
        if not isinstance(weights, list) or not isinstance(biases, list):
            raise ModelFormatError(f"{params_path}: weights and biases must be lists.")
        weights = [_array(w, f"{params_path}.weights[{i}]", 2) for i, w in enumerate(weights)]
        biases = [_array(b, f"{params_path}.biases[{i}]", 1) for i, b in enumerate(biases)]
        try:
            params = NetParams(tuple(weights), tuple(biases))
            params.check(spec)
        except SwitchidError as exc:
            raise ModelFormatError(f"{params_path}: {exc}")
        return spec, params

    def from_document(self, document: dict) -> SwitchingModel:
        dims = {
            key: _count(_field(document, key, ""), key)
            for key in ("n_x", "n_u", "n_y", "K")
        }
        submodel_docs = _field(document, "submodels", "")
        if not isinstance(submodel_docs, list) or len(submodel_docs) != dims["K"]:
            raise ModelFormatError(f"submodels: expected a list of K={dims['K']} submodels.")
        submodels: List[Submodel] = []
        for k, sub_doc in enumerate(submodel_docs):
            path = f"submodels[{k}]"
            state_spec, state_params = self._net_from_document(
                _field(sub_doc, "state_net", path), f"{path}.state_net"
            )
            output_spec, output_params = self._net_from_document(
                _field(sub_doc, "output_net", path), f"{path}.output_net"
            )
            if state_spec.output_dim != dims["n_x"] or output_spec.output_dim != dims["n_y"]:
                raise ModelFormatError(f"{path}: network outputs do not match n_x / n_y.")
            if state_spec.input_dim != dims["n_x"] + dims["n_u"]:
                raise ModelFormatError(f"{path}: network inputs do not match n_x + n_u.")
            try:
                submodels.append(
                    Submodel(state_spec, state_params, output_spec, output_params)
                )
            except SwitchidError as exc:
                raise ModelFormatError(f"{path}: {exc}")

        transition_doc = _field(document, "transition", "")
        pi = _array(_field(transition_doc, "pi", "transition"), "transition.pi", 2)
        pi0 = _array(_field(transition_doc, "pi0", "transition"), "transition.pi0", 1)
        try:
            transition = TransitionMatrix(pi, pi0)
        except SwitchidError as exc:
            raise ModelFormatError(f"transition: {exc}")

        sigma1 = _array(_field(document, "sigma1", ""), "sigma1", 2)
        sigma2 = _array(_field(document, "sigma2", ""), "sigma2", 2)
        x0 = _array(_field(document, "x0", ""), "x0", 1)
        sigma_theta = document.get("sigma_theta", 0.0)
        if isinstance(sigma_theta, bool) or not isinstance(sigma_theta, (int, float)):
            raise ModelFormatError("sigma_theta: expected a number.")
        try:
            return SwitchingModel(
                tuple(submodels), transition, sigma1, sigma2, x0, sigma_theta
            )
        except SwitchidError as exc:
            raise ModelFormatError(f"model: {exc}")


def model_to_json(model: SwitchingModel, format_version: str = CURRENT_FORMAT_VERSION) -> str:
    document = get_model_format(format_version).to_document(model)
    return json.dumps(document, indent=2, allow_nan=False)


def model_from_json(text: str) -> SwitchingModel:
    """Parse a model document

    Raises
    ------
    ModelFormatError
        On invalid JSON, with the parser position, or on a schema violation,
        with the field path.
    ModelFormatVersionError
        When ``format_version`` is not supported.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"Invalid model document: {exc}")
    version = _field(document, "format_version", "")
    return get_model_format(version).from_document(document)


def save_model(
    model: SwitchingModel, file_path, format_version=CURRENT_FORMAT_VERSION
) -> None:
    """Write a model document atomically, creating parent directories"""
    write_text(Path(file_path), model_to_json(model, format_version))


def load_model(file_path) -> SwitchingModel:
    """Read a model document written by :func:`save_model`"""
    file_path = Path(file_path)
    if not file_path.is_file():
        raise FileNotFoundError(f"Model file {file_path} does not exist.")
    return model_from_json(file_path.read_text(encoding=ENCODING))
