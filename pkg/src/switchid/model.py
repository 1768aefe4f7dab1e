"""Domain types of a switching state-space model

A switching model holds ``K`` submodels, each made of a state network and an
output network (see :mod:`switchid.rnn`), a Markov transition matrix over the
modes and the noise covariances of the state-space system.

All types are immutable value objects: arrays are copied on construction and
flagged read-only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky

ACTIVATIONS = ("tanh", "arctan", "relu", "sigmoid", "identity")
STOCHASTIC_TOL = 1e-12
NETS = ("state", "output")


class SwitchidError(Exception):
    """Base class of the switchid exceptions"""

    pass


class StructuralError(SwitchidError, ValueError):
    """Raised when shapes or dimensions do not agree"""

    pass


class ValidationError(SwitchidError, ValueError):
    """Raised when a value violates a model invariant"""

    pass


def _readonly(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _check_finite(array: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains non-finite values.")


def check_spd(matrix: np.ndarray, name: str) -> None:
    """Raise ValidationError when the matrix is not symmetric positive definite

    Parameters
    ----------
    matrix : numpy.ndarray
        Square matrix to check.
    name : str
        Name used in the error message.
    """
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise StructuralError(f"{name} must be a square matrix, got shape {matrix.shape}.")
    _check_finite(matrix, name)
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12):
        raise ValidationError(f"{name} is not symmetric.")
    try:
        cholesky(matrix, lower=True)
    except LinAlgError:
        raise ValidationError(f"{name} is not positive definite.")


def as_covariance(value, dim: int, name: str = "covariance") -> np.ndarray:
    """Build a covariance matrix from a scalar (``value * I``) or a full matrix

    Examples
    --------
    >>> as_covariance(0.5, 2)
    array([[0.5, 0. ],
           [0. , 0.5]])
    """
    array = np.asarray(value, dtype=float)
    if array.ndim == 0:
        array = float(array) * np.eye(dim)
    if array.shape != (dim, dim):
        raise StructuralError(f"{name} must be {dim}x{dim}, got shape {array.shape}.")
    check_spd(array, name)
    return array


@dataclass(frozen=True)
class NetSpec:
    """Layer structure of a feedforward network applied recurrently

    Parameters
    ----------
    input_dim : int
        Width of the network input ``[x; u]``, i.e. ``n_x + n_u``.
    layer_dims : tuple of int
        Widths of the hidden layers followed by the output layer.
    activations : tuple of str
        One activation per layer, from ``ACTIVATIONS``. The state form of the
        network ends on an affine layer and ignores the last activation.
    output_dim : int
        ``n_x`` for state networks, ``n_y`` for output networks.
    """

    input_dim: int
    layer_dims: Tuple[int, ...]
    activations: Tuple[str, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(dim) for dim in self.layer_dims))
        object.__setattr__(self, "activations", tuple(str(act) for act in self.activations))
        if int(self.input_dim) < 1:
            raise StructuralError(f"input_dim must be at least 1, got {self.input_dim}.")
        if not self.layer_dims:
            raise StructuralError("layer_dims must contain at least one layer.")
        if any(dim < 1 for dim in self.layer_dims):
            raise StructuralError(f"Layer widths must be positive, got {self.layer_dims}.")
        if self.layer_dims[-1] != self.output_dim:
            raise StructuralError(
                f"Last layer width {self.layer_dims[-1]} differs from "
                f"output_dim {self.output_dim}."
            )
        if len(self.activations) != len(self.layer_dims):
            raise StructuralError(
                f"Expected {len(self.layer_dims)} activations, got {len(self.activations)}."
            )
        unknown = [act for act in self.activations if act not in ACTIVATIONS]
        if unknown:
            raise ValidationError(
                f"Unknown activation(s) {unknown}, choose from {list(ACTIVATIONS)}."
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        """Weight matrix shape (rows, cols) of every layer"""
        widths = (self.input_dim,) + self.layer_dims
        return [(widths[i + 1], widths[i]) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(rows * cols + rows for rows, cols in self.shapes)


@dataclass(frozen=True, eq=False)
class NetParams:
    """Weights and biases of one network, ``weights[i]`` is ``W^{i+1}``"""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        weights = tuple(_readonly(w) for w in self.weights)
        biases = tuple(_readonly(b) for b in self.biases)
        if len(weights) != len(biases):
            raise StructuralError(
                f"Got {len(weights)} weight matrices and {len(biases)} bias vectors."
            )
        for i, (weight, bias) in enumerate(zip(weights, biases)):
            if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
                raise StructuralError(
                    f"Layer {i + 1}: weight shape {weight.shape} does not match "
                    f"bias shape {bias.shape}."
                )
            _check_finite(weight, f"Layer {i + 1} weights")
            _check_finite(bias, f"Layer {i + 1} biases")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    def __eq__(self, other):
        if not isinstance(other, NetParams) or len(self.weights) != len(other.weights):
            return False
        return all(
            np.array_equal(a, b) for a, b in zip(self.weights, other.weights)
        ) and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))

    def check(self, spec: NetSpec) -> None:
        """Raise StructuralError when the shapes disagree with the NetSpec"""
        if len(self.weights) != spec.n_layers:
            raise StructuralError(
                f"Expected {spec.n_layers} layers, got {len(self.weights)}."
            )
        for i, (shape, weight) in enumerate(zip(spec.shapes, self.weights)):
            if weight.shape != shape:
                raise StructuralError(
                    f"Layer {i + 1}: expected weight shape {shape}, got {weight.shape}."
                )

    def flat(self) -> np.ndarray:
        """Concatenate the layers, each as row-major W followed by b"""
        parts = []
        for weight, bias in zip(self.weights, self.biases):
            parts.append(weight.ravel())
            parts.append(bias)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_flat(cls, spec: NetSpec, values: np.ndarray) -> NetParams:
        """Inverse of :meth:`flat` for the layer shapes of ``spec``"""
        values = np.asarray(values, dtype=float)
        if values.shape != (spec.n_params,):
            raise StructuralError(
                f"Expected {spec.n_params} parameters, got {values.shape}."
            )
        weights, biases, offset = [], [], 0
        for rows, cols in spec.shapes:
            weights.append(values[offset:offset + rows * cols].reshape(rows, cols))
            offset += rows * cols
            biases.append(values[offset:offset + rows])
            offset += rows
        return cls(tuple(weights), tuple(biases))

    @classmethod
    def zeros(cls, spec: NetSpec) -> NetParams:
        return cls.from_flat(spec, np.zeros(spec.n_params))


@dataclass(frozen=True, eq=False)
class Submodel:
    """One mode of the switching model: a state network and an output network"""

    state_spec: NetSpec
    state_params: NetParams
    output_spec: NetSpec
    output_params: NetParams

    def __post_init__(self):
        self.state_params.check(self.state_spec)
        self.output_params.check(self.output_spec)
        if self.state_spec.input_dim != self.output_spec.input_dim:
            raise StructuralError(
                "State and output networks must share the input dimension n_x + n_u."
            )
        if self.state_spec.input_dim < self.state_spec.output_dim:
            raise StructuralError("State network input is narrower than the state.")

    def __eq__(self, other):
        return (
            isinstance(other, Submodel)
            and self.state_spec == other.state_spec
            and self.output_spec == other.output_spec
            and self.state_params == other.state_params
            and self.output_params == other.output_params
        )

    @property
    def n_x(self) -> int:
        return self.state_spec.output_dim

    @property
    def n_u(self) -> int:
        return self.state_spec.input_dim - self.n_x

    @property
    def n_y(self) -> int:
        return self.output_spec.output_dim

    @property
    def n_state_params(self) -> int:
        return self.state_spec.n_params

    @property
    def n_params(self) -> int:
        return self.state_spec.n_params + self.output_spec.n_params


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter vector of one submodel

    Layout: the state network first, then the output network; within a network
    the layers in order, each layer as its row-major weight matrix followed by
    its bias vector. Saved models and the EKF block addressing rely on it.
    """

    values: np.ndarray
    state_spec: NetSpec
    output_spec: NetSpec

    def __post_init__(self):
        values = _readonly(self.values)
        expected = self.state_spec.n_params + self.output_spec.n_params
        if values.shape != (expected,):
            raise StructuralError(
                f"Expected a parameter vector of length {expected}, got {values.shape}."
            )
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_state(self) -> int:
        """Length of the state network block"""
        return self.state_spec.n_params

    @property
    def state_block(self) -> np.ndarray:
        return self.values[: self.n_state]

    @property
    def output_block(self) -> np.ndarray:
        return self.values[self.n_state:]

    def offset(self, net: str, layer: int, row: int, col: Optional[int] = None) -> int:
        """Flat offset of a weight entry, or of a bias entry when ``col`` is None

        Parameters
        ----------
        net : {"state", "output"}
        layer : int
            0-based layer index.
        row, col : int
            Entry of ``W[row, col]`` or ``b[row]``.
        """
        if net not in NETS:
            raise StructuralError(f"net must be one of {NETS}, got {net!r}.")
        spec = self.state_spec if net == "state" else self.output_spec
        offset = 0 if net == "state" else self.n_state
        if not 0 <= layer < spec.n_layers:
            raise StructuralError(f"Layer {layer} out of range for {spec.n_layers} layers.")
        for rows, cols in spec.shapes[:layer]:
            offset += rows * cols + rows
        rows, cols = spec.shapes[layer]
        if not 0 <= row < rows or (col is not None and not 0 <= col < cols):
            raise StructuralError(
                f"Entry ({row}, {col}) out of range for shape {(rows, cols)}."
            )
        if col is None:
            return offset + rows * cols + row
        return offset + row * cols + col


def vectorize(submodel: Submodel) -> ParamVector:
    """Flatten the parameters of one submodel, see :class:`ParamVector` for the layout"""
    return ParamVector(
        np.concatenate([submodel.state_params.flat(), submodel.output_params.flat()]),
        submodel.state_spec,
        submodel.output_spec,
    )


def devectorize(vector: ParamVector) -> Submodel:
    """Rebuild the submodel described by a ParamVector"""
    return Submodel(
        vector.state_spec,
        NetParams.from_flat(vector.state_spec, vector.state_block),
        vector.output_spec,
        NetParams.from_flat(vector.output_spec, vector.output_block),
    )


def validate_transition(pi: np.ndarray, pi0: np.ndarray) -> None:
    """Check the mode transition matrix ``pi[next, prev]`` and initial distribution

    Every column of ``pi`` and ``pi0`` itself must be a probability distribution.
    """
    if pi.ndim != 2 or pi.shape[0] != pi.shape[1] or pi.shape[0] < 1:
        raise StructuralError(f"Transition matrix must be square, got shape {pi.shape}.")
    if pi0.shape != (pi.shape[0],):
        raise StructuralError(
            f"Initial distribution must have length {pi.shape[0]}, got {pi0.shape}."
        )
    _check_finite(pi, "Transition matrix")
    _check_finite(pi0, "Initial distribution")
    if np.any(pi < 0) or np.any(pi0 < 0):
        raise ValidationError("Transition probabilities must be nonnegative.")
    column_sums = pi.sum(axis=0)
    if np.any(np.abs(column_sums - 1.0) > STOCHASTIC_TOL):
        raise ValidationError(
            f"Transition matrix columns must sum to 1, got {column_sums.tolist()}."
        )
    if abs(pi0.sum() - 1.0) > STOCHASTIC_TOL:
        raise ValidationError(f"Initial distribution must sum to 1, got {pi0.sum()}.")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Mode transition probabilities ``pi[next, prev]`` and initial distribution ``pi0``

    Columns sum to one: ``pi[j, l]`` is the probability of moving to mode ``j``
    from mode ``l``.
    """

    pi: np.ndarray
    pi0: np.ndarray

    def __post_init__(self):
        pi, pi0 = _readonly(self.pi), _readonly(self.pi0)
        validate_transition(pi, pi0)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "pi0", pi0)

    def __eq__(self, other):
        return (
            isinstance(other, TransitionMatrix)
            and np.array_equal(self.pi, other.pi)
            and np.array_equal(self.pi0, other.pi0)
        )

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @classmethod
    def uniform(cls, K: int) -> TransitionMatrix:
        return cls(np.full((K, K), 1.0 / K), np.full(K, 1.0 / K))

    @property
    def log_pi(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pi)

    @property
    def log_pi0(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pi0)

    def permuted(self, order: Sequence[int]) -> TransitionMatrix:
        """Relabel the modes so that new mode ``i`` is old mode ``order[i]``"""
        order = np.asarray(order, dtype=int)
        return TransitionMatrix(self.pi[np.ix_(order, order)], self.pi0[order])


@dataclass(frozen=True, eq=False)
class ModeSequence:
    """Decoded (or true) mode per time step, stored 0-based

    Use :meth:`from_labels` and :attr:`labels` for the 1-based labels used in
    every file format.
    """

    modes: np.ndarray
    K: int

    def __post_init__(self):
        modes = _readonly(np.asarray(self.modes).ravel(), dtype=int)
        if int(self.K) < 1:
            raise ValidationError(f"K must be at least 1, got {self.K}.")
        if modes.size and (modes.min() < 0 or modes.max() >= self.K):
            raise ValidationError(f"Mode labels must lie in 1..{self.K}.")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "K", int(self.K))

    def __len__(self):
        return self.modes.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, ModeSequence)
            and self.K == other.K
            and np.array_equal(self.modes, other.modes)
        )

    def __repr__(self):
        return f"ModeSequence(K={self.K}, labels={self.labels.tolist()})"

    @classmethod
    def from_labels(cls, labels: Iterable[int], K: Optional[int] = None) -> ModeSequence:
        labels = np.asarray(list(labels), dtype=int)
        if K is None:
            K = int(labels.max()) if labels.size else 1
        return cls(labels - 1, K)

    @property
    def labels(self) -> np.ndarray:
        return self.modes + 1

    def relabeled(self, order: Sequence[int]) -> ModeSequence:
        """Sequence under the relabeling where new mode ``i`` is old mode ``order[i]``"""
        inverse = np.argsort(np.asarray(order, dtype=int))
        return ModeSequence(inverse[self.modes], self.K)

    def changes(self, other: ModeSequence) -> int:
        """Number of time steps where the two sequences differ"""
        if len(other) != len(self):
            raise StructuralError("Mode sequences have different lengths.")
        return int(np.count_nonzero(self.modes != other.modes))


@dataclass(frozen=True, eq=False)
class SwitchingModel:
    """K submodels with Markov switching and Gaussian noise

    Parameters
    ----------
    submodels : tuple of Submodel
        All submodels share n_x, n_u and n_y.
    transition : TransitionMatrix
    sigma1 : numpy.ndarray
        n_x x n_x process noise covariance.
    sigma2 : numpy.ndarray
        n_y x n_y measurement noise covariance.
    x0 : numpy.ndarray
        Initial state mean.
    sigma_theta : float
        Parameter process noise scale reached at the end of training.
    """

    submodels: Tuple[Submodel, ...]
    transition: TransitionMatrix
    sigma1: np.ndarray
    sigma2: np.ndarray
    x0: np.ndarray
    sigma_theta: float = 1e-2

    def __post_init__(self):
        submodels = tuple(self.submodels)
        if not submodels:
            raise StructuralError("A switching model needs at least one submodel.")
        first = submodels[0]
        for k, submodel in enumerate(submodels[1:], start=2):
            dims = (submodel.n_x, submodel.n_u, submodel.n_y)
            if dims != (first.n_x, first.n_u, first.n_y):
                raise StructuralError(f"Submodel {k} dimensions differ from submodel 1.")
        if self.transition.K != len(submodels):
            raise StructuralError(
                f"Transition matrix has {self.transition.K} modes for "
                f"{len(submodels)} submodels."
            )
        sigma1 = _readonly(self.sigma1)
        sigma2 = _readonly(self.sigma2)
        x0 = _readonly(self.x0)
        if sigma1.shape != (first.n_x, first.n_x) or sigma2.shape != (first.n_y, first.n_y):
            raise StructuralError("Noise covariances do not match n_x / n_y.")
        check_spd(sigma1, "sigma1")
        check_spd(sigma2, "sigma2")
        if x0.shape != (first.n_x,):
            raise StructuralError(f"x0 must have length {first.n_x}, got {x0.shape}.")
        _check_finite(x0, "x0")
        if not math.isfinite(self.sigma_theta) or self.sigma_theta < 0:
            raise ValidationError(
                f"sigma_theta must be finite and >= 0, got {self.sigma_theta}."
            )
        object.__setattr__(self, "submodels", submodels)
        object.__setattr__(self, "sigma1", sigma1)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "sigma_theta", float(self.sigma_theta))

    def __eq__(self, other):
        return (
            isinstance(other, SwitchingModel)
            and self.submodels == other.submodels
            and self.transition == other.transition
            and np.array_equal(self.sigma1, other.sigma1)
            and np.array_equal(self.sigma2, other.sigma2)
            and np.array_equal(self.x0, other.x0)
            and self.sigma_theta == other.sigma_theta
        )

    @property
    def K(self) -> int:
        return len(self.submodels)

    @property
    def n_x(self) -> int:
        return self.submodels[0].n_x

    @property
    def n_u(self) -> int:
        return self.submodels[0].n_u

    @property
    def n_y(self) -> int:
        return self.submodels[0].n_y

    def with_submodels(self, submodels: Sequence[Submodel]) -> SwitchingModel:
        return replace(self, submodels=tuple(submodels))

    def with_transition(self, transition: TransitionMatrix) -> SwitchingModel:
        return replace(self, transition=transition)

    def permuted(self, order: Sequence[int]) -> SwitchingModel:
        """Relabel the modes so that new mode ``i`` is old mode ``order[i]``"""
        return replace(
            self,
            submodels=tuple(self.submodels[k] for k in order),
            transition=self.transition.permuted(order),
        )
