"""Feedforward networks used as the state map and the output map of a submodel

A network maps ``z = [x; u]`` through layers ``h_i = W_i a_{i-1} + b_i`` with
``a_0 = z`` and ``a_i = act_i(h_i)``. The state form returns the last affine
value ``h_L``, the output form returns ``act_L(h_L)``. Jacobians with respect
to the state and to the flattened parameters (see
:class:`switchid.model.ParamVector`) are obtained by backward accumulation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from switchid.model import NetParams, NetSpec, StructuralError, Submodel


def _identity(z):
    return z


def _identity_grad(z):
    return np.ones_like(z)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


def _arctan_grad(z):
    return 1.0 / (1.0 + z**2)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    # subgradient 0 at the kink
    return (z > 0).astype(float)


def _sigmoid_grad(z):
    s = expit(z)
    return s * (1.0 - s)


ACTIVATION_FUNCTIONS: Dict[str, Tuple[Callable, Callable]] = {
    "tanh": (np.tanh, _tanh_grad),
    "arctan": (np.arctan, _arctan_grad),
    "relu": (_relu, _relu_grad),
    "sigmoid": (expit, _sigmoid_grad),
    "identity": (_identity, _identity_grad),
}


@dataclass(frozen=True)
class JacobianPair:
    """Jacobian of a network output with respect to the state and the parameters

    ``d_wrt_params`` has zero columns when the parameter Jacobian was not requested.
    """

    d_wrt_state: np.ndarray
    d_wrt_params: np.ndarray


def _stack_input(spec: NetSpec, params: NetParams, x, u) -> np.ndarray:
    params.check(spec)
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
    if x.size + u.size != spec.input_dim:
        raise StructuralError(
            f"Network expects an input of width {spec.input_dim}, "
            f"got x of size {x.size} and u of size {u.size}."
        )
    return np.concatenate([x, u])


def _forward(spec: NetSpec, params: NetParams, z: np.ndarray):
    """Layer inputs ``a_{i-1}`` and pre-activations ``h_i`` of every layer"""
    inputs: List[np.ndarray] = []
    pre: List[np.ndarray] = []
    a = z
    for i, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        h = weight @ a + bias
        pre.append(h)
        if i < spec.n_layers - 1:
            a = ACTIVATION_FUNCTIONS[spec.activations[i]][0](h)
    return inputs, pre


def _backward(
    spec: NetSpec,
    params: NetParams,
    inputs: List[np.ndarray],
    pre: List[np.ndarray],
    grad: np.ndarray,
    n_x: int,
    with_params: bool,
) -> JacobianPair:
    blocks: List[Optional[np.ndarray]] = [None] * spec.n_layers
    for i in reversed(range(spec.n_layers)):
        if with_params:
            d_weight = grad[:, :, None] * inputs[i][None, None, :]
            d_weight = d_weight.reshape(grad.shape[0], -1)
            blocks[i] = np.hstack([d_weight, grad])
        grad = grad @ params.weights[i]
        if i > 0:
            derivative = ACTIVATION_FUNCTIONS[spec.activations[i - 1]][1]
            grad = grad * derivative(pre[i - 1])[None, :]
    d_params = np.hstack(blocks) if with_params else np.zeros((grad.shape[0], 0))
    return JacobianPair(grad[:, :n_x], d_params)


def linearize_state(
    spec: NetSpec, params: NetParams, x, u, with_params: bool = True
) -> Tuple[np.ndarray, JacobianPair]:
    """Next state ``N_x(x, u)`` and its Jacobians in a single pass"""
    z = _stack_input(spec, params, x, u)
    inputs, pre = _forward(spec, params, z)
    jacobian = _backward(
        spec, params, inputs, pre, np.eye(spec.output_dim), spec.output_dim, with_params
    )
    return pre[-1], jacobian


def linearize_output(
    spec: NetSpec,
    params: NetParams,
    x,
    u,
    n_x: Optional[int] = None,
    with_params: bool = True,
) -> Tuple[np.ndarray, JacobianPair]:
    """Output ``N_y(x, u)`` and its Jacobians in a single pass

    ``n_x`` defaults to the size of ``x``.
    """
    z = _stack_input(spec, params, x, u)
    n_x = np.atleast_1d(x).size if n_x is None else n_x
    inputs, pre = _forward(spec, params, z)
    activation, derivative = ACTIVATION_FUNCTIONS[spec.activations[-1]]
    jacobian = _backward(
        spec, params, inputs, pre, np.diag(derivative(pre[-1])), n_x, with_params
    )
    return activation(pre[-1]), jacobian


def forward_state(spec: NetSpec, params: NetParams, x, u) -> np.ndarray:
    """Evaluate the state network, ending on the last affine layer

    Examples
    --------
    >>> import numpy as np
    >>> spec = NetSpec(2, (1,), ("identity",), 1)
    >>> params = NetParams((np.array([[0.5, 1.0]]),), (np.array([0.0]),))
    >>> forward_state(spec, params, [2.0], [1.0])
    array([2.])
    """
    z = _stack_input(spec, params, x, u)
    return _forward(spec, params, z)[1][-1]


def forward_output(spec: NetSpec, params: NetParams, x, u) -> np.ndarray:
    """Evaluate the output network, including the last activation"""
    z = _stack_input(spec, params, x, u)
    pre = _forward(spec, params, z)[1][-1]
    return ACTIVATION_FUNCTIONS[spec.activations[-1]][0](pre)


def jacobian_state(spec: NetSpec, params: NetParams, x, u) -> JacobianPair:
    return linearize_state(spec, params, x, u)[1]


def jacobian_output(spec: NetSpec, params: NetParams, x, u) -> JacobianPair:
    return linearize_output(spec, params, x, u)[1]


def init_params(
    spec: NetSpec, rng: np.random.Generator, weight_std: float = 0.1
) -> NetParams:
    """Random weights drawn from N(0, weight_std^2), zero biases"""
    weights = tuple(rng.normal(0.0, weight_std, size=shape) for shape in spec.shapes)
    biases = tuple(np.zeros(rows) for rows, _ in spec.shapes)
    return NetParams(weights, biases)


def init_submodel(
    state_spec: NetSpec,
    output_spec: NetSpec,
    rng: np.random.Generator,
    weight_std: float = 0.1,
) -> Submodel:
    return Submodel(
        state_spec,
        init_params(state_spec, rng, weight_std),
        output_spec,
        init_params(output_spec, rng, weight_std),
    )
