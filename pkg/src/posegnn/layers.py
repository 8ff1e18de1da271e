"""Graph convolution layers, linear heads and mean readout with their adjoints.

Forward functions are pure. Each ``*_backward`` takes the cache written by
the matching forward call and returns ``(param_grads, grad_input)``.
"""
from __future__ import annotations

import math

import numpy as np

from .graph import Graph, neighbor_sum, normalized_aggregate
from .numerics import ShapeError, as_matrix


class StateError(RuntimeError):
    """Backward was called without the activations cached by forward."""


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class _Params:
    param_names: tuple[str, ...] = ()

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, "grad_" + name) for name in self.param_names}

    def zero_grad(self) -> None:
        for name in self.param_names:
            getattr(self, "grad_" + name)[...] = 0.0


class GcnLayer(_Params):
    param_names = ("theta",)

    def __init__(self, theta):
        self.theta = np.array(theta, dtype=np.float64)
        self.grad_theta = np.zeros_like(self.theta)

    @property
    def d_in(self) -> int:
        return self.theta.shape[0]

    @property
    def d_out(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "GcnLayer":
        return cls(glorot_uniform(rng, d_in, d_out))


class WlLayer(_Params):
    param_names = ("theta1", "theta2")

    def __init__(self, theta1, theta2):
        self.theta1 = np.array(theta1, dtype=np.float64)
        self.theta2 = np.array(theta2, dtype=np.float64)
        if self.theta1.shape != self.theta2.shape:
            raise ShapeError(f"theta1 {self.theta1.shape} and theta2 {self.theta2.shape} differ")
        self.grad_theta1 = np.zeros_like(self.theta1)
        self.grad_theta2 = np.zeros_like(self.theta2)

    @property
    def d_in(self) -> int:
        return self.theta1.shape[0]

    @property
    def d_out(self) -> int:
        return self.theta1.shape[1]

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "WlLayer":
        return cls(glorot_uniform(rng, d_in, d_out), glorot_uniform(rng, d_in, d_out))


class LinearHead(_Params):
    param_names = ("weight", "bias")

    def __init__(self, weight, bias=None):
        self.weight = np.array(weight, dtype=np.float64)
        if bias is None:
            bias = np.zeros(self.weight.shape[1])
        self.bias = np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias.size != self.weight.shape[1]:
            raise ShapeError(f"bias length {self.bias.size} != output dim {self.weight.shape[1]}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "LinearHead":
        return cls(glorot_uniform(rng, d_in, d_out))


def _check_in(x: np.ndarray, d_in: int, what: str) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != d_in:
        raise ShapeError(f"{what} expects {d_in} input columns, got {x.shape[1]}")
    return x


def _need(cache, *keys):
    if cache is None or any(k not in cache for k in keys):
        raise StateError("backward called before forward cached its activations")
    return [cache[k] for k in keys]


def gcn_forward(layer: GcnLayer, g: Graph, x, cache: dict | None = None) -> np.ndarray:
    x = _check_in(x, layer.d_in, "gcn layer")
    agg = normalized_aggregate(g, x)
    if cache is not None:
        cache["agg"] = agg
    return agg @ layer.theta


def gcn_backward(layer: GcnLayer, g: Graph, cache, upstream):
    # the propagation matrix is symmetric, so it is its own adjoint
    (agg,) = _need(cache, "agg")
    grads = {"theta": agg.T @ upstream}
    return grads, normalized_aggregate(g, upstream @ layer.theta.T)


def wl_forward(layer: WlLayer, g: Graph, x, cache: dict | None = None) -> np.ndarray:
    x = _check_in(x, layer.d_in, "wl layer")
    nsum = neighbor_sum(g, x)
    if cache is not None:
        cache["x"] = x
        cache["nsum"] = nsum
    return x @ layer.theta1 + nsum @ layer.theta2


def wl_backward(layer: WlLayer, g: Graph, cache, upstream):
    x, nsum = _need(cache, "x", "nsum")
    grads = {"theta1": x.T @ upstream, "theta2": nsum.T @ upstream}
    grad_x = upstream @ layer.theta1.T + neighbor_sum(g, upstream @ layer.theta2.T)
    return grads, grad_x


def mean_readout(x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ValueError("mean_readout of an empty node set")
    return x.sum(axis=0) / x.shape[0]


def mean_readout_backward(n: int, upstream) -> np.ndarray:
    up = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    return np.repeat(up / n, n, axis=0)


def head_forward(head: LinearHead, x, cache: dict | None = None) -> np.ndarray:
    x = _check_in(x, head.d_in, "linear head")
    if cache is not None:
        cache["x"] = x
    return x @ head.weight + head.bias


def head_backward(head: LinearHead, cache, upstream):
    (x,) = _need(cache, "x")
    grads = {"weight": x.T @ upstream, "bias": upstream.sum(axis=0)}
    return grads, upstream @ head.weight.T


def conv_forward(layer, g: Graph, x, cache: dict | None = None) -> np.ndarray:
    if isinstance(layer, WlLayer):
        return wl_forward(layer, g, x, cache)
    return gcn_forward(layer, g, x, cache)


def conv_backward(layer, g: Graph, cache, upstream):
    if isinstance(layer, WlLayer):
        return wl_backward(layer, g, cache, upstream)
    return gcn_backward(layer, g, cache, upstream)
