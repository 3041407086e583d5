"""Parameterized building blocks shared by the encoder and the adapters."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, gelu, layernorm, matmul, relu

ACTIVATIONS = {"gelu": gelu, "relu": relu}


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Linear:
    """Affine map on the last axis: y = x W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
            b = np.zeros(out_dim, dtype=dtype)
        else:
            w = fan_in_uniform(rng, (in_dim, out_dim), in_dim, dtype)
            b = fan_in_uniform(rng, (out_dim,), in_dim, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class LayerNorm:
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "gain": self.gain, prefix + "bias": self.bias}
