"""Parameterised layers built on :mod:`pets.autodiff`."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, val in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=ad.DEFAULT_DTYPE), requires_grad=True)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            self.weight = _param(np.zeros((d_in, d_out)))
            self.bias = _param(np.zeros(d_out))
        else:
            self.weight = _uniform(rng, (d_in, d_out), d_in)
            self.bias = _uniform(rng, (d_out,), d_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ZeroConv1x1(Linear):
    """Pointwise convolution whose weights and bias are all zero at construction."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__(dim, dim, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.zero_init_conv1x1(x, self.weight, self.bias)


class Conv1d(Module):
    """Same-padding convolution along the token axis of ``[R, T, C]``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.kernel = kernel
        self.weight = _uniform(rng, (kernel, c_in, c_out), kernel * c_in)
        self.bias = _uniform(rng, (c_out,), kernel * c_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class SelfAttention(Module):
    """Single-head attention with query/key/value/output projections.

    When ``self.record`` is a list, each call appends its attention matrix.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.record: Optional[list] = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.o(ad.self_attention(self.q(x), self.k(x), self.v(x), self.record))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.feed_forward(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.rng, self.training)
