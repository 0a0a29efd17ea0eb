"""Channel-independent reshaping and patch-token embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, ShapeError
from .nn import Module, _param


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int = 8
    token_dim: int = 32

    def n_tokens(self, length: int) -> int:
        if self.patch_len < 1 or length % self.patch_len:
            raise InvalidConfig(f"patch_len={self.patch_len} does not divide series length {length}")
        return length // self.patch_len


def channel_flatten(x: np.ndarray) -> np.ndarray:
    """``[B, d, L] -> [B*d, L]``; row ``b*d + c`` is ``x[b, c]``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [B, d, L], got {x.shape}")
    return x.reshape(x.shape[0] * x.shape[1], x.shape[2])


def channel_unflatten(rows, n_channels: int):
    """Inverse of :func:`channel_flatten` for arrays or tensors with rows first."""
    shape = rows.shape
    if shape[0] % n_channels:
        raise ShapeError(f"{shape[0]} rows do not split into {n_channels} channels")
    new = (shape[0] // n_channels, n_channels) + tuple(shape[1:])
    return ad.reshape(rows, new) if isinstance(rows, Tensor) else np.asarray(rows).reshape(new)


class PatchEmbed(Module):
    """Non-overlapping length-``p`` patches mapped to ``token_dim`` by a shared linear map.

    Equivalent to a stride-``p`` conv1d with kernel ``p``. An optional learnable
    position table is added to the tokens.
    """

    def __init__(self, cfg: PatchConfig, length: int, rng: np.random.Generator, pos_embed: bool = True):
        self.cfg = cfg
        self.n_tokens = cfg.n_tokens(length)
        p, d = cfg.patch_len, cfg.token_dim
        bound = 1.0 / np.sqrt(p)
        self.weight = _param(rng.uniform(-bound, bound, (p, d)))
        self.bias = _param(rng.uniform(-bound, bound, d))
        self.pos = _param(rng.normal(0.0, 0.02, (self.n_tokens, d))) if pos_embed else None

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=ad.DEFAULT_DTYPE))
        R, L = x.shape
        if L != self.n_tokens * self.cfg.patch_len:
            raise ShapeError(f"patch_embed expects length {self.n_tokens * self.cfg.patch_len}, got {L}")
        patches = ad.reshape(x, (R, self.n_tokens, self.cfg.patch_len))
        tokens = ad.linear(patches, self.weight, self.bias)
        return tokens if self.pos is None else ad.add(tokens, self.pos)


def patch_embed(x, cfg: PatchConfig, params: PatchEmbed) -> Tensor:
    cfg.n_tokens(np.shape(x.data if isinstance(x, Tensor) else x)[-1])
    return params(x)
