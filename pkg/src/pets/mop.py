"""Mixture of predictors and task output heads."""
from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, ShapeError
from .nn import Conv1d, FeedForward, Linear, Module, SelfAttention

TASKS = ("forecast", "impute", "classify", "anomaly")


class Predictor(Module):
    def __init__(self, dim: int, ffn_hidden: int, kernel: int, rng):
        self.conv_in = Conv1d(dim, dim, kernel, rng)
        self.attn = SelfAttention(dim, rng)
        self.ffn = FeedForward(dim, ffn_hidden, rng)
        self.conv_out = Conv1d(dim, dim, kernel, rng)

    def __call__(self, S: Tensor, H: Tensor):
        if S.shape != H.shape:
            raise ShapeError(f"predictor: state {S.shape} vs hidden {H.shape}")
        S = S + self.attn(self.conv_in(S))
        S = S + H + self.ffn(S)
        return S, self.conv_out(S)


def predictor_forward(S: Tensor, H: Tensor, params: Predictor):
    """Returns ``(S_updated, S_next)``."""
    return params(S, H)


class MixtureOfPredictors(Module):
    """Chains N predictors starting from the mean of the final pattern tokens.

    ``hidden_offset=0`` feeds ``H^n`` to predictor n; ``-1`` feeds ``H^{n-1}``
    (with ``H^0 = E^0``).
    """

    def __init__(self, n_predictors: int, dim: int, ffn_hidden: int, kernel: int, rng,
                 hidden_offset: int = 0):
        if hidden_offset not in (0, -1):
            raise InvalidConfig("hidden_offset must be 0 or -1")
        self.hidden_offset = hidden_offset
        self.predictors = [Predictor(dim, ffn_hidden, kernel, rng) for _ in range(n_predictors)]

    def __call__(self, patterns: list, hiddens: list, E0: Tensor = None) -> Tensor:
        if len(hiddens) != len(self.predictors):
            raise ShapeError(f"{len(hiddens)} hidden states for {len(self.predictors)} predictors")
        S = patterns[0]
        for p in patterns[1:]:
            S = S + p
        if len(patterns) > 1:
            S = S * (1.0 / len(patterns))
        refs = hiddens if self.hidden_offset == 0 else [E0] + list(hiddens[:-1])
        for pred, H in zip(self.predictors, refs):
            _, S = pred(S, H)
        return S


def mop_forward(patterns: list, hiddens: list, params: MixtureOfPredictors, E0: Tensor = None) -> Tensor:
    return params(patterns, hiddens, E0)


class OutputHead(Module):
    """Flatten ``[R, P_L, D]`` tokens and project to the task width.

    For classification the per-row features are averaged over the channels of
    each sample before the class projection.
    """

    def __init__(self, task: str, n_tokens: int, dim: int, width: int, rng):
        if task not in TASKS:
            raise InvalidConfig(f"unknown task {task!r}; expected one of {TASKS}")
        self.task = task
        self.proj = Linear(n_tokens * dim, width, rng)

    def __call__(self, S: Tensor, n_channels: int = 1) -> Tensor:
        flat = ad.flatten(S, 1)
        if self.task == "classify":
            R, F = flat.shape
            if R % n_channels:
                raise ShapeError(f"{R} rows are not a multiple of {n_channels} channels")
            flat = ad.mean(ad.reshape(flat, (R // n_channels, n_channels, F)), axis=1)
        return self.proj(flat)


def output_head(S: Tensor, head: OutputHead, n_channels: int = 1) -> Tensor:
    return head(S, n_channels)
