"""Fluctuation-pattern-assisted layer: adapter, rendering, backbone and mixing blocks.

Token tensors are ``[R, P_L, D]``; the K pattern streams are concatenated on
the token axis into ``[R, K*P_L, D]`` for cross-pattern attention, and pooled
back to ``P_L`` tokens by averaging tokens that share a patch position.
"""
from __future__ import annotations

from typing import Optional

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, ShapeError
from .nn import Conv1d, Dropout, FeedForward, LayerNorm, Linear, Module, SelfAttention, ZeroConv1x1


def focus_pattern(n: int, K: int) -> int:
    """1-based pattern left ungated by the rendering block of layer ``n`` (1-based)."""
    return (n - 1) % K + 1


def _check_patterns(patterns, K: int, ref: Optional[Tensor] = None):
    if len(patterns) != K:
        raise ShapeError(f"expected {K} pattern tensors, got {len(patterns)}")
    shape = (ref if ref is not None else patterns[0]).shape
    for p in patterns:
        if p.shape != shape or p.ndim != 3:
            raise ShapeError(f"pattern tensor shape {p.shape} differs from {shape}")


class PeriodicPromptAdapter(Module):
    def __init__(self, K: int, dim: int, kernel: int, dropout: float, rng, drop_rng):
        self.K = K
        self.lin_in = [Linear(dim, dim, rng) for _ in range(K)]
        self.conv = [Conv1d(dim, dim, kernel, rng) for _ in range(K)]
        self.lin_out = [Linear(dim, dim, rng) for _ in range(K)]
        self.drop = Dropout(dropout, drop_rng)
        self.attn = SelfAttention(dim, rng)
        self.mix = Conv1d(dim, dim, kernel, rng)
        self.resplit = [Conv1d(dim, dim, kernel, rng) for _ in range(K)]

    def __call__(self, patterns: list) -> list:
        _check_patterns(patterns, self.K)
        feats = []
        for k, e in enumerate(patterns):
            e = self.conv[k](self.lin_in[k](e))
            e = self.drop(self.lin_out[k](ad.gelu(e)))
            feats.append(e)
        cat = ad.concat(feats, axis=1)
        cat = cat + self.attn(cat)
        cat = cat + self.mix(cat)
        return [conv(seg) for conv, seg in zip(self.resplit, ad.split(cat, self.K, axis=1))]


class PatternRendering(Module):
    """Builds the prompt ``P^n = H^{n-1} + Pool(...)`` with zero-initialised gates on
    every pattern except the layer's focus pattern."""

    def __init__(self, K: int, dim: int, kernel: int, focus: int, rng):
        self.K = K
        self.focus = focus
        self.gates = [None if k + 1 == focus else ZeroConv1x1(dim, rng) for k in range(K)]
        self.attn = SelfAttention(dim, rng)
        self.conv = Conv1d(dim, dim, kernel, rng)

    def __call__(self, patterns: list, hidden_prev: Tensor) -> Tensor:
        _check_patterns(patterns, self.K, hidden_prev)
        gated = [e if g is None else g(e) for g, e in zip(self.gates, patterns)]
        cat = ad.concat(gated, axis=1)
        cat = cat + self.attn(cat)
        cat = cat + self.conv(cat)
        return hidden_prev + ad.avg_pool(cat, self.K)


class BackboneBlock(Module):
    """Pre-norm transformer block with the prompt added to the output."""

    def __init__(self, dim: int, hidden: int, rng, pre_norm: bool = True):
        self.pre_norm = pre_norm
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, rng)

    def __call__(self, hidden_prev: Tensor, prompt: Tensor) -> Tensor:
        if hidden_prev.shape != prompt.shape:
            raise ShapeError(f"backbone: hidden {hidden_prev.shape} vs prompt {prompt.shape}")
        h = hidden_prev
        h = h + self.attn(self.norm1(h) if self.pre_norm else h)
        return prompt + h + self.ffn(self.norm2(h) if self.pre_norm else h)


class PatternMixing(Module):
    def __init__(self, K: int, dim: int, kernel: int, rng):
        self.K = K
        self.convs = [Conv1d(dim, dim, kernel, rng) for _ in range(K)]
        self.attn = SelfAttention(dim, rng)
        self.conv = Conv1d(dim, dim, kernel, rng)

    def __call__(self, patterns: list, hidden: Tensor) -> list:
        _check_patterns(patterns, self.K, hidden)
        mixed = [conv(e + hidden) for conv, e in zip(self.convs, patterns)]
        cat = ad.concat(mixed, axis=1)
        cat = cat + self.attn(cat)
        pooled = ad.avg_pool(cat + self.conv(cat), self.K)
        return [e + pooled for e in mixed]


class FpaLayer(Module):
    def __init__(self, n: int, K: int, dim: int, ffn_hidden: int, kernel: int, dropout: float,
                 rng, drop_rng, pre_norm: bool = True):
        if n < 1 or K < 1:
            raise InvalidConfig("layer index and K must be >= 1")
        self.n = n
        self.ppa = PeriodicPromptAdapter(K, dim, kernel, dropout, rng, drop_rng)
        self.mpr = PatternRendering(K, dim, kernel, focus_pattern(n, K), rng)
        self.backbone = BackboneBlock(dim, ffn_hidden, rng, pre_norm)
        self.mpm = PatternMixing(K, dim, kernel, rng)

    def attention_modules(self) -> dict:
        return {"ppa": self.ppa.attn, "mpr": self.mpr.attn,
                "backbone": self.backbone.attn, "mpm": self.mpm.attn}


def ppa_forward(patterns: list, layer: FpaLayer) -> list:
    return layer.ppa(patterns)


def mpr_forward(patterns: list, hidden_prev: Tensor, layer: FpaLayer) -> Tensor:
    return layer.mpr(patterns, hidden_prev)


def backbone_forward(hidden_prev: Tensor, prompt: Tensor, layer: FpaLayer) -> Tensor:
    return layer.backbone(hidden_prev, prompt)


def mpm_forward(patterns: list, hidden: Tensor, layer: FpaLayer) -> list:
    return layer.mpm(patterns, hidden)


def fpa_layer_forward(patterns: list, hidden_prev: Tensor, layer: FpaLayer):
    """One layer in the order adapter -> rendering -> backbone -> mixing."""
    patterns = ppa_forward(patterns, layer)
    prompt = mpr_forward(patterns, hidden_prev, layer)
    hidden = backbone_forward(hidden_prev, prompt, layer)
    patterns = mpm_forward(patterns, hidden, layer)
    return hidden, patterns, prompt


def fpa_stack_forward(E0: Tensor, pattern_E0: list, layers: list, record: bool = False):
    """Run all layers with ``H^0 = E^0``.

    Returns ``(hiddens, patterns, records)``; ``hiddens[n-1]`` is ``H^n``.
    With ``record`` each entry of ``records`` maps block name to its attention
    matrix (``[R, K*P_L, K*P_L]`` for pattern blocks, ``[R, P_L, P_L]`` for the backbone).
    """
    if not layers:
        raise InvalidConfig("need at least one FPA layer")
    hidden, patterns = E0, list(pattern_E0)
    hiddens, records = [], []
    for layer in layers:
        attns = layer.attention_modules()
        if record:
            for a in attns.values():
                a.record = []
        try:
            hidden, patterns, _ = fpa_layer_forward(patterns, hidden, layer)
        finally:
            if record:
                records.append({name: a.record[-1] for name, a in attns.items()})
                for a in attns.values():
                    a.record = None
        hiddens.append(hidden)
    return hiddens, patterns, records


def parameter_count(K: int, dim: int, ffn_hidden: int, kernel: int) -> int:
    """Closed-form number of parameters in one :class:`FpaLayer`."""
    lin = dim * dim + dim
    conv = kernel * dim * dim + dim
    attn = 4 * lin
    ppa = K * (2 * lin + conv) + attn + conv + K * conv
    mpr = (K - 1) * lin + attn + conv
    backbone = 2 * (2 * dim) + attn + (dim * ffn_hidden + ffn_hidden) + (ffn_hidden * dim + dim)
    mpm = K * conv + attn + conv
    return ppa + mpr + backbone + mpm
