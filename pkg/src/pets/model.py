"""End-to-end model: decomposition, embeddings, FPA stack, predictors and head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import PatchConfig, PatchEmbed, channel_flatten
from .errors import InvalidConfig, ShapeError
from .fpa import FpaLayer, fpa_stack_forward
from .mop import TASKS, MixtureOfPredictors, OutputHead
from .nn import Module
from .sdaq import SdaqConfig, sdaq_decompose

NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    task: str = "forecast"
    seq_len: int = 96
    horizon: int = 96
    n_channels: int = 1
    n_classes: int = 2
    n_layers: int = 4
    patch: PatchConfig = field(default_factory=PatchConfig)
    sdaq: SdaqConfig = field(default_factory=SdaqConfig)
    ffn_mult: int = 2
    kernel: int = 3
    dropout: float = 0.1
    pre_norm: bool = True
    pos_embed: bool = True
    instance_norm: bool = True
    hidden_offset: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.patch, dict):
            self.patch = PatchConfig(**self.patch)
        if isinstance(self.sdaq, dict):
            self.sdaq = SdaqConfig.from_dict(self.sdaq)
        if self.task not in TASKS:
            raise InvalidConfig(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_layers < 1:
            raise InvalidConfig("n_layers must be >= 1")
        self.patch.n_tokens(self.seq_len)

    @property
    def K(self) -> int:
        return self.sdaq.K

    @property
    def output_width(self) -> int:
        if self.task == "forecast":
            return self.horizon
        if self.task == "classify":
            return self.n_classes
        return self.seq_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sdaq"] = self.sdaq.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PetsModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # dropout draws come from their own stream so eval never perturbs init
        self.drop_rng = np.random.default_rng([cfg.seed, 1])
        P = cfg.patch
        D = P.token_dim
        hidden = cfg.ffn_mult * D
        self.n_tokens = P.n_tokens(cfg.seq_len)
        self.embed = PatchEmbed(P, cfg.seq_len, rng, cfg.pos_embed)
        self.pattern_embed = [PatchEmbed(P, cfg.seq_len, rng, cfg.pos_embed) for _ in range(cfg.K)]
        self.layers = [
            FpaLayer(n, cfg.K, D, hidden, cfg.kernel, cfg.dropout, rng, self.drop_rng, cfg.pre_norm)
            for n in range(1, cfg.n_layers + 1)
        ]
        self.mop = MixtureOfPredictors(cfg.n_layers, D, hidden, cfg.kernel, rng, cfg.hidden_offset)
        self.head = OutputHead(cfg.task, self.n_tokens, D, cfg.output_width, rng)

    def state_dict(self) -> dict:
        return dict(self.named_parameters())

    def load_state_dict(self, params: dict):
        own = self.state_dict()
        for name, t in own.items():
            if name not in params:
                raise ShapeError(f"checkpoint is missing parameter {name}")
            src = params[name]
            shape = tuple(src["shape"]) if isinstance(src, dict) else np.shape(src)
            if shape != t.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {shape} != model shape {t.shape}")
            vals = src["values"] if isinstance(src, dict) else src
            t.data[...] = np.asarray(vals, dtype=t.data.dtype).reshape(t.shape)
        extra = set(params) - set(own)
        if extra:
            raise ShapeError(f"checkpoint has unknown parameters: {sorted(extra)[:3]}")

    def normalize_rows(self, rows: np.ndarray, mask: Optional[np.ndarray] = None):
        """Per-row instance statistics (over observed entries when ``mask`` is given)."""
        if not self.cfg.instance_norm:
            z = np.zeros((rows.shape[0], 1))
            return rows, z, np.ones_like(z)
        if mask is None:
            mu = rows.mean(axis=1, keepdims=True)
            sd = np.sqrt(rows.var(axis=1, keepdims=True) + NORM_EPS)
            return (rows - mu) / sd, mu, sd
        cnt = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        mu = (rows * mask).sum(axis=1, keepdims=True) / cnt
        sd = np.sqrt((((rows - mu) * mask) ** 2).sum(axis=1, keepdims=True) / cnt + NORM_EPS)
        return (rows - mu) / sd * mask, mu, sd

    def decompose(self, rows: np.ndarray) -> np.ndarray:
        return sdaq_decompose(rows, self.cfg.sdaq).patterns

    def __call__(self, x, mask=None, record: bool = False, patterns: Optional[np.ndarray] = None):
        return self.forward(x, mask, record, patterns)[0]

    def forward(self, x, mask=None, record: bool = False, patterns: Optional[np.ndarray] = None):
        """``x[B, d, L]`` -> task output; returns ``(output, records)``.

        Forecast/impute/anomaly outputs are ``[B, d, width]`` in the input's
        scale; classification gives logits ``[B, n_classes]``.
        """
        x = np.asarray(x, dtype=ad.DEFAULT_DTYPE)
        if x.ndim != 3 or x.shape[2] != self.cfg.seq_len:
            raise ShapeError(f"expected [B, d, {self.cfg.seq_len}] input, got {x.shape}")
        B, d, L = x.shape
        rows = channel_flatten(x)
        m = None if mask is None else channel_flatten(np.asarray(mask, dtype=rows.dtype))
        rows_n, mu, sd = self.normalize_rows(rows, m)
        if patterns is None:
            patterns = self.decompose(rows_n)
        E0 = self.embed(rows_n)
        Ek = [emb(p) for emb, p in zip(self.pattern_embed, patterns)]
        hiddens, final, records = fpa_stack_forward(E0, Ek, self.layers, record=record)
        S = self.mop(final, hiddens, E0)
        out = self.head(S, d)
        if self.cfg.task == "classify":
            return out, records
        out = out * Tensor(sd) + Tensor(mu)
        return ad.reshape(out, (B, d, out.shape[-1])), records
