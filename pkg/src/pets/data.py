"""CSV ingestion, train-statistics normalization, windowing and synthetic series."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidConfig, InvalidInput, ParseError

STD_FLOOR = 1e-8
SPLITS = ("train", "val", "test")
_MISSING = {"", "nan", "NaN", "NAN", "na", "NA", "null", "None"}


@dataclass
class SeriesFrame:
    """``values[T, d]`` with column names and optional timestamps / point labels."""

    values: np.ndarray
    columns: list
    name: str = ""
    timestamps: Optional[list] = None
    labels: Optional[np.ndarray] = None
    n_rejected: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise InvalidInput(f"series values must be [T, d], got {self.values.shape}")
        if len(self.columns) != self.values.shape[1]:
            raise InvalidInput(f"{len(self.columns)} column names for {self.values.shape[1]} channels")
        if np.isnan(self.values).any():
            raise InvalidInput("series contains NaN")
        if self.timestamps is not None and len(self.timestamps) != len(self.values):
            raise InvalidInput("timestamp count differs from row count")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, name: Optional[str] = None) -> SeriesFrame:
    """Read a header + numeric-columns CSV; an unparsable first column is kept as timestamps.

    Rows containing a missing / NaN cell are dropped and counted in ``n_rejected``.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise InvalidInput(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InvalidInput(f"{path} is empty")
    first = [c.strip() for c in rows[0]]
    has_header = not all(_is_number(c) for c in first)
    header, body = (first, rows[1:]) if has_header else (None, rows)
    if not body:
        raise InvalidInput(f"{path} has a header but no data rows")
    width = len(header) if header else len(body[0])
    first_cell = body[0][0].strip()
    has_time = not _is_number(first_cell) and first_cell not in _MISSING
    start = 1 if has_time else 0
    if width - start < 1:
        raise InvalidInput(f"{path} has no numeric columns")
    columns = header[start:] if header else [f"ch{j}" for j in range(width - start)]

    values, stamps, rejected = [], [], 0
    for i, raw in enumerate(body):
        line = i + (2 if has_header else 1)
        if len(raw) != width:
            raise InvalidInput(f"{path}: row {line} has {len(raw)} fields, expected {width}")
        cells = [c.strip() for c in raw[start:]]
        parsed, missing = [], False
        for j, c in enumerate(cells):
            if c in _MISSING:
                missing = True
                continue
            try:
                v = float(c)
            except ValueError:
                raise ParseError(line, j + start + 1, c, str(path)) from None
            if math.isnan(v):
                missing = True
            parsed.append(v)
        if missing:
            rejected += 1
            continue
        values.append(parsed)
        if has_time:
            stamps.append(raw[0].strip())
    if not values:
        raise InvalidInput(f"{path}: every row was rejected for missing values")
    return SeriesFrame(np.array(values), list(columns), name or path.stem,
                       stamps if has_time else None, n_rejected=rejected)


def save_csv(path, frame: SeriesFrame):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["date"] if frame.timestamps is not None else []) + list(frame.columns))
        for i, row in enumerate(frame.values):
            lead = [frame.timestamps[i]] if frame.timestamps is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- splits and windows


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous train/val/test split plus window geometry.

    ``ratios`` are fractions of T (the test part takes the remainder);
    ``lengths``, when given, override them.
    """

    seq_len: int = 96
    horizon: int = 96
    ratios: tuple = (0.7, 0.1, 0.2)
    lengths: Optional[tuple] = None
    stride: int = 1

    def __post_init__(self):
        if self.seq_len < 1 or self.horizon < 0 or self.stride < 1:
            raise InvalidConfig("seq_len >= 1, horizon >= 0 and stride >= 1 are required")
        if self.lengths is None and (len(self.ratios) != 3 or min(self.ratios) < 0
                                     or sum(self.ratios) > 1 + 1e-12):
            raise InvalidConfig(f"bad split ratios {self.ratios}")

    def boundaries(self, T: int) -> dict:
        if self.lengths is not None:
            n = [int(v) for v in self.lengths]
            if len(n) != 3 or min(n) < 0 or sum(n) > T:
                raise InvalidConfig(f"split lengths {self.lengths} do not fit T={T}")
        else:
            n_train = int(round(self.ratios[0] * T))
            n_val = int(round(self.ratios[1] * T))
            n = [n_train, n_val, T - n_train - n_val if self.ratios[2] > 0 else 0]
        edges = np.cumsum([0] + n)
        return {s: (int(edges[i]), int(edges[i + 1])) for i, s in enumerate(SPLITS)}

    @property
    def span(self) -> int:
        return self.seq_len + self.horizon


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_norm(train_values: np.ndarray) -> NormStats:
    mean = train_values.mean(axis=0)
    std = np.maximum(train_values.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def window_starts(n: int, span: int, stride: int = 1) -> np.ndarray:
    """Every start ``s`` with ``s + span <= n`` on the stride grid, plus the final window."""
    if n < span:
        return np.zeros(0, dtype=np.int64)
    starts = list(range(0, n - span + 1, stride))
    if starts[-1] != n - span:
        starts.append(n - span)  # keep the tail window instead of dropping it
    return np.asarray(starts, dtype=np.int64)


@dataclass
class WindowSet:
    """Normalized windows of one split: ``inputs[N, d, L]`` and ``targets[N, d, H]``."""

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    norm: NormStats
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class TaskBatch:
    inputs: np.ndarray
    target: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    norm: Optional[NormStats] = None

    def __post_init__(self):
        if self.mask is not None and not np.isin(self.mask, (0, 1)).all():
            raise InvalidInput("mask entries must be 0 or 1")
        if self.norm is not None and not (self.norm.std > 0).all():
            raise InvalidInput("normalization std must be positive")


def normalized_splits(frame: SeriesFrame, split: SplitSpec):
    """Per-split normalized ``[d, n]`` arrays using train statistics only."""
    bounds = split.boundaries(frame.T)
    a, b = bounds["train"]
    if b - a < 1:
        raise InvalidConfig("train split is empty")
    norm = fit_norm(frame.values[a:b])
    parts = {s: norm.apply(frame.values[lo:hi]).T for s, (lo, hi) in bounds.items()}
    labels = None if frame.labels is None else {s: frame.labels[lo:hi] for s, (lo, hi) in bounds.items()}
    return parts, norm, labels


def make_windows(frame: SeriesFrame, split: SplitSpec, part: str = "train") -> WindowSet:
    """Sliding windows inside one split (windows never straddle a split edge)."""
    if part not in SPLITS:
        raise InvalidInput(f"unknown split {part!r}")
    parts, norm, labels = normalized_splits(frame, split)
    x = parts[part]
    n = x.shape[1]
    if n < split.span:
        raise InvalidConfig(f"{part} split has {n} points, need at least {split.span}")
    starts = window_starts(n, split.span, split.stride)
    idx = starts[:, None] + np.arange(split.span)[None, :]
    win = x[:, idx].transpose(1, 0, 2)  # [N, d, span]
    lab = None
    if labels is not None:
        lab = labels[part][idx[:, : split.seq_len]]
    return WindowSet(win[:, :, : split.seq_len].copy(), win[:, :, split.seq_len:].copy(),
                     starts, norm, lab)


def iter_batches(ws: WindowSet, batch_size: int, rng: Optional[np.random.Generator] = None
                 ) -> Iterator[TaskBatch]:
    """Mini-batches in a deterministic (or ``rng``-shuffled) order; the short last batch is kept."""
    if batch_size < 1:
        raise InvalidConfig("batch_size must be >= 1")
    order = np.arange(len(ws)) if rng is None else rng.permutation(len(ws))
    for i in range(0, len(order), batch_size):
        sel = order[i : i + batch_size]
        yield TaskBatch(ws.inputs[sel], ws.targets[sel], None,
                        None if ws.labels is None else ws.labels[sel], ws.norm)


# ---------------------------------------------------------------- synthetic data


def _components(spec_list, t):
    out = np.zeros_like(t)
    for c in spec_list:
        out += c.get("amp", 1.0) * np.sin(2 * np.pi * c["freq"] * t + c.get("phase", 0.0))
    return out


def synth_generate(spec) -> SeriesFrame:
    """Generate a multichannel series from a JSON-style spec.

    Keys: ``length``, ``n_channels`` (default 1), ``components`` (list of
    ``{freq, amp, phase}``, in cycles per step), ``trend`` (slope per step),
    ``noise`` (Gaussian σ), ``seed``, ``channel_phase_shift`` (added per channel),
    and ``anomalies`` = ``{count, magnitude, start, stop}`` injecting spikes of
    ``magnitude`` times the series std at distinct random positions in ``[start, stop)``.
    """
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    T = int(spec["length"])
    d = int(spec.get("n_channels", 1))
    rng = np.random.default_rng(spec.get("seed", 0))
    t = np.arange(T, dtype=np.float64)
    shift = float(spec.get("channel_phase_shift", 0.0))
    cols = []
    for c in range(d):
        comps = [dict(cp, phase=cp.get("phase", 0.0) + c * shift) for cp in spec.get("components", [])]
        cols.append(_components(comps, t) + spec.get("trend", 0.0) * t)
    values = np.stack(cols, axis=1)
    sigma = float(spec.get("noise", 0.0))
    if sigma > 0:
        values = values + rng.normal(0.0, sigma, values.shape)
    labels = None
    anom = spec.get("anomalies")
    if anom:
        start, stop = int(anom.get("start", 0)), int(anom.get("stop", T))
        count = int(anom["count"])
        if stop - start < count:
            raise InvalidConfig("anomaly region is smaller than the spike count")
        scale = float(np.std(values)) or 1.0
        pos = np.sort(rng.choice(np.arange(start, stop), size=count, replace=False))
        signs = rng.choice([-1.0, 1.0], size=count)
        values[pos, :] += (anom.get("magnitude", 10.0) * scale * signs)[:, None]
        labels = np.zeros(T, dtype=np.int64)
        labels[pos] = 1
    return SeriesFrame(values, [f"ch{j}" for j in range(d)], spec.get("name", "synthetic"),
                       labels=labels)


@dataclass(frozen=True)
class BurstClassSpec:
    """Two-class toy: a shared low-frequency base; class 1 adds a windowed high-frequency burst."""

    n_samples: int = 300
    length: int = 96
    base_freqs: tuple = (0.02, 0.05)
    burst_freq: float = 0.4
    burst_width: int = 32
    burst_amp: float = 1.0
    noise: float = 0.05
    cutoff: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.burst_width <= self.length:
            raise InvalidConfig(f"burst_width={self.burst_width} must lie in [1, length={self.length}]")
        if self.n_samples < 1:
            raise InvalidConfig("n_samples must be >= 1")


def synth_classification(spec: BurstClassSpec = BurstClassSpec(), burst_scale: float = 1.0):
    """Returns ``(X[N, 1, L], y[N])``.

    Every random draw happens in the same order for both classes, so setting
    ``burst_scale=0`` regenerates exactly the burst-free versions of the samples.
    """
    rng = np.random.default_rng(spec.seed)
    L, t = spec.length, np.arange(spec.length, dtype=np.float64)
    X = np.empty((spec.n_samples, 1, L))
    y = np.arange(spec.n_samples) % 2
    rng.shuffle(y)
    win = np.hanning(spec.burst_width)
    for i in range(spec.n_samples):
        amps = rng.uniform(0.5, 1.5, len(spec.base_freqs))
        phases = rng.uniform(0, 2 * np.pi, len(spec.base_freqs))
        base = sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in zip(amps, spec.base_freqs, phases))
        where = rng.integers(0, L - spec.burst_width + 1)
        bphase = rng.uniform(0, 2 * np.pi)
        noise = rng.normal(0.0, spec.noise, L)
        burst = np.zeros(L)
        seg = np.arange(spec.burst_width)
        burst[where : where + spec.burst_width] = win * np.sin(2 * np.pi * spec.burst_freq * seg + bphase)
        X[i, 0] = base + noise + y[i] * burst_scale * spec.burst_amp * burst
    return X, y
