"""Training and evaluation loops, run configuration and checkpoint state."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import (BurstClassSpec, SeriesFrame, SplitSpec, WindowSet, load_csv, make_windows,
                   synth_classification, synth_generate)
from .embedding import PatchConfig, channel_flatten
from .errors import InvalidConfig, InvalidInput, NumericalError
from .model import ModelConfig, PetsModel
from .sdaq import SdaqConfig
from .tasks import (TASK_METRICS, anomaly_threshold, compute_metric, precision_recall_f1,
                    random_mask)

TASKS = ("forecast", "impute", "classify", "anomaly")


@dataclass
class RunConfig:
    """Everything needed to reproduce one run; serialises to / from JSON."""

    task: str = "forecast"
    data: object = None  # CSV path, or a synthetic-series / classification spec dict
    seq_len: int = 96
    horizon: int = 96
    split_ratios: tuple = (0.7, 0.1, 0.2)
    split_lengths: Optional[tuple] = None
    stride: int = 1
    sdaq: SdaqConfig = field(default_factory=SdaqConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    n_layers: int = 4
    ffn_mult: int = 2
    kernel: int = 3
    dropout: float = 0.1
    instance_norm: bool = True
    n_classes: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 10
    patience: Optional[int] = None
    seed: int = 0
    mask_ratio: float = 0.25
    anomaly_quantile: float = 0.99
    spike_rate: float = 0.0  # anomaly training: fraction of input points replaced by outliers
    spike_magnitude: float = 10.0
    out: str = "runs/default"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.sdaq, dict):
            self.sdaq = SdaqConfig.from_dict(self.sdaq)
        if isinstance(self.patch, dict):
            self.patch = PatchConfig(**self.patch)
        if self.task not in TASKS:
            raise InvalidConfig(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 1 <= self.batch_size:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.lr > 0:
            raise InvalidConfig("learning rate must be positive")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        self.split_ratios = tuple(self.split_ratios)
        if self.split_lengths is not None:
            self.split_lengths = tuple(self.split_lengths)

    @property
    def effective_horizon(self) -> int:
        return self.horizon if self.task == "forecast" else 0

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.seq_len, self.effective_horizon, self.split_ratios,
                         self.split_lengths, self.stride)

    def model_config(self, n_channels: int) -> ModelConfig:
        return ModelConfig(task=self.task, seq_len=self.seq_len, horizon=self.horizon,
                           n_channels=n_channels, n_classes=self.n_classes, n_layers=self.n_layers,
                           patch=self.patch, sdaq=self.sdaq, ffn_mult=self.ffn_mult,
                           kernel=self.kernel, dropout=self.dropout,
                           instance_norm=self.instance_norm, seed=self.seed)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["sdaq"] = self.sdaq.to_dict()
        d["patch"] = asdict(self.patch)
        d["split_ratios"] = list(self.split_ratios)
        if self.split_lengths is not None:
            d["split_lengths"] = list(self.split_lengths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Per-split inputs / targets in normalized units plus what evaluation needs."""

    train: WindowSet
    val: WindowSet
    test: WindowSet
    n_channels: int


def _classification_sets(spec: dict, cfg: RunConfig) -> Dataset:
    spec = dict(spec)
    n_train = int(spec.pop("n_train", 200))
    n_val = int(spec.pop("n_val", 50))
    n_test = int(spec.pop("n_test", 100))
    spec.pop("kind", None)
    cspec = BurstClassSpec(**{"length": cfg.seq_len, "seed": cfg.seed, **spec,
                              "n_samples": n_train + n_val + n_test})
    X, y = synth_classification(cspec)
    if X.shape[2] != cfg.seq_len:
        raise InvalidConfig("classification spec length must equal seq_len")
    edges = np.cumsum([0, n_train, n_val, n_test])
    sets = []
    for a, b in zip(edges[:-1], edges[1:]):
        sets.append(WindowSet(X[a:b], np.zeros((b - a, 1, 0)), np.arange(a, b), None, y[a:b]))
    return Dataset(*sets, n_channels=1)


def load_frame(data) -> SeriesFrame:
    if data is None:
        raise InvalidConfig("run config has no data source")
    if isinstance(data, dict):
        return synth_generate(data)
    return load_csv(data)


def build_dataset(cfg: RunConfig) -> Dataset:
    if isinstance(cfg.data, dict) and cfg.data.get("kind") == "classification":
        if cfg.task != "classify":
            raise InvalidConfig("classification data requires task 'classify'")
        return _classification_sets(cfg.data, cfg)
    if cfg.task == "classify":
        raise InvalidConfig("classification needs a {'kind': 'classification'} data spec")
    frame = load_frame(cfg.data)
    split = cfg.split_spec()
    sets = [make_windows(frame, split, part) for part in ("train", "val", "test")]
    return Dataset(*sets, n_channels=frame.d)


# ---------------------------------------------------------------- training


class Trainer:
    """Runs the decompose → embed → FPA layers → predictors → head → loss → Adam loop."""

    def __init__(self, cfg: RunConfig, dataset: Optional[Dataset] = None):
        self.cfg = cfg
        self.data = dataset or build_dataset(cfg)
        self.model = PetsModel(cfg.model_config(self.data.n_channels))
        self.opt = ad.Adam(self.model.parameters(), lr=cfg.lr)
        self.shuffle_rng = np.random.default_rng([cfg.seed, 2])
        self.mask_rng = np.random.default_rng([cfg.seed, 3])
        self.epoch = 0
        self.best_val = np.inf
        self.history: list = []
        self._pattern_cache: dict = {}

    # -- helpers

    def _patterns(self, split: str, ws: WindowSet, idx: np.ndarray) -> np.ndarray:
        """SDAQ patterns for the selected windows, computed once per split."""
        if split not in self._pattern_cache:
            rows = channel_flatten(ws.inputs)
            rows_n = self.model.normalize_rows(rows)[0]
            pats = self.model.decompose(rows_n)  # [K, N*d, L]
            d = ws.inputs.shape[1]
            self._pattern_cache[split] = pats.reshape(pats.shape[0], -1, d, pats.shape[2])
        pats = self._pattern_cache[split][:, idx]
        return pats.reshape(pats.shape[0], -1, pats.shape[3])

    def _loss(self, split: str, ws: WindowSet, idx: np.ndarray):
        cfg = self.cfg
        x = ws.inputs[idx]
        if cfg.task == "classify":
            logits = self.model(x, patterns=self._patterns(split, ws, idx))
            return ad.cross_entropy_loss(logits, ws.labels[idx])
        if cfg.task == "impute":
            mask = random_mask(x.shape, cfg.mask_ratio, self.mask_rng)
            out = self.model(x * mask, mask=mask)
            return ad.mse_loss(out, x, mask=1.0 - mask)
        if cfg.task == "anomaly" and cfg.spike_rate > 0 and split == "train":
            # denoising objective: reconstruct the clean window from a spiked copy
            hit = self.mask_rng.random(x.shape) < cfg.spike_rate
            signs = self.mask_rng.choice([-1.0, 1.0], size=x.shape)
            out = self.model(x + hit * signs * cfg.spike_magnitude)
            return ad.mse_loss(out, x)
        out = self.model(x, patterns=self._patterns(split, ws, idx))
        target = ws.targets[idx] if cfg.task == "forecast" else x
        return ad.mse_loss(out, target)

    def _grad_report(self) -> dict:
        return {name: float(np.sqrt(np.sum(p.grad**2))) if p.grad is not None else None
                for name, p in self.model.named_parameters()}

    def train_epoch(self) -> float:
        self.model.train()
        ws = self.data.train
        order = self.shuffle_rng.permutation(len(ws))
        total, count = 0.0, 0
        for i in range(0, len(order), self.cfg.batch_size):
            idx = order[i : i + self.cfg.batch_size]
            self.opt.zero_grad()
            loss = self._loss("train", ws, idx)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at epoch {self.epoch + 1}, batch {i}",
                                     self._grad_report())
            loss.backward()
            grads = [p.grad for p in self.opt.params if p.grad is not None]
            if not all(np.isfinite(g).all() for g in grads):
                raise NumericalError(f"non-finite gradient at epoch {self.epoch + 1}, batch {i}",
                                     self._grad_report())
            self.opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        return total / max(count, 1)

    def validation_loss(self, split: str = "val") -> float:
        ws = getattr(self.data, split)
        if len(ws) == 0:
            return float("nan")
        self.model.eval()
        total = 0.0
        with ad.no_grad():
            for i in range(0, len(ws), self.cfg.batch_size):
                idx = np.arange(i, min(i + self.cfg.batch_size, len(ws)))
                if self.cfg.task == "impute":
                    # a fixed mask per split keeps validation deterministic
                    rng = np.random.default_rng([self.cfg.seed, 4, i])
                    x = ws.inputs[idx]
                    mask = random_mask(x.shape, self.cfg.mask_ratio, rng)
                    out = self.model(x * mask, mask=mask)
                    loss = ad.mse_loss(out, x, mask=1.0 - mask)
                else:
                    loss = self._loss(split, ws, idx)
                total += loss.item() * len(idx)
        self.model.train()
        return total / len(ws)

    def fit(self, epochs: Optional[int] = None, log_path=None, best_path=None,
            state_path=None, verbose: bool = False) -> list:
        """Train for ``epochs`` more epochs, appending one JSON line per epoch to ``log_path``."""
        epochs = self.cfg.epochs if epochs is None else epochs
        stale = 0
        for _ in range(epochs):
            t0 = time.perf_counter()
            train_loss = self.train_epoch()
            val_loss = self.validation_loss("val")
            self.epoch += 1
            improved = np.isfinite(val_loss) and val_loss < self.best_val
            if improved:
                self.best_val = val_loss
                stale = 0
                if best_path:
                    self.save_checkpoint(best_path)
            else:
                stale += 1
            rec = {"epoch": self.epoch, "train_loss": train_loss,
                   "val_loss": val_loss if np.isfinite(val_loss) else None, "best": bool(improved)}
            self.history.append(rec)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if state_path:
                self.save_state(state_path)
            if verbose:
                print(f"epoch {self.epoch:4d}  train {train_loss:.5f}  val {val_loss:.5f}"
                      f"  ({time.perf_counter() - t0:.1f}s)", flush=True)
            if self.cfg.patience is not None and stale >= self.cfg.patience:
                break
        return self.history

    # -- persistence

    def save_checkpoint(self, path):
        ad.save_parameters(self.model.state_dict(), path,
                           {"config": self.cfg.to_dict(), "n_channels": self.data.n_channels,
                            "epoch": self.epoch})

    def save_state(self, path):
        """Full resumable state: parameters, optimizer moments, RNG streams and counters."""
        ad.save_parameters(self.model.state_dict(), path, {
            "config": self.cfg.to_dict(), "n_channels": self.data.n_channels,
            "epoch": self.epoch, "best_val": self.best_val if np.isfinite(self.best_val) else None,
            "history": self.history, "optimizer": self.opt.state_dict(),
            "rng": {"shuffle": self.shuffle_rng.bit_generator.state,
                    "mask": self.mask_rng.bit_generator.state,
                    "dropout": self.model.drop_rng.bit_generator.state},
        })

    def load_state(self, path):
        doc = ad.load_parameters(path)
        self.model.load_state_dict(doc["parameters"])
        if "optimizer" not in doc:
            raise InvalidInput(f"{path} holds parameters only, not a resumable training state")
        self.opt.load_state_dict(doc["optimizer"])
        self.shuffle_rng.bit_generator.state = doc["rng"]["shuffle"]
        self.mask_rng.bit_generator.state = doc["rng"]["mask"]
        self.model.drop_rng.bit_generator.state = doc["rng"]["dropout"]
        self.epoch = int(doc["epoch"])
        self.best_val = np.inf if doc["best_val"] is None else float(doc["best_val"])
        self.history = list(doc["history"])


def load_model(path, cfg: Optional[RunConfig] = None, n_channels: Optional[int] = None) -> PetsModel:
    """Build a model from ``cfg`` (or the checkpoint's own config) and load the parameters."""
    doc = ad.load_parameters(path)
    cfg = cfg or RunConfig.from_dict(doc["config"])
    model = PetsModel(cfg.model_config(n_channels or doc.get("n_channels", 1)))
    model.load_state_dict(doc["parameters"])
    model.eval()
    return model


# ---------------------------------------------------------------- evaluation


def predict(model: PetsModel, inputs: np.ndarray, batch_size: int = 64, mask=None) -> np.ndarray:
    model.eval()
    outs = []
    with ad.no_grad():
        for i in range(0, len(inputs), batch_size):
            x = inputs[i : i + batch_size]
            m = None if mask is None else mask[i : i + batch_size]
            outs.append(model(x if m is None else x * m, mask=m).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def reconstruct_series(model: PetsModel, series: np.ndarray, batch_size: int = 64,
                       stride: int = 1) -> np.ndarray:
    """Reconstruct a ``[d, T]`` series from sliding windows, averaging where they overlap.

    ``stride=1`` scores every point in up to ``seq_len`` contexts;
    ``stride=seq_len`` gives non-overlapping windows (the tail window overlaps).
    """
    L = model.cfg.seq_len
    d, T = series.shape
    if T < L:
        raise InvalidInput(f"series of length {T} is shorter than the window {L}")
    if stride < 1:
        raise InvalidConfig("stride must be >= 1")
    starts = list(range(0, T - L + 1, stride))
    if starts[-1] != T - L:
        starts.append(T - L)
    out = np.zeros_like(series)
    count = np.zeros(T)
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        rec = predict(model, np.stack([series[:, s : s + L] for s in chunk]), batch_size)
        for s, r in zip(chunk, rec):
            out[:, s : s + L] += r
            count[s : s + L] += 1
    return out / count


def evaluate(model: PetsModel, cfg: RunConfig, dataset: Dataset, split: str = "test") -> dict:
    """Task metrics on ``split``; regression errors are reported in the data's original units."""
    ws = getattr(dataset, split)
    task = cfg.task
    if task == "classify":
        logits = predict(model, ws.inputs, cfg.batch_size)
        pred = logits.argmax(axis=1)
        return {"accuracy": compute_metric("accuracy", ws.labels, pred), "n": int(len(ws))}
    if task == "anomaly":
        return evaluate_anomaly(model, cfg, dataset)
    std = ws.norm.std[None, :, None]
    if task == "impute":
        rng = np.random.default_rng([cfg.seed, 5])
        mask = random_mask(ws.inputs.shape, cfg.mask_ratio, rng)
        rec = predict(model, ws.inputs, cfg.batch_size, mask)
        miss = mask == 0
        err_y, err_hat = (ws.inputs * std)[miss], (rec * std)[miss]
    else:
        pred = predict(model, ws.inputs, cfg.batch_size)
        err_y, err_hat = ws.targets * std, pred * std
    report = {m: compute_metric(m, err_y, err_hat) for m in TASK_METRICS[task]}
    report["n"] = int(len(ws))
    return report


def _split_series(dataset: Dataset, split: str) -> np.ndarray:
    """Rebuild the contiguous normalized series of a split from its stride windows."""
    ws = getattr(dataset, split)
    L = ws.inputs.shape[2]
    n = int(ws.starts[-1]) + L
    out = np.zeros((ws.inputs.shape[1], n))
    for s, w in zip(ws.starts, ws.inputs):
        out[:, s : s + L] = w
    return out


def _split_labels(dataset: Dataset, split: str) -> Optional[np.ndarray]:
    ws = getattr(dataset, split)
    if ws.labels is None:
        return None
    L = ws.inputs.shape[2]
    out = np.zeros(int(ws.starts[-1]) + L, dtype=np.int64)
    for s, lab in zip(ws.starts, ws.labels):
        out[s : s + L] = lab
    return out


def _split_errors(model: PetsModel, dataset: Dataset, split: str, context: Optional[str]):
    """Pointwise squared reconstruction error of a split, channel-averaged.

    The last ``L - 1`` points of the preceding split are prepended as context so
    the first points of the split are covered by as many windows as interior ones;
    windows never reach into the following split.
    """
    series = _split_series(dataset, split)
    n = series.shape[1]
    if context is not None:
        L = getattr(dataset, split).inputs.shape[2]
        series = np.concatenate([_split_series(dataset, context)[:, -(L - 1):], series], axis=1)
    err = ((reconstruct_series(model, series) - series) ** 2).mean(axis=0)
    return err[-n:]


def evaluate_anomaly(model: PetsModel, cfg: RunConfig, dataset: Dataset) -> dict:
    val_err = _split_errors(model, dataset, "val", "train")
    thr = anomaly_threshold(val_err, cfg.anomaly_quantile)
    test_err = _split_errors(model, dataset, "test", "val")
    pred = (test_err > thr).astype(np.int64)
    truth = _split_labels(dataset, "test")
    report = {"threshold": thr, "n_flagged": int(pred.sum()), "n": int(len(pred))}
    if truth is not None:
        p, r, f1 = precision_recall_f1(pred, truth)
        report.update(precision=p, recall=r, f1=f1)
    return report


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
