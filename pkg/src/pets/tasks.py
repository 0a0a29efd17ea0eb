"""Task losses and evaluation metrics (regression, M4-style, classification, detection)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateDenominator, InvalidConfig, InvalidInput


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise InvalidInput(f"metric {k} is not finite: {v}")

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in sorted(self.values.items())}


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise InvalidInput(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise InvalidInput("empty arrays")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    return float(np.sqrt(mse(y, yhat)))


def smape(y, yhat) -> float:
    """200/F Σ |y−ŷ|/(|y|+|ŷ|); terms with a zero denominator count as 0."""
    y, yhat = _pair(y, yhat)
    den = np.abs(y) + np.abs(yhat)
    num = np.abs(y - yhat)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(200.0 * ratio.mean())


def mape(y, yhat) -> float:
    """100/F Σ |y−ŷ|/|y|; terms with y = 0 count as 0."""
    y, yhat = _pair(y, yhat)
    den = np.abs(y)
    num = np.abs(y - yhat)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * ratio.mean())


def seasonal_scale(series, s: int) -> float:
    """Mean absolute seasonal difference ``mean |x_j − x_{j−s}|`` along the last axis."""
    x = np.asarray(series, dtype=np.float64)
    if s < 1:
        raise InvalidConfig("periodicity s must be >= 1")
    if x.shape[-1] <= s:
        raise InvalidInput(f"need more than s={s} points for the seasonal scale, got {x.shape[-1]}")
    scale = float(np.mean(np.abs(x[..., s:] - x[..., :-s])))
    if scale == 0.0:
        raise DegenerateDenominator("seasonal differences are all zero (constant series)")
    return scale


def mase(y, yhat, s: int = 1, history=None) -> float:
    """Mean absolute error scaled by the seasonal naive error.

    The scale comes from ``history`` (the in-sample series) when given,
    otherwise from ``y`` itself.
    """
    y, yhat = _pair(y, yhat)
    scale = seasonal_scale(y if history is None else history, s)
    return float(np.mean(np.abs(y - yhat)) / scale)


def naive2_forecast(history, s: int, horizon: Optional[int] = None) -> np.ndarray:
    """Repeat the last season of ``history`` (``s=1`` repeats the last value)."""
    h = np.asarray(history, dtype=np.float64)
    if s < 1:
        raise InvalidConfig("periodicity s must be >= 1")
    if h.shape[-1] < s:
        raise InvalidInput(f"history of length {h.shape[-1]} is shorter than s={s}")
    horizon = s if horizon is None else horizon
    season = h[..., h.shape[-1] - s:]
    reps = -(-horizon // s)
    return np.concatenate([season] * reps, axis=-1)[..., :horizon]


def owa(y, yhat, s: int = 1, history=None, naive2=None,
        smape_naive2: Optional[float] = None, mase_naive2: Optional[float] = None) -> float:
    """½ (SMAPE/SMAPE_naive2 + MASE/MASE_naive2).

    Naïve2 denominators are taken from the arguments, else computed from a
    supplied ``naive2`` forecast, else from :func:`naive2_forecast` on ``history``.
    """
    y, yhat = _pair(y, yhat)
    if smape_naive2 is None or mase_naive2 is None:
        if naive2 is None:
            if history is None:
                raise InvalidInput("OWA needs Naïve2 denominators, a Naïve2 forecast or a history")
            naive2 = naive2_forecast(history, s, y.shape[-1])
        naive2 = np.broadcast_to(naive2, y.shape)
        smape_naive2 = smape(y, naive2) if smape_naive2 is None else smape_naive2
        mase_naive2 = mase(y, naive2, s, history) if mase_naive2 is None else mase_naive2
    if smape_naive2 == 0 or mase_naive2 == 0:
        raise DegenerateDenominator("Naïve2 errors are zero; OWA undefined")
    return 0.5 * (smape(y, yhat) / smape_naive2 + mase(y, yhat, s, history) / mase_naive2)


def accuracy(y, yhat) -> float:
    y, yhat = np.asarray(y), np.asarray(yhat)
    if y.shape != yhat.shape:
        raise InvalidInput(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise InvalidInput("empty arrays")
    return float(np.mean(y == yhat))


def precision_recall_f1(pred_labels, true_labels):
    """Pointwise binary precision, recall and F1 (0 wherever undefined)."""
    pred = np.asarray(pred_labels).astype(bool).ravel()
    true = np.asarray(true_labels).astype(bool).ravel()
    if pred.shape != true.shape:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {true.shape}")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


_REGRESSION = {"mse": mse, "mae": mae, "rmse": rmse, "smape": smape, "mape": mape}


def compute_metric(name: str, y, yhat, params: Optional[dict] = None) -> float:
    params = dict(params or {})
    name = name.lower()
    if name in _REGRESSION:
        return _REGRESSION[name](y, yhat)
    if name == "mase":
        return mase(y, yhat, params.get("s", 1), params.get("history"))
    if name == "owa":
        return owa(y, yhat, **{k: params[k] for k in
                               ("s", "history", "naive2", "smape_naive2", "mase_naive2") if k in params})
    if name == "accuracy":
        return accuracy(y, yhat)
    if name in ("precision", "recall", "f1"):
        p, r, f = precision_recall_f1(yhat, y)
        return {"precision": p, "recall": r, "f1": f}[name]
    raise InvalidInput(f"unknown metric {name!r}")


TASK_METRICS = {
    "forecast": ("mse", "mae", "rmse"),
    "impute": ("mse", "mae"),
    "classify": ("accuracy",),
    "anomaly": ("precision", "recall", "f1"),
}


# ---------------------------------------------------------------- task logic


def imputation_loss(recon, original, mask) -> float:
    """MSE over the missing (mask == 0) positions only."""
    recon, original = _pair(recon, original)
    mask = np.asarray(mask)
    if mask.shape != original.shape:
        raise InvalidInput(f"mask shape {mask.shape} != data shape {original.shape}")
    missing = mask == 0
    if not missing.any():
        raise InvalidInput("mask has no missing positions; nothing to impute")
    return float(np.mean((recon[missing] - original[missing]) ** 2))


def random_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """1 = observed, 0 = missing, with each entry missing independently with prob ``ratio``."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidConfig("mask ratio must lie in [0, 1)")
    return (rng.random(shape) >= ratio).astype(np.float64)


def reconstruction_errors(reconstruct: Callable, series) -> np.ndarray:
    """Pointwise squared reconstruction error, averaged over channels.

    ``series`` is ``[d, T]`` (or ``[T]``); ``reconstruct`` maps it to the same shape.
    """
    x = np.asarray(series, dtype=np.float64)
    x2 = x[None] if x.ndim == 1 else x
    rec = np.asarray(reconstruct(x2), dtype=np.float64)
    if rec.shape != x2.shape:
        raise InvalidInput(f"reconstruction shape {rec.shape} != input {x2.shape}")
    return ((rec - x2) ** 2).mean(axis=0)


def anomaly_threshold(val_errors, threshold_quantile: float) -> float:
    if not 0.0 < threshold_quantile < 1.0:
        raise InvalidConfig("threshold_quantile must lie in (0, 1)")
    return float(np.quantile(np.asarray(val_errors, dtype=np.float64), threshold_quantile))


def anomaly_detect(reconstruct: Callable, series, threshold_quantile: float = 0.99,
                   val_series=None, val_errors=None) -> np.ndarray:
    """Label points whose reconstruction error exceeds a validation-error quantile.

    ``reconstruct`` is any callable producing a reconstruction of a ``[d, T]``
    array (e.g. a trained model applied window by window). The threshold is
    the ``threshold_quantile`` quantile of errors on ``val_series`` (or of the
    precomputed ``val_errors``).
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise InvalidConfig("threshold_quantile must lie in (0, 1)")
    if val_errors is None:
        if val_series is None:
            raise InvalidInput("need validation data to set the threshold")
        val_errors = reconstruction_errors(reconstruct, val_series)
    thr = anomaly_threshold(val_errors, threshold_quantile)
    err = reconstruction_errors(reconstruct, series)
    return (err > thr).astype(np.int64)
