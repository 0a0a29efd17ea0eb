"""Energy-quantized time-frequency decoupling of series into fluctuation patterns.

A row is projected onto a time-frequency image (wavelet or FFT backend), the
frequency axis is cut into K sub-bands holding fixed fractions of the total
amplitude, and each masked sub-image is mapped back to the time domain.
All functions accept ``x`` of shape ``[C, L]`` (a 1-D row is promoted).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DegenerateSpectrum, InvalidConfig, InvalidInput, StateError

BACKENDS = ("cwt", "fft")
WAVELETS = ("haar", "morlet")

# Peak of |FT| of the Haar wavelet, i.e. argmax of (1 - cos(pi v)) / (pi v).
# With this as center frequency a sinusoid's energy peaks at its own pseudo-frequency.
HAAR_CENTER = 0.7420194752828456
MORLET_CENTER = 0.8125
MORLET_OMEGA0 = 5.0


@dataclass(frozen=True)
class SdaqConfig:
    """Decomposition settings.

    ``lam`` is the number of frequency columns, ``mus`` the K-1 cumulative
    energy fractions that place the band edges.
    """

    lam: int = 50
    mus: tuple = (0.7, 0.9)
    backend: str = "cwt"
    wavelet: str = "haar"
    icwt_calibration: Optional[float] = None
    # exponent of the dual synthesis window; larger values sharpen band separation
    synthesis_power: int = 3
    pad_factor: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mus", tuple(float(m) for m in self.mus))
        if self.backend not in BACKENDS:
            raise InvalidConfig(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.wavelet not in WAVELETS:
            raise InvalidConfig(f"wavelet must be one of {WAVELETS}, got {self.wavelet!r}")
        if int(self.lam) != self.lam or self.lam < 1:
            raise InvalidConfig(f"lam must be a positive integer, got {self.lam}")
        mus = self.mus
        if any(not (0.0 < m < 1.0) for m in mus):
            raise InvalidConfig(f"every mu must lie in (0, 1), got {mus}")
        if any(b <= a for a, b in zip(mus, mus[1:])):
            raise InvalidConfig(f"mus must be strictly ascending, got {mus}")
        if self.lam < self.K:
            raise InvalidConfig(f"lam={self.lam} cannot hold K={self.K} non-empty bands")
        if self.icwt_calibration is not None and not self.icwt_calibration > 0:
            raise InvalidConfig("icwt_calibration must be positive")
        if self.synthesis_power < 0 or self.pad_factor < 1:
            raise InvalidConfig("synthesis_power must be >= 0 and pad_factor >= 1")

    @property
    def K(self) -> int:
        return len(self.mus) + 1

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "mus": list(self.mus),
            "backend": self.backend,
            "wavelet": self.wavelet,
            "icwt_calibration": self.icwt_calibration,
            "synthesis_power": self.synthesis_power,
            "pad_factor": self.pad_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdaqConfig":
        return cls(**{k: (tuple(v) if k == "mus" else v) for k, v in d.items()})


@dataclass
class Spectrogram:
    """Amplitude image ``values[c, i, j]`` plus what is needed to invert it.

    ``coefficients`` holds the complex transform: ``[C, lam, M]`` zero-padded
    wavelet coefficients for the CWT backend, ``[C, L//2+1]`` rFFT bins for FFT.
    """

    values: np.ndarray
    freq_axis: np.ndarray
    mean_offsets: np.ndarray
    backend: str
    length: int
    coefficients: Optional[np.ndarray] = None
    bin_bucket: Optional[np.ndarray] = None
    wavelet: Optional[str] = None

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def lam(self) -> int:
        return self.values.shape[-1]

    def column_energy(self) -> np.ndarray:
        """Per-row sum over time of the amplitude image, shape ``[C, lam]``."""
        return self.values.sum(axis=1)

    def scaled(self, a: float) -> "Spectrogram":
        return self._combine(a, None, 0.0)

    def __add__(self, other: "Spectrogram") -> "Spectrogram":
        return self._combine(1.0, other, 1.0)

    def _combine(self, a, other, b) -> "Spectrogram":
        if self.coefficients is None or (other is not None and other.coefficients is None):
            raise StateError("spectrogram has no complex coefficients to combine")
        coef = a * self.coefficients
        means = a * self.mean_offsets
        if other is not None:
            if other.coefficients.shape != self.coefficients.shape or other.backend != self.backend:
                raise InvalidInput("cannot combine spectrograms of different layout")
            coef = coef + b * other.coefficients
            means = means + b * other.mean_offsets
        out = replace(self, coefficients=coef, mean_offsets=means)
        out.values = _magnitude(out)
        return out


@dataclass
class BandPartition:
    """Per-row band edges, 1-based: band k holds columns ``boundaries[r, k-1] <= j < boundaries[r, k]``."""

    boundaries: np.ndarray
    mus: tuple

    @property
    def K(self) -> int:
        return self.boundaries.shape[-1] - 1

    def column_mask(self, k: int, lam: int) -> np.ndarray:
        if not 1 <= k <= self.K:
            raise InvalidInput(f"band index k={k} outside [1, {self.K}]")
        j = np.arange(1, lam + 1)
        lo = self.boundaries[:, k - 1 : k]
        hi = self.boundaries[:, k : k + 1]
        return (j >= lo) & (j < hi)


@dataclass
class DecoupledSeries:
    patterns: np.ndarray  # [K, C, L], k=0 is the low-frequency pattern
    source_length: int
    partition: Optional[BandPartition] = None
    band_energy: Optional[np.ndarray] = field(default=None, repr=False)  # [C, K] fractions


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InvalidInput(f"expected a [C, L] array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains NaN or inf")
    return x


def freq_axis(lam: int) -> np.ndarray:
    """Pseudo-frequencies in cycles/sample, linear up to Nyquist."""
    return np.arange(1, lam + 1) * (0.5 / lam)


def center_frequency(wavelet: str) -> float:
    return HAAR_CENTER if wavelet == "haar" else MORLET_CENTER


def wavelet_spectrum(wavelet: str, nu: np.ndarray) -> np.ndarray:
    """|FT| of the mother wavelet at frequency ``nu`` (cycles per unit scale)."""
    nu = np.abs(np.asarray(nu, dtype=np.float64))
    if wavelet == "haar":
        out = np.zeros_like(nu)
        nz = nu > 0
        out[nz] = (1.0 - np.cos(np.pi * nu[nz])) / (np.pi * nu[nz])
        return out
    w = 2.0 * np.pi * nu
    return 0.5 * np.sqrt(2.0 * np.pi) * (
        np.exp(-0.5 * (w - MORLET_OMEGA0) ** 2) + np.exp(-0.5 * (w + MORLET_OMEGA0) ** 2)
    )


def _fft_len(L: int, pad_factor: int) -> int:
    return 1 << int(np.ceil(np.log2(max(pad_factor * L, 2))))


@lru_cache(maxsize=64)
def _filter_bank(wavelet: str, lam: int, M: int) -> np.ndarray:
    """Analysis filters ``[lam, M]`` on the analytic (positive) half of the FFT grid."""
    fj = freq_axis(lam)
    scales = center_frequency(wavelet) / fj
    k = np.arange(1, M // 2 + 1)
    G = np.zeros((lam, M))
    G[:, k] = wavelet_spectrum(wavelet, scales[:, None] * (k / M)[None, :])
    G.setflags(write=False)
    return G


@lru_cache(maxsize=64)
def _synthesis_bank(wavelet: str, lam: int, M: int, power: int) -> np.ndarray:
    G = _filter_bank(wavelet, lam, M)
    S = G**power
    denom = (S * G).sum(axis=0)
    S = np.divide(S, denom, out=np.zeros_like(S), where=denom > 0)
    S.setflags(write=False)
    return S


def _analytic_weights(M: int) -> np.ndarray:
    w = np.zeros(M)
    w[1 : (M + 1) // 2] = 2.0
    if M % 2 == 0:
        w[M // 2] = 1.0
    return w


def _magnitude(spec: Spectrogram) -> np.ndarray:
    L = spec.length
    if spec.backend == "cwt":
        return np.abs(spec.coefficients[:, :, :L]).transpose(0, 2, 1).copy()
    return _bucket_magnitude(spec.coefficients, spec.bin_bucket, spec.lam, L)


def cwt(x, cfg: SdaqConfig) -> Spectrogram:
    """Analytic continuous wavelet transform on a zero-padded buffer."""
    if cfg.backend != "cwt":
        raise InvalidConfig("cwt() requires backend='cwt'")
    x = _as_rows(x)
    C, L = x.shape
    if L < 4:
        raise InvalidInput(f"series length {L} < 4")
    fj = freq_axis(cfg.lam)
    if fj[-1] > 0.5 + 1e-12:
        raise InvalidConfig("frequency grid exceeds Nyquist")
    means = x.mean(axis=1)
    M = _fft_len(L, cfg.pad_factor)
    X = np.fft.fft(x - means[:, None], n=M, axis=1) * _analytic_weights(M)
    G = _filter_bank(cfg.wavelet, cfg.lam, M)
    coef = np.fft.ifft(X[:, None, :] * G[None, :, :], axis=-1)
    values = np.abs(coef[:, :, :L]).transpose(0, 2, 1).copy()
    return Spectrogram(values, fj, means, "cwt", L, coef, None, cfg.wavelet)


def _fft_buckets(n_bins: int, L: int, lam: int) -> np.ndarray:
    """0-based column per rFFT bin; the DC bin is parked in column 0."""
    B = L // 2
    b = np.arange(n_bins)
    bucket = np.ceil(b * lam / max(B, 1)).astype(int) - 1
    bucket[0] = 0
    return np.clip(bucket, 0, lam - 1)


def _bucket_magnitude(X: np.ndarray, bucket: np.ndarray, lam: int, L: int) -> np.ndarray:
    power = np.zeros((X.shape[0], lam))
    np.add.at(power.T, bucket, (np.abs(X) ** 2).T)
    mag = np.sqrt(power) * (2.0 / L)
    return np.repeat(mag[:, None, :], L, axis=1)


def fft_spectrogram(x, cfg: SdaqConfig) -> Spectrogram:
    """Time-invariant image from rFFT bins grouped into ``lam`` contiguous buckets."""
    if cfg.backend != "fft":
        raise InvalidConfig("fft_spectrogram() requires backend='fft'")
    x = _as_rows(x)
    C, L = x.shape
    if L < 2:
        raise InvalidInput(f"series length {L} < 2")
    means = x.mean(axis=1)
    X = np.fft.rfft(x - means[:, None], axis=1)
    bucket = _fft_buckets(X.shape[1], L, cfg.lam)
    values = _bucket_magnitude(X, bucket, cfg.lam, L)
    return Spectrogram(values, freq_axis(cfg.lam), means, "fft", L, X, bucket, None)


def spectrogram(x, cfg: SdaqConfig) -> Spectrogram:
    return cwt(x, cfg) if cfg.backend == "cwt" else fft_spectrogram(x, cfg)


def ami(column_energy, mu: float) -> int:
    """Smallest 1-based column b whose cumulative energy reaches ``mu`` of the total."""
    e = np.asarray(column_energy, dtype=np.float64)
    if e.ndim != 1:
        raise InvalidInput("ami expects a 1-D energy vector")
    if np.any(e < 0):
        raise InvalidInput("column energy must be non-negative")
    cum = np.cumsum(e)
    total = cum[-1] if cum.size else 0.0
    if not total > 0:
        raise DegenerateSpectrum("all-zero spectrum has no amplitude margin")
    return int(np.argmax(cum >= mu * total)) + 1


def partition_bands(spec: Union[Spectrogram, np.ndarray], mus: Sequence[float]) -> BandPartition:
    """Band edges per row from the column energies.

    Rows whose spectrum is identically zero get the minimal partition
    (one column in each of bands 1..K-1, the rest in band K).
    """
    energy = spec.column_energy() if isinstance(spec, Spectrogram) else np.asarray(spec, float)
    if energy.ndim == 1:
        energy = energy[None, :]
    C, lam = energy.shape
    mus = tuple(float(m) for m in mus)
    K = len(mus) + 1
    if lam < K:
        raise InvalidConfig(f"lam={lam} cannot hold K={K} non-empty bands")
    cum = np.cumsum(energy, axis=1)
    total = cum[:, -1:]
    live = total[:, 0] > 0
    bounds = np.empty((C, K + 1), dtype=np.int64)
    bounds[:, 0] = 1
    bounds[:, K] = lam + 1
    for k, mu in enumerate(mus, start=1):
        edge = np.argmax(cum >= mu * total, axis=1) + 1  # ami per row
        edge = np.where(live, edge, 1)
        b = np.maximum(edge + 1, bounds[:, k - 1] + 1)
        bounds[:, k] = np.minimum(b, lam + 1 - (K - k))
    return BandPartition(bounds, mus)


def mask_subband(spec: Spectrogram, part: BandPartition, k: int) -> Spectrogram:
    """Zero every column outside band ``k`` (1-based); the row mean stays with band 1."""
    if not 1 <= k <= part.K:
        raise InvalidInput(f"band index k={k} outside [1, {part.K}]")
    if part.boundaries.shape[0] != spec.n_rows:
        raise InvalidInput("partition rows do not match spectrogram rows")
    cols = part.column_mask(k, spec.lam)  # [C, lam]
    keep = cols.astype(np.float64)
    values = spec.values * keep[:, None, :]
    coef = None
    if spec.coefficients is not None:
        if spec.backend == "cwt":
            coef = spec.coefficients * keep[:, :, None]
        else:
            coef = spec.coefficients * np.take_along_axis(
                keep, np.broadcast_to(spec.bin_bucket, spec.coefficients.shape), axis=1
            )
    means = spec.mean_offsets if k == 1 else np.zeros_like(spec.mean_offsets)
    return replace(spec, values=values, coefficients=coef, mean_offsets=means)


def icwt(spec: Spectrogram, cfg: SdaqConfig) -> np.ndarray:
    """Inverse wavelet transform through the dual synthesis window, ``[C, L]``."""
    if spec.backend != "cwt":
        raise InvalidInput("icwt() needs a CWT spectrogram")
    if spec.coefficients is None:
        raise StateError("spectrogram lacks complex coefficients; cannot invert")
    c = cfg.icwt_calibration
    if c is None:
        c = calibrate_icwt(cfg, spec.length)
    return c * _raw_icwt(spec, cfg) + spec.mean_offsets[:, None]


def _raw_icwt(spec: Spectrogram, cfg: SdaqConfig) -> np.ndarray:
    coef = spec.coefficients
    lam, M = coef.shape[1], coef.shape[2]
    S = _synthesis_bank(spec.wavelet or cfg.wavelet, lam, M, cfg.synthesis_power)
    spectrum = np.einsum("jm,cjm->cm", S, np.fft.fft(coef, axis=-1))
    return np.real(np.fft.ifft(spectrum, axis=-1))[:, : spec.length]


def inverse(spec: Spectrogram, cfg: SdaqConfig) -> np.ndarray:
    if spec.backend == "cwt":
        return icwt(spec, cfg)
    if spec.coefficients is None:
        raise StateError("spectrogram lacks complex coefficients; cannot invert")
    return np.fft.irfft(spec.coefficients, n=spec.length, axis=1) + spec.mean_offsets[:, None]


def calibrate_icwt(cfg: SdaqConfig, length: int = 96) -> float:
    """Least-squares gain mapping raw reconstructions of probe sinusoids onto the probes."""
    if cfg.backend == "fft":
        return 1.0
    return _calibrate(cfg.wavelet, cfg.lam, cfg.synthesis_power, cfg.pad_factor, int(length))


@lru_cache(maxsize=32)
def _calibrate(wavelet: str, lam: int, power: int, pad: int, length: int) -> float:
    if lam < 2:
        return 1.0
    probe_cfg = SdaqConfig(lam=lam, mus=(), wavelet=wavelet, synthesis_power=power,
                           pad_factor=pad, icwt_calibration=1.0)
    fj = freq_axis(lam)
    mids = 0.5 * (fj[:-1] + fj[1:])
    t = np.arange(length)
    probes = np.sin(2.0 * np.pi * mids[:, None] * t[None, :])
    probes -= probes.mean(axis=1, keepdims=True)
    recon = _raw_icwt(cwt(probes, probe_cfg), probe_cfg)
    den = float(np.sum(recon * recon))
    return float(np.sum(recon * probes) / den) if den > 0 else 1.0


def sdaq_decompose(x, cfg: SdaqConfig) -> DecoupledSeries:
    """Split each row into K patterns ordered from low to high frequency."""
    x = _as_rows(x)
    spec = spectrogram(x, cfg)
    part = partition_bands(spec, cfg.mus)
    energy = spec.column_energy()
    total = energy.sum(axis=1)
    patterns = np.empty((cfg.K,) + x.shape)
    fractions = np.zeros((x.shape[0], cfg.K))
    for k in range(1, cfg.K + 1):
        band = mask_subband(spec, part, k)
        patterns[k - 1] = inverse(band, cfg)
        fractions[:, k - 1] = np.divide(
            band.column_energy().sum(axis=1), total, out=np.zeros_like(total), where=total > 0
        )
    return DecoupledSeries(patterns, x.shape[1], part, fractions)
