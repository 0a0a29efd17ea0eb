import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pets.errors import DegenerateSpectrum, InvalidConfig, InvalidInput, StateError
from pets.sdaq import (
    HAAR_CENTER,
    SdaqConfig,
    ami,
    calibrate_icwt,
    cwt,
    fft_spectrogram,
    freq_axis,
    icwt,
    inverse,
    mask_subband,
    partition_bands,
    sdaq_decompose,
    spectrogram,
    wavelet_spectrum,
)

CWT = SdaqConfig()
FFT = SdaqConfig(backend="fft")


def brute_ami(e, mu):
    total = sum(e)
    run = 0.0
    for b, v in enumerate(e, start=1):
        run += v
        if run >= mu * total:
            return b
    return len(e)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# ---------------------------------------------------------------- config


def test_config_defaults_and_K():
    assert CWT.lam == 50 and CWT.mus == (0.7, 0.9) and CWT.K == 3
    assert SdaqConfig.from_dict(CWT.to_dict()) == CWT


@pytest.mark.parametrize("kw", [
    {"mus": (0.9, 0.7)}, {"mus": (0.0, 0.5)}, {"mus": (0.5, 1.0)},
    {"lam": 2}, {"backend": "dct"}, {"wavelet": "meyer"}, {"icwt_calibration": -1.0},
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(InvalidConfig):
        SdaqConfig(**kw)


# ---------------------------------------------------------------- transforms


def test_freq_axis_increasing_up_to_nyquist():
    f = freq_axis(50)
    assert np.all(np.diff(f) > 0) and f[0] > 0 and f[-1] == pytest.approx(0.5)


def test_haar_center_is_spectrum_peak():
    nu = np.linspace(0.01, 3, 300001)
    assert nu[np.argmax(wavelet_spectrum("haar", nu))] == pytest.approx(HAAR_CENTER, abs=1e-4)


def test_constant_row_has_empty_cwt():
    spec = cwt(np.full((1, 16), 3.0), SdaqConfig(lam=8))
    assert spec.values.max() <= 1e-12
    assert spec.mean_offsets[0] == pytest.approx(3.0)


def test_cwt_coefficients_are_linear():
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=(2, 1, 64))
    c = lambda x: cwt(x, CWT).coefficients
    np.testing.assert_allclose(c(2.0 * x1 - 0.5 * x2), 2.0 * c(x1) - 0.5 * c(x2), atol=1e-12)


def _time_domain_haar_energy(f0, scales, L):
    """Brute-force scalogram of sin(2π f0 t): direct quadrature of the scaled Haar wavelet."""
    out = []
    for a in scales:
        u = np.linspace(0.0, a, 4001)
        psi = np.where(u < a / 2, 1.0, -1.0) / a
        taus = np.linspace(0, L, 200)
        w = [np.trapezoid(psi * np.sin(2 * np.pi * f0 * (tau + u)), u) for tau in taus]
        out.append(np.mean(np.square(w)))
    return np.array(out)


def test_sinusoid_peaks_at_its_frequency_column():
    cfg = SdaqConfig(lam=16)
    t = np.arange(64)
    spec = cwt(np.sin(2 * np.pi * 0.125 * t), cfg)
    col = int(np.argmax(spec.column_energy()[0]))
    f = freq_axis(16)
    assert col == int(np.argmin(np.abs(f - 0.125)))
    oracle = _time_domain_haar_energy(0.125, HAAR_CENTER / f, 64)
    assert col == int(np.argmax(oracle))


def test_cwt_rejects_short_series():
    with pytest.raises(InvalidInput):
        cwt(np.zeros((1, 3)), CWT)


def test_backend_mismatch():
    with pytest.raises(InvalidConfig):
        cwt(np.zeros((1, 8)), FFT)
    with pytest.raises(InvalidConfig):
        fft_spectrogram(np.zeros((1, 8)), CWT)


def test_fft_single_bin_fills_one_bucket():
    t = np.arange(32)
    spec = fft_spectrogram(np.cos(2 * np.pi * 3 * t / 32), SdaqConfig(lam=16, backend="fft"))
    e = spec.column_energy()[0]
    assert np.count_nonzero(e > 1e-12) == 1


def test_fft_zero_input():
    spec = fft_spectrogram(np.zeros((2, 32)), FFT)
    assert not spec.values.any()
    dec = sdaq_decompose(np.zeros((2, 32)), FFT)
    assert not dec.patterns.any()


def test_fft_image_time_invariant():
    x = np.random.default_rng(0).normal(size=(3, 40))
    v = fft_spectrogram(x, FFT).values
    assert np.all(v == v[:, :1, :])


# ---------------------------------------------------------------- AMI and partition


@pytest.mark.parametrize("e,mu,b", [([5, 3, 1, 1], 0.7, 2), ([5, 3, 1, 1], 0.5, 1), ([1, 1, 1, 1], 0.9, 4)])
def test_ami_examples(e, mu, b):
    assert ami(e, mu) == b == brute_ami(e, mu)


def test_ami_zero_energy():
    with pytest.raises(DegenerateSpectrum):
        ami([0, 0, 0], 0.5)


energies = arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 100, allow_nan=False))


@given(energies, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_ami_minimal_and_monotone(e, mu1, mu2):
    if e.sum() <= 0:
        return
    lo, hi = sorted((mu1, mu2))
    b = ami(e, lo)
    cum = np.cumsum(e)
    assert cum[b - 1] >= lo * cum[-1]
    assert b == 1 or cum[b - 2] < lo * cum[-1]
    assert b <= ami(e, hi)
    assert b == brute_ami(list(e), lo)


def test_partition_examples():
    p = partition_bands(np.array([5.0, 3, 1, 1]), (0.7, 0.9))
    assert p.boundaries.tolist() == [[1, 3, 4, 5]]
    p = partition_bands(np.array([1.0, 0, 0]), (0.7, 0.9))
    assert p.boundaries.tolist() == [[1, 2, 3, 4]]


def test_partition_one_over_f():
    e = 1.0 / np.arange(1, 51)
    b = partition_bands(e, (0.7, 0.9)).boundaries[0]
    cum = np.cumsum(e)
    b1 = b[1] - 1
    assert cum[b1 - 1] >= 0.7 * cum[-1] and cum[b1 - 2] < 0.7 * cum[-1]


def test_partition_needs_room():
    with pytest.raises(InvalidConfig):
        partition_bands(np.ones(2), (0.7, 0.9))


@given(arrays(np.float64, (3, 12), elements=st.floats(0, 10, allow_nan=False)))
def test_partition_bands_cover_and_are_nonempty(e):
    b = partition_bands(e, (0.3, 0.6, 0.9)).boundaries
    assert np.all(b[:, 0] == 1) and np.all(b[:, -1] == 13)
    assert np.all(np.diff(b, axis=1) >= 1)


# ---------------------------------------------------------------- masking


@pytest.mark.parametrize("cfg", [CWT, FFT])
def test_masks_partition_unity_and_disjoint(cfg):
    x = np.random.default_rng(3).normal(size=(4, 96))
    spec = spectrogram(x, cfg)
    part = partition_bands(spec, cfg.mus)
    masks = [mask_subband(spec, part, k) for k in range(1, cfg.K + 1)]
    assert np.array_equal(sum(m.values for m in masks), spec.values)
    for i in range(cfg.K):
        for j in range(i + 1, cfg.K):
            assert not np.any(masks[i].values * masks[j].values)


def test_mask_keeps_single_column():
    cfg = SdaqConfig(lam=3)
    spec = cwt(np.random.default_rng(0).normal(size=(1, 32)), cfg)
    part = partition_bands(np.array([[1.0, 0, 0]]), cfg.mus)
    m = mask_subband(spec, part, 2)
    assert np.all(m.values[..., [0, 2]] == 0)
    assert np.array_equal(m.values[..., 1], spec.values[..., 1])


def test_mask_index_checked():
    spec = cwt(np.ones((1, 16)) + np.arange(16), CWT)
    part = partition_bands(spec, CWT.mus)
    with pytest.raises(InvalidInput):
        mask_subband(spec, part, 0)
    with pytest.raises(InvalidInput):
        mask_subband(spec, part, 4)


# ---------------------------------------------------------------- inversion


def probe(rng, L=96, n=3):
    t = np.arange(L)
    f = rng.uniform(0.02, 0.45, n)
    a = rng.uniform(0.3, 1.5, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    return (a[:, None] * np.sin(2 * np.pi * f[:, None] * t + ph[:, None])).sum(axis=0)


def test_icwt_roundtrip_band_limited():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = probe(rng, n=2)[None]
        assert rel(icwt(cwt(x, CWT), CWT), x) <= 0.05


def test_icwt_of_empty_spectrogram_is_the_mean():
    spec = cwt(np.full((1, 32), 2.5), CWT)
    np.testing.assert_allclose(icwt(spec, CWT), 2.5, atol=1e-12)


def test_icwt_linear():
    rng = np.random.default_rng(2)
    s1, s2 = cwt(rng.normal(size=(2, 48)), CWT), cwt(rng.normal(size=(2, 48)), CWT)
    lhs = icwt(s1.scaled(1.5) + s2.scaled(-0.25), CWT)
    rhs = 1.5 * icwt(s1, CWT) - 0.25 * icwt(s2, CWT)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_icwt_needs_coefficients():
    spec = cwt(np.random.default_rng(0).normal(size=(1, 16)), CWT)
    spec.coefficients = None
    with pytest.raises(StateError):
        icwt(spec, CWT)


def test_calibration():
    c = calibrate_icwt(CWT, 96)
    assert np.isfinite(c) and c > 0
    fj = freq_axis(50)
    t = np.arange(96)
    for f in 0.5 * (fj[:-1] + fj[1:]):
        x = np.sin(2 * np.pi * f * t)
        x = (x - x.mean())[None]
        assert rel(icwt(cwt(x, CWT), CWT), x) <= 0.05
    sweep = [calibrate_icwt(SdaqConfig(lam=lam), 96) for lam in (25, 50, 100)]
    assert all(np.isfinite(sweep)) and min(sweep) > 0
    assert calibrate_icwt(FFT) == 1.0


# ---------------------------------------------------------------- end to end


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([32, 96, 512]), st.integers(0, 2**31))
def test_fft_decomposition_lossless(L, seed):
    x = np.random.default_rng(seed).normal(size=(4, L)) * 3 + 1
    dec = sdaq_decompose(x, FFT)
    assert rel(dec.patterns.sum(axis=0), x) <= 1e-9


def test_cwt_patterns_sum_to_inverse():
    x = np.random.default_rng(5).normal(size=(3, 96))
    dec = sdaq_decompose(x, CWT)
    np.testing.assert_allclose(dec.patterns.sum(axis=0), inverse(cwt(x, CWT), CWT), atol=1e-12)


@pytest.mark.parametrize("a", [2.0, -0.5, 7.25])
def test_cwt_decomposition_scales(a):
    x = probe(np.random.default_rng(4))[None]
    p1 = sdaq_decompose(x, CWT).patterns
    pa = sdaq_decompose(a * x, CWT).patterns
    np.testing.assert_allclose(pa, a * p1, atol=1e-10)


def test_low_frequency_energy_routed_to_first_pattern():
    t = np.arange(96)
    low = 3.0 * np.sin(2 * np.pi * 0.03 * t)
    high = 1.0 * np.sin(2 * np.pi * 0.3 * t)
    dec = sdaq_decompose((low + high)[None], CWT)
    p1 = dec.patterns[0, 0]
    # energy of the low tone's projection onto pattern 1, relative to the tone's energy
    captured = (np.dot(p1, low) / np.dot(low, low)) ** 2
    assert captured >= 0.95


@pytest.mark.parametrize("cfg", [CWT, FFT])
def test_constant_goes_to_first_pattern(cfg):
    x = np.full((2, 64), -1.75)
    dec = sdaq_decompose(x, cfg)
    np.testing.assert_allclose(dec.patterns[0], x, atol=1e-12)
    assert np.abs(dec.patterns[1:]).max() <= 1e-12


def test_first_band_holds_at_least_mu1_of_energy():
    x = np.random.default_rng(9).normal(size=(5, 96)).cumsum(axis=1)
    dec = sdaq_decompose(x, CWT)
    assert np.all(dec.band_energy[:, 0] >= 0.7 - 1e-12)
    np.testing.assert_allclose(dec.band_energy.sum(axis=1), 1.0)


def test_morlet_backend_runs():
    cfg = SdaqConfig(wavelet="morlet")
    x = probe(np.random.default_rng(0))[None]
    dec = sdaq_decompose(x, cfg)
    assert dec.patterns.shape == (3, 1, 96)
    assert rel(dec.patterns.sum(axis=0), x) <= 0.05
