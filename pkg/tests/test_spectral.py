import numpy as np
import pytest
from hypothesis import given, strategies as st

from ont import autodiff as ad
from ont import spectral
from ont.autodiff import Tensor
from ont.signal_io import Waveform
from ont.spectral import StftConfig, istft, stft

CFG16 = StftConfig(16000)
SMALL = StftConfig(sample_rate_hz=1000)  # 64-sample window, hop 16


def test_geometry_of_defaults():
    assert (CFG16.win_length, CFG16.hop_length, CFG16.n_fft, CFG16.n_bins) == (1024, 256, 1024, 513)
    c = StftConfig(8000)
    assert (c.win_length, c.hop_length, c.n_fft, c.n_bins) == (512, 128, 512, 257)
    assert c.n_frames(8192) == 61
    assert StftConfig(48000).n_fft == 4096  # 3072-sample window rounds up


def test_window_is_closed_form_hamming():
    n = np.arange(64)
    np.testing.assert_allclose(SMALL.window_array(), 0.54 - 0.46 * np.cos(2 * np.pi * n / 63), atol=1e-15)


def test_analysis_matches_naive_dft(rng):
    x = rng.standard_normal(200)
    S = spectral.analysis(x, SMALL)
    win, hop, nfft = 64, 16, 64
    w = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(win) / (win - 1))
    T = 1 + (200 - win) // hop
    assert S.shape == (33, T)
    for t in (0, 3, T - 1):
        frame = x[t * hop:t * hop + win] * w
        for f in (0, 5, 32):
            ref = sum(frame[n] * np.exp(-2j * np.pi * f * n / nfft) for n in range(win))
            assert abs(S[f, t] - ref) < 1e-10


@given(st.integers(0, 10_000), st.integers(64, 400))
def test_round_trip_interior(seed, n):
    x = np.random.default_rng(seed).standard_normal(n)
    y = spectral.synthesis(spectral.analysis(x, SMALL), SMALL, n)
    mask = spectral.interior_mask(SMALL, n)
    assert np.max(np.abs(y[mask] - x[mask])) < 1e-10
    covered = (SMALL.n_frames(n) - 1) * SMALL.hop_length + SMALL.win_length
    assert np.all(y[covered:] == 0)


def test_waveform_api_round_trip():
    x = Waveform(np.random.default_rng(0).standard_normal(16000), 16000)
    S = stft(x, CFG16)
    assert S.shape == (513, 59) and S.original_length == 16000
    y = istft(S, CFG16)
    assert len(y) == 16000 and y.sample_rate_hz == 16000
    m = spectral.interior_mask(CFG16, 16000)
    err = np.sqrt(np.mean((y.samples[m] - x.samples[m]) ** 2) / np.mean(x.samples[m] ** 2))
    assert err < 1e-12


def test_pure_tone_peaks_at_expected_bin():
    fs, f0 = 8000, 1000.0
    x = Waveform(np.sin(2 * np.pi * f0 * np.arange(4096) / fs), fs)
    S = stft(x, StftConfig(fs))
    peak = np.argmax(S.magnitude().mean(axis=1))
    assert peak == round(f0 * 512 / fs)


def test_errors():
    with pytest.raises(ValueError):
        StftConfig(8000, window="hann")
    with pytest.raises(ValueError):
        StftConfig(8000, hop_ms=64.0)
    with pytest.raises(ValueError):
        StftConfig(8000, fft_len=256)
    with pytest.raises(ValueError, match="shorter"):
        stft(Waveform(np.zeros(100), 8000), StftConfig(8000))
    S = stft(Waveform(np.ones(1000), 8000), StftConfig(8000))
    with pytest.raises(ValueError, match="different"):
        istft(S, StftConfig(8000, hop_ms=8.0))


def test_stft_op_backward_is_adjoint(rng):
    x = Tensor(rng.standard_normal((2, 160)), requires_grad=True)
    S = spectral.stft_op(x, SMALL)
    G = rng.standard_normal(S.shape)
    ad.backward(ad.tsum(S * G))
    num = ad.numeric_grad(lambda: float(np.sum(spectral.stft_op(x, SMALL).data * G)), x)
    np.testing.assert_allclose(x.grad, num, atol=1e-7)


def test_istft_op_backward_is_adjoint(rng):
    n = 160
    spec = Tensor(rng.standard_normal((1, 2, 33, SMALL.n_frames(n))), requires_grad=True)
    g = rng.standard_normal((1, n))
    ad.backward(ad.tsum(spectral.istft_op(spec, SMALL, n) * g))
    num = ad.numeric_grad(lambda: float(np.sum(spectral.istft_op(spec, SMALL, n).data * g)), spec)
    np.testing.assert_allclose(spec.grad, num, atol=1e-7)
