"""STFT analysis and weighted overlap-add synthesis.

Frame t covers samples [t*hop, t*hop + win); each frame is Hamming-windowed,
zero-padded to ``fft_len`` and transformed with a one-sided FFT. Synthesis
windows the inverse frames again and divides by the summed squared window,
which inverts analysis exactly wherever that sum is nonzero. Samples past
the last frame are not covered and come back as zeros.

Both directions exist as plain numpy functions and as differentiable
engine ops (``stft_op`` / ``istft_op``) sharing the same kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .signal_io import Waveform


@dataclass(frozen=True)
class StftConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 64.0
    hop_ms: float = 16.0
    fft_len: int = 0  # 0: next power of two >= window length
    window: str = "hamming"

    def __post_init__(self):
        if self.window != "hamming":
            raise ValueError("only the Hamming window is supported")
        if self.hop_length >= self.win_length:
            raise ValueError("hop must be shorter than the window")
        if self.n_fft < self.win_length:
            raise ValueError("fft_len must be >= window length")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_fft(self) -> int:
        if self.fft_len:
            return int(self.fft_len)
        return 1 << (self.win_length - 1).bit_length()

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + (length - self.win_length) // self.hop_length

    def window_array(self) -> np.ndarray:
        # symmetric Hamming, 0.54 - 0.46 cos
        return np.hamming(self.win_length)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    re: np.ndarray  # [F, T]
    im: np.ndarray
    config: StftConfig
    original_length: int = field(default=0)

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError("real and imaginary parts differ in shape")
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def shape(self):
        return self.re.shape

    @property
    def n_bins(self) -> int:
        return self.re.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.re.shape[-1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)


# ---------------------------------------------------------------- kernels


def _check_length(length: int, cfg: StftConfig):
    if length < cfg.win_length:
        raise ValueError(f"signal of {length} samples shorter than one window ({cfg.win_length})")


def analysis(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """x [..., N] -> complex [..., F, T]."""
    _check_length(x.shape[-1], cfg)
    win, hop = cfg.win_length, cfg.hop_length
    frames = sliding_window_view(x, win, axis=-1)[..., ::hop, :]
    spec = np.fft.rfft(frames * cfg.window_array(), n=cfg.n_fft, axis=-1)
    return np.swapaxes(spec, -1, -2)


def _analysis_adjoint(g: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Adjoint of ``analysis`` for the (re, im) real parameterization."""
    n = cfg.n_fft
    G = np.swapaxes(g, -1, -2).copy()  # [..., T, F]
    G[..., 1:n // 2] *= 0.5
    G[..., 0] = G[..., 0].real
    G[..., n // 2] = G[..., n // 2].real
    frames = n * np.fft.irfft(G, n=n, axis=-1)[..., :cfg.win_length] * cfg.window_array()
    return _overlap_add(frames, cfg, length)


def _overlap_add(frames: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    hop, win = cfg.hop_length, cfg.win_length
    out = np.zeros(frames.shape[:-2] + (length,), dtype=frames.dtype)
    for t in range(frames.shape[-2]):
        out[..., t * hop:t * hop + win] += frames[..., t, :]
    return out


def window_energy(cfg: StftConfig, length: int) -> np.ndarray:
    """Summed squared analysis window at each output sample."""
    T = cfg.n_frames(length)
    w2 = np.broadcast_to(cfg.window_array() ** 2, (T, cfg.win_length))
    return _overlap_add(np.asarray(w2), cfg, length)


def _synthesis_scale(cfg: StftConfig, length: int) -> np.ndarray:
    den = window_energy(cfg, length)
    with np.errstate(divide="ignore"):
        return np.where(den > 0, 1.0 / np.where(den > 0, den, 1.0), 0.0)


def synthesis(spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """complex [..., F, T] -> real [..., length] by weighted overlap-add."""
    T = spec.shape[-1]
    if spec.shape[-2] != cfg.n_bins or cfg.n_frames(length) != T:
        raise ValueError(
            f"spectrogram geometry {spec.shape[-2:]} does not match config "
            f"({cfg.n_bins} bins, {cfg.n_frames(length)} frames for length {length})")
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=cfg.n_fft, axis=-1)[..., :cfg.win_length]
    y = _overlap_add(frames * cfg.window_array(), cfg, length)
    return y * _synthesis_scale(cfg, length)


def _synthesis_adjoint(g: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    n, hop, win = cfg.n_fft, cfg.hop_length, cfg.win_length
    gs = g * _synthesis_scale(cfg, length)
    T = cfg.n_frames(length)
    frames = sliding_window_view(gs, win, axis=-1)[..., ::hop, :][..., :T, :] * cfg.window_array()
    G = np.fft.rfft(frames, n=n, axis=-1) / n
    G[..., 1:n // 2] *= 2.0
    G[..., 0] = G[..., 0].real
    G[..., n // 2] = G[..., n // 2].real
    return np.swapaxes(G, -1, -2)


# ---------------------------------------------------------------- public API


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    S = analysis(np.asarray(w.samples, dtype=np.float64), cfg)
    return ComplexSpectrogram(S.real.copy(), S.imag.copy(), cfg, len(w))


def istft(spec: ComplexSpectrogram, cfg: StftConfig) -> Waveform:
    if spec.config != cfg:
        raise ValueError("spectrogram was produced with a different STFT configuration")
    y = synthesis(spec.re + 1j * spec.im, cfg, spec.original_length)
    return Waveform(y, cfg.sample_rate_hz)


def interior_mask(cfg: StftConfig, length: int, rel: float = 1e-3) -> np.ndarray:
    """Samples whose window-energy denominator exceeds ``rel`` of its maximum."""
    den = window_energy(cfg, length)
    return den > rel * den.max()


def stft_op(x: ad.Tensor, cfg: StftConfig) -> ad.Tensor:
    """Differentiable STFT: x [B, N] -> [B, 2, F, T] (real, imaginary stacked)."""
    length = x.shape[-1]
    S = analysis(x.data, cfg)
    out = np.stack([S.real, S.imag], axis=1).astype(x.dtype)

    def bw(g):
        G = g[:, 0] + 1j * g[:, 1]
        return (_analysis_adjoint(G, cfg, length).astype(x.dtype),)

    return ad.make_op(out, (x,), bw, "stft")


def istft_op(spec: ad.Tensor, cfg: StftConfig, length: int) -> ad.Tensor:
    """Differentiable inverse of :func:`stft_op`: [B, 2, F, T] -> [B, length]."""
    S = spec.data[:, 0] + 1j * spec.data[:, 1]
    out = synthesis(S, cfg, length).astype(spec.dtype)

    def bw(g):
        G = _synthesis_adjoint(g, cfg, length)
        return (np.stack([G.real, G.imag], axis=1).astype(spec.dtype),)

    return ad.make_op(out, (spec,), bw, "istft")
