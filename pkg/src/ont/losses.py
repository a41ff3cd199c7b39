"""Training objectives.

Signals are batched along the leading axis ([B, N] waveforms, [B, 2, F, T]
stacked spectrograms); every loss is computed per clip and averaged over the
batch. Inputs may be Tensors (differentiable), numpy arrays, or Waveforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signal_io import Waveform
from .spectral import ComplexSpectrogram


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.8      # frequency vs time mix inside the bracket
    beta: float = 1 / 200   # bracket scale
    gamma: float = 1.0      # regularization weight
    reg_normalized: bool = False  # divide the regularizer by clip length

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def _wave(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    elif isinstance(x, Waveform):
        t = Tensor(x.samples, dtype=dtype)
    else:
        t = Tensor(np.asarray(x), dtype=dtype)
    return t.reshape(1, -1) if t.ndim == 1 else t


def _spec(s, dtype=None) -> Tensor:
    if isinstance(s, ComplexSpectrogram):
        s = np.stack([s.re, s.im])
    t = s if isinstance(s, Tensor) else Tensor(np.asarray(s), dtype=dtype)
    return t.reshape(1, *t.shape) if t.ndim == 3 else t


def _same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_time(target, estimate) -> Tensor:
    """Mean squared error between waveforms."""
    s, e = _wave(target), _wave(estimate)
    _same(s, e, "loss_time")
    return ad.mean(ad.square(s - e))


def loss_freq(target_spec, estimate_spec, eps: float = ad.EPS) -> Tensor:
    """Mean over bins/frames of | (|Sr|+|Si|) - (|Ŝr|+|Ŝi|) |, all absolute values smoothed."""
    s, e = _spec(target_spec), _spec(estimate_spec)
    _same(s, e, "loss_freq")
    ms = ad.abs_smooth(s[:, 0], eps) + ad.abs_smooth(s[:, 1], eps)
    me = ad.abs_smooth(e[:, 0], eps) + ad.abs_smooth(e[:, 1], eps)
    return ad.mean(ad.abs_smooth(ms - me, eps))


def _cos(a: Tensor, b: Tensor, eps: float) -> Tensor:
    return ad.inner(a, b, -1) / (ad.norm(a, -1, eps) * ad.norm(b, -1, eps))


def loss_wsdr(x, y, y_hat, eps: float = ad.EPS) -> Tensor:
    """Weighted SDR: energy-weighted negative cosines of speech and residual parts."""
    x, y, y_hat = _wave(x), _wave(y), _wave(y_hat)
    _same(x, y, "loss_wsdr")
    _same(y, y_hat, "loss_wsdr")
    noise, noise_hat = x - y, x - y_hat
    ey = ad.tsum(ad.square(y), -1)
    en = ad.tsum(ad.square(noise), -1)
    a = ey / (ey + en + eps * eps)
    per_clip = -(a * _cos(y, y_hat, eps)) - (1.0 - a) * _cos(noise, noise_hat, eps)
    return ad.mean(per_clip)


def loss_basic(x, target, estimate, target_spec, estimate_spec, w: LossWeights,
               parts: dict | None = None) -> Tensor:
    lt = loss_time(target, estimate)
    lf = loss_freq(target_spec, estimate_spec)
    lw = loss_wsdr(x, target, estimate)
    if parts is not None:
        parts.update(l_time=lt.item(), l_freq=lf.item(), l_wsdr=lw.item())
    return ad.scale(ad.scale(lf, w.alpha) + ad.scale(lt, 1.0 - w.alpha), w.beta) + lw


def loss_reg(f_s1, s2, g_s1, g_s2, normalized: bool = False) -> Tensor:
    """|| f(s1) - s2 - (g1 - g2) ||^2 per clip, with g1, g2 treated as constants."""
    f, t = _wave(f_s1), _wave(s2)
    g1, g2 = ad.detach(_wave(g_s1)), ad.detach(_wave(g_s2))
    for other in (t, g1, g2):
        _same(f, other, "loss_reg")
    r = ad.tsum(ad.square((f - t) - (g1 - g2)), -1)
    if normalized:
        r = ad.scale(r, 1.0 / f.shape[-1])
    return ad.mean(r)


def loss_total(basic, reg, w: LossWeights) -> Tensor:
    basic, reg = ad.as_tensor(basic), ad.as_tensor(reg)
    if not (np.all(np.isfinite(basic.data)) and np.all(np.isfinite(reg.data))):
        raise ad.NonFiniteError("non-finite loss component")
    return basic + ad.scale(reg, w.gamma)
