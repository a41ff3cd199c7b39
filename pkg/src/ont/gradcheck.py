"""Finite-difference check of the full ONT objective against backprop.

Runs in float64 on a short clip at a low sample rate so that every
coordinate of the "tiny" preset can be perturbed in a few minutes. The
full-length (stop-gradient) pass is evaluated once and frozen, so both
sides differentiate the same function.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as net
from . import subsampler
from .signal_io import SynthSpec, overlay_noise, synth_clean, synth_white_noise
from .spectral import StftConfig
from .subsampler import SubsampleConfig
from .training import TrainConfig, full_pass, ont_loss

# 1 kHz: 64-sample window, 16-sample hop, 33 bins
CHECK_STFT = StftConfig(sample_rate_hz=1000)
CHECK_LENGTH = 256
# Denominator floor for the relative error. Central differences at h = 1e-5
# on a loss of magnitude ~10 carry ~2e-10 of round-off, so gradients that are
# exactly zero (e.g. attention key biases) cannot be resolved relatively;
# below |g| = 1e-5 the 1e-4 criterion becomes an absolute 1e-9 bound.
DEFAULT_FLOOR = 1e-5


@dataclass
class GradcheckResult:
    per_param: dict = field(default_factory=dict)  # name -> max relative error
    worst: tuple = ("", -1, 0.0, 0.0, 0.0)          # (name, flat index, analytic, numeric, rel)
    n_checked: int = 0
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)


def check_clip(seed: int = 0, length: int = CHECK_LENGTH, snr_db: float = 5.0) -> np.ndarray:
    fs = CHECK_STFT.sample_rate_hz
    clean = synth_clean(SynthSpec("harmonic-stack", length / fs, 60.0, seed), fs)
    return overlay_noise(clean, synth_white_noise(length, seed + 1, fs), snr_db).samples


def run_gradcheck(model: net.DenoiserModel | None = None, x: np.ndarray | None = None,
                  cfg: TrainConfig | None = None, seed: int = 0, max_coords: int = 0,
                  rel_step: float = 1e-5, floor: float = DEFAULT_FLOOR) -> GradcheckResult:
    """Compare the analytic gradient of the ONT total loss with central differences.

    ``max_coords`` > 0 checks a seeded random subset of coordinates per tensor.
    """
    t0 = time.perf_counter()
    cfg = cfg or TrainConfig(verify=True, stft=CHECK_STFT, subsample=SubsampleConfig(seed=seed))
    model = model or net.init_model(net.preset("tiny"), seed, np.float64)
    if model.dtype != np.float64:
        raise ValueError("gradient check needs a float64 model")
    x = np.atleast_2d(check_clip(seed) if x is None else x).astype(np.float64)
    rng = np.random.default_rng(seed)
    maps = [subsampler.plan(x.shape[1], cfg.subsample, rng) for _ in range(len(x))]
    full = full_pass(model, x, cfg)

    model.zero_grad()
    ad.backward(ont_loss(model, x, maps, cfg, full=full))
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for k, t in model.params.items()}

    def f() -> float:
        with ad.no_grad():
            return ont_loss(model, x, maps, cfg, full=full).item()

    res = GradcheckResult()
    pick = np.random.default_rng([seed, 1])
    for name, t in model.params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords and flat.size > max_coords:
            idx = np.sort(pick.choice(flat.size, max_coords, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        a = analytic[name].reshape(-1)[idx]
        rel = ad.relative_error(a, num, floor)
        res.per_param[name] = float(rel.max(initial=0.0))
        res.n_checked += idx.size
        j = int(np.argmax(rel)) if rel.size else 0
        if rel.size and rel[j] > res.worst[4]:
            res.worst = (name, int(idx[j]), float(a[j]), float(num[j]), float(rel[j]))
    res.seconds = time.perf_counter() - t0
    return res
