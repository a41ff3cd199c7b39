"""Objective evaluation: SNR, segmental SNR and STOI, plus report assembly."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .signal_io import Waveform

SSNR_FRAME_MS = 32.0
SSNR_FLOOR_DB = -10.0
SSNR_CEIL_DB = 35.0

# STOI constants (Taal et al. 2011)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0


def _pair(reference, test) -> tuple[np.ndarray, np.ndarray, int | None]:
    rate = None
    if isinstance(reference, Waveform):
        rate = reference.sample_rate_hz
        reference = reference.samples
    if isinstance(test, Waveform):
        if rate is not None and test.sample_rate_hz != rate:
            raise ValueError("reference and test sample rates differ")
        rate = rate or test.sample_rate_hz
        test = test.samples
    y = np.asarray(reference, dtype=np.float64)
    x = np.asarray(test, dtype=np.float64)
    if y.shape != x.shape:
        raise ValueError(f"length mismatch: reference {y.shape}, test {x.shape}")
    return y, x, rate


def snr_db(reference, test) -> float:
    y, x, _ = _pair(reference, test)
    ey = float(np.dot(y, y))
    if ey == 0.0:
        raise ValueError("reference signal is silent")
    r = x - y
    er = float(np.dot(r, r))
    if er == 0.0:
        return math.inf
    return 10.0 * math.log10(ey / er)


def ssnr_db(reference, test, sample_rate_hz: int | None = None) -> float:
    """Mean of per-frame SNRs over non-overlapping 32 ms frames, each clamped to [-10, 35] dB."""
    y, x, rate = _pair(reference, test)
    rate = sample_rate_hz or rate
    if rate is None:
        raise ValueError("sample rate required for segmental SNR")
    n = int(round(SSNR_FRAME_MS * rate / 1000.0))
    nf = y.size // n
    if nf < 1:
        raise ValueError(f"signal shorter than one {SSNR_FRAME_MS} ms frame")
    yf = y[:nf * n].reshape(nf, n)
    rf = (x[:nf * n] - y[:nf * n]).reshape(nf, n)
    ey = np.sum(yf * yf, axis=1)
    er = np.sum(rf * rf, axis=1)
    valid = ey > 0
    if not np.any(valid):
        raise ValueError("no frames with a non-silent reference")
    with np.errstate(divide="ignore"):
        seg = 10.0 * np.log10(ey[valid] / er[valid])
    seg = np.clip(seg, SSNR_FLOOR_DB, SSNR_CEIL_DB)
    return float(np.mean(seg))


# ---------------------------------------------------------------- STOI


def _resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    if fs_in == fs_out:
        return x
    r = Fraction(fs_out, fs_in)
    return resample_poly(x, r.numerator, r.denominator, window=("kaiser", 5.0))


def _third_octave_matrix(fs: int, nfft: int, n_bands: int, min_freq: float) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames where the reference is more than 40 dB below its loudest frame."""
    hop = STOI_FRAME // 2
    w = _stoi_window()
    starts = range(0, x.size - STOI_FRAME + 1, hop)
    xf = np.array([w * x[s:s + STOI_FRAME] for s in starts])
    yf = np.array([w * y[s:s + STOI_FRAME] for s in starts])
    if xf.size == 0:
        return x[:0], y[:0]
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - STOI_DYN_RANGE_DB
    xf, yf = xf[keep], yf[keep]
    n = (xf.shape[0] - 1) * hop + STOI_FRAME
    xs, ys = np.zeros(n), np.zeros(n)
    for i in range(xf.shape[0]):
        xs[i * hop:i * hop + STOI_FRAME] += xf[i]
        ys[i * hop:i * hop + STOI_FRAME] += yf[i]
    return xs, ys


def _stoi_spectrum(x: np.ndarray) -> np.ndarray:
    hop = STOI_FRAME // 2
    w = _stoi_window()
    frames = np.array([w * x[s:s + STOI_FRAME] for s in range(0, x.size - STOI_FRAME + 1, hop)])
    return np.fft.rfft(frames, n=STOI_NFFT, axis=1).T  # [bins, frames]


def stoi(reference, test, sample_rate_hz: int | None = None) -> float:
    """Short-time objective intelligibility of ``test`` against clean ``reference``."""
    y, x, rate = _pair(reference, test)
    rate = sample_rate_hz or rate
    if rate is None:
        raise ValueError("sample rate required for STOI")
    clean = _resample(y, rate, STOI_FS)
    proc = _resample(x, rate, STOI_FS)
    clean, proc = _remove_silent_frames(clean, proc)
    if clean.size < STOI_FRAME:
        raise ValueError("clip too short for STOI after silence removal")

    obm = _third_octave_matrix(STOI_FS, STOI_NFFT, STOI_BANDS, STOI_MIN_FREQ)
    X = np.sqrt(obm @ np.abs(_stoi_spectrum(clean)) ** 2)
    Y = np.sqrt(obm @ np.abs(_stoi_spectrum(proc)) ** 2)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(f"clip too short for STOI: {n_frames} frames, need {STOI_SEGMENT}")

    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    eps = np.finfo(float).eps
    total = 0.0
    count = 0
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = X[:, m - STOI_SEGMENT:m]
        ys = Y[:, m - STOI_SEGMENT:m]
        scale = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yn = np.minimum(ys * scale, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yn - yn.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + eps
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + eps
        total += float(np.sum(xc * yc))
        count += STOI_BANDS
    return total / count


# ---------------------------------------------------------------- reports


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


@dataclass
class ClipMetrics:
    clip: str
    strategy: str
    preset: str
    snr_db: float
    ssnr_db: float
    stoi: float


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)

    def rows(self, strategy: str | None = None) -> list:
        return [r for r in self.records if strategy is None or r.strategy == strategy]

    def aggregates(self) -> dict:
        """{strategy: {metric: (mean, population std)}}."""
        out = {}
        for s in dict.fromkeys(r.strategy for r in self.records):
            rows = self.rows(s)
            out[s] = {}
            for m in ("snr_db", "ssnr_db", "stoi"):
                v = np.array([getattr(r, m) for r in rows], dtype=float)
                finite = v[np.isfinite(v)]
                out[s][m] = (float(np.mean(v)), float(np.std(v))) if finite.size == v.size else (math.inf, math.nan)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip", "strategy", "preset", "snr_db", "ssnr_db", "stoi"])
        for r in self.records:
            w.writerow([r.clip, r.strategy, r.preset, _fmt(r.snr_db), _fmt(r.ssnr_db), _fmt(r.stoi)])
        return buf.getvalue()

    def to_json(self) -> str:
        def enc(v):
            return "inf" if v == math.inf else (None if isinstance(v, float) and math.isnan(v) else v)
        doc = {
            "clips": [{k: enc(v) for k, v in r.__dict__.items()} for r in self.records],
            "aggregates": {s: {m: {"mean": enc(a), "std": enc(b)} for m, (a, b) in ms.items()}
                           for s, ms in self.aggregates().items()},
        }
        return json.dumps(doc, indent=1)

    def save(self, csv_path, json_path=None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if json_path is not None:
            Path(json_path).write_text(self.to_json() + "\n")

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([ClipMetrics(r["clip"], r["strategy"], r["preset"], float(r["snr_db"]),
                                float(r["ssnr_db"]), float(r["stoi"])) for r in rows])


def clip_metrics(clip: str, strategy: str, preset: str, clean: Waveform, test: Waveform,
                 with_stoi: bool = True) -> ClipMetrics:
    return ClipMetrics(clip, strategy, preset, snr_db(clean, test), ssnr_db(clean, test),
                       stoi(clean, test) if with_stoi else math.nan)


def evaluate(model, manifest, stft_cfg, strategy: str = "model", split: str = "test",
             with_stoi: bool = True, baseline: bool = True) -> MetricsReport:
    """Metrics of the denoised test clips, plus a ``noisy`` row per clip for the raw input."""
    from dataclasses import replace

    from .network import denoise_waveform
    from .signal_io import read_wav

    items = manifest.split(split) if split else manifest.items
    if not items:
        raise ValueError(f"manifest has no '{split}' items")
    report = MetricsReport()
    preset = model.config.preset
    for it in items:
        if not it.clean:
            raise ValueError(f"item {it.id!r} has no clean reference")
        clean = read_wav(manifest.path(it.clean))
        noisy = read_wav(manifest.path(it.noisy))
        cfg = stft_cfg if stft_cfg.sample_rate_hz == noisy.sample_rate_hz else replace(
            stft_cfg, sample_rate_hz=noisy.sample_rate_hz)
        if baseline:
            report.records.append(clip_metrics(it.id, "noisy", preset, clean, noisy, with_stoi))
        out = denoise_waveform(model, noisy, cfg)
        report.records.append(clip_metrics(it.id, strategy, preset, clean, out, with_stoi))
    return report
