"""Waveforms, RIFF/WAVE I/O, synthetic test signals and SNR-controlled mixing."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PCM16 = "pcm16"
FLOAT32 = "float32"
_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE

SYNTH_KINDS = ("harmonic-stack", "chirp", "amplitude-modulated-tone")


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {s.shape}")
        if s.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "harmonic-stack"
    duration_s: float = 1.0
    fundamental_hz: float = 220.0
    seed: int = 0


# ---------------------------------------------------------------- WAV I/O


def read_wav(path) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _FMT_EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if tag == _FMT_PCM and bits == 16:
        samples = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        samples = np.frombuffer(data[:len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    return Waveform(samples, rate)


def write_wav(w: Waveform, path, encoding: str = FLOAT32) -> None:
    if encoding == PCM16:
        x = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0 - 2.0 ** -15)
        payload = np.round(x * 32768.0).astype("<i2").tobytes()
        tag, bits = _FMT_PCM, 16
    elif encoding == FLOAT32:
        payload = np.asarray(w.samples, dtype="<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate_hz, w.sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- synthesis


def synth_clean(spec: SynthSpec, sample_rate_hz: int, min_length: int = 1) -> Waveform:
    """Deterministic speech stand-in; peak amplitude is 0.5.

    ``min_length`` is the analysis window length the signal must cover.
    """
    n = int(round(spec.duration_s * sample_rate_hz))
    if spec.duration_s <= 0 or n < max(1, min_length):
        raise ValueError(f"duration {spec.duration_s}s gives {n} samples, need >= {min_length}")
    nyq = sample_rate_hz / 2
    if not 0 < spec.fundamental_hz < nyq:
        raise ValueError(f"fundamental {spec.fundamental_hz} Hz outside (0, {nyq})")
    if spec.kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synth kind {spec.kind!r}")

    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sample_rate_hz
    f0 = spec.fundamental_hz

    if spec.kind == "harmonic-stack":
        # vibrato + syllable-rate envelope so the signal has speech-like modulation
        vib_rate, vib_depth = rng.uniform(4.0, 6.0), rng.uniform(0.01, 0.03)
        inst_f = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(inst_f) / sample_rate_hz
        x = np.zeros(n)
        h = 1
        while h * f0 * (1 + vib_depth) < 0.45 * sample_rate_hz and h <= 20:
            x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
            h += 1
        syl = rng.uniform(2.5, 5.0)
        x *= 0.55 + 0.45 * np.sin(2 * np.pi * syl * t + rng.uniform(0, 2 * np.pi))
    elif spec.kind == "chirp":
        f1 = min(4.0 * f0, 0.45 * sample_rate_hz)
        dur = n / sample_rate_hz
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / dur) + rng.uniform(0, 2 * np.pi)
        x = np.sin(phase) * (0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.5, 3.0) * t))
    else:
        mod = rng.uniform(3.0, 5.0)
        env = 1.0 + 0.9 * np.sin(2 * np.pi * mod * t + rng.uniform(0, 2 * np.pi))
        x = env * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))

    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.5 * x / peak
    return Waveform(x, sample_rate_hz)


def synth_white_noise(length: int, seed: int, sample_rate_hz: int = 16000) -> Waveform:
    if length < 1:
        raise ValueError(f"noise length must be >= 1, got {length}")
    rng = np.random.default_rng(seed)
    return Waveform(rng.standard_normal(length), sample_rate_hz)


def overlay_noise(clean: Waveform, noise: Waveform, snr_db: float,
                  random_offset: bool = False, seed: int = 0) -> Waveform:
    """Mix ``noise`` into ``clean`` at ``snr_db``.

    The noise is tiled from its start (or from a seeded random offset) and
    truncated to the clean length before scaling.
    """
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError(
            f"sample rate mismatch: clean {clean.sample_rate_hz} Hz, noise {noise.sample_rate_hz} Hz")
    y = np.asarray(clean.samples, dtype=np.float64)
    n = np.asarray(noise.samples, dtype=np.float64)
    ey = float(np.dot(y, y))
    if ey == 0.0:
        raise ValueError("clean signal is silent")
    if not np.any(n):
        raise ValueError("noise signal is silent")
    start = int(np.random.default_rng(seed).integers(n.size)) if random_offset else 0
    idx = (start + np.arange(y.size)) % n.size
    n = n[idx]
    en = float(np.dot(n, n))
    if en == 0.0:
        raise ValueError("noise is silent over the clean segment")
    g = np.sqrt(ey / (en * 10.0 ** (snr_db / 10.0)))
    return Waveform(y + g * n, clean.sample_rate_hz)
