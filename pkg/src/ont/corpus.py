"""Synthetic toy corpus: clean tones, white-noise mixtures and a manifest."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal_io import SYNTH_KINDS, SynthSpec, overlay_noise, synth_clean, synth_white_noise, write_wav
from .training import DatasetManifest, ManifestItem


@dataclass(frozen=True)
class CorpusConfig:
    n_clips: int = 48
    n_test: int = 8
    clip_length: int = 8192          # samples; a multiple of the STFT hop keeps every sample covered
    sample_rate_hz: int = 8000
    snr_db: tuple = (5.0,)           # cycled over clips
    kinds: tuple = SYNTH_KINDS
    f0_range_hz: tuple = (100.0, 300.0)
    noisy2: bool = True
    extra_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1 or not 0 <= self.n_test < self.n_clips:
            raise ValueError("need n_clips >= 1 and 0 <= n_test < n_clips")
        if self.clip_length < 1 or self.sample_rate_hz <= 0:
            raise ValueError("clip_length and sample_rate_hz must be positive")
        if not self.snr_db:
            raise ValueError("snr_db list is empty")
        for k in self.kinds:
            if k not in SYNTH_KINDS:
                raise ValueError(f"unknown synth kind {k!r}")


@dataclass
class ClipSet:
    """In-memory corpus, keyed by clip id."""
    clean: dict = field(default_factory=dict)
    noisy: dict = field(default_factory=dict)
    noisy2: dict = field(default_factory=dict)
    extra_noise: dict = field(default_factory=dict)
    items: list = field(default_factory=list)


def generate(cfg: CorpusConfig) -> ClipSet:
    rng = np.random.default_rng([cfg.seed, 0x0C0])
    out = ClipSet()
    fs, n = cfg.sample_rate_hz, cfg.clip_length
    n_train = cfg.n_clips - cfg.n_test
    for i in range(cfg.n_clips):
        cid = f"clip{i:04d}"
        kind = cfg.kinds[i % len(cfg.kinds)]
        f0 = float(rng.uniform(*cfg.f0_range_hz))
        seeds = rng.integers(0, 2**31, size=4)
        clean = synth_clean(SynthSpec(kind, n / fs, f0, int(seeds[0])), fs)
        snr = float(cfg.snr_db[i % len(cfg.snr_db)])
        out.clean[cid] = clean
        out.noisy[cid] = overlay_noise(clean, synth_white_noise(n, int(seeds[1]), fs), snr)
        if cfg.noisy2:
            out.noisy2[cid] = overlay_noise(clean, synth_white_noise(n, int(seeds[2]), fs), snr)
        if cfg.extra_noise:
            out.extra_noise[cid] = synth_white_noise(n, int(seeds[3]), fs)
        out.items.append(ManifestItem(
            id=cid, noisy=f"noisy/{cid}.wav", clean=f"clean/{cid}.wav",
            noisy2=f"noisy2/{cid}.wav" if cfg.noisy2 else None,
            extra_noise=f"extra_noise/{cid}.wav" if cfg.extra_noise else None,
            split="train" if i < n_train else "test", noise=f"white@{snr:g}dB"))
    return out


def write_corpus(cfg: CorpusConfig, out_dir) -> DatasetManifest:
    """Write clean/, noisy/, noisy2/, extra_noise/ float32 WAVs plus manifest.json."""
    out = Path(out_dir)
    clips = generate(cfg)
    groups = {"clean": clips.clean, "noisy": clips.noisy, "noisy2": clips.noisy2,
              "extra_noise": clips.extra_noise}
    for sub, waves in groups.items():
        if not waves:
            continue
        (out / sub).mkdir(parents=True, exist_ok=True)
        for cid, w in waves.items():
            write_wav(w, out / sub / f"{cid}.wav")
    manifest = DatasetManifest(clips.items, out)
    manifest.save(out / "manifest.json")
    return manifest
