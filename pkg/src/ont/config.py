"""Flat ``section.key = value`` run configuration.

Every recognised key is listed in ``KEYS`` with its type, default and a one
line description; anything else is rejected. Blank lines and ``#`` comments
are ignored. ``RunConfig.to_text`` writes every key back out, so an echoed
config reproduces the run on its own.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import CorpusConfig
from .losses import LossWeights
from .network import ModelConfig, preset
from .signal_io import SYNTH_KINDS
from .spectral import StftConfig
from .subsampler import SubsampleConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _strs(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default, description)
KEYS = {
    "train.strategy": (str, "ONT", "ONT | NCT | NNT | NerNT"),
    "train.epochs": (int, 3, "passes over the train split"),
    "train.batch_size": (int, 1, "clips per step (equal-length clips only)"),
    "train.learning_rate": (float, 1e-3, "Adam step size at epoch 0"),
    "train.lr_decay_factor": (float, 0.1, "StepLR multiplier"),
    "train.lr_decay_interval_epochs": (int, 1, "StepLR interval"),
    "train.alpha": (float, 0.8, "frequency-loss share inside the basic-loss bracket"),
    "train.beta": (float, 1 / 200, "scale of the bracket"),
    "train.gamma": (float, 1.0, "regularization weight (ONT only)"),
    "train.reg_normalized": (_bool, False, "divide the regularizer by clip length"),
    "train.nernt_snr_range_db": (_floats, (0.0, 10.0), "extra-noise SNR range for NerNT"),
    "train.seed": (int, 0, "init / shuffling / sub-sampler seed"),
    "stft.sample_rate_hz": (int, 8000, "overridden by the data sample rate when they differ"),
    "stft.window_ms": (float, 64.0, "analysis window"),
    "stft.hop_ms": (float, 16.0, "frame hop"),
    "stft.fft_len": (int, 0, "0 = next power of two >= window"),
    "subsample.k": (int, 2, "window size of the sub-sampler"),
    "subsample.mode": (str, "random", "random | fixed"),
    "model.preset": (str, "tiny", "tiny | paper"),
    "model.tstm_kind": (str, "complex", "complex | real bottleneck"),
    "model.n_tstb": (int, -1, "-1 = preset value"),
    "model.mask_mode": (str, "bounded", "bounded | unbounded"),
    "data.manifest": (str, "", "manifest.json for train / eval"),
    "data.n_clips": (int, 48, "synth: total clips"),
    "data.n_test": (int, 8, "synth: held-out clips"),
    "data.clip_length": (int, 8192, "synth: samples per clip"),
    "data.sample_rate_hz": (int, 8000, "synth: sample rate"),
    "data.snr_db": (_floats, (5.0,), "synth: input SNRs, cycled over clips"),
    "data.kinds": (_strs, SYNTH_KINDS, "synth: clean signal kinds"),
    "data.noisy2": (_bool, True, "synth: write a second independent noisy copy"),
    "data.extra_noise": (_bool, True, "synth: write an extra noise clip"),
    "data.seed": (int, 0, "synth seed"),
    "ablate.seeds": (_ints, (0, 1, 2, 3, 4), "repetition seeds per sweep cell"),
    "ablate.values": (_strs, (), "sweep values; empty = defaults for the sweep"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d, _) in KEYS.items()})
    verify: bool = False  # float64, deterministic

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv) -> "RunConfig":
        """Override with dotted keys passed as ``section__key=value``."""
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return replace(self, values=vals)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in KEYS)

    # -- typed views

    def model_config(self) -> ModelConfig:
        over = {"tstm_kind": self["model.tstm_kind"], "mask_mode": self["model.mask_mode"]}
        if self["model.n_tstb"] >= 0:
            over["n_tstb"] = self["model.n_tstb"]
        try:
            return preset(self["model.preset"], **over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                strategy=self["train.strategy"], epochs=self["train.epochs"],
                batch_size=self["train.batch_size"], learning_rate=self["train.learning_rate"],
                lr_decay_factor=self["train.lr_decay_factor"],
                lr_decay_interval_epochs=self["train.lr_decay_interval_epochs"],
                subsample=SubsampleConfig(self["subsample.k"], self["subsample.mode"], self["train.seed"]),
                weights=LossWeights(self["train.alpha"], self["train.beta"], self["train.gamma"],
                                    self["train.reg_normalized"]),
                nernt_snr_range_db=tuple(self["train.nernt_snr_range_db"]),
                seed=self["train.seed"], preset=self["model.preset"], verify=self.verify,
                stft=self.stft_config())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stft_config(self) -> StftConfig:
        try:
            return StftConfig(self["stft.sample_rate_hz"], self["stft.window_ms"], self["stft.hop_ms"],
                              self["stft.fft_len"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def corpus_config(self) -> CorpusConfig:
        try:
            return CorpusConfig(
                n_clips=self["data.n_clips"], n_test=self["data.n_test"],
                clip_length=self["data.clip_length"], sample_rate_hz=self["data.sample_rate_hz"],
                snr_db=tuple(self["data.snr_db"]), kinds=tuple(self["data.kinds"]),
                noisy2=self["data.noisy2"], extra_noise=self["data.extra_noise"], seed=self["data.seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    vals = {k: d for k, (_, d, _) in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        parser = KEYS[key][0]
        try:
            vals[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(vals)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p))


def describe() -> str:
    """Documented defaults, one commented line per key."""
    return "".join(f"# {doc}\n{k} = {_fmt(d)}\n" for k, (_, d, doc) in KEYS.items())
