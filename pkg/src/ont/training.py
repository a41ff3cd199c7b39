"""Strategy-dispatched training: ONT, NCT, NNT and NerNT.

Only the construction of (input, target) differs between strategies; the
model, the losses and the optimizer path are shared. ONT additionally adds
the regularization term computed against a stop-gradient full-length pass.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as net
from . import subsampler
from .autodiff import Tensor
from .losses import LossWeights, loss_basic, loss_reg, loss_total
from .signal_io import Waveform, overlay_noise, read_wav
from .spectral import StftConfig, analysis, stft_op
from .subsampler import SubsampleConfig

log = logging.getLogger(__name__)

ONT, NCT, NNT, NERNT = "ONT", "NCT", "NNT", "NerNT"
STRATEGIES = (ONT, NCT, NNT, NERNT)
_REQUIRED = {ONT: (), NCT: ("clean",), NNT: ("noisy2",), NERNT: ("extra_noise",)}


class ManifestError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = ONT
    epochs: int = 3
    batch_size: int = 1
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_interval_epochs: int = 1
    subsample: SubsampleConfig = field(default_factory=SubsampleConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    nernt_snr_range_db: tuple = (0.0, 10.0)
    seed: int = 0
    preset: str = "tiny"
    verify: bool = False  # float64 + deterministic mode
    stft: StftConfig = field(default_factory=lambda: StftConfig(sample_rate_hz=8000))

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_interval_epochs < 1:
            raise ValueError("lr_decay_interval_epochs must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.verify else np.float32


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestItem:
    id: str
    noisy: str
    clean: str | None = None
    noisy2: str | None = None
    extra_noise: str | None = None
    split: str = "train"
    noise: str = "white"


@dataclass
class DatasetManifest:
    items: list
    root: Path = Path(".")

    def split(self, tag: str) -> list:
        return [it for it in self.items if it.split == tag]

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self, strategy: str, split: str | None = "train") -> None:
        items = self.items if split is None else self.split(split)
        if not items:
            raise ManifestError(f"manifest has no {split or ''} items")
        for it in items:
            for key in _REQUIRED[strategy]:
                if not getattr(it, key):
                    raise ManifestError(f"item {it.id!r}: strategy {strategy} requires field '{key}'")

    def to_json(self) -> str:
        return json.dumps({"items": [asdict(it) for it in self.items]}, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        try:
            items = [ManifestItem(**it) for it in doc["items"]]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed manifest ({exc})") from None
        return cls(items, path.parent)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place on ``params`` (name -> Tensor)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_interval_epochs)


# ---------------------------------------------------------------- steps


def clip_rng(seed: int, clip_id: str, epoch: int, stream: int = 0) -> np.random.Generator:
    """Independent generator keyed by (run seed, clip, epoch)."""
    return np.random.default_rng([seed, zlib.crc32(clip_id.encode()), epoch, stream])


def _specs(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    S = analysis(x, cfg)
    return np.stack([S.real, S.imag], axis=1)


def _basic_on(model, inp: np.ndarray, target: np.ndarray, cfg: TrainConfig, parts: dict):
    dt = model.dtype
    est = net.enhance(model, Tensor(inp.astype(dt)), cfg.stft)
    basic = loss_basic(Tensor(inp.astype(dt)), Tensor(target.astype(dt)), est,
                       Tensor(_specs(target, cfg.stft).astype(dt)), stft_op(est, cfg.stft),
                       cfg.weights, parts)
    return basic, est


def full_pass(model, x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Stop-gradient denoiser output on the full-length clips."""
    with ad.no_grad():
        return net.enhance(model, Tensor(x.astype(model.dtype)), cfg.stft).data


def ont_loss(model, x: np.ndarray, maps: list, cfg: TrainConfig, parts: dict | None = None,
             full: np.ndarray | None = None) -> Tensor:
    """Total ONT loss for a batch x [B, N] with one index map per clip.

    ``full`` supplies a precomputed :func:`full_pass` output; it is a constant
    either way, so the regularizer's gradient only reaches the f(s1) branch.
    """
    parts = {} if parts is None else parts
    pairs = [subsampler.apply_indices(m, xi) for m, xi in zip(maps, x)]
    s1 = np.stack([p[0] for p in pairs])
    s2 = np.stack([p[1] for p in pairs])
    basic, est = _basic_on(model, s1, s2, cfg, parts)
    parts["l_basic"] = basic.item()
    if cfg.weights.gamma == 0:
        parts["l_reg"] = 0.0
        total = basic
    else:
        g = full_pass(model, x, cfg) if full is None else np.asarray(full)
        gp = [subsampler.apply_indices(m, gi) for m, gi in zip(maps, g)]
        g1 = np.stack([p[0] for p in gp])
        g2 = np.stack([p[1] for p in gp])
        reg = loss_reg(est, Tensor(s2.astype(model.dtype)), Tensor(g1), Tensor(g2),
                       normalized=cfg.weights.reg_normalized)
        parts["l_reg"] = reg.item()
        total = loss_total(basic, reg, cfg.weights)
    parts["total"] = total.item()
    return total


def supervised_loss(model, inp: np.ndarray, target: np.ndarray, cfg: TrainConfig,
                    parts: dict | None = None) -> Tensor:
    parts = {} if parts is None else parts
    basic, _ = _basic_on(model, inp, target, cfg, parts)
    parts.update(l_basic=basic.item(), l_reg=0.0, total=basic.item())
    return basic


def _step(model, loss: Tensor, state: AdamState, lr: float) -> None:
    if not np.isfinite(loss.item()):
        raise DivergenceError("non-finite loss")
    model.zero_grad()
    ad.backward(loss)
    grads = {k: t.grad for k, t in model.params.items()}
    adam_update(model.params, grads, state, lr)


def ont_step(model, x: np.ndarray, cfg: TrainConfig, state: AdamState, lr: float,
             maps: list | None = None, rngs: list | None = None, parts: dict | None = None) -> float:
    x = np.atleast_2d(x)
    if maps is None:
        rngs = rngs or [None] * len(x)
        maps = [subsampler.plan(x.shape[1], cfg.subsample, r) for r in rngs]
    loss = ont_loss(model, x, maps, cfg, parts)
    _step(model, loss, state, lr)
    return loss.item()


def nct_step(model, noisy, clean, cfg, state, lr, parts=None) -> float:
    loss = supervised_loss(model, np.atleast_2d(noisy), np.atleast_2d(clean), cfg, parts)
    _step(model, loss, state, lr)
    return loss.item()


def nnt_step(model, noisy, noisy2, cfg, state, lr, parts=None) -> float:
    loss = supervised_loss(model, np.atleast_2d(noisy), np.atleast_2d(noisy2), cfg, parts)
    _step(model, loss, state, lr)
    return loss.item()


def nernt_input(noisy: Waveform, extra: Waveform, cfg: TrainConfig, rng: np.random.Generator) -> Waveform:
    """Noisier input: the noisy clip (as signal) plus extra noise at a random SNR."""
    lo, hi = cfg.nernt_snr_range_db
    return overlay_noise(noisy, extra, float(rng.uniform(lo, hi)))


def nernt_step(model, noisier, noisy, cfg, state, lr, parts=None) -> float:
    loss = supervised_loss(model, np.atleast_2d(noisier), np.atleast_2d(noisy), cfg, parts)
    _step(model, loss, state, lr)
    return loss.item()


# ---------------------------------------------------------------- loop


class _Clips:
    """Lazy per-item waveform cache."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache = {}

    def get(self, item: ManifestItem, key: str) -> Waveform:
        k = (item.id, key)
        if k not in self._cache:
            self._cache[k] = read_wav(self.manifest.path(getattr(item, key)))
        return self._cache[k]


def _batch(clips: _Clips, items: list, cfg: TrainConfig, epoch: int):
    """(input, target) arrays for a batch under cfg.strategy; ONT returns (x, maps)."""
    s = cfg.strategy
    if s == ONT:
        xs = np.stack([clips.get(it, "noisy").samples for it in items])
        maps = [subsampler.plan(xs.shape[1], cfg.subsample, clip_rng(cfg.seed, it.id, epoch))
                for it in items]
        return xs, maps
    if s == NCT:
        inp = [clips.get(it, "noisy").samples for it in items]
        tgt = [clips.get(it, "clean").samples for it in items]
    elif s == NNT:
        inp = [clips.get(it, "noisy").samples for it in items]
        tgt = [clips.get(it, "noisy2").samples for it in items]
    else:
        inp, tgt = [], []
        for it in items:
            noisy = clips.get(it, "noisy")
            inp.append(nernt_input(noisy, clips.get(it, "extra_noise"), cfg,
                                   clip_rng(cfg.seed, it.id, epoch, 1)).samples)
            tgt.append(noisy.samples)
    return np.stack(inp), np.stack(tgt)


def _groups(items: list, clips: _Clips, batch_size: int) -> list:
    """Batches of equal-length clips, in the given order."""
    out = []
    pending = {}
    for it in items:
        n = len(clips.get(it, "noisy"))
        pending.setdefault(n, []).append(it)
        if len(pending[n]) == batch_size:
            out.append(pending.pop(n))
    out.extend(v for v in pending.values() if v)
    return out


def save_checkpoint(model, state: AdamState, epoch: int, path_prefix) -> None:
    prefix = Path(path_prefix)
    net.save_model(model, prefix.with_suffix(".ontm"))
    arrays = {"step": np.array(state.step), "epoch": np.array(epoch)}
    for k in model.params:
        arrays[f"param/{k}"] = model.params[k].data
        if k in state.m:
            arrays[f"m/{k}"] = state.m[k]
            arrays[f"v/{k}"] = state.v[k]
    np.savez(prefix.with_suffix(".opt.npz"), **arrays)


def load_checkpoint(path_prefix):
    """Model with exact (sidecar) parameters, optimizer state, and the completed epoch."""
    prefix = Path(path_prefix)
    model = net.load_model(prefix.with_suffix(".ontm"))
    state = AdamState()
    with np.load(prefix.with_suffix(".opt.npz")) as z:
        state.step = int(z["step"])
        epoch = int(z["epoch"])
        for k in model.params:
            model.params[k] = Tensor(z[f"param/{k}"].copy(), requires_grad=True)
            if f"m/{k}" in z:
                state.m[k] = z[f"m/{k}"].copy()
                state.v[k] = z[f"v/{k}"].copy()
    return model, state, epoch


@dataclass
class TrainResult:
    model: net.DenoiserModel
    log: list
    final_path: Path | None


def train(manifest: DatasetManifest, cfg: TrainConfig, output_dir=None,
          model: net.DenoiserModel | None = None, resume_from=None,
          model_config: net.ModelConfig | None = None) -> TrainResult:
    manifest.validate(cfg.strategy, "train")
    items = manifest.split("train")
    clips = _Clips(manifest)
    rate = clips.get(items[0], "noisy").sample_rate_hz
    if rate != cfg.stft.sample_rate_hz:
        cfg = replace(cfg, stft=replace(cfg.stft, sample_rate_hz=rate))

    start_epoch = 0
    state = AdamState()
    if resume_from is not None:
        model, state, done = load_checkpoint(resume_from)
        start_epoch = done + 1
    elif model is None:
        mcfg = model_config or net.preset(cfg.preset)
        model = net.init_model(mcfg, cfg.seed, cfg.dtype)

    out = Path(output_dir) if output_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume_from else "w")

    records = []
    step = state.step
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(items))
            for batch in _groups([items[i] for i in order], clips, cfg.batch_size):
                parts = {}
                a, b = _batch(clips, batch, cfg, epoch)
                try:
                    if cfg.strategy == ONT:
                        ont_step(model, a, cfg, state, lr, maps=b, parts=parts)
                    else:
                        nct_step(model, a, b, cfg, state, lr, parts)
                except (ad.NonFiniteError, DivergenceError) as exc:
                    raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
                rec = {"epoch": epoch, "step": step, "clip": ",".join(it.id for it in batch),
                       **{k: parts.get(k) for k in ("l_time", "l_freq", "l_wsdr", "l_basic", "l_reg", "total")},
                       "lr": lr}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            if out is not None:
                save_checkpoint(model, state, epoch, out / f"checkpoint_epoch{epoch}")
            log.info("epoch %d done, mean total %.4f", epoch,
                     np.mean([r["total"] for r in records if r["epoch"] == epoch] or [np.nan]))
    finally:
        if log_fh:
            log_fh.close()

    final = None
    if out is not None:
        final = out / "model.ontm"
        net.save_model(model, final)
    return TrainResult(model, records, final)
