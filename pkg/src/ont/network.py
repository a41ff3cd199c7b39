"""Complex-valued spectrogram-masking U-Net with a complex two-stage transformer bottleneck.

Layout for a channel list of length 2L:

    encoder i (i < L):  complex conv (stride s_i) -> norm -> leaky ReLU
    bottleneck:         complex TSTM over the last encoder output
    decoder j (j < L):  complex transposed conv back to the shape of encoder
                        L-1-j's input, fed with [previous decoder output,
                        mirrored encoder output] concatenated on channels
                        (the first decoder only sees the bottleneck)
    mask:               last decoder output (1 channel, or a 1x1 complex
                        projection when the list ends with more channels),
                        bounded as tanh(|o|) o/|o|, multiplied onto the input

All real/imaginary coupling happens in the complex convolutions and the
complex TSTM; normalization and activation act on each part separately.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signal_io import Waveform
from .spectral import StftConfig, istft_op, stft_op

BOUNDED = "bounded"
UNBOUNDED = "unbounded"
MODEL_MAGIC = b"ONTM"
MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ComplexTensor:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError(f"real/imaginary shape mismatch {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape


@dataclass(frozen=True)
class ComplexConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (1, 1)

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, *self.kernel, *self.stride) < 1:
            raise ValueError(f"non-positive extent in {self}")


@dataclass(frozen=True)
class TstbSpec:
    model_dim: int
    head_count: int
    feedforward_dim: int

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.head_count} heads")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (8, 16, 16, 8)
    strides: tuple = ((2, 2), (2, 1), (2, 1), (2, 2))
    kernel: tuple = (3, 3)
    n_tstb: int = 1
    tstm_kind: str = "complex"  # complex | real
    head_count: int = 2
    feedforward_dim: int = 32
    mask_mode: str = BOUNDED
    leaky_slope: float = 0.01
    preset: str = "tiny"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(tuple(int(v) for v in s) for s in self.strides))
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        if len(self.channels) % 2 or not self.channels:
            raise ValueError("channel list must have even, nonzero length")
        if len(self.strides) != len(self.channels):
            raise ValueError("one stride per layer required")
        if self.n_tstb < 0:
            raise ValueError("n_tstb must be >= 0")
        if self.mask_mode not in (BOUNDED, UNBOUNDED):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.tstm_kind not in ("complex", "real"):
            raise ValueError(f"unknown TSTM kind {self.tstm_kind!r}")
        TstbSpec(self.model_dim, self.head_count, self.feedforward_dim)

    @property
    def depth(self) -> int:
        return len(self.channels) // 2

    @property
    def model_dim(self) -> int:
        return self.channels[self.depth - 1]

    @property
    def tstb(self) -> TstbSpec:
        return TstbSpec(self.model_dim, self.head_count, self.feedforward_dim)

    def downsampling(self) -> tuple[int, int]:
        f = t = 1
        for sf, st in self.strides[:self.depth]:
            f, t = f * sf, t * st
        return f, t

    def to_text(self) -> str:
        d = asdict(self)
        lines = []
        for key in sorted(d):
            v = d[key]
            if key == "strides":
                v = ";".join(f"{a},{b}" for a, b in v)
            elif isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        for line in text.strip().splitlines():
            key, _, v = line.partition("=")
            if key == "strides":
                kw[key] = tuple(tuple(int(x) for x in s.split(",")) for s in v.split(";"))
            elif key in ("channels", "kernel"):
                kw[key] = tuple(int(x) for x in v.split(","))
            elif key in ("n_tstb", "head_count", "feedforward_dim"):
                kw[key] = int(v)
            elif key == "leaky_slope":
                kw[key] = float(v)
            elif key in ("tstm_kind", "mask_mode", "preset"):
                kw[key] = v
            else:
                raise ModelFormatError(f"unknown config key {key!r}")
        return cls(**kw)


def _middle_strides(n_layers: int) -> tuple:
    s = [(2, 2)] * n_layers
    s[n_layers // 2 - 1] = s[n_layers // 2] = (2, 1)
    return tuple(s)


PRESETS = {
    "tiny": ModelConfig(channels=(8, 16, 16, 8), strides=_middle_strides(4), n_tstb=1,
                        head_count=2, feedforward_dim=32, preset="tiny"),
    "paper": ModelConfig(channels=(45, 90, 90, 90, 90, 90, 90, 90, 45, 1), strides=_middle_strides(10),
                         n_tstb=6, head_count=6, feedforward_dim=180, preset="paper"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# ---------------------------------------------------------------- parameters


def _conv_layers(cfg: ModelConfig):
    """Yield (name, ComplexConvSpec, transposed) for every conv layer."""
    L, ch = cfg.depth, cfg.channels
    pad = (cfg.kernel[0] // 2, cfg.kernel[1] // 2)
    c_in = 1
    for i in range(L):
        yield f"enc{i}", ComplexConvSpec(c_in, ch[i], cfg.kernel, cfg.strides[i], pad), False
        c_in = ch[i]
    for j in range(L):
        skip = ch[L - 1 - j] if j > 0 else 0
        yield f"dec{j}", ComplexConvSpec(c_in + skip, ch[L + j], cfg.kernel, cfg.strides[L + j], pad), True
        c_in = ch[L + j]
    if c_in != 1:
        yield "proj", ComplexConvSpec(c_in, 1, (1, 1), (1, 1), (0, 0)), False


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for name, spec, transposed in _conv_layers(cfg):
        kh, kw = spec.kernel
        w = (spec.in_channels, spec.out_channels, kh, kw) if transposed else (
            spec.out_channels, spec.in_channels, kh, kw)
        for part in ("re", "im"):
            shapes[f"{name}.w_{part}"] = w
            shapes[f"{name}.b_{part}"] = (spec.out_channels, 1, 1)
        if _has_norm(name, cfg):
            for part in ("re", "im"):
                shapes[f"{name}.norm.scale_{part}"] = (spec.out_channels, 1, 1)
                shapes[f"{name}.norm.offset_{part}"] = (spec.out_channels, 1, 1)
    D, H = cfg.model_dim, cfg.feedforward_dim
    stacks = ("tstm_r", "tstm_i") if cfg.tstm_kind == "complex" else ("tstm_r",)
    for stack in stacks:
        for b in range(cfg.n_tstb):
            for stage in ("freq", "time"):
                p = f"{stack}.{b}.{stage}"
                for m in ("q", "k", "v", "o"):
                    shapes[f"{p}.w{m}"] = (D, D)
                    shapes[f"{p}.b{m}"] = (D,)
                shapes[f"{p}.ff1.w"] = (D, H)
                shapes[f"{p}.ff1.b"] = (H,)
                shapes[f"{p}.ff2.w"] = (H, D)
                shapes[f"{p}.ff2.b"] = (D,)
                for ln in ("ln1", "ln2"):
                    shapes[f"{p}.{ln}.g"] = (D,)
                    shapes[f"{p}.{ln}.b"] = (D,)
    return shapes


def _has_norm(layer: str, cfg: ModelConfig) -> bool:
    if layer == "proj":
        return False
    if layer == f"dec{cfg.depth - 1}" and cfg.channels[-1] == 1:
        return False  # this layer emits the mask
    return True


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ModelFormatError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, shape in expected.items():
            t = self.params[name]
            if tuple(t.shape) != tuple(shape):
                raise ModelFormatError(f"tensor {name!r} has shape {t.shape}, config implies {shape}")
            if not np.all(np.isfinite(t.data)):
                raise ModelFormatError(f"tensor {name!r} has non-finite entries")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                           for k, v in self.params.items()})


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> DenoiserModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("w_"):
            # complex weights: split the variance between real and imaginary parts
            fan_in = shape[1] * shape[2] * shape[3] if not name.startswith("dec") else shape[0] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(1.0 / (2 * fan_in)), shape)
        elif leaf in ("wq", "wk", "wv", "wo", "w"):
            arr = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
        elif leaf in ("g",) or leaf.startswith("scale_"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return DenoiserModel(cfg, params)


def zero_model(cfg: ModelConfig, dtype=np.float32) -> DenoiserModel:
    return DenoiserModel(cfg, {k: Tensor(np.zeros(s, dtype=dtype), requires_grad=True)
                               for k, s in parameter_shapes(cfg).items()})


# ---------------------------------------------------------------- complex layers


def complex_conv2d(x: ComplexTensor, w_re: Tensor, w_im: Tensor, spec: ComplexConvSpec) -> ComplexTensor:
    """(Xr*Wr - Xi*Wi) + j(Xr*Wi + Xi*Wr)."""
    conv = lambda a, b: ad.conv2d(a, b, spec.stride, spec.padding)
    return ComplexTensor(conv(x.re, w_re) - conv(x.im, w_im), conv(x.re, w_im) + conv(x.im, w_re))


def complex_transposed_conv2d(x: ComplexTensor, w_re: Tensor, w_im: Tensor, spec: ComplexConvSpec,
                              output_size=None) -> ComplexTensor:
    conv = lambda a, b: ad.conv_transpose2d(a, b, spec.stride, spec.padding, output_size)
    return ComplexTensor(conv(x.re, w_re) - conv(x.im, w_im), conv(x.re, w_im) + conv(x.im, w_re))


def complex_activation(x: ComplexTensor, slope: float = 0.01) -> ComplexTensor:
    return ComplexTensor(ad.leaky_relu(x.re, slope), ad.leaky_relu(x.im, slope))


def complex_norm(x: ComplexTensor, params: dict, prefix: str, eps: float = 1e-5) -> ComplexTensor:
    """Per-sample, per-channel normalization over (freq, time), separately for re and im."""
    def part(t, p):
        return ad.layer_norm(t, axis=(2, 3), eps=eps) * params[f"{prefix}.scale_{p}"] + params[f"{prefix}.offset_{p}"]
    return ComplexTensor(part(x.re, "re"), part(x.im, "im"))


# ---------------------------------------------------------------- transformer


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def encoder_layer(x: Tensor, params: dict, prefix: str, heads: int, slope: float = 0.01) -> Tensor:
    """Post-norm transformer encoder layer over sequences x [N, L, D]."""
    N, L, D = x.shape
    d = D // heads

    def split(t):
        return t.reshape(N, L, heads, d).transpose(0, 2, 1, 3)

    q = split(_linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = split(_linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    v = split(_linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    att = ad.softmax(ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(d)), axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(N, L, D)
    y = x + _linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    y = ad.layer_norm(y, -1) * params[f"{prefix}.ln1.g"] + params[f"{prefix}.ln1.b"]
    h = ad.leaky_relu(_linear(y, params[f"{prefix}.ff1.w"], params[f"{prefix}.ff1.b"]), slope)
    z = y + _linear(h, params[f"{prefix}.ff2.w"], params[f"{prefix}.ff2.b"])
    return ad.layer_norm(z, -1) * params[f"{prefix}.ln2.g"] + params[f"{prefix}.ln2.b"]


def tstb_forward(x: Tensor, params: dict, prefix: str, spec: TstbSpec) -> Tensor:
    """Two-stage block on x [B, C, F, T]: attention along frequency per frame, then along time per bin."""
    B, C, F, T = x.shape
    if C != spec.model_dim:
        raise ValueError(f"TSTB expects {spec.model_dim} channels, got {C}")
    h = x.transpose(0, 3, 2, 1).reshape(B * T, F, C)
    h = encoder_layer(h, params, f"{prefix}.freq", spec.head_count)
    h = h.reshape(B, T, F, C).transpose(0, 2, 1, 3).reshape(B * F, T, C)
    h = encoder_layer(h, params, f"{prefix}.time", spec.head_count)
    return h.reshape(B, F, T, C).transpose(0, 3, 1, 2)


def tstm_forward(x: Tensor, params: dict, stack: str, cfg: ModelConfig) -> Tensor:
    for b in range(cfg.n_tstb):
        x = tstb_forward(x, params, f"{stack}.{b}", cfg.tstb)
    return x


def ctstm_forward(x: ComplexTensor, tstm_r: Callable[[Tensor], Tensor],
                  tstm_i: Callable[[Tensor], Tensor]) -> ComplexTensor:
    """(TSTM_r(Xr) - TSTM_i(Xi)) + j(TSTM_i(Xr) + TSTM_r(Xi)).

    Real and imaginary inputs go through each stack as one batch.
    """
    B = x.re.shape[0]
    both = ad.concat([x.re, x.im], axis=0)
    r, i = tstm_r(both), tstm_i(both)
    f_rr, f_ir = r[:B], r[B:]
    f_ri, f_ii = i[:B], i[B:]
    return ComplexTensor(f_rr - f_ii, f_ri + f_ir)


def _bottleneck(x: ComplexTensor, model: DenoiserModel) -> ComplexTensor:
    cfg = model.config
    if cfg.n_tstb == 0:
        return x
    tstm_r = lambda t: tstm_forward(t, model.params, "tstm_r", cfg)
    if cfg.tstm_kind == "real":
        return ComplexTensor(tstm_r(x.re), tstm_r(x.im))
    tstm_i = lambda t: tstm_forward(t, model.params, "tstm_i", cfg)
    return ctstm_forward(x, tstm_r, tstm_i)


# ---------------------------------------------------------------- mask and model


def apply_mask(inp: ComplexTensor, out: ComplexTensor, mode: str = BOUNDED, eps: float = ad.EPS) -> ComplexTensor:
    if inp.shape != out.shape:
        raise ValueError(f"mask shape {out.shape} does not match input {inp.shape}")
    if mode == BOUNDED:
        mag = ad.sqrt(ad.square(out.re) + ad.square(out.im), eps * eps)
        gain = ad.tanh(mag) / mag
        m_re, m_im = out.re * gain, out.im * gain
    elif mode == UNBOUNDED:
        m_re, m_im = out.re, out.im
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return ComplexTensor(m_re * inp.re - m_im * inp.im, m_re * inp.im + m_im * inp.re)


def forward(model: DenoiserModel, spec: ComplexTensor) -> ComplexTensor:
    """Masked spectrogram for a batch of spectrograms [B, F, T] (re/im)."""
    cfg, p = model.config, model.params
    B, F, T = spec.shape
    df, dt = cfg.downsampling()
    if F < df or T < dt:
        raise ValueError(f"input {F}x{T} too small for downsampling {df}x{dt}")
    x = ComplexTensor(spec.re.reshape(B, 1, F, T), spec.im.reshape(B, 1, F, T))
    layers = {name: (s, tr) for name, s, tr in _conv_layers(cfg)}
    L = cfg.depth

    skips, shapes = [], []
    for i in range(L):
        s, _ = layers[f"enc{i}"]
        shapes.append(x.shape[2:])
        x = complex_conv2d(x, p[f"enc{i}.w_re"], p[f"enc{i}.w_im"], s)
        x = _bias(x, p, f"enc{i}")
        x = complex_activation(complex_norm(x, p, f"enc{i}.norm"), cfg.leaky_slope)
        skips.append(x)

    x = _bottleneck(x, model)

    for j in range(L):
        name = f"dec{j}"
        s, _ = layers[name]
        if j > 0:
            sk = skips[L - 1 - j]
            x = ComplexTensor(ad.concat([x.re, sk.re], axis=1), ad.concat([x.im, sk.im], axis=1))
        x = complex_transposed_conv2d(x, p[f"{name}.w_re"], p[f"{name}.w_im"], s, shapes[L - 1 - j])
        x = _bias(x, p, name)
        if _has_norm(name, cfg):
            x = complex_activation(complex_norm(x, p, f"{name}.norm"), cfg.leaky_slope)

    if "proj" in layers:
        x = _bias(complex_conv2d(x, p["proj.w_re"], p["proj.w_im"], layers["proj"][0]), p, "proj")

    o = ComplexTensor(x.re.reshape(B, F, T), x.im.reshape(B, F, T))
    return apply_mask(spec, o, cfg.mask_mode)


def _bias(x: ComplexTensor, p: dict, name: str) -> ComplexTensor:
    return ComplexTensor(x.re + p[f"{name}.b_re"], x.im + p[f"{name}.b_im"])


def enhance(model: DenoiserModel, x: Tensor, stft_cfg: StftConfig) -> Tensor:
    """Waveform batch [B, N] -> denoised waveform batch [B, N] (differentiable)."""
    n = x.shape[-1]
    S = stft_op(x, stft_cfg)
    out = forward(model, ComplexTensor(S[:, 0], S[:, 1]))
    stacked = ad.concat([out.re.reshape(out.shape[0], 1, *out.shape[1:]),
                         out.im.reshape(out.shape[0], 1, *out.shape[1:])], axis=1)
    return istft_op(stacked, stft_cfg, n)


def denoise_waveform(model: DenoiserModel, x: Waveform, stft_cfg: StftConfig) -> Waveform:
    if x.sample_rate_hz != stft_cfg.sample_rate_hz:
        raise ValueError(f"waveform at {x.sample_rate_hz} Hz, STFT configured for {stft_cfg.sample_rate_hz} Hz")
    with ad.no_grad():
        y = enhance(model, Tensor(x.samples[None, :].astype(model.dtype)), stft_cfg)
    return Waveform(y.data[0], x.sample_rate_hz)


# ---------------------------------------------------------------- serialization


def serialize_model(model: DenoiserModel) -> bytes:
    buf = io.BytesIO()
    text = model.config.to_text().encode("utf-8")
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_FORMAT_VERSION, len(text)))
    buf.write(text)
    names = list(parameter_shapes(model.config))
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_model(model: DenoiserModel, path) -> None:
    Path(path).write_bytes(serialize_model(model))


def _read(raw: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(raw):
        raise ModelFormatError(f"truncated model file while reading {what}")
    return raw[pos:pos + n]


def deserialize_model(raw: bytes) -> DenoiserModel:
    if _read(raw, 0, 4, "magic") != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, tlen = struct.unpack("<II", _read(raw, 4, 8, "header"))
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    pos = 12
    cfg = ModelConfig.from_text(_read(raw, pos, tlen, "config").decode("utf-8"))
    pos += tlen
    expected = parameter_shapes(cfg)
    (count,) = struct.unpack("<I", _read(raw, pos, 4, "tensor count"))
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read(raw, pos, 4, "name length"))
        pos += 4
        name = _read(raw, pos, nlen, "name").decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack("<I", _read(raw, pos, 4, f"rank of {name}"))
        pos += 4
        shape = struct.unpack(f"<{rank}I", _read(raw, pos, 4 * rank, f"shape of {name}"))
        pos += 4 * rank
        if name not in expected:
            raise ModelFormatError(f"unexpected tensor {name!r}")
        if tuple(shape) != tuple(expected[name]):
            raise ModelFormatError(f"tensor {name!r} has shape {shape}, config implies {expected[name]}")
        nbytes = 4 * int(np.prod(shape))
        arr = np.frombuffer(_read(raw, pos, nbytes, f"data of {name}"), dtype="<f4").reshape(shape)
        pos += nbytes
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    if pos != len(raw):
        raise ModelFormatError("trailing bytes after last tensor")
    return DenoiserModel(cfg, params)


def load_model(path) -> DenoiserModel:
    return deserialize_model(Path(path).read_bytes())
