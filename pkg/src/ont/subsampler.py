"""Training-pair generation from a single noisy waveform.

The waveform is cut into non-overlapping windows of ``k`` samples. In each
window two adjacent samples are chosen; one goes to the input signal s1 and
the other to the target signal s2. The choices are recorded in an index map
so the same selection can be replayed on the network's full-length output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import Waveform

RANDOM = "random"
FIXED = "fixed"


@dataclass(frozen=True)
class SubsampleConfig:
    k: int = 2
    mode: str = RANDOM
    seed: int = 0

    def __post_init__(self):
        if int(self.k) < 2:
            raise ValueError(f"sampling interval k must be >= 2, got {self.k}")
        if self.mode not in (RANDOM, FIXED):
            raise ValueError(f"mode must be 'random' or 'fixed', got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class SubsampleIndexMap:
    k: int
    offsets: np.ndarray  # [n_windows, 2] int: (a_w, b_w)

    def __post_init__(self):
        off = np.array(self.offsets, dtype=np.int64).reshape(-1, 2)
        if off.shape[0] < 1:
            raise ValueError("index map needs at least one window")
        if off.min() < 0 or off.max() > self.k - 1:
            raise ValueError("offsets must lie in [0, k-1]")
        if np.any(np.abs(off[:, 0] - off[:, 1]) != 1):
            raise ValueError("offset pairs must be adjacent")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def n_windows(self) -> int:
        return self.offsets.shape[0]

    def source_indices(self) -> tuple[np.ndarray, np.ndarray]:
        base = np.arange(self.n_windows) * self.k
        return base + self.offsets[:, 0], base + self.offsets[:, 1]

    def dump(self) -> str:
        return "".join(f"{w},{a},{b}\n" for w, (a, b) in enumerate(self.offsets.tolist()))

    def __eq__(self, other):
        return (isinstance(other, SubsampleIndexMap) and self.k == other.k
                and np.array_equal(self.offsets, other.offsets))


def plan(length: int, config: SubsampleConfig, rng: np.random.Generator | None = None) -> SubsampleIndexMap:
    """Choose the adjacent pair for every window; trailing ``length % k`` samples are dropped."""
    k = config.k
    if length < k:
        raise ValueError(f"signal length {length} shorter than sampling interval {k}")
    n = length // k
    if config.mode == FIXED:
        offsets = np.tile([0, 1], (n, 1))
    else:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        left = rng.integers(0, k - 1, size=n)
        swap = rng.integers(0, 2, size=n).astype(bool)
        a = np.where(swap, left + 1, left)
        b = np.where(swap, left, left + 1)
        offsets = np.stack([a, b], axis=1)
    return SubsampleIndexMap(k, offsets)


def apply_indices(index_map: SubsampleIndexMap, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`apply`; works along the last axis (batched signals allowed)."""
    need = index_map.n_windows * index_map.k
    if x.shape[-1] < need:
        raise ValueError(f"signal length {x.shape[-1]} below map coverage {need}")
    i1, i2 = index_map.source_indices()
    return x[..., i1], x[..., i2]


def apply(index_map: SubsampleIndexMap, w: Waveform) -> tuple[Waveform, Waveform]:
    s1, s2 = apply_indices(index_map, w.samples)
    return Waveform(s1, w.sample_rate_hz), Waveform(s2, w.sample_rate_hz)


def pair(x: Waveform, config: SubsampleConfig,
         rng: np.random.Generator | None = None) -> tuple[Waveform, Waveform, SubsampleIndexMap]:
    m = plan(len(x), config, rng)
    s1, s2 = apply(m, x)
    return s1, s2, m
