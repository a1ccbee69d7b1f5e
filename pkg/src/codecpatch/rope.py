"""Rotary position encoding over (t, y, x) with a T:H:W frequency split.

Rotation pairs are apportioned to the three axes by largest-remainder
rounding of the configured ratio (default 4:6:6). Angles follow the standard
rotary construction: within an axis block of dimension d, pair k rotates by
coord * base^(-2k/d). Attention scores between rotated vectors then depend
only on relative offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_HEAD_DIM = 64
DEFAULT_SPLIT = (4, 6, 6)  # T : H : W
DEFAULT_BASE = 10000.0

AXES = ("t", "y", "x")


def apportion_pairs(total_pairs: int, split: tuple[int, int, int]) -> tuple[int, int, int]:
    """Largest-remainder split of rotation pairs; ties go to the earlier axis."""
    weight = sum(split)
    quotas = [total_pairs * s / weight for s in split]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    leftover = total_pairs - sum(counts)
    for axis in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        counts[axis] += 1
    return tuple(counts)


@dataclass(frozen=True)
class PositionTriple:
    """Token position: temporal coordinate plus patch row/column.

    The temporal coordinate is a frame index (codec), a chunk index (chunk),
    or 0 (image). ``mode`` optionally records provenance.
    """

    t: int
    y: int
    x: int
    mode: str | None = None


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int = DEFAULT_HEAD_DIM
    split: tuple = DEFAULT_SPLIT
    base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even")
        if len(self.split) != 3 or min(self.split) <= 0:
            raise ConfigError(f"split {self.split} must be three positive weights")

    @property
    def pair_counts(self) -> tuple[int, int, int]:
        return apportion_pairs(self.head_dim // 2, tuple(self.split))

    def axis_frequencies(self) -> list[np.ndarray]:
        """Per-axis rotation frequencies, one per pair."""
        freqs = []
        for pairs in self.pair_counts:
            d_axis = 2 * pairs
            k = np.arange(pairs, dtype=np.float64)
            freqs.append(self.base ** (-2.0 * k / d_axis))
        return freqs


def _pair_angles(pos: PositionTriple, cfg: RopeConfig) -> np.ndarray:
    coords = (pos.t, pos.y, pos.x)
    freqs = cfg.axis_frequencies()
    return np.concatenate([c * f for c, f in zip(coords, freqs)])


def rotate(v: np.ndarray, pos: PositionTriple, cfg: RopeConfig) -> np.ndarray:
    """Rotate consecutive pairs (2j, 2j+1) of v by the position's angles."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cfg.head_dim,):
        raise ConfigError(f"vector shape {v.shape} != head_dim {cfg.head_dim}")
    angles = _pair_angles(pos, cfg)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = v[0::2], v[1::2]
    out = np.empty_like(v)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def position_for_mode(pos: PositionTriple, mode: str) -> PositionTriple:
    """Apply mode semantics to the temporal coordinate (image drops t)."""
    if mode == "image":
        return PositionTriple(0, pos.y, pos.x, mode=mode)
    return PositionTriple(pos.t, pos.y, pos.x, mode=mode)


def relative_offset(mode: str, a: PositionTriple, b: PositionTriple
                    ) -> tuple[int, int, int]:
    """Relative (dt, dx, dy) between two positions under a mode's semantics.

    codec subtracts frame indices, chunk subtracts chunk indices, image
    forces the temporal term to zero.
    """
    if mode not in ("codec", "chunk", "image"):
        raise ConfigError(f"unknown mode {mode!r}")
    for p in (a, b):
        if p.mode is not None and p.mode != mode:
            raise ConfigError(
                f"position from {p.mode!r} layout used with {mode!r} offsets")
    dt = 0 if mode == "image" else a.t - b.t
    return (dt, a.x - b.x, a.y - b.y)


def attention_score(q: np.ndarray, k: np.ndarray, pos_q: PositionTriple,
                    pos_k: PositionTriple, cfg: RopeConfig,
                    mode: str | None = None) -> float:
    """Inner product of the rotated query and key."""
    if mode is not None:
        pos_q = position_for_mode(pos_q, mode)
        pos_k = position_for_mode(pos_k, mode)
    return float(rotate(q, pos_q, cfg) @ rotate(k, pos_k, cfg))
