"""Reference rotary-position rotation, independent of the producing tool.

Same contract as the core implementation: rotation pairs are split across
(t, y, x) by largest-remainder apportionment of the configured ratio, and
pair k of an axis block with n pairs rotates by coord * base**(-k / n).
Implemented via complex multiplication rather than explicit cos/sin wiring
so the two code paths share no structure.
"""

from __future__ import annotations

import numpy as np


def split_pairs(total_pairs: int, weights) -> tuple[int, ...]:
    """Largest-remainder apportionment; ties resolved toward earlier axes."""
    scale = sum(weights)
    exact = [total_pairs * w / scale for w in weights]
    floors = [int(q) for q in exact]
    order = sorted(range(len(weights)),
                   key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[: total_pairs - sum(floors)]:
        floors[i] += 1
    return tuple(floors)


def _angles(position, head_dim: int, split, base: float) -> np.ndarray:
    counts = split_pairs(head_dim // 2, tuple(split))
    parts = []
    for coord, n in zip(position, counts):
        k = np.arange(n, dtype=np.float64)
        parts.append(float(coord) * base ** (-k / max(n, 1)))
    return np.concatenate(parts)


def rope_reference(v, position, config) -> np.ndarray:
    """Rotate consecutive (even, odd) pairs of v by the position's angles.

    ``position`` is (t, y, x); ``config`` is a mapping with head_dim, split,
    and base, matching the fixture file's config block.
    """
    head_dim = int(config["head_dim"])
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (head_dim,):
        raise ValueError(f"vector shape {v.shape} != head_dim {head_dim}")
    angles = _angles(position, head_dim, config["split"],
                     float(config["base"]))
    z = (v[0::2] + 1j * v[1::2]) * np.exp(1j * angles)
    out = np.empty(head_dim, dtype=np.float64)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out
