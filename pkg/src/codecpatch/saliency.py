"""Patch-level saliency from motion/residual signals, and mask selection.

Motion magnitude and residual energy are summed over each patch, z-normalized
across the frame (or jointly across the clip for global budgets), and fused
with a configurable weight. Selection is top-k with fully deterministic
lexicographic tie-breaking so token layouts are reproducible byte-for-byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError, InfeasibleBudgetError
from .ingest import GopPartition
from .motion import MotionField, ResidualMap, broadcast_motion, compensate_camera_motion

DEFAULT_ALPHA = 0.5
SIGMA_EPS = 1e-8


@dataclass(frozen=True)
class FusionConfig:
    """How motion and residual components combine into one score."""

    alpha: float = DEFAULT_ALPHA  # weight of the motion term
    camera_compensation: bool = False
    eps: float = SIGMA_EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fusion alpha {self.alpha} outside [0, 1]")


@dataclass(frozen=True)
class PatchSaliencyGrid:
    """Per-patch scores for one P-frame, with raw components kept for audit."""

    scores: np.ndarray        # (P0,) float64, >= 0, frame-normalized
    motion_sum: np.ndarray    # (P0,) float64 raw component
    residual_sum: np.ndarray  # (P0,) float64 raw component
    frame_index: int
    grid_h: int
    grid_w: int
    fusion: FusionConfig

    def __post_init__(self):
        p0 = self.grid_h * self.grid_w
        for arr in (self.scores, self.motion_sum, self.residual_sum):
            if arr.shape != (p0,):
                raise GeometryError(f"component length {arr.shape} != P0 {p0}")
            arr.setflags(write=False)


@dataclass(frozen=True)
class PatchMask:
    """Selected patch coordinates for one frame, sorted by (y, x)."""

    selected: tuple  # of (y, x) tuples
    frame_index: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        for y, x in self.selected:
            if not (0 <= y < self.grid_h and 0 <= x < self.grid_w):
                raise GeometryError(f"patch ({y}, {x}) outside grid")

    def __len__(self) -> int:
        return len(self.selected)


def _patch_sums(dense: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = dense.shape
    if h % patch_size or w % patch_size:
        raise GeometryError(
            f"map {h}x{w} is not a multiple of patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    return dense.reshape(gh, patch_size, gw, patch_size).sum(axis=(1, 3)).reshape(-1)


def _znorm(values: np.ndarray, eps: float) -> np.ndarray:
    std = float(values.std())
    return (values - values.mean()) / max(std, eps)


def aggregate_patch_saliency(motion_map: np.ndarray, residual: ResidualMap,
                             patch_size: int,
                             fusion: FusionConfig = FusionConfig(),
                             ) -> PatchSaliencyGrid:
    """Fuse a dense (H, W, 2) motion map and a residual map into patch scores.

    Per patch: sum of per-pixel vector magnitudes and sum of residual energy,
    each z-normalized across the frame, fused as alpha*motion + (1-alpha)*
    residual, then shifted so the frame minimum is zero.
    """
    if motion_map.shape[:2] != residual.energy.shape:
        raise GeometryError(
            f"motion map {motion_map.shape[:2]} vs residual "
            f"{residual.energy.shape}")
    h, w = residual.energy.shape
    magnitudes = np.linalg.norm(motion_map.astype(np.float64), axis=2)
    motion_sum = _patch_sums(magnitudes, patch_size)
    residual_sum = _patch_sums(residual.energy.astype(np.float64), patch_size)
    fused = (fusion.alpha * _znorm(motion_sum, fusion.eps)
             + (1.0 - fusion.alpha) * _znorm(residual_sum, fusion.eps))
    fused -= fused.min()
    return PatchSaliencyGrid(scores=fused, motion_sum=motion_sum,
                             residual_sum=residual_sum,
                             frame_index=residual.frame_index,
                             grid_h=h // patch_size, grid_w=w // patch_size,
                             fusion=fusion)


def frame_saliency(field: MotionField, residual: ResidualMap, patch_size: int,
                   fusion: FusionConfig = FusionConfig()) -> PatchSaliencyGrid:
    """Broadcast a block field to pixels, compensate if configured, aggregate."""
    dense = broadcast_motion(field)
    if fusion.camera_compensation:
        dense = compensate_camera_motion(dense, field)
    return aggregate_patch_saliency(dense, residual, patch_size, fusion)


def _coords(order: np.ndarray, grid_w: int) -> list[tuple[int, int]]:
    return [(int(i) // grid_w, int(i) % grid_w) for i in order]


def select_mask_fixed_ratio(grid: PatchSaliencyGrid, r: float) -> PatchMask:
    """Keep the floor(r * P0) highest-scoring patches of one frame."""
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"ratio {r} outside (0, 1]")
    p0 = grid.grid_h * grid.grid_w
    k = int(math.floor(r * p0 + 1e-9))
    if k < 1:
        raise ConfigError(f"ratio {r} keeps zero patches of {p0}")
    ys, xs = np.divmod(np.arange(p0), grid.grid_w)
    order = np.lexsort((xs, ys, -grid.scores))
    selected = sorted(_coords(order[:k], grid.grid_w))
    return PatchMask(selected=tuple(selected), frame_index=grid.frame_index,
                     grid_h=grid.grid_h, grid_w=grid.grid_w)


def _joint_fused(grids: list[PatchSaliencyGrid]) -> np.ndarray:
    """One z-normalization over all P-frame patches, fused per config."""
    fusion = grids[0].fusion
    motion = np.concatenate([g.motion_sum for g in grids])
    residual = np.concatenate([g.residual_sum for g in grids])
    return (fusion.alpha * _znorm(motion, fusion.eps)
            + (1.0 - fusion.alpha) * _znorm(residual, fusion.eps))


def _global_topk(grids: list[PatchSaliencyGrid], k: int) -> list[PatchMask]:
    """Top-k over the union of all grids, ties by smallest (t, y, x)."""
    gh, gw = grids[0].grid_h, grids[0].grid_w
    p0 = gh * gw
    for g in grids:
        if (g.grid_h, g.grid_w) != (gh, gw):
            raise GeometryError("saliency grids differ in geometry")
        if g.fusion != grids[0].fusion:
            raise ConfigError("saliency grids were fused with different configs")
    fused = _joint_fused(grids)
    ts = np.repeat([g.frame_index for g in grids], p0)
    ys, xs = np.divmod(np.tile(np.arange(p0), len(grids)), gw)
    order = np.lexsort((xs, ys, ts, -fused))[:k]
    per_frame: dict[int, list[tuple[int, int]]] = {g.frame_index: [] for g in grids}
    for i in order:
        per_frame[int(ts[i])].append((int(ys[i]), int(xs[i])))
    return [PatchMask(selected=tuple(sorted(per_frame[g.frame_index])),
                      frame_index=g.frame_index, grid_h=gh, grid_w=gw)
            for g in grids]


def allocate_clip_budget(grids: list[PatchSaliencyGrid], budget: int,
                         i_frames: int, p0: int) -> list[PatchMask]:
    """Distribute a clip-level token budget over P-frames by global top-k.

    I-frames consume i_frames * p0 tokens; the remainder goes to the globally
    most salient P-frame patches.
    """
    if budget < i_frames * p0:
        raise InfeasibleBudgetError(
            f"budget {budget} cannot cover {i_frames} I-frames of {p0} patches")
    k = budget - i_frames * p0
    available = sum(g.grid_h * g.grid_w for g in grids)
    if k > available:
        raise InfeasibleBudgetError(
            f"budget {budget} exceeds {i_frames * p0} I-frame tokens plus "
            f"{available} available P-frame patches")
    if not grids:
        return []
    return _global_topk(grids, k)


def allocate_gop_budget(grids: list[PatchSaliencyGrid], gops: GopPartition,
                        budget: int, i_frames: int, p0: int) -> list[PatchMask]:
    """Budget enforced per GOP: P-token shares proportional to P-frame counts,
    remainders to earlier GOPs, then top-k within each GOP."""
    if budget < i_frames * p0:
        raise InfeasibleBudgetError(
            f"budget {budget} cannot cover {i_frames} I-frames of {p0} patches")
    k_total = budget - i_frames * p0
    by_frame = {g.frame_index: g for g in grids}
    gop_groups = []
    for start, length in gops.segments:
        frames = [start + tau for tau in range(1, length)]
        gop_groups.append([by_frame[t] for t in frames if t in by_frame])
    total_p = sum(len(group) for group in gop_groups)
    if k_total > total_p * p0:
        raise InfeasibleBudgetError(
            f"budget {budget} exceeds available patches")
    shares = [0] * len(gop_groups)
    if total_p:
        base = [k_total * len(group) // total_p for group in gop_groups]
        leftover = k_total - sum(base)
        for i in range(len(gop_groups)):
            shares[i] = base[i]
            room = len(gop_groups[i]) * p0 - base[i]
            take = min(leftover, room) if leftover > 0 else 0
            shares[i] += take
            leftover -= take
    masks: list[PatchMask] = []
    for group, share in zip(gop_groups, shares):
        if group:
            masks.extend(_global_topk(group, share))
    return masks


# fixed 8-color ramp used for heatmap pixmaps (dark-to-bright)
HEAT_RAMP = np.array(
    [(68, 1, 84), (70, 50, 126), (54, 92, 141), (39, 127, 142),
     (31, 161, 135), (74, 194, 109), (159, 218, 58), (253, 231, 37)],
    dtype=np.uint8,
)


def heatmap_image(grid: PatchSaliencyGrid, patch_size: int) -> np.ndarray:
    """Render patch scores as an (H, W, 3) pixmap using the fixed 8-color ramp."""
    scores = grid.scores.reshape(grid.grid_h, grid.grid_w)
    top = scores.max()
    norm = scores / top if top > 0 else np.zeros_like(scores)
    bins = np.minimum((norm * len(HEAT_RAMP)).astype(np.intp), len(HEAT_RAMP) - 1)
    small = HEAT_RAMP[bins]
    return np.repeat(np.repeat(small, patch_size, axis=0), patch_size, axis=1)
