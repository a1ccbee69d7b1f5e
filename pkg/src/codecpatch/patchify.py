"""Sparse token layout assembly for the three patchification modes.

A layout is an ordered token sequence; each token carries its decoded RGB
patch payload plus its (t_virtual, y, x) position on the virtual temporal
grid. Ordering is fully deterministic: GOP-major, frame-major, I-frame
patches row-major, P-frame patches in mask (y, x) order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, GeometryError, InvariantError
from .ingest import GopPartition, RawClip
from .saliency import PatchMask

DEFAULT_GRID_T = 64

FRAME_TYPE_I = 0
FRAME_TYPE_P = 1
FRAME_TYPE_SAMPLED = 2
FRAME_TYPE_STATIC = 3
FRAME_TYPE_NAMES = {FRAME_TYPE_I: "I", FRAME_TYPE_P: "P",
                    FRAME_TYPE_SAMPLED: "sampled", FRAME_TYPE_STATIC: "static"}

MODES = ("codec", "chunk", "image")


@dataclass(frozen=True)
class TokenLayout:
    """Sparse token sequence with visible-index positions."""

    mode: str
    payloads: np.ndarray     # (N, p, p, 3) uint8
    positions: np.ndarray    # (N, 3) uint16: t_virtual, y, x
    frame_types: np.ndarray  # (N,) uint8
    source_ts: np.ndarray    # (N,) uint16 original frame index
    grid_t: int
    clip_ref: str
    patch_size: int
    budget_meta: dict
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown layout mode {self.mode!r}")
        n = self.payloads.shape[0]
        if self.positions.shape != (n, 3) or self.frame_types.shape != (n,) \
                or self.source_ts.shape != (n,):
            raise InvariantError("token arrays disagree on length")
        if n and len(np.unique(self.positions, axis=0)) != n:
            raise InvariantError("duplicate (t_virtual, y, x) positions in layout")
        for arr in (self.payloads, self.positions, self.frame_types,
                    self.source_ts):
            arr.setflags(write=False)

    @property
    def token_count(self) -> int:
        return self.payloads.shape[0]


def virtual_time(source_t: int, num_frames: int, grid_t: int) -> int:
    """Map a source frame index onto the virtual temporal grid (floor scaling)."""
    return source_t * grid_t // num_frames


def frame_patches(frame: np.ndarray, patch_size: int) -> np.ndarray:
    """(grid_h, grid_w, p, p, 3) view of a frame's non-overlapping patches."""
    h, w = frame.shape[:2]
    gh, gw = h // patch_size, w // patch_size
    return frame.reshape(gh, patch_size, gw, patch_size, 3).transpose(0, 2, 1, 3, 4)


def _check_grid(clip: RawClip, grid_t: int, mode: str) -> None:
    if clip.num_frames > grid_t:
        raise ConfigError(
            f"{mode} mode needs num_frames <= grid_t to keep positions unique "
            f"({clip.num_frames} > {grid_t})")


def patchify_codec(clip: RawClip, gops: GopPartition,
                   masks: list[PatchMask],
                   grid_t: int = DEFAULT_GRID_T,
                   budget_meta: dict | None = None) -> TokenLayout:
    """Assemble the codec-mode layout: full I-frames plus masked P-frames."""
    _check_grid(clip, grid_t, "codec")
    p = clip.patch_size
    gh, gw = clip.grid_h, clip.grid_w
    by_frame = {}
    for mask in masks:
        if (mask.grid_h, mask.grid_w) != (gh, gw):
            raise GeometryError(
                f"mask grid {mask.grid_h}x{mask.grid_w} does not match clip "
                f"grid {gh}x{gw}")
        by_frame[mask.frame_index] = mask
    t_total = clip.num_frames

    payloads, positions, ftypes, source = [], [], [], []

    def emit(t: int, coords, ftype: int):
        patches = frame_patches(clip.frames[t], p)
        tv = virtual_time(t, t_total, grid_t)
        for y, x in coords:
            payloads.append(patches[y, x])
            positions.append((tv, y, x))
            ftypes.append(ftype)
            source.append(t)

    full_grid = [(y, x) for y in range(gh) for x in range(gw)]
    for start, length in gops.segments:
        emit(start, full_grid, FRAME_TYPE_I)
        for tau in range(1, length):
            t = start + tau
            if t not in by_frame:
                raise InvariantError(f"missing mask for P-frame {t}")
            emit(t, by_frame[t].selected, FRAME_TYPE_P)

    meta = dict(budget_meta or {})
    meta.setdefault("P0", clip.patches_per_frame)
    meta.setdefault("i_frames", len(gops.segments))
    meta.setdefault("gop_length", gops.gop_length)
    meta.setdefault("num_frames", t_total)
    return _build("codec", payloads, positions, ftypes, source, grid_t,
                  clip.source_id, p, meta)


def patchify_chunk(clip: RawClip, chunks: int, seed: int,
                   grid_t: int = DEFAULT_GRID_T) -> TokenLayout:
    """Sample one frame per temporal chunk; the chunk index is the temporal
    coordinate."""
    t_total = clip.num_frames
    if chunks < 1:
        raise ConfigError("chunk count must be >= 1")
    if chunks > t_total:
        raise ConfigError(f"chunk count {chunks} exceeds {t_total} frames")
    if chunks > grid_t:
        raise ConfigError(f"chunk count {chunks} exceeds virtual grid {grid_t}")
    spacing = t_total // chunks
    rng = np.random.default_rng(seed)
    sampled = [int(rng.integers((c - 1) * spacing, c * spacing))
               for c in range(1, chunks + 1)]

    p = clip.patch_size
    gh, gw = clip.grid_h, clip.grid_w
    payloads, positions, ftypes, source = [], [], [], []
    for c, t in enumerate(sampled):
        patches = frame_patches(clip.frames[t], p)
        for y in range(gh):
            for x in range(gw):
                payloads.append(patches[y, x])
                positions.append((c, y, x))
                ftypes.append(FRAME_TYPE_SAMPLED)
                source.append(t)
    meta = {"P0": clip.patches_per_frame, "C": chunks, "num_frames": t_total}
    return _build("chunk", payloads, positions, ftypes, source, grid_t,
                  clip.source_id, p, meta, seeds={"chunk_seed": seed})


def patchify_image(clip: RawClip, grid_t: int = DEFAULT_GRID_T) -> TokenLayout:
    """Row-major spatial patchification of a single-frame clip."""
    if clip.num_frames != 1:
        raise ConfigError(
            f"image mode requires a single frame, got {clip.num_frames}")
    p = clip.patch_size
    gh, gw = clip.grid_h, clip.grid_w
    patches = frame_patches(clip.frames[0], p)
    payloads, positions, ftypes, source = [], [], [], []
    for y in range(gh):
        for x in range(gw):
            payloads.append(patches[y, x])
            positions.append((0, y, x))
            ftypes.append(FRAME_TYPE_STATIC)
            source.append(0)
    meta = {"P0": clip.patches_per_frame}
    return _build("image", payloads, positions, ftypes, source, grid_t,
                  clip.source_id, p, meta)


def _build(mode, payloads, positions, ftypes, source, grid_t, clip_ref,
           patch_size, meta, seeds=None) -> TokenLayout:
    n = len(payloads)
    shape = (n, patch_size, patch_size, 3)
    return TokenLayout(
        mode=mode,
        payloads=np.array(payloads, dtype=np.uint8).reshape(shape),
        positions=np.array(positions, dtype=np.uint16).reshape(n, 3),
        frame_types=np.array(ftypes, dtype=np.uint8),
        source_ts=np.array(source, dtype=np.uint16),
        grid_t=grid_t, clip_ref=clip_ref, patch_size=patch_size,
        budget_meta=meta, seeds=dict(seeds or {}),
    )


def token_accounting(layout: TokenLayout, dense_t: int) -> dict:
    """Token count, clip compression ratio, and per-GOP ratios."""
    p0 = int(layout.budget_meta["P0"])
    m = layout.token_count
    gamma = 1.0 - m / (dense_t * p0)
    per_gop = []
    if layout.mode == "codec":
        gop_length = int(layout.budget_meta["gop_length"])
        num_frames = int(layout.budget_meta["num_frames"])
        start = 0
        n = 0
        while start < num_frames:
            length = min(gop_length, num_frames - start)
            in_gop = ((layout.source_ts >= start)
                      & (layout.source_ts < start + length))
            tokens = int(in_gop.sum())
            per_gop.append({
                "gop": n, "start": start, "length": length, "tokens": tokens,
                "gamma": 1.0 - tokens / (length * p0),
            })
            start += length
            n += 1
    return {"M": m, "gamma": gamma, "per_gop": per_gop}


INTERVENTION_KINDS = ("nonmotion_swap", "crossvideo_swap", "position_shuffle")


def intervene(layout: TokenLayout, kind: str,
              donor: TokenLayout | None = None, seed: int = 0,
              clip: RawClip | None = None) -> TokenLayout:
    """Apply a controlled perturbation to a codec-mode layout.

    nonmotion_swap replaces each P-frame token's payload with a uniformly
    sampled unselected patch from the same source frame (needs the source
    clip); crossvideo_swap replaces P-frame payloads with donor P-frame
    payloads; position_shuffle permutes P-frame positions, payloads fixed.
    """
    if layout.mode != "codec":
        raise ConfigError(f"interventions require a codec layout, got {layout.mode}")
    if kind not in INTERVENTION_KINDS:
        raise ConfigError(f"unknown intervention {kind!r}")
    rng = np.random.default_rng(seed)
    p_idx = np.flatnonzero(layout.frame_types == FRAME_TYPE_P)
    seeds = dict(layout.seeds)
    seeds.update({"intervention": kind, "intervention_seed": seed})

    if kind == "position_shuffle":
        positions = layout.positions.copy()
        perm = rng.permutation(len(p_idx))
        positions[p_idx] = layout.positions[p_idx][perm]
        return replace(layout, positions=positions, seeds=seeds)

    if kind == "crossvideo_swap":
        if donor is None:
            raise ConfigError("crossvideo_swap requires a donor layout")
        if donor.mode != "codec":
            raise ConfigError("donor must be a codec-mode layout")
        if donor.clip_ref == layout.clip_ref:
            raise ConfigError(
                "donor ineligible: must come from a different clip")
        if donor.patch_size != layout.patch_size:
            raise GeometryError("donor patch size differs")
        donor_p = np.flatnonzero(donor.frame_types == FRAME_TYPE_P)
        if len(donor_p) == 0:
            raise ConfigError("donor ineligible: no P-frame tokens")
        payloads = layout.payloads.copy()
        picks = rng.integers(0, len(donor_p), size=len(p_idx))
        payloads[p_idx] = donor.payloads[donor_p[picks]]
        return replace(layout, payloads=payloads, seeds=seeds)

    # nonmotion_swap
    if clip is None:
        raise ConfigError("nonmotion_swap requires the source clip")
    if clip.patch_size != layout.patch_size:
        raise GeometryError("clip patch size differs from layout")
    gh, gw = clip.grid_h, clip.grid_w
    if len(p_idx) and (int(layout.positions[p_idx, 1].max()) >= gh
                       or int(layout.positions[p_idx, 2].max()) >= gw):
        raise GeometryError("layout positions exceed the clip's patch grid")
    if int(layout.source_ts.max(initial=0)) >= clip.num_frames:
        raise GeometryError("layout references frames beyond the clip")
    payloads = layout.payloads.copy()
    for t in sorted(set(int(s) for s in layout.source_ts[p_idx])):
        frame_tokens = p_idx[layout.source_ts[p_idx] == t]
        selected = {(int(layout.positions[i, 1]), int(layout.positions[i, 2]))
                    for i in frame_tokens}
        unselected = [(y, x) for y in range(gh) for x in range(gw)
                      if (y, x) not in selected]
        if not unselected:
            warnings.warn(
                f"frame {t} has no unselected patches; skipped", stacklevel=2)
            continue
        patches = frame_patches(clip.frames[t], clip.patch_size)
        picks = rng.integers(0, len(unselected), size=len(frame_tokens))
        for i, pick in zip(frame_tokens, picks):
            y, x = unselected[int(pick)]
            payloads[i] = patches[y, x]
    return replace(layout, payloads=payloads, seeds=seeds)
