"""Per-P-frame motion fields and residual maps.

Signals either come from a sidecar file written by an external extractor (or
this toolkit's exporter) or are emulated by full-search block matching on the
luma plane against each frame's predecessor inside its GOP.

Sidecar format ``<name>.sig`` (little-endian):
  header  {magic "OVSG", version u32, frames u32, H u32, W u32, block u32}
  per P-frame record
          {frame_index u32, ref_index u32,
           vectors i16 x2 per block row-major (dy, dx),
           residual_energy f32 per pixel row-major}
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError, InputFormatError
from .ingest import GopPartition, RawClip

DEFAULT_BLOCK_SIZE = 16
DEFAULT_SEARCH_RANGE = 8

SIG_MAGIC = b"OVSG"
SIG_VERSION = 1

# BT.601 luma weights applied to RGB
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def luma(frame: np.ndarray) -> np.ndarray:
    """BT.601 luma plane of an (H, W, 3) uint8 frame, float64."""
    return frame @ _LUMA


@dataclass(frozen=True)
class MotionField:
    """Per-block (dy, dx) displacements for one P-frame.

    The block grid tiles the frame after edge-replication padding, so the
    grid is ceil(H/block) x ceil(W/block); the dense broadcast crops back to
    frame geometry.
    """

    block_size: int
    vectors: np.ndarray  # (grid_h, grid_w, 2) int16, (dy, dx) in pixels
    frame_index: int
    reference_index: int
    frame_h: int
    frame_w: int

    def __post_init__(self):
        bs = self.block_size
        if bs < 4 or bs > 64 or bs & (bs - 1):
            raise GeometryError(
                f"block size {bs} must be a power of two in [4, 64]")
        gh = -(-self.frame_h // self.block_size)
        gw = -(-self.frame_w // self.block_size)
        if self.vectors.shape != (gh, gw, 2):
            raise GeometryError(
                f"vector grid {self.vectors.shape} does not tile "
                f"{self.frame_h}x{self.frame_w} at block {self.block_size}"
            )
        self.vectors.setflags(write=False)


@dataclass(frozen=True)
class ResidualMap:
    """Per-pixel squared luma error after motion compensation."""

    energy: np.ndarray  # (H, W) float32, >= 0
    frame_index: int

    def __post_init__(self):
        if self.energy.dtype != np.float32:
            raise GeometryError("residual energy must be float32")
        self.energy.setflags(write=False)


def _pad_to_blocks(plane: np.ndarray, block_size: int) -> np.ndarray:
    h, w = plane.shape
    ph = (-h) % block_size
    pw = (-w) % block_size
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def _candidate_order(search_range: int) -> list[tuple[int, int]]:
    # tie-break order: smallest |dy|+|dx|, then smallest dy, then smallest dx
    cands = [
        (dy, dx)
        for dy in range(-search_range, search_range + 1)
        for dx in range(-search_range, search_range + 1)
    ]
    cands.sort(key=lambda c: (abs(c[0]) + abs(c[1]), c[0], c[1]))
    return cands


def estimate_motion(ref: np.ndarray, cur: np.ndarray,
                    block_size: int = DEFAULT_BLOCK_SIZE,
                    search_range: int = DEFAULT_SEARCH_RANGE,
                    frame_index: int = 0,
                    reference_index: int = 0) -> MotionField:
    """Full-search SAD block matching of cur against ref on the luma plane.

    Reference samples outside the frame are clamped to the edge (realized by
    edge padding). Ties pick the smallest |dy|+|dx|, then dy, then dx.
    """
    if ref.shape != cur.shape:
        raise GeometryError(f"frame geometry mismatch: {ref.shape} vs {cur.shape}")
    h, w = cur.shape[:2]
    cur_l = _pad_to_blocks(luma(cur).astype(np.float32), block_size)
    ref_l = _pad_to_blocks(luma(ref).astype(np.float32), block_size)
    fields = _estimate_batch(ref_l[None], cur_l[None], block_size, search_range)
    return MotionField(block_size=block_size, vectors=fields[0],
                       frame_index=frame_index, reference_index=reference_index,
                       frame_h=h, frame_w=w)


def _estimate_batch(ref_l: np.ndarray, cur_l: np.ndarray,
                    block_size: int, search_range: int) -> np.ndarray:
    """Vectorized SAD search over a stack of (already padded) luma planes.

    ref_l, cur_l: (F, Hp, Wp) float32. Returns (F, gh, gw, 2) int16.
    """
    f, hp, wp = cur_l.shape
    gh, gw = hp // block_size, wp // block_size
    r = search_range
    ref_pad = np.pad(ref_l, ((0, 0), (r, r), (r, r)), mode="edge")

    best_sad = np.full((f, gh, gw), np.inf, dtype=np.float32)
    best_vec = np.zeros((f, gh, gw, 2), dtype=np.int16)
    buf = np.empty((f, hp, wp), dtype=np.float32)
    for dy, dx in _candidate_order(r):
        shifted = ref_pad[:, r + dy : r + dy + hp, r + dx : r + dx + wp]
        np.subtract(cur_l, shifted, out=buf)
        np.abs(buf, out=buf)
        colsum = buf.reshape(f, hp, gw, block_size).sum(axis=3)
        sad = colsum.reshape(f, gh, block_size, gw).sum(axis=2)
        better = sad < best_sad  # strict: earlier candidates win ties
        if better.any():
            best_sad[better] = sad[better]
            best_vec[better] = (dy, dx)
    return best_vec


def estimate_clip_motion(clip: RawClip, gops: GopPartition,
                         block_size: int = DEFAULT_BLOCK_SIZE,
                         search_range: int = DEFAULT_SEARCH_RANGE,
                         ) -> dict[int, tuple[MotionField, ResidualMap]]:
    """Estimate motion and residual for every P-frame of the clip.

    All P-frame pairs are matched in one batched pass; each P-frame
    references its predecessor inside the GOP.
    """
    pairs = gops.p_frame_pairs()
    if not pairs:
        return {}
    lumas = clip.frames.astype(np.float64) @ _LUMA
    lumas32 = lumas.astype(np.float32)
    padded = np.stack([_pad_to_blocks(lumas32[t], block_size)
                       for t in range(clip.num_frames)])
    cur_idx = np.array([t for t, _ in pairs])
    ref_idx = np.array([ref for _, ref in pairs])
    vecs = _estimate_batch(padded[ref_idx], padded[cur_idx],
                           block_size, search_range)
    out = {}
    for i, (t, ref) in enumerate(pairs):
        field = MotionField(block_size=block_size, vectors=vecs[i],
                            frame_index=t, reference_index=ref,
                            frame_h=clip.height, frame_w=clip.width)
        residual = compute_residual(clip.frames[t], clip.frames[ref], field)
        out[t] = (field, residual)
    return out


def broadcast_motion(field: MotionField) -> np.ndarray:
    """Dense (H, W, 2) per-pixel displacement map at frame geometry."""
    dense = np.repeat(np.repeat(field.vectors, field.block_size, axis=0),
                      field.block_size, axis=1)
    return dense[: field.frame_h, : field.frame_w]


def compute_residual(cur: np.ndarray, ref: np.ndarray,
                     field: MotionField) -> ResidualMap:
    """Squared luma error of motion compensation, out-of-bounds clamped."""
    if cur.shape != ref.shape:
        raise GeometryError(f"frame geometry mismatch: {cur.shape} vs {ref.shape}")
    h, w = cur.shape[:2]
    if (h, w) != (field.frame_h, field.frame_w):
        raise GeometryError("motion field geometry does not match frames")
    dense = broadcast_motion(field).astype(np.int64)
    yy = np.clip(np.arange(h)[:, None] + dense[:, :, 0], 0, h - 1)
    xx = np.clip(np.arange(w)[None, :] + dense[:, :, 1], 0, w - 1)
    cur_l = luma(cur)
    ref_l = luma(ref)
    diff = cur_l - ref_l[yy, xx]
    return ResidualMap(energy=(diff * diff).astype(np.float32),
                       frame_index=field.frame_index)


def compensate_camera_motion(dense: np.ndarray, field: MotionField) -> np.ndarray:
    """Subtract the frame's median block vector from a dense motion map."""
    med = np.median(field.vectors.reshape(-1, 2), axis=0)
    return dense.astype(np.float64) - med


def _block_grid(h: int, w: int, block_size: int) -> tuple[int, int]:
    return -(-h // block_size), -(-w // block_size)


def export_signals(path, clip: RawClip, gops: GopPartition,
                   signals: dict[int, tuple[MotionField, ResidualMap]]) -> None:
    """Write estimated (or imported) signals to a sidecar file."""
    p_frames = gops.p_frame_indices()
    h, w = clip.height, clip.width
    block = next(iter(signals.values()))[0].block_size if signals else DEFAULT_BLOCK_SIZE
    with open(path, "wb") as f:
        f.write(SIG_MAGIC)
        f.write(struct.pack("<5I", SIG_VERSION, clip.num_frames, h, w, block))
        for t in p_frames:
            field, residual = signals[t]
            f.write(struct.pack("<2I", field.frame_index, field.reference_index))
            f.write(field.vectors.astype("<i2").tobytes())
            f.write(residual.energy.astype("<f4").tobytes())


def import_codec_signals(path, clip: RawClip, gops: GopPartition,
                         ) -> dict[int, tuple[MotionField, ResidualMap]]:
    """Read a sidecar and attach signals to the clip's P-frames.

    The sidecar must match the clip's frame count and geometry and contain
    exactly one record per non-I frame.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < 24 or data[:4] != SIG_MAGIC:
        raise InputFormatError(f"{path}: not a signal sidecar (bad magic)")
    version, frames, h, w, block = struct.unpack_from("<5I", data, 4)
    if version != SIG_VERSION:
        raise InputFormatError(f"{path}: unsupported sidecar version {version}")
    if frames != clip.num_frames:
        raise InputFormatError(
            f"{path}: frame count {frames} does not match clip {clip.num_frames}")
    if (h, w) != (clip.height, clip.width):
        raise InputFormatError(
            f"{path}: geometry {h}x{w} does not match clip "
            f"{clip.height}x{clip.width}")
    gh, gw = _block_grid(h, w, block)
    vec_bytes = gh * gw * 2 * 2
    res_bytes = h * w * 4
    record_bytes = 8 + vec_bytes + res_bytes

    expected = set(gops.p_frame_indices())
    signals: dict[int, tuple[MotionField, ResidualMap]] = {}
    offset = 24
    while offset < len(data):
        if offset + record_bytes > len(data):
            raise InputFormatError(f"{path}: truncated record at offset {offset}")
        frame_index, ref_index = struct.unpack_from("<2I", data, offset)
        if frame_index >= frames or frame_index in signals:
            raise InputFormatError(
                f"{path}: malformed record (frame_index {frame_index})")
        if frame_index not in expected:
            raise InputFormatError(
                f"{path}: record for frame {frame_index} which is not a P-frame")
        vecs = np.frombuffer(data, dtype="<i2", count=gh * gw * 2,
                             offset=offset + 8).reshape(gh, gw, 2)
        energy = np.frombuffer(data, dtype="<f4", count=h * w,
                               offset=offset + 8 + vec_bytes).reshape(h, w)
        if (energy < 0).any() or not np.isfinite(energy).all():
            raise InputFormatError(
                f"{path}: malformed residual record for frame {frame_index}")
        field = MotionField(block_size=block, vectors=vecs.astype(np.int16),
                            frame_index=frame_index, reference_index=ref_index,
                            frame_h=h, frame_w=w)
        residual = ResidualMap(energy=np.ascontiguousarray(energy),
                               frame_index=frame_index)
        signals[frame_index] = (field, residual)
        offset += record_bytes
    missing = expected - set(signals)
    if missing:
        raise InputFormatError(
            f"{path}: missing frame records for P-frames {sorted(missing)[:8]}")
    return signals
