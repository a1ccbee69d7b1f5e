"""Clip loading and GOP partitioning.

Supported inputs:
  * directory of binary PPM frames named ``frame_%05d.ppm`` (lexicographic order)
  * single ``.ppm`` file (loaded as a one-frame clip)
  * planar YUV 4:2:0 file ``<name>.yuv`` with a ``<name>.meta.json`` sidecar
    holding ``{width, height, frames, fps, pix_fmt: "yuv420p"}``

Frames are bilinearly resized to the smallest size covering the target while
preserving aspect ratio, then center-cropped, so H and W end up exact
multiples of the patch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InputFormatError

DEFAULT_PATCH_SIZE = 14
DEFAULT_GOP_LENGTH = 32
DEFAULT_FPS = 30.0

def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) portable pixmap into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from exc
    if not data.startswith(b"P6"):
        raise InputFormatError(f"{path}: not a binary PPM (P6) file")
    # header tokens are width, height, maxval; '#' comments run to end of line
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise InputFormatError(f"{path}: truncated PPM header")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputFormatError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # exactly one whitespace byte separates header from pixels
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise InputFormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise InputFormatError(f"{path}: unsupported maxval {maxval} (need 255)")
    pixels = data[pos:]
    if len(pixels) < h * w * 3:
        raise InputFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels[: h * w * 3], dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a binary PPM."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


@dataclass(frozen=True)
class RawClip:
    """Decoded frames of one clip plus patch-grid geometry.

    frames is (T, H, W, 3) uint8 with H and W exact multiples of patch_size.
    """

    frames: np.ndarray
    fps: float
    source_id: str
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.dtype != np.uint8:
            raise InputFormatError("frames must be (T, H, W, 3) uint8")
        if f.shape[0] < 1:
            raise InputFormatError("clip has zero frames")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if f.shape[1] % self.patch_size or f.shape[2] % self.patch_size:
            raise ConfigError(
                f"frame size {f.shape[1]}x{f.shape[2]} is not a multiple of "
                f"patch_size {self.patch_size}"
            )
        f.setflags(write=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def grid_h(self) -> int:
        return self.height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.width // self.patch_size

    @property
    def patches_per_frame(self) -> int:
        """Patch-grid cardinality per frame."""
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class GopPartition:
    """Contiguous GOP segments (start_frame, length) covering the clip."""

    segments: tuple = field(default_factory=tuple)
    gop_length: int = DEFAULT_GOP_LENGTH

    def i_frame_indices(self) -> list[int]:
        """First frame of every segment is the I-frame."""
        return [start for start, _ in self.segments]

    def p_frame_pairs(self) -> list[tuple[int, int]]:
        """(frame, reference) pairs; each P-frame references the previous frame."""
        pairs = []
        for start, length in self.segments:
            for tau in range(1, length):
                pairs.append((start + tau, start + tau - 1))
        return pairs

    def p_frame_indices(self) -> list[int]:
        return [t for t, _ in self.p_frame_pairs()]

    @property
    def num_frames(self) -> int:
        return sum(length for _, length in self.segments)


def fit_geometry(h: int, w: int, target_h: int, target_w: int) -> tuple[int, int]:
    """Pre-crop size: smallest aspect-preserving size covering the target."""
    if target_h * w >= target_w * h:
        new_h = target_h
        new_w = (w * target_h + h - 1) // h
    else:
        new_w = target_w
        new_h = (h * target_w + w - 1) // w
    return max(new_h, target_h), max(new_w, target_w)


def _resize_crop(frame: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    h, w = frame.shape[:2]
    if (h, w) == (target_h, target_w):
        return frame
    new_h, new_w = fit_geometry(h, w, target_h, target_w)
    if (new_h, new_w) != (h, w):
        frame = np.asarray(
            Image.fromarray(frame).resize((new_w, new_h), Image.BILINEAR)
        )
    top = (new_h - target_h) // 2
    left = (new_w - target_w) // 2
    return frame[top : top + target_h, left : left + target_w]


def _yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # nearest-neighbor chroma upsampling, BT.601 full-range conversion
    uf = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1).astype(np.float64) - 128.0
    vf = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1).astype(np.float64) - 128.0
    yf = y.astype(np.float64)
    r = yf + 1.402 * vf
    g = yf - 0.344136 * uf - 0.714136 * vf
    b = yf + 1.772 * uf
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _load_frame_dir(path: Path) -> tuple[list[np.ndarray], float]:
    names = sorted(p.name for p in path.iterdir() if p.suffix == ".ppm")
    if not names:
        raise InputFormatError(f"{path}: no .ppm frames found")
    frames = [read_ppm(path / name) for name in names]
    return frames, DEFAULT_FPS


def _load_yuv(path: Path) -> tuple[list[np.ndarray], float]:
    meta_path = Path(str(path)[: -len(".yuv")] + ".meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"cannot read metadata {meta_path}: {exc}") from exc
    for key in ("width", "height", "frames", "pix_fmt"):
        if key not in meta:
            raise InputFormatError(f"{meta_path}: missing key {key!r}")
    if meta["pix_fmt"] != "yuv420p":
        raise InputFormatError(f"unsupported pixel format {meta['pix_fmt']!r}")
    w, h, t = int(meta["width"]), int(meta["height"]), int(meta["frames"])
    if t < 1:
        raise InputFormatError(f"{path}: zero frames")
    if h % 2 or w % 2:
        raise InputFormatError("yuv420p requires even frame dimensions")
    frame_bytes = h * w + 2 * (h // 2) * (w // 2)
    data = path.read_bytes()
    if len(data) < t * frame_bytes:
        raise InputFormatError(f"{path}: truncated ({len(data)} bytes, "
                               f"expected {t * frame_bytes})")
    frames = []
    for i in range(t):
        buf = np.frombuffer(data, dtype=np.uint8, count=frame_bytes,
                            offset=i * frame_bytes)
        y = buf[: h * w].reshape(h, w)
        u = buf[h * w : h * w + (h // 2) * (w // 2)].reshape(h // 2, w // 2)
        v = buf[h * w + (h // 2) * (w // 2) :].reshape(h // 2, w // 2)
        frames.append(_yuv420_to_rgb(y, u, v))
    return frames, float(meta.get("fps", DEFAULT_FPS))


def load_clip(path, target_h: int, target_w: int,
              patch_size: int = DEFAULT_PATCH_SIZE) -> RawClip:
    """Load a clip or image and normalize it to the target patch grid."""
    if target_h % patch_size or target_w % patch_size:
        raise ConfigError(
            f"target {target_h}x{target_w} is not a multiple of patch_size "
            f"{patch_size}"
        )
    path = Path(path)
    if path.is_dir():
        frames, fps = _load_frame_dir(path)
    elif path.suffix == ".yuv":
        frames, fps = _load_yuv(path)
    elif path.suffix == ".ppm":
        frames, fps = [read_ppm(path)], DEFAULT_FPS
    else:
        raise InputFormatError(f"unsupported input container: {path}")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise InputFormatError(f"{path}: frames differ in size: {sorted(shapes)}")
    stacked = np.stack([_resize_crop(f, target_h, target_w) for f in frames])
    return RawClip(frames=stacked, fps=fps, source_id=path.stem or str(path),
                   patch_size=patch_size)


def partition_gops(clip: RawClip, gop_length: int = DEFAULT_GOP_LENGTH) -> GopPartition:
    """Split the clip into contiguous GOPs; only the last may be shorter."""
    if gop_length < 1:
        raise ConfigError("gop_length must be >= 1")
    t = clip.num_frames
    segments = []
    start = 0
    while start < t:
        length = min(gop_length, t - start)
        segments.append((start, length))
        start += length
    return GopPartition(segments=tuple(segments), gop_length=gop_length)
