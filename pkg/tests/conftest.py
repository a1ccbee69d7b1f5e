import numpy as np
import pytest

from codecpatch.ingest import RawClip, write_ppm


def moving_square_frames(t=16, h=112, w=112, square=28, step=2,
                         start=(14, 7), seed=0):
    """Textured background with a textured square moving diagonally.

    Returns (frames, rects) where rects[t] = (y0, x0, size) of the square.
    """
    rng = np.random.default_rng(seed)
    bg = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    sq = rng.integers(0, 256, size=(square, square, 3), dtype=np.uint8)
    frames = np.empty((t, h, w, 3), dtype=np.uint8)
    rects = []
    for i in range(t):
        y = start[0] + step * i
        x = start[1] + step * i
        if y + square > h or x + square > w:
            raise ValueError("square leaves the frame; shrink t or step")
        f = bg.copy()
        f[y : y + square, x : x + square] = sq
        frames[i] = f
        rects.append((y, x, square))
    return frames, rects


def make_clip(frames, patch_size=14, source_id="clip", fps=30.0) -> RawClip:
    return RawClip(frames=np.ascontiguousarray(frames), fps=fps,
                   source_id=source_id, patch_size=patch_size)


def noise_clip(t=4, h=56, w=56, seed=0, source_id="noise") -> RawClip:
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(t, h, w, 3), dtype=np.uint8)
    return make_clip(frames, source_id=source_id)


def write_clip_dir(path, frames):
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(path / f"frame_{i:05d}.ppm", frame)
    return path


@pytest.fixture
def square_clip():
    frames, rects = moving_square_frames()
    return make_clip(frames, source_id="square"), rects
