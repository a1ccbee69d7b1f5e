"""Fixture corpus built through the producing tool's public CLI.

The bridge is a pure consumer: every layout and rope fixture here is written
by the ``codecpatch`` command-line tool, never by importing its internals.
Tests are skipped if the CLI is not installed.
"""

import shutil
import subprocess

import numpy as np
import pytest

CLI = shutil.which("codecpatch")

requires_cli = pytest.mark.skipif(CLI is None,
                                  reason="codecpatch CLI not on PATH")


def run_cli(*args):
    proc = subprocess.run([CLI, *args], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def write_ppm(path, image):
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_clip(path, t=8, h=56, w=56, seed=0):
    rng = np.random.default_rng(seed)
    bg = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    block = rng.integers(0, 256, size=(14, 14, 3), dtype=np.uint8)
    path.mkdir(parents=True, exist_ok=True)
    for i in range(t):
        frame = bg.copy()
        y = (7 + 3 * i) % (h - 14)
        x = (5 + 3 * i) % (w - 14)
        frame[y : y + 14, x : x + 14] = block
        write_ppm(path / f"frame_{i:05d}.ppm", frame)
    return path


@pytest.fixture(scope="session")
def layout_corpus(tmp_path_factory):
    """At least 50 layout pairs spanning codec, chunk, and image modes."""
    if CLI is None:
        pytest.skip("codecpatch CLI not on PATH")
    root = tmp_path_factory.mktemp("corpus")
    clips = [write_clip(root / f"clip{i}", seed=10 + i) for i in range(3)]
    out = root / "layouts"
    produced = []

    geometry = ["--height", "56", "--width", "56"]
    for budget in (32, 40, 48, 56, 64, 72):
        subdir = out / f"codec_b{budget}"
        run_cli("patchify", *map(str, clips), "--output-dir", str(subdir),
                *geometry, "--gop-length", "4", "--budget", str(budget),
                "--search-range", "4")
        produced += sorted(subdir.glob("*.ovpt.json"))
    for chunks, seed in ((2, 0), (4, 1), (8, 2), (4, 9)):
        subdir = out / f"chunk_c{chunks}_s{seed}"
        run_cli("patchify", *map(str, clips), "--output-dir", str(subdir),
                *geometry, "--mode", "chunk", "--chunks", str(chunks),
                "--seed", str(seed))
        produced += sorted(subdir.glob("*.ovpt.json"))

    rng = np.random.default_rng(99)
    images = []
    for i in range(20):
        img = root / f"img{i:02d}.ppm"
        write_ppm(img, rng.integers(0, 256, size=(56, 56, 3), dtype=np.uint8))
        images.append(img)
    subdir = out / "image"
    run_cli("patchify", *map(str, images), "--output-dir", str(subdir),
            *geometry, "--mode", "image")
    produced += sorted(subdir.glob("*.ovpt.json"))

    assert len(produced) >= 50
    return produced


@pytest.fixture(scope="session")
def rope_fixture(tmp_path_factory):
    if CLI is None:
        pytest.skip("codecpatch CLI not on PATH")
    path = tmp_path_factory.mktemp("rope") / "fixture.json"
    run_cli("rope-check", "--output", str(path), "--count", "240",
            "--seed", "2024")
    return path
