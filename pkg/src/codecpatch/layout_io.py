"""Token layout exchange files: ``<name>.ovpt.json`` + ``<name>.ovpt.bin``.

The JSON carries layout metadata plus the full run configuration; the binary
is a little-endian record stream, one record per token:

    {t_virtual u16, y u16, x u16, frame_type u8, source_t u16,
     payload p*p*3 u8}

Byte layout is normative; writers must be reproducible byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputFormatError
from .patchify import FRAME_TYPE_NAMES, TokenLayout

FORMAT_NAME = "ovpt"
FORMAT_VERSION = 1
ORDERING = "spec-v1"

JSON_SUFFIX = ".ovpt.json"
BIN_SUFFIX = ".ovpt.bin"


def _record_dtype(patch_size: int) -> np.dtype:
    return np.dtype([
        ("t_virtual", "<u2"), ("y", "<u2"), ("x", "<u2"),
        ("frame_type", "u1"), ("source_t", "<u2"),
        ("payload", "u1", (patch_size * patch_size * 3,)),
    ])


def dump_json(obj: dict) -> str:
    """Canonical JSON used for all metadata outputs (byte-stable)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def layout_paths(base) -> tuple[Path, Path]:
    """Resolve (json, bin) paths from a base name or either file path."""
    base = str(base)
    for suffix in (JSON_SUFFIX, BIN_SUFFIX):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return Path(base + JSON_SUFFIX), Path(base + BIN_SUFFIX)


def layout_metadata(layout: TokenLayout, run_config: dict | None = None) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "ordering": ORDERING,
        "tool_version": f"codecpatch {__version__}",
        "mode": layout.mode,
        "grid_T": layout.grid_t,
        "P0": int(layout.budget_meta.get("P0", 0)),
        "patch_size": layout.patch_size,
        "token_count": layout.token_count,
        "clip_ref": layout.clip_ref,
        "budget_meta": layout.budget_meta,
        "seeds": layout.seeds,
        "run_config": run_config or {},
    }


def layout_records(layout: TokenLayout) -> np.ndarray:
    """Structured record array matching the binary format exactly."""
    n = layout.token_count
    rec = np.zeros(n, dtype=_record_dtype(layout.patch_size))
    rec["t_virtual"] = layout.positions[:, 0]
    rec["y"] = layout.positions[:, 1]
    rec["x"] = layout.positions[:, 2]
    rec["frame_type"] = layout.frame_types
    rec["source_t"] = layout.source_ts
    rec["payload"] = layout.payloads.reshape(n, -1)
    return rec


def write_layout(base, layout: TokenLayout, run_config: dict | None = None,
                 ) -> tuple[Path, Path]:
    json_path, bin_path = layout_paths(base)
    json_path.write_text(dump_json(layout_metadata(layout, run_config)))
    bin_path.write_bytes(layout_records(layout).tobytes())
    return json_path, bin_path


def read_layout(base) -> tuple[TokenLayout, dict]:
    """Load a layout pair; strict validation of format, version, and counts."""
    json_path, bin_path = layout_paths(base)
    try:
        meta = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"cannot read {json_path}: {exc}") from exc
    if meta.get("format") != FORMAT_NAME:
        raise InputFormatError(f"{json_path}: not a layout metadata file")
    if meta.get("version") != FORMAT_VERSION:
        raise InputFormatError(
            f"{json_path}: unsupported version {meta.get('version')}")
    patch_size = int(meta["patch_size"])
    count = int(meta["token_count"])
    dtype = _record_dtype(patch_size)
    try:
        blob = bin_path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {bin_path}: {exc}") from exc
    if len(blob) != count * dtype.itemsize:
        raise InputFormatError(
            f"{bin_path}: size {len(blob)} != {count} records of "
            f"{dtype.itemsize} bytes")
    rec = np.frombuffer(blob, dtype=dtype)
    positions = np.stack([rec["t_virtual"], rec["y"], rec["x"]],
                         axis=1).astype(np.uint16)
    if not np.isin(rec["frame_type"], list(FRAME_TYPE_NAMES)).all():
        raise InputFormatError(f"{bin_path}: unknown frame_type byte")
    layout = TokenLayout(
        mode=meta["mode"],
        payloads=rec["payload"].reshape(count, patch_size, patch_size, 3).copy(),
        positions=positions,
        frame_types=rec["frame_type"].astype(np.uint8),
        source_ts=rec["source_t"].astype(np.uint16),
        grid_t=int(meta["grid_T"]),
        clip_ref=meta["clip_ref"],
        patch_size=patch_size,
        budget_meta=meta.get("budget_meta", {}),
        seeds=meta.get("seeds", {}),
    )
    return layout, meta
