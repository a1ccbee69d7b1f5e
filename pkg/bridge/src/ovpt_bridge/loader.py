"""Loader for ``<name>.ovpt.json`` + ``<name>.ovpt.bin`` layout pairs.

Binary record layout (little-endian, normative):

    t_virtual u16 | y u16 | x u16 | frame_type u8 | source_t u16
    | payload p*p*3 u8

The loader never mutates layouts; ``serialize_records`` exists so umbrella
tests can prove byte-level round trips.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_FORMAT = "ovpt"
SUPPORTED_VERSION = 1
_HEAD = struct.Struct("<HHHBH")

FRAME_TYPES = {0: "I", 1: "P", 2: "sampled", 3: "static"}


class LayoutFormatError(ValueError):
    """Raised for any malformed, truncated, or unsupported layout pair."""


@dataclass(frozen=True)
class TokenBatch:
    """Array view of one token layout."""

    payloads: np.ndarray     # (N, p, p, 3) uint8
    positions: np.ndarray    # (N, 3) uint16: t_virtual, y, x
    frame_types: np.ndarray  # (N,) uint8
    source_ts: np.ndarray    # (N,) uint16
    metadata: dict

    def __len__(self) -> int:
        return self.payloads.shape[0]


def _paths(base) -> tuple[Path, Path]:
    base = str(base)
    for suffix in (".ovpt.json", ".ovpt.bin"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return Path(base + ".ovpt.json"), Path(base + ".ovpt.bin")


def load_layout(path) -> TokenBatch:
    """Load and strictly validate one layout pair."""
    json_path, bin_path = _paths(path)
    try:
        metadata = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LayoutFormatError(f"cannot read {json_path}: {exc}") from exc
    if metadata.get("format") != SUPPORTED_FORMAT:
        raise LayoutFormatError(f"{json_path}: unexpected format "
                                f"{metadata.get('format')!r}")
    if metadata.get("version") != SUPPORTED_VERSION:
        raise LayoutFormatError(f"{json_path}: version mismatch "
                                f"({metadata.get('version')!r})")
    for key in ("token_count", "patch_size", "mode", "grid_T"):
        if key not in metadata:
            raise LayoutFormatError(f"{json_path}: missing key {key!r}")
    count = int(metadata["token_count"])
    patch = int(metadata["patch_size"])
    payload_len = patch * patch * 3
    record = _HEAD.size + payload_len
    try:
        blob = bin_path.read_bytes()
    except OSError as exc:
        raise LayoutFormatError(f"cannot read {bin_path}: {exc}") from exc
    if len(blob) != count * record:
        raise LayoutFormatError(
            f"{bin_path}: {len(blob)} bytes, expected {count} records "
            f"x {record} bytes")

    raw = np.frombuffer(blob, dtype=np.uint8).reshape(count, record)
    head = raw[:, : _HEAD.size]
    positions = np.empty((count, 3), dtype=np.uint16)
    positions[:, 0] = head[:, 0:2].copy().view("<u2")[:, 0]
    positions[:, 1] = head[:, 2:4].copy().view("<u2")[:, 0]
    positions[:, 2] = head[:, 4:6].copy().view("<u2")[:, 0]
    frame_types = head[:, 6].copy()
    source_ts = head[:, 7:9].copy().view("<u2")[:, 0]
    payloads = raw[:, _HEAD.size :].reshape(count, patch, patch, 3).copy()

    if count and not np.isin(frame_types, list(FRAME_TYPES)).all():
        raise LayoutFormatError(f"{bin_path}: unknown frame_type byte")
    if count and int(positions[:, 0].max()) >= int(metadata["grid_T"]):
        raise LayoutFormatError(f"{bin_path}: t_virtual beyond grid_T")
    batch = TokenBatch(payloads=payloads, positions=positions,
                       frame_types=frame_types,
                       source_ts=source_ts.astype(np.uint16),
                       metadata=metadata)
    return batch


def serialize_records(batch: TokenBatch) -> bytes:
    """Re-encode a batch to the exact binary record stream."""
    n = len(batch)
    out = bytearray()
    flat = batch.payloads.reshape(n, -1)
    for i in range(n):
        out += _HEAD.pack(int(batch.positions[i, 0]),
                          int(batch.positions[i, 1]),
                          int(batch.positions[i, 2]),
                          int(batch.frame_types[i]),
                          int(batch.source_ts[i]))
        out += flat[i].tobytes()
    return bytes(out)
