"""ZEEG interchange format: bit-exact reader and writer.

Layout: 8-byte magic "ZEEG0001", a little-endian uint32 byte length, a
UTF-8 JSON header {version, sfreq, channels: [{label, x, y, z}],
n_samples, scale}, then channel-major IEEE-754 single precision
little-endian samples (all samples of channel 0, then channel 1, ...).
Physical value = stored * scale. Unknown magic or version is rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .pipeline import ChannelGeometry, Recording

MAGIC = b"ZEEG0001"
VERSION = 1


class ZeegError(ValueError):
    """Raised for malformed or unsupported ZEEG files."""


def write_zeeg(path, rec: Recording, scale: float = 1.0) -> None:
    """Serialize a recording; stored samples are physical / scale."""
    if scale == 0 or not np.isfinite(scale):
        raise ZeegError(f"scale must be finite and non-zero, got {scale}")
    header = {
        "version": VERSION,
        "sfreq": rec.sfreq,
        "channels": [
            {
                "label": label,
                "x": float(pos[0]),
                "y": float(pos[1]),
                "z": float(pos[2]),
            }
            for label, pos in zip(rec.geometry.labels, rec.geometry.positions)
        ],
        "n_samples": rec.n_samples,
        "scale": scale,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    stored = (rec.samples / scale).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(stored.tobytes())


def read_zeeg(path) -> Recording:
    """Parse a ZEEG file back into a Recording (float64, scale applied)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such ZEEG file: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise ZeegError(f"{path}: truncated file")
    if raw[: len(MAGIC)] != MAGIC:
        raise ZeegError(f"{path}: unknown magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ZeegError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ZeegError(f"{path}: bad JSON header: {err}") from err
    if header.get("version") != VERSION:
        raise ZeegError(f"{path}: unsupported version {header.get('version')}")
    for key in ("sfreq", "channels", "n_samples", "scale"):
        if key not in header:
            raise ZeegError(f"{path}: header missing {key}")
    channels = header["channels"]
    n_samples = int(header["n_samples"])
    c = len(channels)
    expected = c * n_samples * 4
    payload = raw[12 + hlen :]
    if len(payload) != expected:
        raise ZeegError(
            f"{path}: expected {expected} sample bytes, found {len(payload)}"
        )
    stored = np.frombuffer(payload, dtype="<f4").reshape(c, n_samples)
    geometry = ChannelGeometry(
        tuple(ch["label"] for ch in channels),
        np.array([[ch["x"], ch["y"], ch["z"]] for ch in channels]),
    )
    samples = stored.astype(np.float64) * float(header["scale"])
    return Recording(samples, float(header["sfreq"]), geometry)
