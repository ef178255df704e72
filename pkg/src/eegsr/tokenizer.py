"""Epoch-to-token conversion: windowing, coordinate binning, raster
serialization, register interleaving, and multi-sample packing.

Tokens are 32-sample windows. A 5 s epoch with C channels yields a C x 40
grid, serialized channel-fastest so token i covers channel i mod C at
coarse time i // C. Each token carries a 4D integer coordinate (three
binned spatial axes plus the coarse-time index) consumed by the model's
rotary position encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .pipeline import Epoch

WINDOW_SAMPLES = 32
WINDOWS_PER_EPOCH = 40

N_SPATIAL_BINS = 50
# canonical head bounding box, meters; fixed so identical physical
# positions always land in identical bins regardless of dataset
BOX_HALF_WIDTH = 0.12

ATTENTION_WINDOW = 65536  # sliding-window cap, vacuous at desk scale


class TokenizerError(ValueError):
    """Raised when token layout contracts are violated."""


class Coord4(NamedTuple):
    """Binned spatial position plus coarse-time index of one token."""

    bx: int
    by: int
    bz: int
    m: int


@dataclass
class TokenGrid:
    """Windowed epoch: (C, M, W) values plus raw positions and a mask."""

    windows: np.ndarray       # (C, M, W)
    coords: np.ndarray        # (C, 3) raw positions
    dropout_mask: np.ndarray  # (C,) bool

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim != 3 or self.windows.shape[2] != WINDOW_SAMPLES:
            raise TokenizerError(
                f"windows must be (C, M, {WINDOW_SAMPLES}), got {self.windows.shape}"
            )
        self.dropout_mask = np.asarray(self.dropout_mask, dtype=bool)
        if self.dropout_mask.shape != (self.windows.shape[0],):
            raise TokenizerError("dropout mask length must equal channel count")

    @property
    def n_channels(self) -> int:
        return self.windows.shape[0]

    @property
    def n_windows(self) -> int:
        return self.windows.shape[1]


@dataclass
class TokenSequence:
    """Raster-serialized tokens with per-token coordinates and metadata."""

    tokens: np.ndarray       # (L, W)
    coords: np.ndarray       # (L, 4) int: bx, by, bz, m
    is_register: np.ndarray  # (L,) bool
    sample_id: np.ndarray    # (L,) int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.is_register = np.asarray(self.is_register, dtype=bool)
        self.sample_id = np.asarray(self.sample_id, dtype=np.int64)
        n = self.tokens.shape[0]
        if self.coords.shape != (n, 4):
            raise TokenizerError("coords must be (L, 4)")
        if self.is_register.shape != (n,) or self.sample_id.shape != (n,):
            raise TokenizerError("per-token metadata length mismatch")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def coord_at(self, i: int) -> Coord4:
        return Coord4(*(int(v) for v in self.coords[i]))


@dataclass
class PackedBatch:
    """Sequences packed greedily into shared buffers, one per pack."""

    packs: list[TokenSequence]


def window_tokens(epoch: Epoch, dropout=None) -> TokenGrid:
    """Cut an epoch into non-overlapping 32-sample windows per channel.

    Channels flagged in ``dropout`` (defaults to the epoch's bad channels)
    are zeroed and marked in the grid's mask; their positions are kept.
    """
    c = epoch.n_channels
    windows = epoch.samples.reshape(c, WINDOWS_PER_EPOCH, WINDOW_SAMPLES).copy()
    if dropout is None:
        mask = epoch.bad_channels.copy()
    else:
        mask = np.asarray(dropout, dtype=bool) | epoch.bad_channels
    windows[mask] = 0.0
    return TokenGrid(windows, epoch.geometry.positions.copy(), mask)


def flatten_grid(grid: TokenGrid) -> np.ndarray:
    """Inverse of :func:`window_tokens` at the sample level, (C, 1280)."""
    c = grid.n_channels
    return grid.windows.reshape(c, grid.n_windows * WINDOW_SAMPLES)


def bin_coordinates(positions: np.ndarray) -> np.ndarray:
    """Map raw 3D positions to integer bins {0..49} per axis.

    A fixed affine map from the canonical box [-0.12, 0.12] m; outliers
    clamp to the edge bins. Accepts a ChannelGeometry or an (C, 3) array.
    """
    pos = getattr(positions, "positions", positions)
    pos = np.asarray(pos, dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise TokenizerError("positions must be finite")
    frac = (pos + BOX_HALF_WIDTH) / (2.0 * BOX_HALF_WIDTH)
    bins = np.floor(frac * N_SPATIAL_BINS).astype(np.int64)
    return np.clip(bins, 0, N_SPATIAL_BINS - 1)


def raster_serialize(grid: TokenGrid, sample_id: int = 0) -> TokenSequence:
    """Serialize a grid channel-fastest: all channels at m=0, then m=1, ...

    Token i covers channel i mod C at coarse time i // C.
    """
    c, m = grid.n_channels, grid.n_windows
    tokens = grid.windows.transpose(1, 0, 2).reshape(c * m, WINDOW_SAMPLES)
    spatial = bin_coordinates(grid.coords)  # (C, 3)
    coords = np.empty((c * m, 4), dtype=np.int64)
    coords[:, :3] = np.tile(spatial, (m, 1))
    coords[:, 3] = np.repeat(np.arange(m), c)
    return TokenSequence(
        tokens=tokens,
        coords=coords,
        is_register=np.zeros(c * m, dtype=bool),
        sample_id=np.full(c * m, sample_id, dtype=np.int64),
    )


def raster_deserialize(seq: TokenSequence, n_channels: int) -> np.ndarray:
    """Invert :func:`raster_serialize` back to a (C, M, W) window tensor."""
    if seq.is_register.any():
        raise TokenizerError("strip registers before deserializing")
    length = len(seq)
    if length % n_channels:
        raise TokenizerError(
            f"sequence length {length} not divisible by {n_channels} channels"
        )
    m = length // n_channels
    return seq.tokens.reshape(m, n_channels, WINDOW_SAMPLES).transpose(1, 0, 2)


def interleave_registers(seq: TokenSequence, d: int) -> TokenSequence:
    """Insert one register slot before each group of d data tokens.

    Register slots carry the coordinates of the following group's first
    token so rotary position encoding stays well defined; a trailing
    partial group also receives a register.
    """
    if d < 1:
        raise TokenizerError(f"register stride must be >= 1, got {d}")
    length = len(seq)
    n_groups = (length + d - 1) // d
    out_len = length + n_groups
    tokens = np.zeros((out_len, seq.tokens.shape[1]))
    coords = np.zeros((out_len, 4), dtype=np.int64)
    is_register = np.zeros(out_len, dtype=bool)
    sample_id = np.zeros(out_len, dtype=np.int64)
    pos = 0
    for g in range(n_groups):
        lo, hi = g * d, min((g + 1) * d, length)
        coords[pos] = seq.coords[lo]
        sample_id[pos] = seq.sample_id[lo]
        is_register[pos] = True
        pos += 1
        span = hi - lo
        tokens[pos : pos + span] = seq.tokens[lo:hi]
        coords[pos : pos + span] = seq.coords[lo:hi]
        sample_id[pos : pos + span] = seq.sample_id[lo:hi]
        pos += span
    return TokenSequence(tokens, coords, is_register, sample_id)


def strip_registers(seq: TokenSequence) -> TokenSequence:
    """Drop register slots, recovering the pre-interleaving sequence."""
    keep = ~seq.is_register
    return TokenSequence(
        seq.tokens[keep], seq.coords[keep], seq.is_register[keep], seq.sample_id[keep]
    )


def concat_sequences(seqs: list[TokenSequence]) -> TokenSequence:
    return TokenSequence(
        np.concatenate([s.tokens for s in seqs]),
        np.concatenate([s.coords for s in seqs]),
        np.concatenate([s.is_register for s in seqs]),
        np.concatenate([s.sample_id for s in seqs]),
    )


def pack_samples(seqs: list[TokenSequence], max_tokens: int) -> PackedBatch:
    """Pack sequences greedily (first fit) into buffers of max_tokens.

    Sample ids are reassigned to be unique across the batch; the attention
    contract is that tokens see only tokens with their own sample id.
    """
    buckets: list[list[TokenSequence]] = []
    used: list[int] = []
    for i, seq in enumerate(seqs):
        if len(seq) > max_tokens:
            raise TokenizerError(
                f"sequence {i} has {len(seq)} tokens > max {max_tokens}"
            )
        tagged = replace(seq, sample_id=np.full(len(seq), i, dtype=np.int64))
        for b, room in enumerate(used):
            if room + len(seq) <= max_tokens:
                buckets[b].append(tagged)
                used[b] += len(seq)
                break
        else:
            buckets.append([tagged])
            used.append(len(seq))
    return PackedBatch([concat_sequences(bucket) for bucket in buckets])


def visibility_mask(seq: TokenSequence) -> np.ndarray:
    """Boolean (L, L) attention visibility for one packed buffer.

    Token i may attend to j iff both belong to the same sample and lie
    within the sliding window cap.
    """
    same = seq.sample_id[:, None] == seq.sample_id[None, :]
    idx = np.arange(len(seq))
    within = np.abs(idx[:, None] - idx[None, :]) < ATTENTION_WINDOW
    return same & within
