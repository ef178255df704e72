"""Synthetic EEG corpus: spatially smooth band-limited sources on a
standard electrode layout, plus pink noise.

Each recording is a sum of K rank-one terms, a spatial bump (von
Mises-Fisher shaped weight around a random direction) times a random
band-limited source, so the field is smooth across the scalp and
spherical-spline interpolation is a meaningful baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import ChannelGeometry, Recording

HEAD_RADIUS = 0.09  # meters

# 10-10 style rows: (sagittal angle from vertex, degrees; negative is
# anterior) with (label, lateral angle) entries. The idealized spherical
# layout places the outer Fp/O ring 72 degrees from the vertex and the
# preauricular points on the equator.
_LAYOUT_ROWS = [
    (-72, [("Fp1", -18), ("Fpz", 0), ("Fp2", 18)]),
    (-54, [("AF7", -54), ("AF3", -27), ("AFz", 0), ("AF4", 27), ("AF8", 54)]),
    (
        -36,
        [
            ("F7", -72), ("F5", -54), ("F3", -36), ("F1", -18), ("Fz", 0),
            ("F2", 18), ("F4", 36), ("F6", 54), ("F8", 72),
        ],
    ),
    (
        -18,
        [
            ("FT7", -72), ("FC5", -54), ("FC3", -36), ("FC1", -18), ("FCz", 0),
            ("FC2", 18), ("FC4", 36), ("FC6", 54), ("FT8", 72),
        ],
    ),
    (
        0,
        [
            ("T7", -90), ("C5", -54), ("C3", -36), ("C1", -18), ("Cz", 0),
            ("C2", 18), ("C4", 36), ("C6", 54), ("T8", 90),
        ],
    ),
    (
        18,
        [
            ("TP7", -72), ("CP5", -54), ("CP3", -36), ("CP1", -18), ("CPz", 0),
            ("CP2", 18), ("CP4", 36), ("CP6", 54), ("TP8", 72),
        ],
    ),
    (
        36,
        [
            ("P7", -72), ("P5", -54), ("P3", -36), ("P1", -18), ("Pz", 0),
            ("P2", 18), ("P4", 36), ("P6", 54), ("P8", 72),
        ],
    ),
    (
        54,
        [
            ("PO7", -54), ("PO5", -36), ("PO3", -18), ("POz", 0),
            ("PO4", 18), ("PO6", 36), ("PO8", 54),
        ],
    ),
    (72, [("O1", -18), ("Oz", 0), ("O2", 18)]),
    (90, [("Iz", 0)]),
]


def standard_layout_64() -> ChannelGeometry:
    """A 64-position scalp layout on a 9 cm sphere with 10-10 labels."""
    labels, positions = [], []
    for sagittal, row in _LAYOUT_ROWS:
        s = np.deg2rad(sagittal)
        for label, lateral in row:
            l = np.deg2rad(lateral)
            u = np.array(
                [np.sin(l) * np.cos(s), -np.sin(s), np.cos(l) * np.cos(s)]
            )
            labels.append(label)
            positions.append(HEAD_RADIUS * u)
    return ChannelGeometry(tuple(labels), np.array(positions))


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic corpus parameters."""

    n_channels: int = 16
    n_sources: int = 3
    bump_concentration: float = 5.0
    band_hz: tuple[float, float] = (4.0, 30.0)
    n_band_components: int = 5
    noise_level: float = 0.1
    seed: int = 0
    n_recordings: int = 10
    duration: float = 60.0
    sfreq: float = 256.0

    def __post_init__(self):
        if self.n_channels > 64:
            raise ValueError("layout provides at most 64 channels")
        if self.n_sources < 1:
            raise ValueError("need at least one source")


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-SD 1/f noise via spectral shaping of white noise."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shape = np.zeros_like(freqs)
    shape[1:] = 1.0 / np.sqrt(freqs[1:])
    x = np.fft.irfft(spec * shape, n=n)
    return x / x.std()


def _band_source(spec: SynthSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-SD sum of random sinusoids inside the configured band."""
    t = np.arange(n) / spec.sfreq
    lo, hi = spec.band_hz
    out = np.zeros(n)
    for _ in range(spec.n_band_components):
        f = rng.uniform(lo, hi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.sin(2.0 * np.pi * f * t + phase)
    return out / out.std()


def synth_generate(spec: SynthSpec) -> list[Recording]:
    """Generate a deterministic corpus of smooth-field recordings."""
    rng = np.random.default_rng(spec.seed)
    layout = standard_layout_64()
    subset = np.sort(rng.choice(layout.n_channels, spec.n_channels, replace=False))
    geometry = layout.subset(subset)
    unit_pos = geometry.positions / np.linalg.norm(
        geometry.positions, axis=1, keepdims=True
    )
    all_unit = layout.positions / np.linalg.norm(layout.positions, axis=1, keepdims=True)

    n = int(round(spec.duration * spec.sfreq))
    recordings = []
    for _ in range(spec.n_recordings):
        x = np.zeros((spec.n_channels, n))
        for _ in range(spec.n_sources):
            # bump center near a random electrode of the full layout so
            # sources stay over the covered scalp area
            anchor = all_unit[rng.integers(len(all_unit))]
            direction = anchor + 0.25 * rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            weights = np.exp(
                spec.bump_concentration * (unit_pos @ direction - 1.0)
            )
            source = _band_source(spec, n, rng)
            x += np.outer(weights, source)
        if spec.noise_level > 0:
            for c in range(spec.n_channels):
                x[c] += spec.noise_level * pink_noise(n, rng)
        recordings.append(Recording(x, spec.sfreq, geometry))
    return recordings
