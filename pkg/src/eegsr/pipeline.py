"""Deterministic EEG preprocessing: resampling, filtering, referencing,
line-noise removal, channel/epoch quality control, and normalization.

Continuous multichannel recordings go in, normalized 5 s / 256 Hz epochs with
per-channel bad flags come out. Every operation is a pure function of its
inputs, so recordings can be processed in parallel and identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

logger = logging.getLogger(__name__)

EPOCH_SFREQ = 256.0
EPOCH_SAMPLES = 1280          # 5 s at 256 Hz
MIN_RECORDING_SECONDS = 10.0  # shorter recordings are discarded
NORM_SEGMENT_SECONDS = 600.0  # z-score statistics per contiguous 10 min block
TRAIN_SCALE = 0.1             # target SD for training data

LINE_BAND_LOW_HZ = 45.0       # line-noise search band lower edge
LINE_PEAK_MADS = 10.0         # peak threshold above local median, in MADs
LINE_LOCAL_HALF_WIDTH_HZ = 2.0

FLAT_MAD_FACTOR = 5.0
FLAT_SD_FLOOR = 1e-12
CLIP_FRACTION = 0.005         # >= 0.5% of samples at a rail means clipping
CLIP_REL_TOL = 1e-6

QC_LOG_SD_Z = 3.0             # "excessive standardized variability"
QC_MAX_BAD_FRACTION = 0.5


class PipelineError(ValueError):
    """Raised when an input violates a preprocessing contract."""


@dataclass(frozen=True)
class ChannelGeometry:
    """Channel labels plus per-channel 3D scalp positions (head frame)."""

    labels: tuple[str, ...]
    positions: np.ndarray  # (C, 3) float

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise PipelineError(f"positions must be (C, 3), got {pos.shape}")
        if len(labels) != pos.shape[0]:
            raise PipelineError(
                f"{len(labels)} labels but {pos.shape[0]} positions"
            )
        if len(set(labels)) != len(labels):
            raise PipelineError("channel labels must be unique")
        if not np.all(np.isfinite(pos)):
            raise PipelineError("channel positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_channels(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ChannelGeometry":
        idx = np.asarray(idx)
        return ChannelGeometry(
            tuple(self.labels[i] for i in idx), self.positions[idx]
        )


@dataclass
class Recording:
    """Continuous multichannel signal with sampling rate and geometry."""

    samples: np.ndarray  # (C, T)
    sfreq: float
    geometry: ChannelGeometry

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise PipelineError("samples must be a C x T matrix")
        if self.samples.shape[0] != self.geometry.n_channels:
            raise PipelineError(
                f"{self.samples.shape[0]} signal rows but geometry has "
                f"{self.geometry.n_channels} channels"
            )
        if self.samples.shape[1] < 1:
            raise PipelineError("recording must contain at least one sample")
        if self.sfreq <= 0:
            raise PipelineError(f"sampling rate must be positive, got {self.sfreq}")
        if not np.all(np.isfinite(self.samples)):
            bad = np.argwhere(~np.isfinite(self.samples))
            raise PipelineError(
                f"non-finite samples, first at channel {bad[0][0]}, "
                f"index {bad[0][1]}"
            )

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sfreq


@dataclass
class Epoch:
    """One 5 s, 256 Hz segment with per-channel bad flags."""

    samples: np.ndarray  # (C, 1280)
    geometry: ChannelGeometry
    bad_channels: np.ndarray  # (C,) bool
    source_offset: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != EPOCH_SAMPLES:
            raise PipelineError(
                f"epoch must have exactly {EPOCH_SAMPLES} samples per channel, "
                f"got shape {self.samples.shape}"
            )
        self.bad_channels = np.asarray(self.bad_channels, dtype=bool)
        if self.bad_channels.shape != (self.samples.shape[0],):
            raise PipelineError("bad_channels length must equal channel count")
        if self.samples.shape[0] != self.geometry.n_channels:
            raise PipelineError("epoch rows must match geometry channel count")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


@dataclass
class QcReport:
    """Per-channel quality flags plus epoch- and spectrum-level findings."""

    flat_channels: np.ndarray
    clipped_channels: np.ndarray
    high_variance_channels: np.ndarray
    dropped_epochs: list[int] = field(default_factory=list)
    notch_freqs: list[float] = field(default_factory=list)

    def to_text(self, labels: tuple[str, ...] | None = None) -> str:
        """Render the report as a structured plain-text summary."""
        c = len(self.flat_channels)
        if labels is None:
            labels = tuple(f"ch{i}" for i in range(c))
        lines = ["quality control report", f"channels: {c}"]
        for name, flags in (
            ("flat", self.flat_channels),
            ("clipped", self.clipped_channels),
            ("high_variance", self.high_variance_channels),
        ):
            hits = [labels[i] for i in np.flatnonzero(np.asarray(flags))]
            lines.append(f"{name}: {', '.join(hits) if hits else 'none'}")
        lines.append(
            "dropped_epochs: "
            + (", ".join(str(i) for i in self.dropped_epochs) or "none")
        )
        lines.append(
            "notch_freqs_hz: "
            + (", ".join(f"{f:g}" for f in self.notch_freqs) or "none")
        )
        return "\n".join(lines)


def resample(rec: Recording, target_sfreq: float) -> Recording:
    """Resample to ``target_sfreq`` with polyphase anti-alias filtering.

    Equal rates return the input unchanged. Upsampling from lower rates is
    allowed; duration is preserved to within one output sample.
    """
    if target_sfreq <= 0:
        raise PipelineError(f"target sampling rate must be positive, got {target_sfreq}")
    if target_sfreq == rec.sfreq:
        return rec
    ratio = Fraction(target_sfreq / rec.sfreq).limit_denominator(10_000)
    up, down = ratio.numerator, ratio.denominator
    # long Kaiser-windowed filter: passband ripple well under 1e-3
    max_rate = max(up, down)
    taps = sps.firwin(64 * max_rate + 1, 1.0 / max_rate, window=("kaiser", 12.26))
    out = sps.resample_poly(rec.samples, up, down, axis=1, window=taps)
    return Recording(out, float(target_sfreq), rec.geometry)


def _butter_sos_highpass(cutoff: float, sfreq: float) -> np.ndarray:
    return sps.butter(4, cutoff, btype="highpass", fs=sfreq, output="sos")


def _filtfilt(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Zero-phase filtering; short signals are zero-padded with a warning."""
    n_sections = sos.shape[0]
    padlen = 3 * (2 * n_sections + 1)
    if x.shape[-1] <= 3 * padlen:
        warnings.warn(
            "recording shorter than 3x filter impulse length; "
            "zero-padding before zero-phase filtering",
            stacklevel=3,
        )
        pad = 3 * padlen
        padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
        return sps.sosfiltfilt(sos, padded, axis=-1)[..., pad:-pad]
    return sps.sosfiltfilt(sos, x, axis=-1)


def highpass(rec: Recording, cutoff: float = 0.5) -> Recording:
    """Remove slow drifts with a zero-phase order-4 Butterworth high-pass."""
    nyq = rec.sfreq / 2.0
    if not 0 < cutoff < nyq:
        raise PipelineError(f"cutoff {cutoff} Hz outside (0, Nyquist={nyq}) Hz")
    sos = _butter_sos_highpass(cutoff, rec.sfreq)
    return Recording(_filtfilt(sos, rec.samples), rec.sfreq, rec.geometry)


def common_average_reference(rec: Recording) -> Recording:
    """Subtract the instantaneous mean across channels from every channel."""
    if rec.n_channels < 2:
        raise PipelineError("common average reference needs at least 2 channels")
    out = rec.samples - rec.samples.mean(axis=0, keepdims=True)
    return Recording(out, rec.sfreq, rec.geometry)


def welch_psd(
    x: np.ndarray,
    sfreq: float,
    seg_len: int,
    overlap: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Welch power spectral density of a 1D signal (Hann window).

    Returns (freqs, power) with frequency resolution sfreq / seg_len.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise PipelineError("welch_psd expects a 1D signal")
    if seg_len > x.shape[0]:
        raise PipelineError(
            f"segment length {seg_len} exceeds signal length {x.shape[0]}"
        )
    if not 0 <= overlap < 1:
        raise PipelineError(f"overlap fraction must be in [0, 1), got {overlap}")
    freqs, power = sps.welch(
        x,
        fs=sfreq,
        window="hann",
        nperseg=seg_len,
        noverlap=int(round(overlap * seg_len)),
        detrend=False,
    )
    return freqs, power


def detect_line_noise(rec: Recording, seg_seconds: float = 4.0) -> list[float]:
    """Find narrowband mains peaks between 45 Hz and Nyquist.

    The channel-averaged Welch log-spectrum is compared per bin against the
    median of a +/-2 Hz neighborhood; bins more than 10 local MADs above it
    are peaks. Harmonics strong enough to clear the threshold are reported
    on their own. Returns peak frequencies in Hz, possibly empty.
    """
    if rec.duration < MIN_RECORDING_SECONDS:
        raise PipelineError(
            f"line-noise detection needs >= {MIN_RECORDING_SECONDS:g} s, "
            f"got {rec.duration:g} s"
        )
    nyq = rec.sfreq / 2.0
    seg_len = min(int(seg_seconds * rec.sfreq), rec.n_samples)
    mean_power = None
    for ch in rec.samples:
        freqs, power = welch_psd(ch, rec.sfreq, seg_len)
        mean_power = power if mean_power is None else mean_power + power
    mean_power = mean_power / rec.n_channels
    log_power = np.log10(np.maximum(mean_power, 1e-300))

    band = (freqs > LINE_BAND_LOW_HZ) & (freqs < nyq)
    df = freqs[1] - freqs[0]
    half = max(1, int(round(LINE_LOCAL_HALF_WIDTH_HZ / df)))

    exceeds = np.zeros(freqs.shape, dtype=bool)
    for i in np.flatnonzero(band):
        lo, hi = max(0, i - half), min(len(freqs), i + half + 1)
        local = log_power[lo:hi]
        med = np.median(local)
        mad = np.median(np.abs(local - med))
        exceeds[i] = log_power[i] > med + LINE_PEAK_MADS * max(mad, 1e-12)

    peaks: list[float] = []
    idx = np.flatnonzero(exceeds)
    if idx.size == 0:
        return peaks
    # merge contiguous flagged bins into one peak at the strongest bin
    splits = np.flatnonzero(np.diff(idx) > 1) + 1
    for cluster in np.split(idx, splits):
        best = cluster[np.argmax(mean_power[cluster])]
        peaks.append(float(freqs[best]))
    return peaks


def notch_filter(rec: Recording, freqs, bw: float = 1.0) -> Recording:
    """Zero-phase order-4 Butterworth band-stop at each frequency.

    Frequencies at or above Nyquist are skipped with a warning. An empty
    frequency list is the identity.
    """
    nyq = rec.sfreq / 2.0
    out = rec.samples
    for f in freqs:
        if f >= nyq:
            warnings.warn(f"notch frequency {f:g} Hz >= Nyquist {nyq:g} Hz, skipping")
            continue
        lo = max(f - bw / 2.0, 1e-3)
        hi = min(f + bw / 2.0, nyq * 0.999)
        sos = sps.butter(4, [lo, hi], btype="bandstop", fs=rec.sfreq, output="sos")
        out = _filtfilt(sos, out)
    return Recording(out, rec.sfreq, rec.geometry)


def detect_bad_channels(rec: Recording) -> QcReport:
    """Flag near-flat and clipped channels on the continuous recording.

    Flat: SD below median(SDs) - 5 MAD(SDs), or below an absolute floor.
    Clipped: at least 0.5% of samples within a relative tolerance of the
    channel minimum or maximum. Flags are independent per channel.
    """
    if rec.n_channels < 2:
        raise PipelineError("bad-channel detection needs at least 2 channels")
    sds = rec.samples.std(axis=1)
    med = np.median(sds)
    mad = np.median(np.abs(sds - med))
    flat = (sds < med - FLAT_MAD_FACTOR * mad) | (sds < FLAT_SD_FLOOR)

    clipped = np.zeros(rec.n_channels, dtype=bool)
    for c in range(rec.n_channels):
        x = rec.samples[c]
        lo, hi = x.min(), x.max()
        tol = CLIP_REL_TOL * (hi - lo)
        n = x.shape[0]
        at_hi = np.count_nonzero(x >= hi - tol)
        at_lo = np.count_nonzero(x <= lo + tol)
        clipped[c] = max(at_hi, at_lo) >= CLIP_FRACTION * n

    return QcReport(
        flat_channels=flat,
        clipped_channels=clipped,
        high_variance_channels=np.zeros(rec.n_channels, dtype=bool),
    )


def epoch_segment(rec: Recording, bad_channels=None) -> list[Epoch]:
    """Cut a 256 Hz recording into non-overlapping 1280-sample epochs.

    The trailing remainder is dropped. Recordings shorter than 10 s yield
    an empty list (logged). Channels flagged in ``bad_channels`` are zeroed
    in every epoch and marked in ``Epoch.bad_channels``.
    """
    if rec.sfreq != EPOCH_SFREQ:
        raise PipelineError(
            f"epoching requires {EPOCH_SFREQ:g} Hz input, got {rec.sfreq:g} Hz; "
            "resample first"
        )
    if bad_channels is None:
        bad_channels = np.zeros(rec.n_channels, dtype=bool)
    bad_channels = np.asarray(bad_channels, dtype=bool)
    if rec.duration < MIN_RECORDING_SECONDS:
        logger.warning(
            "discarding %.2f s recording (< %.0f s minimum)",
            rec.duration,
            MIN_RECORDING_SECONDS,
        )
        return []
    n_epochs = rec.n_samples // EPOCH_SAMPLES
    epochs = []
    for i in range(n_epochs):
        start = i * EPOCH_SAMPLES
        seg = rec.samples[:, start : start + EPOCH_SAMPLES].copy()
        seg[bad_channels] = 0.0
        epochs.append(
            Epoch(seg, rec.geometry, bad_channels.copy(), source_offset=start)
        )
    return epochs


def qc_epochs(epochs: list[Epoch]) -> tuple[list[Epoch], QcReport]:
    """Flag outlier channels per epoch and drop unusable epochs.

    A channel (within one epoch) is bad when the z-score of its log-SD
    exceeds 3 relative to the recording-wide distribution over all
    epoch-channel pairs; an epoch is additionally dropped when its own
    log-SD z-score exceeds 3 or when more than half its channels are bad.
    Surviving bad channels are zero-filled.
    """
    if not epochs:
        return [], QcReport(
            np.zeros(0, bool), np.zeros(0, bool), np.zeros(0, bool)
        )
    c = epochs[0].n_channels
    ch_sd = np.stack([e.samples.std(axis=1) for e in epochs])  # (E, C)
    pre_bad = np.stack([e.bad_channels for e in epochs])       # (E, C)
    valid = ~pre_bad & (ch_sd > FLAT_SD_FLOOR)

    log_sd = np.full(ch_sd.shape, np.nan)
    log_sd[valid] = np.log(ch_sd[valid])
    mu = np.nanmean(log_sd) if valid.any() else 0.0
    sigma = np.nanstd(log_sd) if valid.any() else 0.0
    if sigma < 1e-12:
        ch_flag = np.zeros(ch_sd.shape, dtype=bool)
    else:
        # one-sided: only excessive variability flags a channel
        with np.errstate(invalid="ignore"):
            ch_flag = valid & (log_sd - mu > QC_LOG_SD_Z * sigma)

    # epoch-level variability is judged after channel-level flags, so a
    # single wild channel cannot sink an otherwise clean epoch
    clean = ~pre_bad & ~ch_flag
    ep_sd = np.array(
        [
            e.samples[clean[i]].std() if clean[i].any() else 0.0
            for i, e in enumerate(epochs)
        ]
    )
    ep_valid = ep_sd > FLAT_SD_FLOOR
    ep_log = np.where(ep_valid, np.log(np.maximum(ep_sd, FLAT_SD_FLOOR)), np.nan)
    ep_mu = np.nanmean(ep_log) if ep_valid.any() else 0.0
    ep_sigma = np.nanstd(ep_log) if ep_valid.any() else 0.0
    if ep_sigma < 1e-12:
        ep_flag = np.zeros(len(epochs), dtype=bool)
    else:
        with np.errstate(invalid="ignore"):
            ep_flag = ep_valid & (ep_log - ep_mu > QC_LOG_SD_Z * ep_sigma)

    kept: list[Epoch] = []
    dropped: list[int] = []
    any_high_var = np.zeros(c, dtype=bool)
    for i, epoch in enumerate(epochs):
        bad = epoch.bad_channels | ch_flag[i]
        any_high_var |= ch_flag[i]
        if ep_flag[i] or bad.mean() > QC_MAX_BAD_FRACTION:
            dropped.append(i)
            continue
        seg = epoch.samples.copy()
        seg[bad] = 0.0
        kept.append(Epoch(seg, epoch.geometry, bad, epoch.source_offset))

    report = QcReport(
        flat_channels=np.zeros(c, dtype=bool),
        clipped_channels=np.zeros(c, dtype=bool),
        high_variance_channels=any_high_var,
        dropped_epochs=dropped,
    )
    return kept, report


def zscore_normalize(rec: Recording, exclude=None) -> Recording:
    """Standardize with one global mean/SD per contiguous 10-minute segment.

    Statistics pool all channel samples jointly (channels in ``exclude``
    are left out of the statistics but still transformed), so the relative
    amplitude structure across channels is preserved within a segment. A
    trailing short segment gets its own statistics.
    """
    if exclude is None:
        exclude = np.zeros(rec.n_channels, dtype=bool)
    exclude = np.asarray(exclude, dtype=bool)
    if exclude.all():
        raise PipelineError("cannot normalize: every channel excluded")
    seg_samples = int(NORM_SEGMENT_SECONDS * rec.sfreq)
    out = np.empty_like(rec.samples)
    for start in range(0, rec.n_samples, seg_samples):
        seg = rec.samples[:, start : start + seg_samples]
        stats_pool = seg[~exclude]
        sd = stats_pool.std()
        if sd <= 0:
            raise PipelineError(
                f"segment starting at sample {start} has zero variance"
            )
        out[:, start : start + seg_samples] = (seg - stats_pool.mean()) / sd
    return Recording(out, rec.sfreq, rec.geometry)


def rescale_for_training(epochs: list[Epoch]) -> list[Epoch]:
    """Scale z-scored epochs to the SD-0.1 training convention."""
    return [
        replace(e, samples=e.samples * TRAIN_SCALE) for e in epochs
    ]


def unscale_from_training(epochs: list[Epoch]) -> list[Epoch]:
    """Invert :func:`rescale_for_training`."""
    return [
        replace(e, samples=e.samples / TRAIN_SCALE) for e in epochs
    ]


def preprocess_recording(
    rec: Recording,
    target_sfreq: float = EPOCH_SFREQ,
    highpass_hz: float = 0.5,
) -> tuple[list[Epoch], QcReport]:
    """Run the full fixed-order pipeline on one continuous recording.

    Order: resample, high-pass, common average reference, adaptive notch,
    bad-channel detection, per-segment z-scoring, epoching, epoch-level QC.
    Returns normalized epochs (z-score units) and the merged QC report.
    """
    rec = resample(rec, target_sfreq)
    if rec.duration < MIN_RECORDING_SECONDS:
        logger.warning(
            "discarding %.2f s recording (< %.0f s minimum)",
            rec.duration,
            MIN_RECORDING_SECONDS,
        )
        empty = np.zeros(rec.n_channels, dtype=bool)
        return [], QcReport(empty, empty.copy(), empty.copy())
    rec = highpass(rec, highpass_hz)
    rec = common_average_reference(rec)
    notch_freqs = detect_line_noise(rec)
    rec = notch_filter(rec, notch_freqs)
    channel_report = detect_bad_channels(rec)
    hard_bad = channel_report.flat_channels | channel_report.clipped_channels
    rec = zscore_normalize(rec, exclude=hard_bad)
    epochs = epoch_segment(rec, bad_channels=hard_bad)
    epochs, epoch_report = qc_epochs(epochs)
    report = QcReport(
        flat_channels=channel_report.flat_channels,
        clipped_channels=channel_report.clipped_channels,
        high_variance_channels=epoch_report.high_variance_channels,
        dropped_epochs=epoch_report.dropped_epochs,
        notch_freqs=notch_freqs,
    )
    return epochs, report
