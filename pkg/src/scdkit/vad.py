"""Unsupervised voice activity detection from two short-term features.

Per frame the detector computes energy and spectral centroid, median-smooths
both sequences, and derives one threshold per feature from the smoothed
value histogram: the threshold sits between the two largest local maxima of
the bin counts, weighted toward the lower one.  A frame is voiced only when
both smoothed features exceed their thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioClip, FrameGrid, frame_signal
from .errors import ClipTooShortError, MaskMismatchError, TooFewValuesError

_MIN_HIST_VALUES = 10


@dataclass(frozen=True)
class VadConfig:
    win_ms: float = 50.0
    hop_ms: float = 25.0
    smooth_order: int = 5
    smooth_passes: int = 2
    hist_bins: int = 40
    local_max_weight: float = 5.0
    strictness_scale: float = 1.0

    def __post_init__(self):
        if not (self.win_ms >= self.hop_ms > 0):
            raise ValueError("need win_ms >= hop_ms > 0")
        if self.smooth_order < 3 or self.smooth_order % 2 == 0:
            raise ValueError("smooth_order must be odd and >= 3")
        if self.smooth_passes < 1:
            raise ValueError("smooth_passes must be >= 1")
        if self.hist_bins < 10:
            raise ValueError("hist_bins must be >= 10")
        if self.local_max_weight <= 0:
            raise ValueError("local_max_weight must be > 0")
        if self.strictness_scale < 1.0:
            raise ValueError("strictness_scale must be >= 1")


@dataclass(frozen=True)
class VadMask:
    """Per-frame voicing decision plus the evidence it was made from."""

    voiced: np.ndarray
    energies: np.ndarray
    centroids: np.ndarray
    smoothed_energies: np.ndarray
    smoothed_centroids: np.ndarray
    energy_threshold: float
    centroid_threshold: float
    win_samples: int
    hop_samples: int

    @property
    def n_frames(self) -> int:
        return int(self.voiced.shape[0])


def short_term_energy(frame: np.ndarray) -> float:
    """Mean squared amplitude of one frame."""
    frame = np.asarray(frame, dtype=np.float64)
    return float(np.mean(frame * frame))


def spectral_centroid(frame: np.ndarray) -> float:
    """Magnitude-weighted mean positive-frequency bin index.

    Bins are indexed 1..K over the positive-frequency half spectrum, so a
    flat spectrum yields (K + 1) / 2.  A zero spectrum yields 0.
    """
    frame = np.asarray(frame, dtype=np.float64)
    mag = np.abs(np.fft.rfft(frame))[1:]
    total = float(mag.sum())
    if total <= 0.0:
        return 0.0
    k = np.arange(1, mag.shape[0] + 1, dtype=np.float64)
    return float(np.dot(k, mag) / total)


def median_smooth(values, order: int, passes: int = 1) -> np.ndarray:
    """Sliding median filter with edge replication, applied repeatedly."""
    if order < 3 or order % 2 == 0:
        raise ValueError("order must be odd and >= 3")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    x = np.asarray(values, dtype=np.float64)
    half = order // 2
    for _ in range(passes):
        padded = np.pad(x, half, mode="edge")
        x = np.median(sliding_window_view(padded, order), axis=1)
    return x


def _local_maxima(counts: np.ndarray) -> list[int]:
    """Indices of strict local maxima, plateau-aware, endpoints included.

    A plateau counts once, at its first bin; a missing neighbor (array end)
    compares as minus infinity.
    """
    n = counts.shape[0]
    maxima = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and counts[j + 1] == counts[i]:
            j += 1
        left = counts[i - 1] if i > 0 else -np.inf
        right = counts[j + 1] if j + 1 < n else -np.inf
        if counts[i] > left and counts[i] > right:
            maxima.append(i)
        i = j + 1
    return maxima


def histogram_threshold(values, cfg: VadConfig) -> float:
    """Threshold from the histogram of a feature sequence.

    With local maxima at positions M1 <= M2 (bin centers of the two
    tallest), the threshold is (W * M1 + M2) / (W + 1); fewer than two
    maxima fall back to the plain mean.  The result is multiplied by
    the strictness scale.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape[0] < _MIN_HIST_VALUES:
        raise TooFewValuesError(
            f"need at least {_MIN_HIST_VALUES} values, got {vals.shape[0]}"
        )
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        return float(vals.mean()) * cfg.strictness_scale
    counts, edges = np.histogram(vals, bins=cfg.hist_bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    smoothed = median_smooth(counts.astype(np.float64), order=3, passes=1)
    maxima = _local_maxima(smoothed)
    if len(maxima) < 2:
        return float(vals.mean()) * cfg.strictness_scale
    order = np.argsort(-smoothed[maxima], kind="stable")
    top = sorted(maxima[i] for i in order[:2])
    m1, m2 = centers[top[0]], centers[top[1]]
    w = cfg.local_max_weight
    return float((w * m1 + m2) / (w + 1.0)) * cfg.strictness_scale


def detect_voiced(clip: AudioClip, cfg: VadConfig = VadConfig()) -> VadMask:
    """Classify every frame of a clip as voiced or unvoiced."""
    grid = frame_signal(clip, cfg.win_ms, cfg.hop_ms)
    if grid.n_frames < _MIN_HIST_VALUES:
        raise ClipTooShortError(
            f"need at least {_MIN_HIST_VALUES} frames for thresholding, "
            f"got {grid.n_frames}"
        )
    frames = grid.frames
    energies = np.mean(frames * frames, axis=1)

    mags = np.abs(np.fft.rfft(frames, axis=1))[:, 1:]
    totals = mags.sum(axis=1)
    k = np.arange(1, mags.shape[1] + 1, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        centroids = np.where(totals > 0.0, mags @ k / np.where(totals > 0, totals, 1.0), 0.0)

    e_s = median_smooth(energies, cfg.smooth_order, cfg.smooth_passes)
    c_s = median_smooth(centroids, cfg.smooth_order, cfg.smooth_passes)
    t_e = histogram_threshold(e_s, cfg)
    t_c = histogram_threshold(c_s, cfg)
    voiced = (e_s > t_e) & (c_s > t_c)
    return VadMask(
        voiced=voiced,
        energies=energies,
        centroids=centroids,
        smoothed_energies=e_s,
        smoothed_centroids=c_s,
        energy_threshold=t_e,
        centroid_threshold=t_c,
        win_samples=grid.win_samples,
        hop_samples=grid.hop_samples,
    )


def remove_unvoiced(clip: AudioClip, mask: VadMask) -> AudioClip:
    """Splice out unvoiced audio.

    Each frame owns the hop-sized slice starting at its own start sample,
    so the output length is exactly hop * voiced count.  An all-unvoiced
    mask yields an empty clip flagged silent.
    """
    win, hop = mask.win_samples, mask.hop_samples
    if clip.n_samples < win:
        raise MaskMismatchError("mask was not derived from this clip")
    expected = (clip.n_samples - win) // hop + 1
    if expected != mask.n_frames:
        raise MaskMismatchError(
            f"mask has {mask.n_frames} frames but clip framing gives {expected}"
        )
    owned = clip.samples[: mask.n_frames * hop].reshape(mask.n_frames, hop)
    kept = owned[mask.voiced].reshape(-1)
    return AudioClip(samples=kept, sample_rate=clip.sample_rate, silent=kept.size == 0)


def save_mask(path, mask: VadMask) -> None:
    """Write the voiced/unvoiced decisions as one 0/1 line per frame."""
    with open(path, "w") as fh:
        for v in mask.voiced:
            fh.write("1\n" if v else "0\n")


def load_mask_flags(path) -> np.ndarray:
    """Read back the 0/1 flags written by save_mask."""
    with open(path) as fh:
        return np.array([line.strip() == "1" for line in fh if line.strip()], dtype=bool)
