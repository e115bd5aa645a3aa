"""Cepstral features: MFCC, delta stacking, normalization, frame grouping.

The base representation is 13 mel-frequency cepstral coefficients (the
zeroth kept) from 25 ms Hamming windows hopped every 10 ms, extended with
first and second time derivatives to 39 dimensions, mean/variance
normalized, and finally grouped into overlapping blocks of consecutive
frames flattened into one long vector per block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio_io import AudioClip, frame_signal
from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    SampleRateMismatchError,
    TooFewFramesError,
)
from .validation import check_finite

_LOG_FLOOR = 1e-10
_STD_FLOOR = 1e-8
_MAGIC = b"SCDFEAT1"


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 23
    n_ceps: int = 13
    delta_halfwidth: int = 2
    fft_size: int | None = None

    def __post_init__(self):
        if not (self.win_ms > self.hop_ms > 0):
            raise ValueError("need win_ms > hop_ms > 0")
        if self.n_ceps * 3 != 39:
            raise ValueError("cepstral count must give 39 stacked dimensions")
        if self.n_mels < self.n_ceps:
            raise ValueError("need at least as many mel filters as coefficients")
        if self.delta_halfwidth < 1:
            raise ValueError("delta_halfwidth must be >= 1")

    def resolved_fft_size(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        win = int(self.win_ms * self.sample_rate / 1000.0)
        n = 1
        while n < win:
            n <<= 1
        return n


@dataclass(frozen=True)
class FeatureSequence:
    """A run of fixed-rate feature frames with their time geometry."""

    frames: np.ndarray
    frame_hop_s: float
    frame_win_s: float

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise DimensionMismatchError(
                f"feature frames must be 2-D, got shape {self.frames.shape}"
            )
        check_finite(self.frames, "feature frames")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    def frame_start_time(self, i: int) -> float:
        return i * self.frame_hop_s


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(sample_rate: int, n_mels: int, n_fft: int) -> np.ndarray:
    """Triangular filters spaced evenly on the mel scale from 0 to Nyquist."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, float(_hz_to_mel(nyquist)), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, bin_freqs.shape[0]))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mfcc(clip: AudioClip, cfg: MfccConfig = MfccConfig()) -> FeatureSequence:
    """Mel-frequency cepstra of a clip.

    Per frame: Hamming window, magnitude FFT, triangular mel filterbank,
    log with a small floor, then an orthonormal DCT-II keeping the first
    n_ceps coefficients including the zeroth.  No pre-emphasis, no
    liftering.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise SampleRateMismatchError(
            f"clip rate {clip.sample_rate} != configured {cfg.sample_rate}"
        )
    grid = frame_signal(clip, cfg.win_ms, cfg.hop_ms)
    n_fft = cfg.resolved_fft_size()
    if n_fft < grid.win_samples:
        raise ValueError("fft_size smaller than the analysis window")
    window = np.hamming(grid.win_samples)
    mags = np.abs(np.fft.rfft(grid.frames * window, n=n_fft, axis=1))
    fb = _mel_filterbank(cfg.sample_rate, cfg.n_mels, n_fft)
    mel_energies = mags @ fb.T
    logs = np.log(np.maximum(mel_energies, _LOG_FLOOR))
    ceps = dct(logs, type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]
    return FeatureSequence(
        frames=ceps,
        frame_hop_s=cfg.hop_ms / 1000.0,
        frame_win_s=cfg.win_ms / 1000.0,
    )


def add_deltas(seq: FeatureSequence, halfwidth: int = 2) -> FeatureSequence:
    """Append first and second derivatives, tripling the dimension.

    Derivatives come from a linear regression over +-halfwidth neighbors
    with edge frames replicated.
    """
    if halfwidth < 1:
        raise ValueError("halfwidth must be >= 1")
    if seq.n_frames < 2 * halfwidth + 1:
        raise TooFewFramesError(
            f"need at least {2 * halfwidth + 1} frames for halfwidth "
            f"{halfwidth}, got {seq.n_frames}"
        )

    def regress(x: np.ndarray) -> np.ndarray:
        padded = np.pad(x, ((halfwidth, halfwidth), (0, 0)), mode="edge")
        out = np.zeros_like(x)
        for n in range(1, halfwidth + 1):
            out += n * (padded[halfwidth + n : halfwidth + n + x.shape[0]]
                        - padded[halfwidth - n : halfwidth - n + x.shape[0]])
        return out / (2.0 * sum(n * n for n in range(1, halfwidth + 1)))

    delta = regress(seq.frames)
    delta2 = regress(delta)
    return replace(seq, frames=np.hstack([seq.frames, delta, delta2]))


def feature_stats(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Pooled per-dimension mean and standard deviation over sequences."""
    stacked = np.vstack([s.frames for s in seqs])
    return stacked.mean(axis=0), stacked.std(axis=0)


def apply_cmvn(seq: FeatureSequence, mean: np.ndarray, std: np.ndarray) -> FeatureSequence:
    """Normalize with the given per-dimension statistics."""
    return replace(seq, frames=(seq.frames - mean) / np.maximum(std, _STD_FLOOR))


def cmvn(seq: FeatureSequence) -> FeatureSequence:
    """Normalize each dimension to zero mean, unit variance over the
    sequence itself."""
    mean, std = feature_stats([seq])
    return apply_cmvn(seq, mean, std)


def concat_frames(seq: FeatureSequence, win_frames: int = 10, hop_frames: int = 3) -> FeatureSequence:
    """Group win_frames consecutive frames into one flat vector, hopping
    hop_frames; the trailing partial group is dropped."""
    if win_frames < 1 or hop_frames < 1:
        raise ValueError("win_frames and hop_frames must be >= 1")
    if seq.n_frames < win_frames:
        raise TooFewFramesError(
            f"need at least {win_frames} frames to form one group, got {seq.n_frames}"
        )
    n = (seq.n_frames - win_frames) // hop_frames + 1
    starts = np.arange(n) * hop_frames
    blocks = np.stack([seq.frames[s : s + win_frames].reshape(-1) for s in starts])
    return FeatureSequence(
        frames=blocks,
        frame_hop_s=hop_frames * seq.frame_hop_s,
        frame_win_s=win_frames * seq.frame_hop_s,
    )


def dump_features(path: str | Path, seq: FeatureSequence) -> None:
    """Write a sequence as a little-endian binary dump.

    Header: 8-byte magic, dimension and frame count as unsigned 64-bit,
    hop and window seconds as float64; then row-major float64 frames.
    """
    header = _MAGIC + struct.pack(
        "<QQdd", seq.dim, seq.n_frames, seq.frame_hop_s, seq.frame_win_s
    )
    data = np.ascontiguousarray(seq.frames, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def load_features(path: str | Path) -> FeatureSequence:
    """Read back a dump written by dump_features."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 40 or raw[:8] != _MAGIC:
        raise CorruptHeaderError(f"{path}: not a feature dump")
    dim, n_frames, hop_s, win_s = struct.unpack_from("<QQdd", raw, 8)
    expected = 40 + dim * n_frames * 8
    if len(raw) != expected:
        raise CorruptHeaderError(f"{path}: size {len(raw)} != expected {expected}")
    frames = np.frombuffer(raw[40:], dtype="<f8").reshape(n_frames, dim).copy()
    return FeatureSequence(frames=frames, frame_hop_s=hop_s, frame_win_s=win_s)
