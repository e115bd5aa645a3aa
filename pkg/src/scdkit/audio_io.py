"""WAV reading and writing, peak normalization, and fixed-grid framing.

Only uncompressed RIFF/WAVE is handled: 8/16/24/32-bit integer PCM and
32-bit IEEE float.  Multi-channel input is averaged down to mono.  There
is deliberately no resampling; rate mismatches are reported, not fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    ClipTooShortError,
    CorruptHeaderError,
    EmptyAudioError,
    UnsupportedFormatError,
)

_FMT_PCM = 1
_FMT_IEEE_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    """Mono audio in float64 samples, nominally within [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    silent: bool = False

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class FrameGrid:
    """Overlapping analysis frames laid over a clip.

    ``frames`` is a 2-D view of shape (n_frames, win_samples); frame i
    starts at sample i * hop_samples.
    """

    frames: np.ndarray
    win_ms: float
    hop_ms: float
    win_samples: int
    hop_samples: int

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def _parse_chunks(data: bytes, path: Path) -> dict[bytes, bytes]:
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid, csize = struct.unpack_from("<4sI", data, pos)
        body_start = pos + 8
        if body_start + csize > len(data):
            raise CorruptHeaderError(f"{path}: chunk {cid!r} truncated")
        if cid not in chunks:
            chunks[cid] = data[body_start : body_start + csize]
        # chunks are word-aligned; odd sizes carry one pad byte
        pos = body_start + csize + (csize & 1)
    return chunks


def _decode_pcm(raw: bytes, bits: int, path: Path) -> np.ndarray:
    if bits == 8:
        x = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        return (x - 128.0) / 128.0
    if bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64)
        return x / 32768.0
    if bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        x = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        x = np.where(x >= 1 << 23, x - (1 << 24), x).astype(np.float64)
        return x / float(1 << 23)
    if bits == 32:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64)
        return x / float(1 << 31)
    raise UnsupportedFormatError(f"{path}: {bits}-bit integer PCM not supported")


def load_wav(path: str | Path) -> AudioClip:
    """Read a RIFF/WAVE file into a mono float64 clip.

    Integer PCM maps symmetrically (int16 sample / 32768 and so on);
    multi-channel files are averaged to mono.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise CorruptHeaderError(f"{path}: too short for a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise CorruptHeaderError(f"{path}: not a RIFF/WAVE file")

    chunks = _parse_chunks(data, path)
    if b"fmt " not in chunks:
        raise CorruptHeaderError(f"{path}: missing fmt chunk")
    if b"data" not in chunks:
        raise CorruptHeaderError(f"{path}: missing data chunk")

    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise CorruptHeaderError(f"{path}: fmt chunk truncated")
    code, n_channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if code == _FMT_EXTENSIBLE:
        if len(fmt) < 26:
            raise CorruptHeaderError(f"{path}: extensible fmt chunk truncated")
        code = struct.unpack_from("<H", fmt, 24)[0]
    if code not in (_FMT_PCM, _FMT_IEEE_FLOAT):
        raise UnsupportedFormatError(
            f"{path}: compressed or unknown WAV format code {code}"
        )
    if n_channels < 1:
        raise CorruptHeaderError(f"{path}: channel count {n_channels}")

    raw = chunks[b"data"]
    bytes_per_sample = bits // 8
    if bytes_per_sample == 0 or (block_align and block_align != bytes_per_sample * n_channels):
        raise CorruptHeaderError(f"{path}: inconsistent block alignment")
    if len(raw) == 0:
        raise EmptyAudioError(f"{path}: empty data chunk")
    if len(raw) % (bytes_per_sample * n_channels):
        raise CorruptHeaderError(f"{path}: data chunk is not a whole number of frames")

    if code == _FMT_IEEE_FLOAT:
        if bits == 32:
            x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        elif bits == 64:
            x = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        else:
            raise UnsupportedFormatError(f"{path}: {bits}-bit float not supported")
    else:
        x = _decode_pcm(raw, bits, path)

    if n_channels > 1:
        x = x.reshape(-1, n_channels).mean(axis=1)
    if x.size == 0:
        raise EmptyAudioError(f"{path}: no samples")
    return AudioClip(samples=x, sample_rate=int(rate))


def write_wav(path: str | Path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a clip as 16-bit PCM or 32-bit float RIFF/WAVE."""
    path = Path(path)
    if encoding == "pcm16":
        code, bits = _FMT_PCM, 16
        x = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    elif encoding == "float32":
        code, bits = _FMT_IEEE_FLOAT, 32
        x = clip.samples.astype("<f4")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    raw = x.tobytes()
    block_align = bits // 8
    byte_rate = clip.sample_rate * block_align
    fmt = struct.pack("<HHIIHH", code, 1, clip.sample_rate, byte_rate, block_align, bits)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)


def normalize_peak(clip: AudioClip) -> AudioClip:
    """Scale so the absolute peak is 1.  All-zero input is returned
    unchanged with the silent flag set."""
    peak = float(np.max(np.abs(clip.samples))) if clip.n_samples else 0.0
    if peak == 0.0:
        return replace(clip, silent=True)
    return replace(clip, samples=clip.samples / peak, silent=False)


def frame_signal(clip: AudioClip, win_ms: float, hop_ms: float) -> FrameGrid:
    """Slice a clip into overlapping frames on a fixed grid.

    Window and hop are converted to samples rounding down; the trailing
    partial window is dropped.  Frame count is
    floor((n_samples - win) / hop) + 1.
    """
    if not (win_ms >= hop_ms > 0):
        raise ValueError("need win_ms >= hop_ms > 0")
    win = int(win_ms * clip.sample_rate / 1000.0)
    hop = int(hop_ms * clip.sample_rate / 1000.0)
    if win < 1 or hop < 1:
        raise ValueError("window and hop must be at least one sample")
    if clip.n_samples < win:
        raise ClipTooShortError(
            f"clip of {clip.n_samples} samples is shorter than one "
            f"{win}-sample window"
        )
    n = (clip.n_samples - win) // hop + 1
    view = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop][:n]
    return FrameGrid(
        frames=view, win_ms=win_ms, hop_ms=hop_ms, win_samples=win, hop_samples=hop
    )
