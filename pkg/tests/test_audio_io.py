"""WAV parsing, normalization, and framing."""

import struct

import numpy as np
import pytest

from scdkit.audio_io import (
    AudioClip,
    frame_signal,
    load_wav,
    normalize_peak,
    write_wav,
)
from scdkit.errors import (
    ClipTooShortError,
    CorruptHeaderError,
    EmptyAudioError,
    UnsupportedFormatError,
)


def make_wav_bytes(raw, code=1, n_channels=1, rate=16000, bits=16,
                   extra_fmt=b"", block_align=None):
    """Hand-rolled RIFF container, independent of the writer under test."""
    if block_align is None:
        block_align = (bits // 8) * n_channels
    fmt = struct.pack("<HHIIHH", code, n_channels, rate, rate * block_align,
                      block_align, bits) + extra_fmt
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if len(fmt) & 1:
        body += b"\x00"
    body += b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body


def write_bytes(tmp_path, blob, name="t.wav"):
    p = tmp_path / name
    p.write_bytes(blob)
    return p


class TestLoadWav:
    def test_one_second_mono_16k(self, tmp_path):
        raw = struct.pack("<16000h", *([0] * 16000))
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw)))
        assert clip.n_samples == 16000
        assert clip.sample_rate == 16000
        assert clip.duration_s == 1.0

    def test_int16_scaling(self, tmp_path):
        raw = struct.pack("<4h", 16384, -16384, 32767, -32768)
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw)))
        np.testing.assert_allclose(
            clip.samples, [0.5, -0.5, 32767 / 32768, -1.0], atol=0
        )

    def test_stereo_opposite_channels_cancel(self, tmp_path):
        frames = [(v, -v) for v in (100, -2000, 31000)]
        raw = b"".join(struct.pack("<hh", a, b) for a, b in frames)
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw, n_channels=2)))
        np.testing.assert_array_equal(clip.samples, np.zeros(3))

    def test_stereo_averages(self, tmp_path):
        raw = struct.pack("<hh", 16384, 0)
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw, n_channels=2)))
        np.testing.assert_allclose(clip.samples, [0.25])

    def test_8bit_unsigned(self, tmp_path):
        raw = bytes([128, 255, 0, 192])
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw, bits=8)))
        np.testing.assert_allclose(
            clip.samples, [0.0, 127 / 128, -1.0, 0.5]
        )

    def test_24bit_signed(self, tmp_path):
        vals = [1 << 22, -(1 << 22), (1 << 23) - 1, -(1 << 23)]
        raw = b"".join(
            int(v & 0xFFFFFF).to_bytes(3, "little") for v in vals
        )
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw, bits=24)))
        np.testing.assert_allclose(
            clip.samples, [0.5, -0.5, ((1 << 23) - 1) / (1 << 23), -1.0]
        )

    def test_float32(self, tmp_path):
        raw = struct.pack("<3f", 0.25, -1.0, 0.5)
        clip = load_wav(write_bytes(tmp_path, make_wav_bytes(raw, code=3, bits=32)))
        np.testing.assert_allclose(clip.samples, [0.25, -1.0, 0.5])

    def test_extensible_header_dereferenced(self, tmp_path):
        # WAVEFORMATEXTENSIBLE: cbSize then valid bits, mask, sub-format GUID
        extra = struct.pack("<HHI", 22, 16, 0) + struct.pack("<H", 1) + b"\x00" * 14
        raw = struct.pack("<2h", 16384, -16384)
        blob = make_wav_bytes(raw, code=0xFFFE, extra_fmt=extra)
        clip = load_wav(write_bytes(tmp_path, blob))
        np.testing.assert_allclose(clip.samples, [0.5, -0.5])

    def test_compressed_format_rejected(self, tmp_path):
        blob = make_wav_bytes(b"\x00\x00", code=0x55)  # an MP3 format tag
        with pytest.raises(UnsupportedFormatError):
            load_wav(write_bytes(tmp_path, blob))

    def test_not_riff(self, tmp_path):
        with pytest.raises(CorruptHeaderError):
            load_wav(write_bytes(tmp_path, b"OGGS" + b"\x00" * 40))

    def test_truncated_data_chunk(self, tmp_path):
        blob = make_wav_bytes(struct.pack("<4h", 1, 2, 3, 4))
        with pytest.raises(CorruptHeaderError):
            load_wav(write_bytes(tmp_path, blob[:-4]))

    def test_missing_fmt(self, tmp_path):
        raw = struct.pack("<2h", 1, 2)
        blob = b"RIFF" + struct.pack("<I", 4 + 8 + len(raw)) + b"WAVE"
        blob += b"data" + struct.pack("<I", len(raw)) + raw
        with pytest.raises(CorruptHeaderError):
            load_wav(write_bytes(tmp_path, blob))

    def test_empty_data(self, tmp_path):
        with pytest.raises(EmptyAudioError):
            load_wav(write_bytes(tmp_path, make_wav_bytes(b"")))

    def test_odd_data_length(self, tmp_path):
        with pytest.raises(CorruptHeaderError):
            load_wav(write_bytes(tmp_path, make_wav_bytes(b"\x01\x02\x03")))

    def test_error_names_file(self, tmp_path):
        p = write_bytes(tmp_path, b"JUNKJUNKJUNKJUNK", name="broken.wav")
        with pytest.raises(CorruptHeaderError, match="broken.wav"):
            load_wav(p)


class TestWriteWav:
    def test_pcm16_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        x = np.round(rng.uniform(-1.0, 1.0, 500) * 32768) / 32768
        x = np.clip(x, -1.0, 32767 / 32768)
        clip = AudioClip(samples=x, sample_rate=8000)
        p = tmp_path / "rt.wav"
        write_wav(p, clip, encoding="pcm16")
        back = load_wav(p)
        assert back.sample_rate == 8000
        np.testing.assert_array_equal(back.samples, x)

    def test_float32_roundtrip(self, tmp_path):
        x = np.array([0.1, -0.9, 0.5, 0.0], dtype=np.float32).astype(np.float64)
        p = tmp_path / "rt.wav"
        write_wav(p, AudioClip(samples=x, sample_rate=16000), encoding="float32")
        np.testing.assert_array_equal(load_wav(p).samples, x)

    def test_unknown_encoding(self, tmp_path):
        clip = AudioClip(samples=np.zeros(4), sample_rate=16000)
        with pytest.raises(ValueError):
            write_wav(tmp_path / "x.wav", clip, encoding="pcm8")


class TestNormalizePeak:
    def test_scales_to_unit_peak(self):
        clip = AudioClip(samples=np.array([0.2, -0.4]), sample_rate=100)
        out = normalize_peak(clip)
        np.testing.assert_allclose(out.samples, [0.5, -1.0])
        assert not out.silent

    def test_identity_at_unit_peak(self):
        clip = AudioClip(samples=np.array([1.0, -1.0]), sample_rate=100)
        np.testing.assert_array_equal(normalize_peak(clip).samples, [1.0, -1.0])

    def test_silent_flagged_unchanged(self):
        clip = AudioClip(samples=np.zeros(3), sample_rate=100)
        out = normalize_peak(clip)
        np.testing.assert_array_equal(out.samples, np.zeros(3))
        assert out.silent

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        clip = AudioClip(samples=rng.normal(size=100), sample_rate=100)
        once = normalize_peak(clip)
        twice = normalize_peak(once)
        np.testing.assert_allclose(twice.samples, once.samples, atol=1e-12)
        assert np.max(np.abs(once.samples)) == pytest.approx(1.0, abs=1e-12)


class TestFrameSignal:
    def test_frame_count_formula(self):
        clip = AudioClip(samples=np.zeros(16000), sample_rate=16000)
        grid = frame_signal(clip, 50.0, 25.0)
        assert grid.win_samples == 800
        assert grid.hop_samples == 400
        assert grid.n_frames == (16000 - 800) // 400 + 1 == 39

    def test_frame_starts_on_hop_grid(self):
        x = np.arange(3000, dtype=np.float64)
        grid = frame_signal(AudioClip(samples=x, sample_rate=16000), 50.0, 25.0)
        for i in range(grid.n_frames):
            np.testing.assert_array_equal(
                grid.frames[i], x[i * 400 : i * 400 + 800]
            )

    def test_exact_single_frame(self):
        clip = AudioClip(samples=np.zeros(800), sample_rate=16000)
        assert frame_signal(clip, 50.0, 25.0).n_frames == 1

    def test_one_short_raises(self):
        clip = AudioClip(samples=np.zeros(799), sample_rate=16000)
        with pytest.raises(ClipTooShortError):
            frame_signal(clip, 50.0, 25.0)

    def test_trailing_partial_dropped(self):
        clip = AudioClip(samples=np.zeros(1199), sample_rate=16000)
        assert frame_signal(clip, 50.0, 25.0).n_frames == 1

    def test_bad_geometry(self):
        clip = AudioClip(samples=np.zeros(1000), sample_rate=16000)
        with pytest.raises(ValueError):
            frame_signal(clip, 10.0, 25.0)
