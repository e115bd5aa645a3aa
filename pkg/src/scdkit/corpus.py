"""Speech corpus handling and synthesis.

A dataset is a directory with one folder of WAV files per speaker and a
tab-separated manifest (speaker id, relative path, category).  Categories
separate material for training ("train-text") from held-out material
recorded by every speaker ("shared-text").  Conversations are built by
concatenating equal-length per-speaker blocks, so the true change points
are known exactly.  A small source-filter synthesizer produces fully
deterministic artificial speakers for desk-scale experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio_io import AudioClip, load_wav, normalize_peak, write_wav
from .errors import (
    EmptySpeakerError,
    MissingManifestError,
    SampleRateMismatchError,
    SpeakerTooShortError,
    TooManySpeakersError,
)
from .vad import VadConfig, detect_voiced, remove_unvoiced

TRAIN_TEXT = "train-text"
SHARED_TEXT = "shared-text"

MANIFEST_NAME = "manifest.tsv"

_F0_MIN_HZ = 80.0
_F0_MAX_HZ = 250.0
_F0_SPACING_HZ = 5.0


@dataclass(frozen=True)
class Utterance:
    path: Path
    category: str


@dataclass(frozen=True)
class SpeakerEntry:
    speaker_id: str
    utterances: tuple[Utterance, ...]

    def by_category(self, category: str) -> tuple[Utterance, ...]:
        return tuple(u for u in self.utterances if u.category == category)


@dataclass(frozen=True)
class SpeakerDataset:
    root: Path
    speakers: tuple[SpeakerEntry, ...]

    @property
    def speaker_ids(self) -> tuple[str, ...]:
        return tuple(s.speaker_id for s in self.speakers)

    def entry(self, speaker_id: str) -> SpeakerEntry:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise EmptySpeakerError(f"speaker {speaker_id!r} not in dataset")


@dataclass(frozen=True)
class Conversation:
    """Equal-block multi-speaker audio with known change points."""

    audio: AudioClip
    speaker_order: tuple[str, ...]
    block_s: float
    change_points_s: tuple[float, ...]


def scan_dataset(root: str | Path) -> SpeakerDataset:
    """Read and validate a dataset manifest.

    Speakers come back in lexicographic id order with utterances in
    manifest order.  Listed files must exist; every speaker needs at
    least one train-text utterance; a speaker folder with no manifest
    rows is an error.
    """
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise MissingManifestError(f"no {MANIFEST_NAME} under {root}")
    rows: dict[str, list[Utterance]] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MissingManifestError(
                f"{manifest}:{lineno}: expected 3 tab-separated fields"
            )
        speaker_id, rel, category = parts
        if category not in (TRAIN_TEXT, SHARED_TEXT):
            raise MissingManifestError(
                f"{manifest}:{lineno}: unknown category {category!r}"
            )
        path = root / rel
        if not path.is_file():
            raise MissingManifestError(f"{manifest}:{lineno}: missing file {path}")
        rows.setdefault(speaker_id, []).append(Utterance(path=path, category=category))

    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        # only folders holding audio directly count as speaker folders;
        # nested trees organize speakers deeper and declare them per row
        holds_audio = any(p.suffix.lower() == ".wav" for p in sub.iterdir())
        if holds_audio and sub.name not in rows:
            raise EmptySpeakerError(f"speaker folder {sub} has no manifest entries")

    speakers = []
    for speaker_id in sorted(rows):
        utts = rows[speaker_id]
        if not any(u.category == TRAIN_TEXT for u in utts):
            raise EmptySpeakerError(
                f"speaker {speaker_id!r} has no {TRAIN_TEXT} utterances"
            )
        speakers.append(SpeakerEntry(speaker_id=speaker_id, utterances=tuple(utts)))
    return SpeakerDataset(root=root, speakers=tuple(speakers))


def write_manifest(root: str | Path, rows) -> None:
    """Write (speaker_id, relative_path, category) rows as manifest.tsv."""
    root = Path(root)
    lines = [f"{sid}\t{rel}\t{cat}" for sid, rel, cat in rows]
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def build_timit_manifest(timit_root: str | Path, out_root: str | Path | None = None,
                         males_only: bool = True) -> int:
    """Adapter for a TIMIT-style directory tree (RIFF-converted audio).

    Sentence codes map to categories: SX and SI become train-text, SA
    becomes shared-text.  Returns the number of rows written.
    """
    timit_root = Path(timit_root)
    out_root = Path(out_root) if out_root is not None else timit_root
    rows = []
    for wav in sorted(timit_root.rglob("*.wav")) + sorted(timit_root.rglob("*.WAV")):
        speaker = wav.parent.name
        if males_only and not speaker.upper().startswith("M"):
            continue
        code = wav.stem.upper()
        if code.startswith("SA"):
            category = SHARED_TEXT
        elif code.startswith("SX") or code.startswith("SI"):
            category = TRAIN_TEXT
        else:
            continue
        rows.append((speaker, wav.relative_to(out_root).as_posix(), category))
    if not rows:
        raise MissingManifestError(f"no usable sentence files under {timit_root}")
    write_manifest(out_root, rows)
    return len(rows)


def _speaker_block(
    entry: SpeakerEntry,
    categories: tuple[str, ...],
    rng: np.random.Generator,
    vad_cfg: VadConfig | None,
    expected_rate: int | None,
) -> AudioClip:
    """Concatenated, peak-normalized, optionally voice-gated audio of one
    speaker, utterance order shuffled by the caller's generator."""
    utts = [u for u in entry.utterances if u.category in categories]
    if not utts:
        raise EmptySpeakerError(
            f"speaker {entry.speaker_id!r} has no utterances in {categories}"
        )
    order = rng.permutation(len(utts))
    pieces = []
    rate = expected_rate
    for i in order:
        clip = load_wav(utts[i].path)
        if rate is None:
            rate = clip.sample_rate
        elif clip.sample_rate != rate:
            raise SampleRateMismatchError(
                f"{utts[i].path}: rate {clip.sample_rate} != {rate}"
            )
        clip = normalize_peak(clip)
        if vad_cfg is not None:
            mask = detect_voiced(clip, vad_cfg)
            clip = remove_unvoiced(clip, mask)
        if clip.n_samples:
            pieces.append(clip.samples)
    samples = np.concatenate(pieces) if pieces else np.empty(0)
    return AudioClip(samples=samples, sample_rate=rate or 0, silent=samples.size == 0)


def build_conversation(
    dataset: SpeakerDataset,
    speakers=None,
    seed: int = 0,
    categories: tuple[str, ...] = (TRAIN_TEXT,),
    vad_cfg: VadConfig | None = VadConfig(),
    block_seconds: float | None = None,
    min_seconds: float = 1.0,
) -> Conversation:
    """Concatenate one equal-length block per speaker.

    Each speaker's utterances are peak-normalized, voice-gated (unless
    vad_cfg is None, for material already preprocessed), and concatenated;
    every block is then truncated to the shortest speaker total, or to
    block_seconds if given (which must not exceed that minimum).  The
    change points are the block boundaries.  The seed shuffles utterance
    order within each speaker.
    """
    ids = list(speakers) if speakers is not None else list(dataset.speaker_ids)
    if not ids:
        raise EmptySpeakerError("no speakers selected")
    rng = np.random.default_rng(seed)
    blocks = []
    rate = None
    for sid in ids:
        block = _speaker_block(dataset.entry(sid), categories, rng, vad_cfg, rate)
        rate = block.sample_rate
        if block.duration_s < min_seconds:
            raise SpeakerTooShortError(
                f"speaker {sid!r} has {block.duration_s:.2f} s of usable audio, "
                f"needs {min_seconds:.2f} s"
            )
        blocks.append(block)

    min_samples = min(b.n_samples for b in blocks)
    if block_seconds is not None:
        want = int(round(block_seconds * rate))
        if want > min_samples:
            raise SpeakerTooShortError(
                f"requested {block_seconds} s blocks but shortest speaker "
                f"has {min_samples / rate:.2f} s"
            )
        min_samples = want
    block_s = min_samples / rate
    samples = np.concatenate([b.samples[:min_samples] for b in blocks])
    changes = tuple(k * block_s for k in range(1, len(ids)))
    return Conversation(
        audio=AudioClip(samples=samples, sample_rate=rate),
        speaker_order=tuple(ids),
        block_s=block_s,
        change_points_s=changes,
    )


def truth_labels(
    conversation_or_changes,
    interval_s: float,
    n_boundaries: int | None = None,
) -> np.ndarray:
    """Boolean per boundary; boundary t (t = 1..n) is positive when a
    change point falls inside interval t, i.e. [t * interval_s,
    (t + 1) * interval_s).

    Accepts a Conversation or a plain sequence of change times.  Without
    n_boundaries the count is floor(duration / interval) - 1 for a
    Conversation, or enough boundaries to cover the last change otherwise.
    """
    if isinstance(conversation_or_changes, Conversation):
        conv = conversation_or_changes
        changes = conv.change_points_s
        if n_boundaries is None:
            n_boundaries = int(math.floor(conv.audio.duration_s / interval_s)) - 1
    else:
        changes = tuple(conversation_or_changes)
        if n_boundaries is None:
            last = max(changes) if changes else 0.0
            n_boundaries = int(math.floor(last / interval_s)) + 1
    labels = np.zeros(n_boundaries, dtype=bool)
    for cp in changes:
        t = int(math.floor(cp / interval_s))
        if 1 <= t <= n_boundaries:
            labels[t - 1] = True
    return labels


def save_change_points(path: str | Path, conversation: Conversation) -> None:
    """Sidecar text file: one change-point time in seconds per line."""
    with open(path, "w") as fh:
        for cp in conversation.change_points_s:
            fh.write(f"{cp!r}\n")


def load_change_points(path: str | Path) -> tuple[float, ...]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(float(line))
    return tuple(out)


# --- synthetic speakers -----------------------------------------------------


@dataclass(frozen=True)
class VoiceProfile:
    """Source-filter parameters that make one synthetic speaker."""

    f0_hz: float
    formants_hz: tuple[float, float, float]
    bandwidths_hz: tuple[float, float, float]
    syllable_rate_hz: float
    syllable_duty: float
    vibrato_rate_hz: float
    vibrato_depth: float
    glide_depth: float
    glide_tau_s: float
    noise_mix: float


def _voice_profile(seed: int, speaker_idx: int, f0_hz: float) -> VoiceProfile:
    rng = np.random.default_rng(np.random.SeedSequence([seed, speaker_idx, 1]))
    return VoiceProfile(
        f0_hz=f0_hz,
        formants_hz=(
            rng.uniform(280.0, 950.0),
            rng.uniform(900.0, 2500.0),
            rng.uniform(2200.0, 3600.0),
        ),
        bandwidths_hz=(
            rng.uniform(60.0, 110.0),
            rng.uniform(80.0, 150.0),
            rng.uniform(120.0, 200.0),
        ),
        syllable_rate_hz=rng.uniform(2.0, 6.5),
        syllable_duty=rng.uniform(0.55, 0.8),
        vibrato_rate_hz=rng.uniform(3.5, 7.5),
        vibrato_depth=rng.uniform(0.01, 0.05),
        glide_depth=rng.uniform(0.06, 0.18),
        glide_tau_s=rng.uniform(0.03, 0.10),
        noise_mix=rng.uniform(0.02, 0.09),
    )


def _resonator_coeffs(freq_hz: float, bw_hz: float, rate: int):
    r = math.exp(-math.pi * bw_hz / rate)
    theta = 2.0 * math.pi * freq_hz / rate
    return np.array([1.0 - r]), np.array([1.0, -2.0 * r * math.cos(theta), r * r])


def synth_utterance(
    profile: VoiceProfile,
    seconds: float,
    rate: int,
    rng: np.random.Generator,
) -> AudioClip:
    """One jittered utterance of a synthetic speaker.

    A pitch-modulated pulse train plus gated noise runs through three
    cascaded resonators whose centers glide at each syllable onset.  Pitch
    is jittered within 2 percent and formant centers within 3 percent per
    utterance; lead and tail are digital silence.
    """
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    f0 = profile.f0_hz * (1.0 + rng.uniform(-0.02, 0.02))
    formants = np.array(profile.formants_hz) * (1.0 + rng.uniform(-0.03, 0.03, size=3))

    # syllable gating with a raised-cosine bump per cycle
    phase0 = rng.uniform(0.0, 1.0)
    cycle = np.mod(profile.syllable_rate_hz * t + phase0, 1.0)
    duty = profile.syllable_duty
    env = np.where(cycle < duty, np.sin(np.pi * cycle / duty) ** 2, 0.0)
    edge = 0.12
    gate = np.zeros(n)
    lo, hi = int(edge * rate), n - int(edge * rate)
    if hi > lo:
        gate[lo:hi] = 1.0
        ramp = int(0.02 * rate)
        if ramp > 0 and hi - lo > 2 * ramp:
            up = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            gate[lo : lo + ramp] = up
            gate[hi - ramp : hi] = up[::-1]
    env = env * gate

    vib = 1.0 + profile.vibrato_depth * np.sin(
        2.0 * np.pi * profile.vibrato_rate_hz * t + rng.uniform(0.0, 2.0 * np.pi)
    )
    f0_t = f0 * vib
    phase = np.cumsum(f0_t) / rate
    pulses = np.zeros(n)
    wraps = np.diff(np.floor(phase)) >= 1.0
    pulses[1:][wraps] = 1.0
    excitation = (pulses + profile.noise_mix * rng.standard_normal(n)) * env

    # formant glide: centers start sharp after each syllable onset and relax
    since_onset = cycle / profile.syllable_rate_hz
    glide = 1.0 + profile.glide_depth * np.exp(-since_onset / profile.glide_tau_s)

    out = excitation
    block = max(1, int(0.01 * rate))
    for fi in range(3):
        filtered = np.empty(n)
        zi = np.zeros(2)
        for start in range(0, n, block):
            stop = min(start + block, n)
            center = formants[fi] * float(np.mean(glide[start:stop]))
            b, a = _resonator_coeffs(center, profile.bandwidths_hz[fi], rate)
            filtered[start:stop], zi = lfilter(b, a, out[start:stop], zi=zi)
        out = filtered

    out = out * gate  # keep lead and tail digitally silent after filter ring
    peak = float(np.max(np.abs(out)))
    if peak > 0:
        out = 0.9 * out / peak
    return AudioClip(samples=out, sample_rate=rate)


def synth_speaker_corpus(
    out_root: str | Path,
    n_speakers: int,
    utts_per_speaker: int,
    utt_seconds: float,
    seed: int,
    sample_rate: int = 16000,
) -> SpeakerDataset:
    """Generate a deterministic synthetic dataset on disk.

    Fundamental frequencies are drawn without replacement from a 5 Hz grid
    spanning 80-250 Hz, so any two speakers differ by at least 5 Hz; the
    grid size caps the speaker count.  Each (seed, speaker, utterance)
    triple drives its own random stream, so regeneration is byte-identical.
    The last utterance of each speaker is tagged shared-text, the rest
    train-text.
    """
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    if utts_per_speaker < 1:
        raise ValueError("need at least one utterance per speaker")
    slots = np.arange(_F0_MIN_HZ, _F0_MAX_HZ + 1e-9, _F0_SPACING_HZ)
    if n_speakers > slots.shape[0]:
        raise TooManySpeakersError(
            f"{n_speakers} speakers requested but only {slots.shape[0]} "
            f"pitch slots exist"
        )
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    f0s = slots[rng.choice(slots.shape[0], size=n_speakers, replace=False)]

    rows = []
    for si in range(n_speakers):
        sid = f"SPK{si:03d}"
        profile = _voice_profile(seed, si, float(f0s[si]))
        spk_dir = out_root / sid
        spk_dir.mkdir(exist_ok=True)
        for ui in range(utts_per_speaker):
            urng = np.random.default_rng(np.random.SeedSequence([seed, si, ui, 2]))
            clip = synth_utterance(profile, utt_seconds, sample_rate, urng)
            rel = f"{sid}/utt{ui:03d}.wav"
            write_wav(out_root / rel, clip, encoding="pcm16")
            last = ui == utts_per_speaker - 1 and utts_per_speaker > 1
            rows.append((sid, rel, SHARED_TEXT if last else TRAIN_TEXT))
    write_manifest(out_root, rows)
    return scan_dataset(out_root)
