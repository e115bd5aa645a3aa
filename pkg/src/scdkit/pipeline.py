"""End-to-end processing chains and run configuration.

Ties audio loading, voice activity detection, cepstral features, the
frame classifier, and change detection together, and defines the INI
configuration file the command line reads.  A fingerprint of every
setting that alters feature geometry travels with preprocessed data and
saved models so mismatched artifacts are refused instead of silently
producing garbage.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, load_wav, normalize_peak
from .classifier import LikelihoodSequence, Model, transform
from .errors import DataError, FingerprintMismatchError
from .features import (
    FeatureSequence,
    MfccConfig,
    add_deltas,
    apply_cmvn,
    cmvn,
    concat_frames,
    dump_features,
    feature_stats,
    load_features,
    mfcc,
)
from .vad import VadConfig, detect_voiced, remove_unvoiced

PREPROCESS_META = "preprocess.json"


@dataclass(frozen=True)
class ConcatConfig:
    """Super-frame stacking geometry."""

    n_frames: int = 10
    hop_frames: int = 3

    def __post_init__(self):
        if self.n_frames < 1 or self.hop_frames < 1:
            raise ValueError("frame counts must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs, INI round-trippable."""

    mfcc: MfccConfig = field(default_factory=MfccConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    concat: ConcatConfig = field(default_factory=ConcatConfig)
    hidden_layers: tuple[int, ...] = (200,)
    lambda_schedule: tuple[float, ...] = (3.0, 1.0, 0.3, 0.1, 0.0)
    cg_iters_per_stage: int = 200
    seed: int = 0
    interval_s: float = 1.0
    pnorm: float = 2.0
    use_second_difference: bool = False


def feature_fingerprint(cfg: PipelineConfig) -> str:
    """Hash of the settings that change feature geometry or meaning."""
    payload = {
        "mfcc": asdict(cfg.mfcc),
        "concat": asdict(cfg.concat),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def check_fingerprint(expected: str, actual: str, what: str) -> None:
    if expected and actual and expected != actual:
        raise FingerprintMismatchError(
            f"{what} was produced under a different feature configuration "
            f"({actual[:12]} != {expected[:12]})"
        )


def save_config(path: str | Path, cfg: PipelineConfig) -> None:
    parser = configparser.ConfigParser()
    parser["features"] = {
        "sample_rate": str(cfg.mfcc.sample_rate),
        "win_ms": str(cfg.mfcc.win_ms),
        "hop_ms": str(cfg.mfcc.hop_ms),
        "n_mels": str(cfg.mfcc.n_mels),
        "n_ceps": str(cfg.mfcc.n_ceps),
        "concat_frames": str(cfg.concat.n_frames),
        "concat_hop": str(cfg.concat.hop_frames),
    }
    parser["vad"] = {
        "win_ms": str(cfg.vad.win_ms),
        "hop_ms": str(cfg.vad.hop_ms),
        "smooth_order": str(cfg.vad.smooth_order),
        "smooth_passes": str(cfg.vad.smooth_passes),
        "strictness_scale": str(cfg.vad.strictness_scale),
    }
    parser["train"] = {
        "hidden_layers": ",".join(str(h) for h in cfg.hidden_layers),
        "lambda_schedule": ",".join(repr(v) for v in cfg.lambda_schedule),
        "cg_iters_per_stage": str(cfg.cg_iters_per_stage),
        "seed": str(cfg.seed),
    }
    parser["detect"] = {
        "interval_s": repr(cfg.interval_s),
        "pnorm": repr(cfg.pnorm),
        "use_second_difference": str(cfg.use_second_difference),
    }
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path: str | Path) -> PipelineConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"cannot read config file {path}")
    cfg = PipelineConfig()
    if parser.has_section("features"):
        s = parser["features"]
        cfg = replace(
            cfg,
            mfcc=MfccConfig(
                sample_rate=s.getint("sample_rate", cfg.mfcc.sample_rate),
                win_ms=s.getfloat("win_ms", cfg.mfcc.win_ms),
                hop_ms=s.getfloat("hop_ms", cfg.mfcc.hop_ms),
                n_mels=s.getint("n_mels", cfg.mfcc.n_mels),
                n_ceps=s.getint("n_ceps", cfg.mfcc.n_ceps),
            ),
            concat=ConcatConfig(
                n_frames=s.getint("concat_frames", cfg.concat.n_frames),
                hop_frames=s.getint("concat_hop", cfg.concat.hop_frames),
            ),
        )
    if parser.has_section("vad"):
        s = parser["vad"]
        cfg = replace(
            cfg,
            vad=VadConfig(
                win_ms=s.getfloat("win_ms", cfg.vad.win_ms),
                hop_ms=s.getfloat("hop_ms", cfg.vad.hop_ms),
                smooth_order=s.getint("smooth_order", cfg.vad.smooth_order),
                smooth_passes=s.getint("smooth_passes", cfg.vad.smooth_passes),
                strictness_scale=s.getfloat(
                    "strictness_scale", cfg.vad.strictness_scale
                ),
            ),
        )
    if parser.has_section("train"):
        s = parser["train"]
        hidden = s.get("hidden_layers", None)
        lams = s.get("lambda_schedule", None)
        cfg = replace(
            cfg,
            hidden_layers=(
                tuple(int(v) for v in hidden.split(",") if v.strip())
                if hidden is not None
                else cfg.hidden_layers
            ),
            lambda_schedule=(
                tuple(float(v) for v in lams.split(",") if v.strip())
                if lams is not None
                else cfg.lambda_schedule
            ),
            cg_iters_per_stage=s.getint("cg_iters_per_stage", cfg.cg_iters_per_stage),
            seed=s.getint("seed", cfg.seed),
        )
    if parser.has_section("detect"):
        s = parser["detect"]
        cfg = replace(
            cfg,
            interval_s=s.getfloat("interval_s", cfg.interval_s),
            pnorm=float(s.get("pnorm", repr(cfg.pnorm))),
            use_second_difference=s.getboolean(
                "use_second_difference", cfg.use_second_difference
            ),
        )
    return cfg


# --- calibration files ------------------------------------------------------


@dataclass(frozen=True)
class ThresholdFile:
    """Calibrated decision thresholds, one entry per boundary metric."""

    interval_s: float
    p: float
    fingerprint: str
    by_metric: dict  # metric name -> (GaussianPair, threshold)


def save_thresholds(path: str | Path, tf: ThresholdFile) -> None:
    parser = configparser.ConfigParser()
    parser["calibration"] = {
        "interval_s": repr(tf.interval_s),
        "p": repr(tf.p),
        "fingerprint": tf.fingerprint,
    }
    for metric, (g, threshold) in tf.by_metric.items():
        parser[metric] = {
            "threshold": repr(threshold),
            "mean_neg": repr(g.mean_neg),
            "std_neg": repr(g.std_neg),
            "prior_neg": repr(g.prior_neg),
            "mean_pos": repr(g.mean_pos),
            "std_pos": repr(g.std_pos),
            "prior_pos": repr(g.prior_pos),
        }
    with open(path, "w") as fh:
        parser.write(fh)


def load_thresholds(path: str | Path) -> ThresholdFile:
    from .scd import GaussianPair

    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise DataError(f"cannot read threshold file {path}")
    if not parser.has_section("calibration"):
        raise DataError(f"{path} has no calibration section")
    cal = parser["calibration"]
    by_metric = {}
    for metric in parser.sections():
        if metric == "calibration":
            continue
        s = parser[metric]
        g = GaussianPair(
            mean_neg=s.getfloat("mean_neg"),
            std_neg=s.getfloat("std_neg"),
            prior_neg=s.getfloat("prior_neg"),
            mean_pos=s.getfloat("mean_pos"),
            std_pos=s.getfloat("std_pos"),
            prior_pos=s.getfloat("prior_pos"),
        )
        by_metric[metric] = (g, s.getfloat("threshold"))
    if not by_metric:
        raise DataError(f"{path} holds no metric sections")
    return ThresholdFile(
        interval_s=cal.getfloat("interval_s"),
        p=cal.getfloat("p"),
        fingerprint=cal.get("fingerprint", ""),
        by_metric=by_metric,
    )


# --- processing chains ------------------------------------------------------


def clip_to_voiced(clip: AudioClip, cfg: PipelineConfig) -> AudioClip:
    clip = normalize_peak(clip)
    mask = detect_voiced(clip, cfg.vad)
    return remove_unvoiced(clip, mask)


def raw_features(clip: AudioClip, cfg: PipelineConfig) -> FeatureSequence:
    """Cepstra plus velocity and acceleration, before any normalization."""
    return add_deltas(mfcc(clip, cfg.mfcc))


def clip_to_superframes(
    clip: AudioClip,
    cfg: PipelineConfig,
    apply_vad: bool = True,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> FeatureSequence:
    """Full front end for one clip.

    With stats the supplied mean and deviation normalize the features
    (training material shares statistics per speaker); otherwise the clip
    is normalized by its own.
    """
    if apply_vad:
        clip = clip_to_voiced(clip, cfg)
    else:
        clip = normalize_peak(clip)
    feats = raw_features(clip, cfg)
    if stats is not None:
        feats = apply_cmvn(feats, stats[0], stats[1])
    else:
        feats = cmvn(feats)
    return concat_frames(feats, cfg.concat.n_frames, cfg.concat.hop_frames)


def likelihoods(
    clip: AudioClip, model: Model, cfg: PipelineConfig, apply_vad: bool = True
) -> LikelihoodSequence:
    check_fingerprint(model.feature_fingerprint, feature_fingerprint(cfg), "model")
    return transform(model, clip_to_superframes(clip, cfg, apply_vad=apply_vad))


# --- preprocessed feature corpora -------------------------------------------


def preprocess_corpus(
    dataset,
    out_root: str | Path,
    cfg: PipelineConfig,
    categories: tuple[str, ...] | None = None,
) -> dict:
    """Write one super-frame dump per utterance plus a metadata file.

    Train-text utterances of a speaker are normalized with statistics
    pooled over that speaker's train-text material; every other utterance
    is normalized by itself.  Returns the metadata dictionary.
    """
    from .corpus import TRAIN_TEXT
    from .vad import save_mask

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    fingerprint = feature_fingerprint(cfg)
    entries = []
    frames_kept = 0
    frames_total = 0
    for speaker in dataset.speakers:
        utts = [
            u
            for u in speaker.utterances
            if categories is None or u.category in categories
        ]
        if not utts:
            continue
        voiced = {}
        masks = {}
        for u in utts:
            clip = normalize_peak(load_wav(u.path))
            mask = detect_voiced(clip, cfg.vad)
            masks[u.path] = mask
            voiced[u.path] = remove_unvoiced(clip, mask)
            frames_kept += int(mask.voiced.sum())
            frames_total += int(mask.voiced.shape[0])
        train_feats = [
            raw_features(voiced[u.path], cfg)
            for u in utts
            if u.category == TRAIN_TEXT
        ]
        stats = feature_stats(train_feats) if train_feats else None
        for u in utts:
            feats = raw_features(voiced[u.path], cfg)
            if u.category == TRAIN_TEXT and stats is not None:
                feats = apply_cmvn(feats, stats[0], stats[1])
            else:
                feats = cmvn(feats)
            sup = concat_frames(feats, cfg.concat.n_frames, cfg.concat.hop_frames)
            rel = u.path.relative_to(dataset.root).with_suffix(".feat")
            dest = out_root / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dump_features(dest, sup)
            save_mask(dest.with_suffix(".mask"), masks[u.path])
            entries.append(
                {
                    "speaker": speaker.speaker_id,
                    "path": rel.as_posix(),
                    "category": u.category,
                    "n_frames": sup.n_frames,
                }
            )
    meta = {
        "fingerprint": fingerprint,
        "entries": entries,
        "frames_kept": frames_kept,
        "frames_total": frames_total,
    }
    with open(out_root / PREPROCESS_META, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def load_feature_corpus(
    root: str | Path,
    cfg: PipelineConfig | None = None,
    categories: tuple[str, ...] | None = None,
) -> dict[str, list[FeatureSequence]]:
    """Read a preprocessed corpus back as speaker -> feature sequences."""
    root = Path(root)
    meta_path = root / PREPROCESS_META
    if not meta_path.is_file():
        raise DataError(f"no {PREPROCESS_META} under {root}; run preprocessing first")
    meta = json.loads(meta_path.read_text())
    if cfg is not None:
        check_fingerprint(feature_fingerprint(cfg), meta.get("fingerprint", ""),
                          "preprocessed corpus")
    out: dict[str, list[FeatureSequence]] = {}
    for entry in meta["entries"]:
        if categories is not None and entry["category"] not in categories:
            continue
        out.setdefault(entry["speaker"], []).append(
            load_features(root / entry["path"])
        )
    return out
