"""Speaker change detection through speaker classification.

Train a neural classifier on frames of known speakers, run unseen
conversational audio through it, and flag the moments where the pattern
of per-speaker log-likelihoods shifts.  Submodules follow the pipeline:
audio_io, vad, features, optimize, classifier, scd, corpus, pipeline,
cli.
"""

from .audio_io import AudioClip, load_wav, normalize_peak, write_wav
from .classifier import (
    LikelihoodSequence,
    Model,
    NetworkShape,
    SpeakerClassifier,
    TrainConfig,
    evaluate,
    frames_to_duration,
    load_model,
    predict_speaker,
    save_model,
    train,
    transform,
)
from .errors import (
    DataError,
    DegenerateFitWarning,
    FingerprintMismatchError,
    NumericError,
    ScdKitError,
)
from .features import FeatureSequence, MfccConfig, add_deltas, concat_frames, mfcc
from .optimize import CgResult, minimize_cg
from .pipeline import (
    PipelineConfig,
    clip_to_superframes,
    feature_fingerprint,
    likelihoods,
    load_config,
    save_config,
)
from .scd import (
    DetectionReport,
    GaussianPair,
    Scorecard,
    ScdConfig,
    SpeakerChangeDetector,
    bayes_threshold,
    detect,
    fit_gaussians,
    score,
)
from .vad import VadConfig, detect_voiced, remove_unvoiced

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "CgResult",
    "DataError",
    "DegenerateFitWarning",
    "DetectionReport",
    "FeatureSequence",
    "FingerprintMismatchError",
    "GaussianPair",
    "LikelihoodSequence",
    "MfccConfig",
    "Model",
    "NetworkShape",
    "NumericError",
    "PipelineConfig",
    "ScdConfig",
    "ScdKitError",
    "Scorecard",
    "SpeakerChangeDetector",
    "SpeakerClassifier",
    "TrainConfig",
    "VadConfig",
    "add_deltas",
    "bayes_threshold",
    "clip_to_superframes",
    "concat_frames",
    "detect",
    "detect_voiced",
    "evaluate",
    "feature_fingerprint",
    "fit_gaussians",
    "frames_to_duration",
    "likelihoods",
    "load_config",
    "load_model",
    "load_wav",
    "mfcc",
    "minimize_cg",
    "normalize_peak",
    "predict_speaker",
    "remove_unvoiced",
    "save_config",
    "save_model",
    "score",
    "train",
    "transform",
    "write_wav",
]
