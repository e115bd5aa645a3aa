"""Feed-forward speaker classifier trained by conjugate gradient.

The network takes one grouped feature vector per input, applies fully
connected sigmoid layers (each weight matrix carries its bias in the first
column), and emits one sigmoid output per speaker.  Training minimizes a
per-output cross-entropy with L2 weight decay over a decreasing decay
schedule, full batch, monitoring holdout frame accuracy for early stopping.
A whole recording is labeled by the speaker with the largest summed
log-likelihood over its frames.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    DivergedCostError,
    EmptySpeakerError,
    TooFewFramesError,
)
from .features import FeatureSequence
from .optimize import minimize_cg
from .validation import as_float_matrix

logger = logging.getLogger(__name__)

_CLAMP_EPS = 1e-12
_MODEL_MAGIC = b"SCDMODL1"

DEFAULT_FRAME_HOP_S = 0.03
DEFAULT_FRAME_WIN_S = 0.1


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths from input to output, e.g. (390, 200, K)."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i + 1] * (sizes[i] + 1) for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class TrainConfig:
    lambda_schedule: tuple[float, ...] = (3.0, 1.0, 0.3, 0.1, 0.0)
    cg_iters_per_stage: int = 200
    stop_delta: float = 0.001
    stop_patience: int = 2
    init_range: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_schedule:
            raise ValueError("lambda_schedule must not be empty")
        if any(l < 0 for l in self.lambda_schedule):
            raise ValueError("weight decay must be nonnegative")
        if self.cg_iters_per_stage < 1:
            raise ValueError("cg_iters_per_stage must be >= 1")
        if self.stop_patience < 1:
            raise ValueError("stop_patience must be >= 1")
        if self.init_range <= 0:
            raise ValueError("init_range must be > 0")


@dataclass
class Model:
    """Trained weights plus the labels and feature setup they assume.

    weights[l] has shape (size of layer l+1, size of layer l + 1); the
    first column holds biases.
    """

    weights: list[np.ndarray]
    speaker_labels: tuple[str, ...]
    feature_fingerprint: str = ""

    def __post_init__(self):
        for i, w in enumerate(self.weights[:-1]):
            nxt = self.weights[i + 1]
            if nxt.shape[1] != w.shape[0] + 1:
                raise DimensionMismatchError(
                    f"layer {i + 1} expects {nxt.shape[1] - 1} inputs but layer "
                    f"{i} emits {w.shape[0]}"
                )
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise DimensionMismatchError("weights contain NaN or Inf")
        if self.speaker_labels and len(self.speaker_labels) != self.shape.n_outputs:
            raise DimensionMismatchError(
                f"{len(self.speaker_labels)} labels for "
                f"{self.shape.n_outputs} outputs"
            )

    @property
    def shape(self) -> NetworkShape:
        sizes = [self.weights[0].shape[1] - 1]
        sizes += [w.shape[0] for w in self.weights]
        return NetworkShape(tuple(sizes))


@dataclass(frozen=True)
class LikelihoodSequence:
    """Per-frame log-likelihood rows, one column per speaker."""

    rows: np.ndarray
    frame_hop_s: float = DEFAULT_FRAME_HOP_S
    frame_win_s: float = DEFAULT_FRAME_WIN_S

    @property
    def n_frames(self) -> int:
        return int(self.rows.shape[0])

    @property
    def n_speakers(self) -> int:
        return int(self.rows.shape[1])


@dataclass
class StageReport:
    weight_decay: float
    iterations: int
    final_cost: float
    holdout_accuracy: float | None
    reason: str


@dataclass
class TrainReport:
    stages: list[StageReport] = field(default_factory=list)
    stopped_early: bool = False
    total_evals: int = 0

    @property
    def final_cost(self) -> float:
        return self.stages[-1].final_cost if self.stages else float("nan")


def init_weights(
    shape: NetworkShape,
    seed: int,
    speaker_labels: Sequence[str] | None = None,
    feature_fingerprint: str = "",
    init_range: float = 0.1,
) -> Model:
    """Independent uniform draws from (-init_range, init_range), seeded."""
    rng = np.random.default_rng(seed)
    sizes = shape.layer_sizes
    weights = [
        rng.uniform(-init_range, init_range, size=(sizes[i + 1], sizes[i] + 1))
        for i in range(len(sizes) - 1)
    ]
    labels = tuple(speaker_labels) if speaker_labels is not None else tuple(
        str(i) for i in range(shape.n_outputs)
    )
    return Model(weights=weights, speaker_labels=labels,
                 feature_fingerprint=feature_fingerprint)


def _forward(weights: list[np.ndarray], X: np.ndarray) -> list[np.ndarray]:
    """Activations per layer; the input counts as layer 0."""
    acts = [X]
    for w in weights:
        z = acts[-1] @ w[:, 1:].T + w[:, 0]
        acts.append(expit(z))
    return acts


def forward(model: Model, X: np.ndarray) -> np.ndarray:
    """Sigmoid outputs, one row per input, one column per speaker."""
    X = as_float_matrix(X, "inputs")
    if X.shape[1] != model.shape.n_inputs:
        raise DimensionMismatchError(
            f"inputs have {X.shape[1]} dims, model expects {model.shape.n_inputs}"
        )
    return _forward(model.weights, X)[-1]


def _data_cost(h: np.ndarray, Y: np.ndarray) -> float:
    hc = np.clip(h, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    h1c = np.clip(1.0 - h, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    m = h.shape[0]
    return float(-(np.sum(Y * np.log(hc)) + np.sum((1.0 - Y) * np.log(h1c))) / m)


def _penalty(weights: list[np.ndarray]) -> float:
    return float(sum(np.sum(w[:, 1:] ** 2) for w in weights))


def cost(model: Model, X: np.ndarray, Y: np.ndarray, weight_decay: float = 0.0) -> float:
    """Mean per-output cross-entropy plus L2 decay on non-bias weights.

    Logarithm arguments are clamped into [1e-12, 1 - 1e-12]; biases are
    excluded from the penalty.
    """
    h = forward(model, X)
    _check_targets(h, Y)
    m = X.shape[0]
    return _data_cost(h, Y) + weight_decay / (2.0 * m) * _penalty(model.weights)


def _check_targets(h: np.ndarray, Y: np.ndarray) -> None:
    if Y.shape != h.shape:
        raise DimensionMismatchError(
            f"targets have shape {Y.shape}, outputs {h.shape}"
        )


def gradient(model: Model, X: np.ndarray, Y: np.ndarray, weight_decay: float = 0.0) -> list[np.ndarray]:
    """Exact gradient of the clamped cost, by backpropagation.

    Where an output falls outside the clamp range its cost term is flat,
    so its error signal is zeroed.
    """
    X = as_float_matrix(X, "inputs")
    acts = _forward(model.weights, X)
    h = acts[-1]
    _check_targets(h, Y)
    m = X.shape[0]
    delta = np.where((h > _CLAMP_EPS) & (h < 1.0 - _CLAMP_EPS), h - Y, 0.0)
    grads: list[np.ndarray] = [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        a = acts[l]
        g = np.empty_like(model.weights[l])
        g[:, 0] = delta.sum(axis=0) / m
        g[:, 1:] = delta.T @ a / m
        if weight_decay:
            g[:, 1:] += weight_decay / m * model.weights[l][:, 1:]
        grads[l] = g
        if l > 0:
            delta = (delta @ model.weights[l][:, 1:]) * (a * (1.0 - a))
    return grads


def _pack(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in arrays])


def _unpack(flat: np.ndarray, shape: NetworkShape) -> list[np.ndarray]:
    sizes = shape.layer_sizes
    out = []
    pos = 0
    for i in range(len(sizes) - 1):
        n = sizes[i + 1] * (sizes[i] + 1)
        out.append(flat[pos : pos + n].reshape(sizes[i + 1], sizes[i] + 1))
        pos += n
    return out


def _as_frames(seq) -> np.ndarray:
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    return as_float_matrix(frames, "features")


def _stack_speakers(
    features_by_speaker: Mapping[str, object],
) -> tuple[list[str], np.ndarray, np.ndarray]:
    labels = sorted(features_by_speaker)
    blocks, idx = [], []
    for i, label in enumerate(labels):
        frames = _as_frames(features_by_speaker[label])
        if frames.shape[0] == 0:
            raise EmptySpeakerError(f"speaker {label!r} has no frames")
        blocks.append(frames)
        idx.append(np.full(frames.shape[0], i))
    return labels, np.vstack(blocks), np.concatenate(idx)


def frame_accuracy(model: Model, X: np.ndarray, y_idx: np.ndarray) -> float:
    """Fraction of rows whose largest output matches the true speaker."""
    preds = np.argmax(forward(model, X), axis=1)
    return float(np.mean(preds == y_idx))


def train(
    features_by_speaker: Mapping[str, object],
    cfg: TrainConfig = TrainConfig(),
    hidden: tuple[int, ...] = (200,),
    holdout: Mapping[str, object] | None = None,
    feature_fingerprint: str = "",
) -> tuple[Model, TrainReport]:
    """Train a classifier on per-speaker feature frames.

    One cross-entropy minimization per weight-decay stage, warm-started
    from the previous stage.  When a holdout map is given, frame accuracy
    is evaluated after each stage and training stops once the improvement
    stays under stop_delta for stop_patience consecutive evaluations.
    """
    labels, X, y_idx = _stack_speakers(features_by_speaker)
    n_dim = X.shape[1]
    shape = NetworkShape((n_dim, *hidden, len(labels)))
    Y = np.zeros((X.shape[0], len(labels)))
    Y[np.arange(X.shape[0]), y_idx] = 1.0

    hold = None
    if holdout is not None:
        hlabels, HX, hy = _stack_speakers(holdout)
        unknown = set(hlabels) - set(labels)
        if unknown:
            raise EmptySpeakerError(f"holdout speakers not in training set: {sorted(unknown)}")
        remap = np.array([labels.index(l) for l in hlabels])
        hold = (HX, remap[hy])

    model = init_weights(shape, cfg.seed, labels, feature_fingerprint, cfg.init_range)
    flat = _pack(model.weights)
    report = TrainReport()
    m = X.shape[0]

    def make_objective(lam: float):
        def objective(theta: np.ndarray):
            ws = _unpack(theta, shape)
            acts = _forward(ws, X)
            h = acts[-1]
            j = _data_cost(h, Y) + lam / (2.0 * m) * _penalty(ws)
            delta = np.where((h > _CLAMP_EPS) & (h < 1.0 - _CLAMP_EPS), h - Y, 0.0)
            grads = [None] * len(ws)
            d = delta
            for l in range(len(ws) - 1, -1, -1):
                a = acts[l]
                g = np.empty_like(ws[l])
                g[:, 0] = d.sum(axis=0) / m
                g[:, 1:] = d.T @ a / m
                if lam:
                    g[:, 1:] += lam / m * ws[l][:, 1:]
                grads[l] = g
                if l > 0:
                    d = (d @ ws[l][:, 1:]) * (a * (1.0 - a))
            return j, _pack(grads)

        return objective

    prev_acc = None
    low_gain = 0
    for lam in cfg.lambda_schedule:
        result = minimize_cg(
            make_objective(lam), flat, max_iters=cfg.cg_iters_per_stage
        )
        if result.reason == "non_finite" or not np.isfinite(result.fun):
            raise DivergedCostError(
                f"cost became non-finite at weight decay {lam}"
            )
        flat = result.x
        report.total_evals += result.n_evals
        acc = None
        if hold is not None:
            stage_model = Model(_unpack(flat, shape), tuple(labels), feature_fingerprint)
            acc = frame_accuracy(stage_model, hold[0], hold[1])
        report.stages.append(
            StageReport(lam, result.n_iters, result.fun, acc, result.reason)
        )
        logger.info(
            "stage decay=%g iters=%d cost=%.6f holdout=%s",
            lam, result.n_iters, result.fun,
            "n/a" if acc is None else f"{acc:.4f}",
        )
        if acc is not None:
            if prev_acc is not None and acc - prev_acc < cfg.stop_delta:
                low_gain += 1
            else:
                low_gain = 0
            prev_acc = acc
            if low_gain >= cfg.stop_patience:
                report.stopped_early = True
                break

    model = Model(_unpack(flat, shape), tuple(labels), feature_fingerprint)
    return model, report


def transform(model: Model, seq) -> LikelihoodSequence:
    """Per-frame speaker log-likelihood rows: the log of the clamped
    network outputs.  Every entry lies in [log 1e-12, 0)."""
    frames = _as_frames(seq)
    h = forward(model, frames)
    rows = np.log(np.clip(h, _CLAMP_EPS, 1.0 - _CLAMP_EPS))
    hop = getattr(seq, "frame_hop_s", DEFAULT_FRAME_HOP_S)
    win = getattr(seq, "frame_win_s", DEFAULT_FRAME_WIN_S)
    return LikelihoodSequence(rows=rows, frame_hop_s=hop, frame_win_s=win)


def predict_speaker(model: Model, seq, n_frames: int | None = None) -> int:
    """Index of the speaker with the largest summed log-likelihood over
    the first n_frames frames (all frames when omitted).  Ties go to the
    lowest index."""
    rows = transform(model, seq).rows
    if n_frames is None:
        n_frames = rows.shape[0]
    if n_frames < 1 or n_frames > rows.shape[0]:
        raise TooFewFramesError(
            f"requested {n_frames} frames from a {rows.shape[0]}-frame sequence"
        )
    totals = rows[:n_frames].sum(axis=0)
    return int(np.argmax(totals))


def frames_to_duration(n_frames: float, frame_hop_s: float = DEFAULT_FRAME_HOP_S,
                       frame_win_s: float = DEFAULT_FRAME_WIN_S) -> float:
    """Seconds of audio covered by the first n_frames frames:
    (n - 1) * hop + window."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    return (n_frames - 1) * frame_hop_s + frame_win_s


@dataclass
class FileResult:
    speaker: str
    predicted: str
    correct: bool
    min_prefix_frames: int | None


@dataclass
class AccuracyReport:
    frame_accuracy: float
    file_accuracy: float
    files: list[FileResult]
    frame_hop_s: float = DEFAULT_FRAME_HOP_S
    frame_win_s: float = DEFAULT_FRAME_WIN_S

    def prefix_stats(self):
        """(min, mean, max) of the minimal prefix frame counts over files
        classified correctly in full; None when no file qualifies."""
        vals = [f.min_prefix_frames for f in self.files if f.min_prefix_frames]
        if not vals:
            return None
        return min(vals), float(np.mean(vals)), max(vals)

    def to_table(self, title: str = "evaluation") -> str:
        lines = [
            f"{title}: frame accuracy {100 * self.frame_accuracy:.2f}%  "
            f"file accuracy {100 * self.file_accuracy:.2f}%  "
            f"({len(self.files)} files)"
        ]
        stats = self.prefix_stats()
        if stats is not None:
            mn, mean, mx = stats
            fmt = lambda n: f"{frames_to_duration(n, self.frame_hop_s, self.frame_win_s):.2f}"
            lines.append(
                f"  frames to settle: min {mn} ({fmt(mn)} s)  "
                f"mean {mean:.2f} ({fmt(mean)} s)  max {mx} ({fmt(mx)} s)"
            )
        missed = [f for f in self.files if not f.correct]
        if missed:
            lines.append(f"  misclassified: {len(missed)} file(s)")
        return "\n".join(lines)


def evaluate(model: Model, files_by_speaker: Mapping[str, Sequence]) -> AccuracyReport:
    """Frame accuracy, file accuracy, and per-file minimal prefix length.

    The minimal prefix of a file is the smallest n such that the summed
    log-likelihood prediction is correct for every prefix of at least n
    frames; a file misclassified in full has none.
    """
    labels = list(model.speaker_labels)
    n_correct_frames = 0
    n_frames = 0
    files: list[FileResult] = []
    hop, win = DEFAULT_FRAME_HOP_S, DEFAULT_FRAME_WIN_S
    for speaker in sorted(files_by_speaker):
        if speaker not in labels:
            raise EmptySpeakerError(f"speaker {speaker!r} unknown to the model")
        truth = labels.index(speaker)
        for seq in files_by_speaker[speaker]:
            rows = transform(model, seq).rows
            hop = getattr(seq, "frame_hop_s", hop)
            win = getattr(seq, "frame_win_s", win)
            cums = np.cumsum(rows, axis=0)
            preds = np.argmax(cums, axis=1)
            frame_preds = np.argmax(rows, axis=1)
            n_correct_frames += int(np.sum(frame_preds == truth))
            n_frames += rows.shape[0]
            correct = preds == truth
            if not correct[-1]:
                nstar = None
            elif correct.all():
                nstar = 1
            else:
                nstar = int(np.max(np.nonzero(~correct)[0])) + 2
            files.append(
                FileResult(
                    speaker=speaker,
                    predicted=labels[int(preds[-1])],
                    correct=bool(correct[-1]),
                    min_prefix_frames=nstar,
                )
            )
    if not files:
        raise EmptySpeakerError("no files to evaluate")
    return AccuracyReport(
        frame_accuracy=n_correct_frames / n_frames,
        file_accuracy=sum(f.correct for f in files) / len(files),
        files=files,
        frame_hop_s=hop,
        frame_win_s=win,
    )


def save_model(path: str | Path, model: Model) -> None:
    """Binary container plus a human-readable JSON sidecar at path + '.json'.

    Layout: magic, layer count, layer sizes, labels, fingerprint, then the
    weight matrices row-major as little-endian float64.
    """
    path = Path(path)
    sizes = model.shape.layer_sizes
    out = bytearray()
    out += _MODEL_MAGIC
    out += struct.pack("<Q", len(sizes))
    out += struct.pack(f"<{len(sizes)}Q", *sizes)
    out += struct.pack("<Q", len(model.speaker_labels))
    for label in model.speaker_labels:
        raw = label.encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
    fp = model.feature_fingerprint.encode("ascii")
    out += struct.pack("<Q", len(fp)) + fp
    for w in model.weights:
        out += np.ascontiguousarray(w, dtype="<f8").tobytes()
    path.write_bytes(bytes(out))
    sidecar = {
        "format": _MODEL_MAGIC.decode("ascii"),
        "layer_sizes": list(sizes),
        "n_params": model.shape.n_params,
        "speakers": list(model.speaker_labels),
        "feature_fingerprint": model.feature_fingerprint,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_model(path: str | Path) -> Model:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != _MODEL_MAGIC:
        raise CorruptHeaderError(f"{path}: not a model file")
    pos = 8
    (n_layers,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    sizes = struct.unpack_from(f"<{n_layers}Q", raw, pos)
    pos += 8 * n_layers
    (n_labels,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    labels = []
    for _ in range(n_labels):
        (ln,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        labels.append(raw[pos : pos + ln].decode("utf-8"))
        pos += ln
    (fpn,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    fingerprint = raw[pos : pos + fpn].decode("ascii")
    pos += fpn
    weights = []
    for i in range(n_layers - 1):
        rows, cols = sizes[i + 1], sizes[i] + 1
        n = rows * cols * 8
        if pos + n > len(raw):
            raise CorruptHeaderError(f"{path}: truncated weight data")
        weights.append(
            np.frombuffer(raw[pos : pos + n], dtype="<f8").reshape(rows, cols).copy()
        )
        pos += n
    if pos != len(raw):
        raise CorruptHeaderError(f"{path}: trailing bytes after weights")
    return Model(weights=weights, speaker_labels=tuple(labels),
                 feature_fingerprint=fingerprint)


class SpeakerClassifier(BaseEstimator, ClassifierMixin, TransformerMixin):
    """Estimator face over train/transform/predict.

    fit expects X as a matrix of grouped feature vectors and y as one
    speaker label per row; an optional holdout=(X, y) pair drives early
    stopping.  transform returns log-likelihood rows, predict the
    per-row speaker labels.
    """

    def __init__(
        self,
        hidden=(200,),
        lambda_schedule=(3.0, 1.0, 0.3, 0.1, 0.0),
        cg_iters_per_stage=200,
        stop_delta=0.001,
        stop_patience=2,
        init_range=0.1,
        seed=0,
    ):
        self.hidden = hidden
        self.lambda_schedule = lambda_schedule
        self.cg_iters_per_stage = cg_iters_per_stage
        self.stop_delta = stop_delta
        self.stop_patience = stop_patience
        self.init_range = init_range
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lambda_schedule=tuple(self.lambda_schedule),
            cg_iters_per_stage=self.cg_iters_per_stage,
            stop_delta=self.stop_delta,
            stop_patience=self.stop_patience,
            init_range=self.init_range,
            seed=self.seed,
        )

    @staticmethod
    def _group(X, y) -> dict[str, np.ndarray]:
        X = as_float_matrix(X, "X")
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise DimensionMismatchError("X and y length mismatch")
        return {str(label): X[y == label] for label in np.unique(y)}

    def fit(self, X, y, holdout=None):
        grouped = self._group(X, y)
        hold = self._group(*holdout) if holdout is not None else None
        self.model_, self.report_ = train(
            grouped, self._config(), hidden=tuple(self.hidden), holdout=hold
        )
        self.classes_ = np.array(self.model_.speaker_labels)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called first")

    def transform(self, X):
        self._require_fitted()
        return transform(self.model_, as_float_matrix(X, "X")).rows

    def predict(self, X):
        self._require_fitted()
        rows = self.transform(X)
        return self.classes_[np.argmax(rows, axis=1)]

    def predict_file(self, X):
        """Single label for a whole sequence of rows."""
        self._require_fitted()
        return self.classes_[predict_speaker(self.model_, as_float_matrix(X, "X"))]
