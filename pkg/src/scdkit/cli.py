"""Command line front end.

Subcommands cover the whole workflow: synthesize or preprocess a corpus,
train the frame classifier, evaluate closed-set accuracy, build test
conversations, calibrate decision thresholds, flag speaker changes, and
score the flags against known change points.  Exit codes: 0 on success,
1 for usage problems, 2 for bad or missing data, 3 for numerical
failures.  The SCD_LOG environment variable sets the log level.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import classifier, corpus, scd
from .audio_io import load_wav, write_wav
from .errors import DataError, FingerprintMismatchError, NumericError
from .pipeline import (
    PipelineConfig,
    ThresholdFile,
    check_fingerprint,
    feature_fingerprint,
    likelihoods,
    load_config,
    load_feature_corpus,
    load_thresholds,
    preprocess_corpus,
    save_thresholds,
)

logger = logging.getLogger(__name__)

_METRICS = ("pnorm", "second_diff")


def _setup_logging() -> None:
    level = getattr(logging, os.environ.get("SCD_LOG", "WARNING").upper(), None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@click.group(name="scdkit")
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="INI file with feature, VAD, training, and detection settings.",
)
@click.pass_context
def cli(ctx, config_path):
    """Speaker change detection toolkit."""
    ctx.obj = load_config(config_path) if config_path else PipelineConfig()


def vad_options(f):
    f = click.option("--vad-strictness", type=float, default=None,
                     help="Scale both voicing thresholds (>= 1).")(f)
    f = click.option("--vad-order", type=int, default=None,
                     help="Median smoothing window length.")(f)
    f = click.option("--vad-passes", type=int, default=None,
                     help="Median smoothing pass count.")(f)
    return f


def _with_vad_overrides(cfg: PipelineConfig, strictness, order, passes) -> PipelineConfig:
    vad = cfg.vad
    if strictness is not None:
        vad = replace(vad, strictness_scale=strictness)
    if order is not None:
        vad = replace(vad, smooth_order=order)
    if passes is not None:
        vad = replace(vad, smooth_passes=passes)
    return replace(cfg, vad=vad)


def _parse_float_list(text: str, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise click.BadParameter(f"bad {what} list {text!r}") from e
    if not vals:
        raise click.BadParameter(f"empty {what} list")
    return vals


@cli.command("synth-corpus")
@click.argument("out_root", type=click.Path(file_okay=False))
@click.option("--speakers", "n_speakers", type=int, required=True)
@click.option("--utts", "utts_per_speaker", type=int, required=True)
@click.option("--seconds", type=float, default=4.0, show_default=True,
              help="Length of each utterance.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--rate", type=int, default=16000, show_default=True)
def synth_corpus_cmd(out_root, n_speakers, utts_per_speaker, seconds, seed, rate):
    """Generate a deterministic synthetic speaker dataset."""
    ds = corpus.synth_speaker_corpus(
        out_root, n_speakers, utts_per_speaker, seconds, seed, sample_rate=rate
    )
    n_files = sum(len(s.utterances) for s in ds.speakers)
    click.echo(f"wrote {n_files} utterances for {len(ds.speakers)} speakers "
               f"under {out_root}")


@cli.command("preprocess")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.argument("out_root", type=click.Path(file_okay=False))
@click.option("--category", "categories", multiple=True,
              type=click.Choice([corpus.TRAIN_TEXT, corpus.SHARED_TEXT]),
              help="Restrict to these categories (default: all).")
@click.option("--force", is_flag=True, help="Overwrite existing output.")
@vad_options
@click.pass_obj
def preprocess_cmd(cfg, dataset, out_root, categories, force,
                   vad_strictness, vad_order, vad_passes):
    """Extract normalized super-frame features for a whole dataset."""
    cfg = _with_vad_overrides(cfg, vad_strictness, vad_order, vad_passes)
    from .pipeline import PREPROCESS_META

    meta_path = Path(out_root) / PREPROCESS_META
    if meta_path.exists() and not force:
        raise DataError(f"{meta_path} exists; pass --force to overwrite")
    ds = corpus.scan_dataset(dataset)
    meta = preprocess_corpus(ds, out_root, cfg, categories=categories or None)
    kept, total = meta["frames_kept"], meta["frames_total"]
    click.echo(f"voiced frames kept: {kept} of {total} "
               f"({100 * kept / max(total, 1):.1f}%), dropped {total - kept}")
    click.echo(f"wrote {len(meta['entries'])} feature files under {out_root} "
               f"(fingerprint {meta['fingerprint'][:12]})")


def _split_holdout(by_speaker, frac: float, seed: int):
    """Per-speaker frame split for early stopping."""
    stacked = {
        sid: np.vstack([s.frames for s in seqs]) for sid, seqs in by_speaker.items()
    }
    if frac <= 0:
        return stacked, None
    rng = np.random.default_rng(seed)
    train, hold = {}, {}
    for sid, X in stacked.items():
        idx = rng.permutation(X.shape[0])
        k = int(round(frac * X.shape[0]))
        if X.shape[0] - k < 1:
            k = 0
        train[sid] = X[idx[k:]]
        if k:
            hold[sid] = X[idx[:k]]
    return train, (hold or None)


@cli.command("train")
@click.argument("feat_root", type=click.Path(exists=True, file_okay=False))
@click.argument("model_out", type=click.Path(dir_okay=False))
@click.option("--hidden", type=str, default=None,
              help="Comma-separated hidden layer sizes.")
@click.option("--lambdas", type=str, default=None,
              help="Comma-separated weight decay schedule.")
@click.option("--cg-iters", type=int, default=None,
              help="Conjugate gradient iterations per schedule stage.")
@click.option("--seed", type=int, default=None)
@click.option("--holdout-frac", type=float, default=0.1, show_default=True,
              help="Per-speaker frame fraction held out for early stopping.")
@click.pass_obj
def train_cmd(cfg, feat_root, model_out, hidden, lambdas, cg_iters, seed,
              holdout_frac):
    """Train the speaker classifier on preprocessed training features."""
    if hidden is not None:
        cfg = replace(cfg, hidden_layers=tuple(
            int(v) for v in hidden.split(",") if v.strip()))
    if lambdas is not None:
        cfg = replace(cfg, lambda_schedule=_parse_float_list(lambdas, "lambda"))
    if cg_iters is not None:
        cfg = replace(cfg, cg_iters_per_stage=cg_iters)
    if seed is not None:
        cfg = replace(cfg, seed=seed)

    by_speaker = load_feature_corpus(feat_root, cfg,
                                     categories=(corpus.TRAIN_TEXT,))
    train_set, hold_set = _split_holdout(by_speaker, holdout_frac, cfg.seed)
    tc = classifier.TrainConfig(
        lambda_schedule=cfg.lambda_schedule,
        cg_iters_per_stage=cfg.cg_iters_per_stage,
        seed=cfg.seed,
    )
    model, report = classifier.train(
        train_set, tc, hidden=cfg.hidden_layers, holdout=hold_set,
        feature_fingerprint=feature_fingerprint(cfg),
    )
    classifier.save_model(model_out, model)
    for stage in report.stages:
        acc = ("" if stage.holdout_accuracy is None
               else f"  holdout {100 * stage.holdout_accuracy:.2f}%")
        click.echo(f"decay {stage.weight_decay:g}: cost {stage.final_cost:.6f} "
                   f"after {stage.iterations} iterations ({stage.reason}){acc}")
    click.echo(f"saved {len(model.speaker_labels)}-speaker model to {model_out}")


@cli.command("evaluate")
@click.argument("feat_root", type=click.Path(exists=True, file_okay=False))
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--category", "categories", multiple=True,
              type=click.Choice([corpus.TRAIN_TEXT, corpus.SHARED_TEXT]),
              help="Categories to evaluate (default: shared-text).")
@click.pass_obj
def evaluate_cmd(cfg, feat_root, model_path, categories):
    """Closed-set accuracy of a model on preprocessed features."""
    model = classifier.load_model(model_path)
    check_fingerprint(model.feature_fingerprint, feature_fingerprint(cfg), "model")
    files = load_feature_corpus(
        feat_root, cfg, categories=categories or (corpus.SHARED_TEXT,)
    )
    report = classifier.evaluate(model, files)
    click.echo(report.to_table(Path(model_path).name))


@cli.command("synth-conv")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.argument("out_wav", type=click.Path(dir_okay=False))
@click.option("--speakers", type=str, default=None,
              help="Comma-separated speaker ids (default: all, sorted).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--block-seconds", type=float, default=None,
              help="Truncate every block to this length.")
@click.option("--category", "categories", multiple=True,
              type=click.Choice([corpus.TRAIN_TEXT, corpus.SHARED_TEXT]),
              help="Utterance categories to draw from (default: all).")
@click.option("--no-vad", is_flag=True,
              help="Skip voice activity gating of the source material.")
@vad_options
@click.pass_obj
def synth_conv_cmd(cfg, dataset, out_wav, speakers, seed, block_seconds,
                   categories, no_vad, vad_strictness, vad_order, vad_passes):
    """Concatenate per-speaker blocks into a conversation with known
    change points, written next to the audio as OUT_WAV.changes."""
    cfg = _with_vad_overrides(cfg, vad_strictness, vad_order, vad_passes)
    ds = corpus.scan_dataset(dataset)
    ids = ([s.strip() for s in speakers.split(",") if s.strip()]
           if speakers else None)
    conv = corpus.build_conversation(
        ds,
        speakers=ids,
        seed=seed,
        categories=categories or (corpus.TRAIN_TEXT, corpus.SHARED_TEXT),
        vad_cfg=None if no_vad else cfg.vad,
        block_seconds=block_seconds,
    )
    write_wav(out_wav, conv.audio, encoding="float32")
    corpus.save_change_points(str(out_wav) + ".changes", conv)
    click.echo(
        f"wrote {conv.audio.duration_s:.2f} s conversation of "
        f"{len(conv.speaker_order)} speakers ({conv.block_s:.2f} s blocks, "
        f"{len(conv.change_points_s)} changes) to {out_wav}"
    )


def _conversation_values(model, wav_path, cfg, interval_s, p, apply_vad):
    """Boundary times plus metric values for both metrics."""
    clip = load_wav(wav_path)
    seq = likelihoods(clip, model, cfg, apply_vad=apply_vad)
    series = scd.interval_means(seq, interval_s)
    times, dist = scd.boundary_distances(series, p)
    return times, {"pnorm": dist, "second_diff": scd.second_difference(dist)}


@cli.command("calibrate")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("wav_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("changes_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--interval", "interval_s", type=float, default=None,
              help="Decision interval in seconds.")
@click.option("--pnorm", "p", type=float, default=None,
              help="Distance exponent (inf allowed).")
@click.option("--no-vad", is_flag=True,
              help="Treat the conversation as already voice-gated.")
@vad_options
@click.pass_obj
def calibrate_cmd(cfg, model_path, wav_path, changes_path, out_path,
                  interval_s, p, no_vad, vad_strictness, vad_order, vad_passes):
    """Fit per-class Gaussians on a labeled conversation and store the
    minimum-error thresholds for both boundary metrics."""
    cfg = _with_vad_overrides(cfg, vad_strictness, vad_order, vad_passes)
    interval_s = cfg.interval_s if interval_s is None else interval_s
    p = cfg.pnorm if p is None else p
    model = classifier.load_model(model_path)
    times, values = _conversation_values(
        model, wav_path, cfg, interval_s, p, not no_vad
    )
    changes = corpus.load_change_points(changes_path)
    truth = corpus.truth_labels(changes, interval_s, n_boundaries=times.shape[0])
    by_metric = {}
    for metric in _METRICS:
        g = scd.fit_gaussians(values[metric], truth)
        threshold = scd.bayes_threshold(g)
        by_metric[metric] = (g, threshold)
        expected = scd.theoretical_score(g, threshold)
        click.echo(
            f"{metric}: threshold {threshold:.6g}  "
            f"expected miss {100 * expected.miss_rate:.3f}%  "
            f"false alarm {100 * expected.false_alarm_rate:.3f}%"
        )
    save_thresholds(out_path, ThresholdFile(
        interval_s=interval_s, p=p,
        fingerprint=model.feature_fingerprint, by_metric=by_metric,
    ))
    click.echo(f"wrote thresholds to {out_path}")


def _write_flags(path, report: scd.DetectionReport, interval_s, p) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# metric={report.metric}\n")
        fh.write(f"# interval_s={interval_s!r}\n")
        fh.write(f"# p={p!r}\n")
        fh.write(f"# threshold={report.threshold!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["time_s", "value", "flag"])
        for t, v, f in zip(report.boundary_times, report.distances, report.flags):
            writer.writerow([repr(float(t)), repr(float(v)), int(f)])


def _read_flags(path):
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line.lstrip("# ").partition("=")
                meta[key.strip()] = val.strip()
                continue
            if header is None:
                header = line.split(",")
                if header != ["time_s", "value", "flag"]:
                    raise DataError(f"{path}: unexpected column header {header}")
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(f"{path}: bad row {line!r}")
            rows.append(parts)
    if header is None:
        raise DataError(f"{path}: no header row")
    times = np.array([float(r[0]) for r in rows])
    values = np.array([float(r[1]) for r in rows])
    flags = np.array([bool(int(r[2])) for r in rows])
    return meta, times, values, flags


@cli.command("detect")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("wav_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("threshold_path", type=click.Path(dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--metric", type=click.Choice(_METRICS), default=None,
              help="Boundary metric (default: from configuration).")
@click.option("--no-vad", is_flag=True,
              help="Treat the conversation as already voice-gated.")
@vad_options
@click.pass_obj
def detect_cmd(cfg, model_path, wav_path, threshold_path, out_path, metric,
               no_vad, vad_strictness, vad_order, vad_passes):
    """Flag speaker changes in a conversation using stored thresholds."""
    cfg = _with_vad_overrides(cfg, vad_strictness, vad_order, vad_passes)
    if metric is None:
        metric = "second_diff" if cfg.use_second_difference else "pnorm"
    if not Path(threshold_path).is_file():
        raise DataError(
            f"threshold file {threshold_path} not found; run calibrate first"
        )
    model = classifier.load_model(model_path)
    tf = load_thresholds(threshold_path)
    check_fingerprint(model.feature_fingerprint, tf.fingerprint, "threshold file")
    if metric not in tf.by_metric:
        raise DataError(f"{threshold_path} holds no {metric!r} entry")
    _, threshold = tf.by_metric[metric]
    clip = load_wav(wav_path)
    seq = likelihoods(clip, model, cfg, apply_vad=not no_vad)
    report = scd.detect(
        seq,
        scd.ScdConfig(interval_s=tf.interval_s, p=tf.p,
                      use_second_difference=metric == "second_diff"),
        threshold,
    )
    _write_flags(out_path, report, tf.interval_s, tf.p)
    hits = report.boundary_times[report.flags]
    shown = ", ".join(f"{t:.2f}" for t in hits) if hits.size else "none"
    click.echo(f"{int(report.flags.sum())} of {report.flags.shape[0]} "
               f"boundaries flagged ({metric}): {shown}")
    click.echo(f"wrote flags to {out_path}")


@cli.command("score")
@click.argument("flags_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("changes_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--tolerance", type=int, default=0, show_default=True,
              help="Allowed boundary offset when matching flags to truth.")
def score_cmd(flags_path, changes_path, tolerance):
    """Score a flag file against known change points."""
    meta, _, _, flags = _read_flags(flags_path)
    if "interval_s" not in meta:
        raise DataError(f"{flags_path} header lacks interval_s")
    interval_s = float(meta["interval_s"])
    changes = corpus.load_change_points(changes_path)
    truth = corpus.truth_labels(changes, interval_s, n_boundaries=flags.shape[0])
    sc = scd.score(flags, truth, tolerance=tolerance)
    click.echo(
        f"TP {sc.tp:g}  FP {sc.fp:g}  TN {sc.tn:g}  FN {sc.fn:g}\n"
        f"error rate {100 * sc.error_rate:.3f}%  F1 {sc.f1:.3f}  "
        f"miss {100 * sc.miss_rate:.3f}%  "
        f"false alarm {100 * sc.false_alarm_rate:.3f}%"
    )


@cli.command("sweep")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("wav_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("changes_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--intervals", type=str, default="0.5,1.0,2.0", show_default=True)
@click.option("--pnorms", type=str, default="0.125,0.25,0.5,1,2,4,8,inf",
              show_default=True)
@click.option("--no-vad", is_flag=True,
              help="Treat the conversation as already voice-gated.")
@vad_options
@click.pass_obj
def sweep_cmd(cfg, model_path, wav_path, changes_path, intervals, pnorms,
              no_vad, vad_strictness, vad_order, vad_passes):
    """Calibrated error rate and F1 for every interval length, distance
    exponent, and metric combination."""
    cfg = _with_vad_overrides(cfg, vad_strictness, vad_order, vad_passes)
    ivals = _parse_float_list(intervals, "interval")
    ps = _parse_float_list(pnorms, "p")
    model = classifier.load_model(model_path)
    clip = load_wav(wav_path)
    seq = likelihoods(clip, model, cfg, apply_vad=not no_vad)
    changes = corpus.load_change_points(changes_path)

    click.echo(f"{'interval':>8} {'p':>7} {'metric':>11} {'thresh':>10} "
               f"{'Pe%':>7} {'F1':>6} {'miss%':>7} {'fa%':>7}")
    for interval_s in ivals:
        try:
            series = scd.interval_means(seq, interval_s)
        except ValueError as exc:
            # an interval too coarse for this recording should not take
            # down the rest of the sweep
            for p in ps:
                for metric in _METRICS:
                    click.echo(
                        f"{interval_s:8.2f} {p:7.3g} {metric:>11} "
                        f"{'-':>10} {'-':>7} {'-':>6} {'-':>7} {'-':>7}"
                        f"  ({exc})"
                    )
            continue
        for p in ps:
            times, dist = scd.boundary_distances(series, p)
            truth = corpus.truth_labels(changes, interval_s,
                                        n_boundaries=times.shape[0])
            values = {"pnorm": dist, "second_diff": scd.second_difference(dist)}
            for metric in _METRICS:
                try:
                    g = scd.fit_gaussians(values[metric], truth)
                except scd.ClassEmptyError as exc:
                    # a combination too coarse for this recording should not
                    # take down the rest of the sweep
                    click.echo(
                        f"{interval_s:8.2f} {p:7.3g} {metric:>11} "
                        f"{'-':>10} {'-':>7} {'-':>6} {'-':>7} {'-':>7}"
                        f"  ({exc})"
                    )
                    continue
                threshold = scd.bayes_threshold(g)
                sc = scd.score(values[metric] > threshold, truth)
                click.echo(
                    f"{interval_s:8.2f} {p:7.3g} {metric:>11} "
                    f"{threshold:10.4g} {100 * sc.error_rate:7.3f} "
                    f"{sc.f1:6.3f} {100 * sc.miss_rate:7.3f} "
                    f"{100 * sc.false_alarm_rate:7.3f}"
                )


def main(argv=None) -> int:
    """Entry point with mapped exit codes."""
    _setup_logging()
    try:
        rv = cli.main(args=argv, prog_name="scdkit", standalone_mode=False)
        return int(rv) if isinstance(rv, int) else 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except FingerprintMismatchError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except DataError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except NumericError as e:
        click.echo(f"error: {e}", err=True)
        return 3
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
