"""Whole-system acceptance checks, one test per numbered criterion.

Each test prints the values it measured next to the pinned bound, so a
failing run shows how far off the system was.  The desk-scale fixtures
(synthetic speakers, trained network, scored conversations) are shared
across criteria and built once per module.
"""

import math
import os
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from scdkit import scd
from scdkit.classifier import (
    Model,
    NetworkShape,
    TrainConfig,
    cost,
    evaluate,
    frames_to_duration,
    gradient,
    save_model,
    train,
)
from scdkit.corpus import (
    SHARED_TEXT,
    TRAIN_TEXT,
    build_conversation,
    build_timit_manifest,
    scan_dataset,
    synth_speaker_corpus,
    truth_labels,
)
from scdkit.pipeline import (
    PipelineConfig,
    feature_fingerprint,
    likelihoods,
    load_feature_corpus,
    preprocess_corpus,
)
from scdkit.scd import GaussianPair, bayes_threshold, score, theoretical_score

# Desk-scale settings shared by criteria 4, 5 and 9.  The corpus seeds are
# fixed; the two corpora use different seeds so the conversation speakers
# are voices the classifier never saw.  Conversation speakers get few long
# utterances rather than many short ones: each block must fit inside one
# utterance's voiced run, because a block spliced across two utterances
# reads as a voice change mid-block and poisons the negative boundaries.
IN_DOMAIN_SEED = 101
OUT_DOMAIN_SEED = 606
N_SPEAKERS = 20
UTTS_PER_SPEAKER = 6
UTT_SECONDS = 4.0
OOD_UTTS_PER_SPEAKER = 2
OOD_UTT_SECONDS = 18.0
HIDDEN = (400,)
SCHEDULE = (3.0, 1.0)
CONV_BLOCK_S = 6.0
CONV_SPEAKERS = 5
N_CONVERSATIONS = 15


@pytest.fixture(scope="module")
def trained_system(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    cfg = PipelineConfig()
    t0 = time.monotonic()
    dataset = synth_speaker_corpus(
        base / "speakers", N_SPEAKERS, UTTS_PER_SPEAKER, UTT_SECONDS,
        seed=IN_DOMAIN_SEED,
    )
    preprocess_corpus(dataset, base / "features", cfg)
    by_speaker = load_feature_corpus(base / "features", cfg, categories=(TRAIN_TEXT,))
    stacked = {k: np.vstack([s.frames for s in v]) for k, v in by_speaker.items()}
    model, _ = train(
        stacked,
        TrainConfig(lambda_schedule=SCHEDULE, cg_iters_per_stage=200, seed=0),
        hidden=HIDDEN,
        feature_fingerprint=feature_fingerprint(cfg),
    )
    elapsed = time.monotonic() - t0
    return SimpleNamespace(base=base, cfg=cfg, model=model, train_elapsed_s=elapsed)


@pytest.fixture(scope="module")
def detection_results(trained_system, tmp_path_factory):
    """Thresholds calibrated on one speaker pool, scored on a disjoint one."""
    sys = trained_system
    base = tmp_path_factory.mktemp("conversations")
    t0 = time.monotonic()
    ood = synth_speaker_corpus(
        base / "speakers", N_SPEAKERS, OOD_UTTS_PER_SPEAKER, OOD_UTT_SECONDS,
        seed=OUT_DOMAIN_SEED,
    )
    ids = ood.speaker_ids

    def conversations(pool, seed0):
        out = []
        for i in range(N_CONVERSATIONS):
            chosen = [pool[(i + j) % len(pool)] for j in range(CONV_SPEAKERS)]
            out.append(
                build_conversation(
                    ood,
                    speakers=chosen,
                    seed=seed0 + i,
                    categories=(TRAIN_TEXT, SHARED_TEXT),
                    block_seconds=CONV_BLOCK_S,
                )
            )
        return out

    cal_convs = conversations(ids[:10], seed0=1000)
    test_convs = conversations(ids[10:], seed0=2000)

    # conversations are already voice-gated, so the likelihood timeline
    # matches the change-point times without a second VAD pass
    rows = {
        id(c): likelihoods(c.audio, sys.model, sys.cfg, apply_vad=False)
        for c in cal_convs + test_convs
    }

    def pooled(convs, interval_s, metric):
        values, labels = [], []
        for c in convs:
            series = scd.interval_means(rows[id(c)], interval_s)
            _, d = scd.boundary_distances(series, p=2.0)
            v = scd.second_difference(d) if metric == "second_diff" else d
            values.append(v)
            labels.append(truth_labels(c.change_points_s, interval_s,
                                       n_boundaries=v.shape[0]))
        return np.concatenate(values), np.concatenate(labels)

    results = {}
    for interval_s in (0.5, 1.0, 2.0):
        for metric in ("pnorm", "second_diff"):
            cal_v, cal_t = pooled(cal_convs, interval_s, metric)
            threshold = bayes_threshold(scd.fit_gaussians(cal_v, cal_t))
            test_v, test_t = pooled(test_convs, interval_s, metric)
            results[(interval_s, metric)] = score(test_v > threshold, test_t)
    elapsed = time.monotonic() - t0
    return SimpleNamespace(results=results, elapsed_s=elapsed)


def _finite_difference_gradient(model, X, Y, decay, step):
    shapes = [w.shape for w in model.weights]
    flat = np.concatenate([w.reshape(-1) for w in model.weights])

    def rebuild(v):
        out, pos = [], 0
        for s in shapes:
            n = s[0] * s[1]
            out.append(v[pos:pos + n].reshape(s))
            pos += n
        return Model(out, model.speaker_labels)

    grad = np.empty_like(flat)
    for i in range(flat.shape[0]):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        grad[i] = (cost(rebuild(up), X, Y, decay)
                   - cost(rebuild(dn), X, Y, decay)) / (2.0 * step)
    return grad


def test_criterion_01_gradient_matches_finite_differences():
    rng = np.random.default_rng(2024)
    t0 = time.monotonic()
    worst = 0.0
    for trial in range(20):
        n_in = int(rng.integers(2, 9))
        n_hidden = int(rng.integers(2, 7))
        n_out = int(rng.integers(2, 6))
        n_samples = int(rng.integers(2, 21))
        decay = float(rng.choice([0.0, 0.3, 3.0]))
        sizes = (n_in, n_hidden, n_out)
        weights = [
            rng.uniform(-0.8, 0.8, size=(sizes[i + 1], sizes[i] + 1))
            for i in range(len(sizes) - 1)
        ]
        model = Model(weights, ())
        X = rng.normal(size=(n_samples, n_in))
        Y = np.zeros((n_samples, n_out))
        Y[np.arange(n_samples), rng.integers(0, n_out, size=n_samples)] = 1.0
        exact = np.concatenate([g.reshape(-1)
                                for g in gradient(model, X, Y, decay)])
        approx = _finite_difference_gradient(model, X, Y, decay, step=1e-6)
        rel = np.max(np.abs(exact - approx)) / max(1.0, float(np.max(np.abs(exact))))
        worst = max(worst, rel)
    elapsed = time.monotonic() - t0
    print(f"[criterion 1] worst relative error {worst:.3e} (bound 1e-6), "
          f"{elapsed:.1f}s (bound 10s)")
    assert worst < 1e-6
    assert elapsed < 10.0


def test_criterion_02_cost_identity_and_decay_additivity():
    sizes = NetworkShape((7, 4, 200)).layer_sizes
    zero = Model([np.zeros((sizes[i + 1], sizes[i] + 1))
                  for i in range(2)], ())
    rng = np.random.default_rng(7)
    X = rng.normal(size=(9, 7))
    Y = np.zeros((9, 200))
    Y[np.arange(9), rng.integers(0, 200, size=9)] = 1.0
    j = cost(zero, X, Y, 0.0)
    print(f"[criterion 2] zero-weight cost {j!r} vs 200*ln2 "
          f"{200 * math.log(2)!r} (bound 1e-9)")
    assert abs(j - 200.0 * math.log(2.0)) <= 1e-9

    weights = [rng.uniform(-0.7, 0.7, size=(4, 8)),
               rng.uniform(-0.7, 0.7, size=(200, 5))]
    model = Model(weights, ())
    decay = 1.7
    penalty = sum(float(np.sum(w[:, 1:] ** 2)) for w in weights)
    expected = cost(model, X, Y, 0.0) + decay / (2.0 * 9) * penalty
    got = cost(model, X, Y, decay)
    print(f"[criterion 2] decay additivity gap {abs(got - expected):.3e} "
          f"(bound 1e-12)")
    assert abs(got - expected) <= 1e-12


def test_criterion_03_frame_count_durations():
    table = {2: "0.13", 5: "0.22", 6: "0.25", 30: "0.97"}
    shown = {n: f"{frames_to_duration(n):.2f}" for n in table}
    print(f"[criterion 3] durations {shown}")
    assert shown == table


def test_criterion_04_desk_scale_classification(trained_system):
    sys = trained_system
    t0 = time.monotonic()
    held_out = load_feature_corpus(sys.base / "features", sys.cfg,
                                   categories=(SHARED_TEXT,))
    report = evaluate(sys.model, held_out)
    elapsed = sys.train_elapsed_s + (time.monotonic() - t0)
    print(f"[criterion 4] file accuracy {report.file_accuracy:.3f} (need 1.0), "
          f"frame accuracy {report.frame_accuracy:.3f} (need >= 0.70), "
          f"{elapsed:.0f}s (bound 600s)")
    assert report.file_accuracy == 1.0
    assert report.frame_accuracy >= 0.70
    assert elapsed < 600.0


def test_criterion_05_desk_scale_change_detection(detection_results):
    res = detection_results.results
    for interval_s in (1.0, 2.0):
        card = res[(interval_s, "pnorm")]
        print(f"[criterion 5] {interval_s}s: F1 {card.f1:.4f} (need >= 0.90), "
              f"Pe {100 * card.error_rate:.2f}% (bound 2%)")
        assert card.f1 >= 0.90
        assert card.error_rate <= 0.02
    card = res[(0.5, "pnorm")]
    print(f"[criterion 5] 0.5s: F1 {card.f1:.4f} (need >= 0.70)")
    assert card.f1 >= 0.70
    print(f"[criterion 5] detection phase {detection_results.elapsed_s:.0f}s "
          f"(bound 300s)")
    assert detection_results.elapsed_s < 300.0


TIMIT_ENV = "SCDKIT_TIMIT_ROOT"


@pytest.mark.skipif(TIMIT_ENV not in os.environ,
                    reason=f"{TIMIT_ENV} not set")
def test_criterion_06_timit_male_split(tmp_path):
    """Full-scale run on a user-supplied, writable, RIFF-converted TIMIT copy."""
    root = Path(os.environ[TIMIT_ENV])
    if not (root / "TRAIN").is_dir():
        pytest.skip(f"no TRAIN tree under {root}")
    cfg = PipelineConfig()
    build_timit_manifest(root / "TRAIN", out_root=root, males_only=True)
    dataset = scan_dataset(root)
    ids = dataset.speaker_ids
    in_domain, out_domain = ids[:200], ids[200:]
    print(f"[criterion 6] {len(ids)} male speakers: {len(in_domain)} in-domain, "
          f"{len(out_domain)} out-of-domain")

    preprocess_corpus(dataset, tmp_path / "features", cfg)
    by_speaker = load_feature_corpus(tmp_path / "features", cfg,
                                     categories=(TRAIN_TEXT,))
    stacked = {k: np.vstack([s.frames for s in v])
               for k, v in by_speaker.items() if k in in_domain}
    model, _ = train(
        stacked,
        TrainConfig(lambda_schedule=(3.0, 1.0, 0.3, 0.1, 0.0),
                    cg_iters_per_stage=200, seed=0),
        hidden=(200,),
        feature_fingerprint=feature_fingerprint(cfg),
    )

    held_out = load_feature_corpus(tmp_path / "features", cfg,
                                   categories=(SHARED_TEXT,))
    report = evaluate(model, {k: v for k, v in held_out.items()
                              if k in in_domain})
    print(f"[criterion 6] file accuracy {report.file_accuracy:.4f} (need 1.0)")
    assert report.file_accuracy == 1.0

    half = len(out_domain) // 2
    cal_conv = build_conversation(dataset, speakers=out_domain[:half], seed=11,
                                  categories=(TRAIN_TEXT, SHARED_TEXT))
    test_conv = build_conversation(dataset, speakers=out_domain[half:], seed=12,
                                   categories=(TRAIN_TEXT, SHARED_TEXT))
    references = {1.0: 0.969, 2.0: 0.992}
    for interval_s, reference in references.items():
        def boundary_values(conv):
            seq = likelihoods(conv.audio, model, cfg, apply_vad=False)
            _, d = scd.boundary_distances(scd.interval_means(seq, interval_s),
                                          p=2.0)
            truth = truth_labels(conv.change_points_s, interval_s,
                                 n_boundaries=d.shape[0])
            return d, truth

        cal_v, cal_t = boundary_values(cal_conv)
        threshold = bayes_threshold(scd.fit_gaussians(cal_v, cal_t))
        test_v, test_t = boundary_values(test_conv)
        card = score(test_v > threshold, test_t)
        print(f"[criterion 6] {interval_s}s F1 {card.f1:.4f} "
              f"vs reference {reference} (tolerance 0.05)")
        assert abs(card.f1 - reference) <= 0.05


def test_criterion_07_score_matches_brute_force():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        flags = rng.random(n) < rng.uniform(0.1, 0.9)
        truth = rng.random(n) < rng.uniform(0.1, 0.9)
        tp = fp = tn = fn = 0
        for f, t in zip(flags, truth):
            if f and t:
                tp += 1
            elif f and not t:
                fp += 1
            elif not f and t:
                fn += 1
            else:
                tn += 1
        card = score(flags, truth)
        assert (card.tp, card.fp, card.tn, card.fn) == (tp, fp, tn, fn)
    print("[criterion 7] 1000 random vectors, all counts exact")


def test_criterion_08_bayes_threshold_and_rates():
    sym = GaussianPair(mean_neg=-1.3, std_neg=0.7, prior_neg=0.5,
                       mean_pos=4.1, std_pos=0.7, prior_pos=0.5)
    got = bayes_threshold(sym)
    print(f"[criterion 8] symmetric threshold {got!r} vs midpoint "
          f"{(sym.mean_neg + sym.mean_pos) / 2.0!r} (exact)")
    assert got == (sym.mean_neg + sym.mean_pos) / 2.0

    def bisection_crossing(g):
        def gap(x):
            ln_neg = (math.log(g.prior_neg) - math.log(g.std_neg)
                      - 0.5 * ((x - g.mean_neg) / g.std_neg) ** 2)
            ln_pos = (math.log(g.prior_pos) - math.log(g.std_pos)
                      - 0.5 * ((x - g.mean_pos) / g.std_pos) ** 2)
            return ln_neg - ln_pos
        lo, hi = sorted((g.mean_neg, g.mean_pos))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if gap(lo) * gap(mid) <= 0.0:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)

    cases = [
        GaussianPair(0.0, 1.0, 0.5, 3.0, 2.0, 0.5),
        GaussianPair(-2.0, 0.8, 0.3, 1.5, 1.7, 0.7),
        GaussianPair(5.0, 0.5, 0.9, 6.4, 1.1, 0.1),
    ]
    worst = 0.0
    for g in cases:
        worst = max(worst, abs(bayes_threshold(g) - bisection_crossing(g)))
    print(f"[criterion 8] worst gap to bisection oracle {worst:.3e} "
          f"(bound 1e-9)")
    assert worst <= 1e-9

    g = GaussianPair(0.0, 1.0, 0.65, 3.0, 1.4, 0.35)
    threshold = bayes_threshold(g)
    rng = np.random.default_rng(8675309)
    n = 1_000_000
    is_pos = rng.random(n) < g.prior_pos
    values = np.where(
        is_pos,
        rng.normal(g.mean_pos, g.std_pos, size=n),
        rng.normal(g.mean_neg, g.std_neg, size=n),
    )
    flagged = values > threshold
    fnr = float(np.mean(~flagged[is_pos]))
    fpr = float(np.mean(flagged[~is_pos]))
    expected = theoretical_score(g, threshold)
    print(f"[criterion 8] Monte-Carlo FNR {fnr:.5f} vs {expected.miss_rate:.5f}, "
          f"FPR {fpr:.5f} vs {expected.false_alarm_rate:.5f} (bound 0.005)")
    assert abs(fnr - expected.miss_rate) <= 0.005
    assert abs(fpr - expected.false_alarm_rate) <= 0.005


def test_criterion_09_second_difference_does_not_degrade(detection_results):
    res = detection_results.results
    plain = res[(0.5, "pnorm")].error_rate
    curved = res[(0.5, "second_diff")].error_rate
    print(f"[criterion 9] 0.5s Pe: plain {100 * plain:.2f}% vs second "
          f"difference {100 * curved:.2f}% (must not be worse)")
    assert curved <= plain


def test_criterion_10_pipeline_rerun_is_byte_identical(tmp_path):
    cfg = PipelineConfig()
    outputs = []
    for run in ("first", "second"):
        root = tmp_path / run
        ds = synth_speaker_corpus(root / "speakers", 3, 2, 2.5, seed=77)
        preprocess_corpus(ds, root / "features", cfg)
        by_speaker = load_feature_corpus(root / "features", cfg,
                                         categories=(TRAIN_TEXT,))
        stacked = {k: np.vstack([s.frames for s in v])
                   for k, v in by_speaker.items()}
        model, _ = train(
            stacked,
            TrainConfig(lambda_schedule=(0.3, 0.0), cg_iters_per_stage=40,
                        seed=3),
            hidden=(8,),
            feature_fingerprint=feature_fingerprint(cfg),
        )
        save_model(root / "model.bin", model)
        feats = sorted((root / "features").rglob("*.feat"))
        outputs.append((root, [p.relative_to(root) for p in feats]))

    (root_a, feats_a), (root_b, feats_b) = outputs
    assert feats_a == feats_b
    for rel in feats_a:
        assert (root_a / rel).read_bytes() == (root_b / rel).read_bytes()
    assert (root_a / "model.bin").read_bytes() == (root_b / "model.bin").read_bytes()
    print(f"[criterion 10] {len(feats_a)} feature files and the model file "
          f"are byte-identical across reruns")
