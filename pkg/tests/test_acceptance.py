"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The full-pipeline criteria (6, 7, 9, 10) share one 2000-record run built
once per session. Criterion 10 repeats that run from scratch and compares
the files byte for byte.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from voiceprior import align
from voiceprior.align import D_EMO, AlignmentModel, EmoAdaptor, one_hot
from voiceprior.captions import ATTRIBUTES, EMOTIONS, TERCILES, AttributeSpec, generate_caption, parse_caption, \
    single_attribute_captions
from voiceprior.corpus import BINS, BIN_ATTRIBUTES, FEATURE_NAME, MANIFEST, CorpusConfig, build_synthetic_corpus, \
    classify, load_corpus, tercile_counts
from voiceprior.dsp import extract_features
from voiceprior.harness import CHECKPOINT_FILES, TrainingConfig, caption_to_params, infer_from_caption, \
    run_controllability, run_training
from voiceprior.nn import grad_check
from voiceprior.prior import ScoreModel, SdeConfig, dsm_loss_and_grads, euler_maruyama, gaussian_score, \
    reverse_ode_sample
from voiceprior.synth import CORPUS_RANGES, DecoderHead, SynthParams, stage_one_loss_and_grads, synthesize

FS = 22050
N_RECORDS = 2000
N_PER_CAPTION = 20


def _pipeline(root: Path) -> dict:
    """Corpus, two-stage training and the 18-caption study, timed."""
    t0 = time.perf_counter()
    build_synthetic_corpus(CorpusConfig(n_utterances=N_RECORDS, seed=0), root / "corpus")
    t1 = time.perf_counter()
    ck = run_training(root / "corpus", TrainingConfig(seed=0), root / "checkpoints")
    t2 = time.perf_counter()
    report = run_controllability(ck, single_attribute_captions(), N_PER_CAPTION, seed=0,
                                 report_dir=root / "reports")
    t3 = time.perf_counter()
    return {"root": root, "ck": ck, "report": report,
            "corpus_s": t1 - t0, "train_s": t2 - t1, "eval_s": t3 - t2}


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("run_a"))


def test_c1_sde_marginal_oracle(criterion):
    start = time.perf_counter()
    x0 = 1.0
    x = euler_maruyama(np.full(100_000, x0), 1.0, 1e-3, np.random.default_rng(0), beta=lambda t: 0.5)
    elapsed = time.perf_counter() - start
    mean_err = abs(x.mean() - x0 * np.exp(-0.25))
    var_rel = abs(x.var() / (1 - np.exp(-0.5)) - 1)
    ok = mean_err <= 0.01 and var_rel <= 0.02 and elapsed < 10
    criterion(1, ok, f"mean err {mean_err:.4f} (<=0.01), var rel err {var_rel:.4f} (<=0.02), {elapsed:.1f}s (<10s)")
    assert ok


def test_c2_exact_score_reverse_ode(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    dim = 4
    cfg = SdeConfig(np.zeros(dim), np.ones(dim))
    worst_mean = worst_var = 0.0
    for k in range(3):
        # unit-scale data, as the prior only ever sees standardized embeddings
        m = rng.uniform(-1.5, 1.5, dim)
        v = rng.uniform(0.25, 1.0, dim)
        x = reverse_ode_sample(gaussian_score(m, v, cfg), None, 200, cfg, np.random.default_rng(100 + k),
                               n_samples=2000)
        worst_mean = max(worst_mean, np.max(np.abs(x.mean(axis=0) - m)))
        worst_var = max(worst_var, np.max(np.abs(x.var(axis=0) / v - 1)))
    elapsed = time.perf_counter() - start
    ok = worst_mean <= 0.05 and worst_var <= 0.10 and elapsed < 30
    criterion(2, ok, f"worst mean err {worst_mean:.4f} (<=0.05), worst var rel err {worst_var:.4f} (<=0.10), "
                     f"{elapsed:.1f}s (<30s)")
    assert ok


def test_c3_gradient_checks(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    errors = {}

    aligner = AlignmentModel.init(rng, hidden=12)
    aligner.temperature[:] = 0.3
    x = rng.standard_normal((6, 8))
    specs = [AttributeSpec.of({ATTRIBUTES[i % 5]: TERCILES[i % 3]}, EMOTIONS[i % 5]) for i in range(6)]
    hot = np.stack([one_hot(s) for s in specs])
    errors["aligner encoders"] = grad_check(align.alignment_parameters(aligner),
                                            lambda: align._alignment_step_grads(aligner, x, hot))

    adaptor = EmoAdaptor.init(rng)
    head = DecoderHead.init(rng, hidden=10)
    y = rng.standard_normal((6, D_EMO))
    target = rng.uniform(0, 1, (6, 5))
    n_adaptor = len(adaptor.net.parameters())

    def stage_one(part):
        loss, grads = stage_one_loss_and_grads(adaptor, head, y, target)
        return loss, grads[:n_adaptor] if part == "adaptor" else grads[n_adaptor:]

    errors["adaptor"] = grad_check(adaptor.net.parameters(), lambda: stage_one("adaptor"))
    errors["decoder head"] = grad_check(head.net.parameters(), lambda: stage_one("head"))

    cfg = SdeConfig(np.zeros(D_EMO), np.ones(D_EMO))
    score = ScoreModel.init(cfg, rng, D_EMO, 12, 2)
    yb, zb = rng.standard_normal((5, D_EMO)), rng.standard_normal((5, D_EMO))
    t = rng.uniform(0.05, 1.0, 5)
    noise = rng.standard_normal((5, D_EMO))
    errors["score net"] = grad_check(score.net.parameters(),
                                     lambda: dsm_loss_and_grads(score, yb, zb, cfg, rng, t, noise))
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    criterion(3, ok, f"max rel err: {detail} (<=1e-4), {elapsed:.1f}s (<60s)")
    assert ok


def _random_spec(rng):
    while True:
        terc = {a: TERCILES[rng.integers(3)] for a in ATTRIBUTES if rng.random() < 0.5}
        emotion = EMOTIONS[rng.integers(5)] if rng.random() < 0.5 else None
        spec = AttributeSpec.of(terc, emotion)
        if not spec.is_empty():
            return spec


def test_c4_caption_round_trip(criterion):
    rng = np.random.default_rng(4)
    failures = 0
    n = 2000
    for _ in range(n):
        spec = _random_spec(rng)
        failures += parse_caption(generate_caption(spec, rng)) != spec
    singles = single_attribute_captions()
    singles_ok = len(singles) == 18 and all(len(parse_caption(c).entries) == 1 for c in singles)
    singles_ok = singles_ok and all(parse_caption(generate_caption(parse_caption(c), rng)) == parse_caption(c)
                                    for c in singles)
    ok = failures == 0 and singles_ok
    criterion(4, ok, f"{n - failures}/{n} sampled specs round-trip, 18 single-attribute captions "
                     f"{'ok' if singles_ok else 'FAILED'}")
    assert ok


def test_c5_synth_round_trip(criterion):
    rng = np.random.default_rng(5)
    worst_pitch = worst_level = 0.0
    for k in range(100):
        p = SynthParams(rng.uniform(*CORPUS_RANGES["f0"]), rng.uniform(0, 10), rng.uniform(*CORPUS_RANGES["level_db"]),
                        rng.uniform(0, 1), rng.uniform(*CORPUS_RANGES["shimmer_pct"]), 1.0)
        f = extract_features(synthesize(p, np.random.default_rng(1000 + k), FS))
        worst_pitch = max(worst_pitch, abs(f.pitch_mean - p.f0) / p.f0)
        worst_level = max(worst_level, abs(f.level_db - p.level_db))
    means = []
    for j in (0.0, 1.0, 2.0, 4.0):
        p = SynthParams(200.0, 5.0, -18.0, j, 2.0, 1.0)
        means.append(np.mean([extract_features(synthesize(p, np.random.default_rng(s), FS)).jitter_ratio
                              for s in range(20)]))
    monotone = all(a < b for a, b in zip(means, means[1:]))
    ok = worst_pitch <= 0.02 and worst_level <= 1.0 and monotone
    criterion(5, ok, f"worst pitch err {worst_pitch:.4f} (<=0.02), worst level err {worst_level:.3f} dB (<=1), "
                     f"mean jitter over 0/1/2/4 % = {', '.join(f'{m:.4f}' for m in means)}")
    assert ok


def test_c6_binning(pipeline, criterion):
    records, bins = load_corpus(pipeline["root"] / "corpus")
    worst = 0.0
    for attr in BIN_ATTRIBUTES:
        counts = tercile_counts([r.values()[attr] for r in records], bins[attr])
        for terc, share in zip(TERCILES, (0.3, 0.4, 0.3)):
            worst = max(worst, abs(counts[terc] / len(records) - share))
    ok = len(records) == N_RECORDS and worst <= 0.02
    criterion(6, ok, f"{len(records)} records, worst share deviation {worst:.4f} (<=0.02)")
    assert ok


def test_c7_controllability(pipeline, criterion):
    report = pipeline["report"]
    medians = report.medians()
    conformance = {(s["attribute"], s["tercile"]): s["conformance_rate"] for s in report.summary}
    ordered = {a: medians[(a, "Low")] < medians[(a, "Mid")] < medians[(a, "Top")]
               for a in ("pitch_mean", "pitch_std", "level", "jitter", "shimmer")}
    caption_conf = report.caption_conformance()
    low_mid = {c: v for c, v in caption_conf.items() if parse_caption(c).entries[0][1] in ("Low", "Mid")}
    worst = min(low_mid.values())
    wall = pipeline["train_s"] + pipeline["eval_s"]
    ok = all(ordered.values()) and worst >= 0.6 and wall < 30 * 60 and len(report.rows) == 18 * N_PER_CAPTION
    bad = [a for a, v in ordered.items() if not v]
    criterion(7, ok, f"medians ordered for {5 - len(bad)}/5 attributes{' (not: ' + ', '.join(bad) + ')' if bad else ''}, "
                     f"worst Low/Mid caption conformance {worst:.2f} (>=0.6), "
                     f"lowest summary rate {min(conformance.values()):.2f}, "
                     f"train {pipeline['train_s']:.0f}s + eval {pipeline['eval_s']:.0f}s (<1800s)")
    assert ok


def test_c8_caption_only_inference(pipeline, criterion):
    ck = pipeline["ck"]
    before = align.AUDIO_ENCODER_CALLS.count
    for i, caption in enumerate(single_attribute_captions()[:6]):
        infer_from_caption(caption, ck, seed=i)
    calls = align.AUDIO_ENCODER_CALLS.count - before
    criterion(8, calls == 0, f"audio encoder calls during inference: {calls}")
    assert calls == 0


def _diversity_captions() -> list[str]:
    # the Low and Top caption of each controllable attribute
    out = []
    for c in single_attribute_captions():
        spec = parse_caption(c)
        if c.startswith("the speaker has") and spec.entries[0][1] in ("Low", "Top"):
            out.append(c)
    return out


def test_c9_diversity(pipeline, criterion):
    ck = pipeline["ck"]
    captions = _diversity_captions()
    distinct = conform = 0
    for caption in captions:
        attr, terc = parse_caption(caption).entries[0]
        u = [caption_to_params(caption, ck, seed)[1] for seed in (0, 1)]
        distinct += np.max(np.abs(u[0] - u[1])) > 1e-3
        got = [classify(extract_features(infer_from_caption(caption, ck, seed)).to_dict()[FEATURE_NAME[attr]],
                        ck.bins[FEATURE_NAME[attr]]) for seed in (0, 1)]
        conform += got == [terc, terc]
    ok = len(captions) == 10 and distinct == 10 and conform == 10
    criterion(9, ok, f"{len(captions)} captions: params differ for {distinct}/10, both seeds conform for {conform}/10")
    assert ok


def _digest(root: Path) -> dict[str, str]:
    files = [root / "corpus" / MANIFEST, root / "corpus" / BINS]
    files += sorted((root / "corpus" / "wav").glob("*.wav"))
    files += [root / "checkpoints" / n for n in CHECKPOINT_FILES + ("pipeline.json", "retrieval.csv")]
    files += [root / "reports" / "report.csv", root / "reports" / "summary.csv"]
    return {str(f.relative_to(root)): hashlib.sha256(f.read_bytes()).hexdigest() for f in files}


@pytest.mark.slow
def test_c10_determinism(pipeline, tmp_path_factory, criterion):
    first = _digest(pipeline["root"])
    second = _digest(_pipeline(tmp_path_factory.mktemp("run_b"))["root"])
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = not differing and first.keys() == second.keys()
    criterion(10, ok, f"{len(first)} files compared across two full runs, {len(differing)} differ"
                      + (f" ({', '.join(differing[:3])})" if differing else ""))
    assert ok
