"""Two-stage training, caption-only inference and the controllability study.

Stage I trains the emotion adaptor and decoder head on frozen audio
embeddings of the reference utterances. Stage II trains the diffusion
prior to produce those audio embeddings from caption embeddings. At
inference time only the caption path runs: parse, text encoder, prior,
adaptor, decoder head, synthesizer.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import align
from .align import AlignConfig, AlignmentModel, EmoAdaptor, NormStats, encode_audio, encode_text
from .captions import CONTROLLABLE, AttributeSpec, parse_caption
from .corpus import FEATURE_NAME, BinBoundaries, CorpusRecord, audio_inputs, classify, load_corpus
from .dsp import AnalysisConfig, FeatureVector, Waveform, extract_features
from .errors import MissingCheckpoint, PreconditionError, StageError, VoicePriorError
from .prior import PriorConfig, ScoreModel, SdeConfig, guided_score, reverse_ode_sample, train_prior
from .synth import DecoderConfig, DecoderHead, SynthParams, decode_normalized, denormalize_params, \
    normalize_params, synthesize, train_decoder

REPORT_HEADER = ["caption", "sample_idx", "seed", "pitch_mean_hz", "pitch_std_hz", "level_db", "jitter_ratio",
                 "shimmer_ratio", "target_attr", "target_tercile", "assigned_tercile", "conform"]
SUMMARY_HEADER = ["attribute", "tercile", "median", "iqr", "conformance_rate"]
RETRIEVAL_HEADER = ["pool_size", "top1", "top5"]

CHECKPOINT_FILES = ("aligner.json", "adaptor.json", "decoder.json", "prior.json", "bins.json")


@dataclass
class TrainingConfig:
    seed: int = 0
    align: AlignConfig = field(default_factory=AlignConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    # probability that a Stage II caption is a random partial spec of the record
    partial_caption_prob: float = 0.5
    # largest partial spec drawn for Stage II (evaluation captions have one or two clauses)
    partial_max_items: int = 3
    sde: SdeConfig = field(default_factory=SdeConfig)

    def seeded(self) -> "TrainingConfig":
        """Copy with each stage's seed derived from the master seed."""
        s = self.seed
        return TrainingConfig(
            s,
            AlignConfig(**{**asdict(self.align), "seed": s * 1000 + 1}),
            DecoderConfig(**{**asdict(self.decoder), "seed": s * 1000 + 2}),
            PriorConfig(**{**asdict(self.prior), "seed": s * 1000 + 3}),
            self.partial_caption_prob,
            self.partial_max_items,
            self.sde,
        )


@dataclass
class PipelineCheckpointSet:
    aligner: AlignmentModel
    audio_stats: NormStats
    adaptor: EmoAdaptor
    head: DecoderHead
    prior: ScoreModel
    embedding_stats: NormStats
    bins: BinBoundaries
    config: dict
    hashes: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    @property
    def sde(self) -> SdeConfig:
        return self.prior.cfg

    @property
    def guidance(self) -> float:
        return float(self.config.get("prior", {}).get("guidance", 0.0))


def _dumps(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True) + "\n").encode("utf-8")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _payloads(ck: PipelineCheckpointSet, optimizers: dict | None = None) -> dict[str, bytes]:
    opt = optimizers or {}
    return {
        "aligner.json": _dumps({"model": ck.aligner.to_dict(), "audio_stats": ck.audio_stats.to_dict(),
                                "optimizer": opt.get("align"), "config": ck.config.get("align")}),
        "adaptor.json": _dumps({"model": ck.adaptor.to_dict(), "config": ck.config.get("decoder")}),
        "decoder.json": _dumps({"model": ck.head.to_dict(), "optimizer": opt.get("decoder"),
                                "config": ck.config.get("decoder")}),
        "prior.json": _dumps({"model": ck.prior.to_dict(), "embedding_stats": ck.embedding_stats.to_dict(),
                              "optimizer": opt.get("prior"), "config": ck.config.get("prior")}),
        "bins.json": (ck.bins.to_json() + "\n").encode("utf-8"),
    }


def component_hash(ck: PipelineCheckpointSet, name: str) -> str:
    return _sha(_payloads(ck)[name])


def save_checkpoints(ck: PipelineCheckpointSet, out_dir, optimizers: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payloads = _payloads(ck, optimizers)
    for name, data in payloads.items():
        (out / name).write_bytes(data)
    ck.hashes = {name: _sha(data) for name, data in payloads.items()}
    meta = {"hashes": ck.hashes, "config": ck.config, "reports": ck.reports,
            "dims": {"d_emo": ck.aligner.text_encoder.out_dim, "d_dec": ck.adaptor.net.out_dim}}
    (out / "pipeline.json").write_bytes(_dumps(meta))


def load_checkpoints(ckpt_dir) -> PipelineCheckpointSet:
    d = Path(ckpt_dir)
    missing = [n for n in CHECKPOINT_FILES + ("pipeline.json",) if not (d / n).is_file()]
    if missing:
        raise MissingCheckpoint(f"{d}: missing {', '.join(missing)}")
    read = lambda n: json.loads((d / n).read_text("utf-8"))  # noqa: E731
    al, ad, de, pr, meta = (read(n) for n in ("aligner.json", "adaptor.json", "decoder.json",
                                              "prior.json", "pipeline.json"))
    ck = PipelineCheckpointSet(
        AlignmentModel.from_dict(al["model"]), NormStats.from_dict(al["audio_stats"]),
        EmoAdaptor.from_dict(ad["model"]), DecoderHead.from_dict(de["model"]),
        ScoreModel.from_dict(pr["model"]), NormStats.from_dict(pr["embedding_stats"]),
        BinBoundaries.from_json((d / "bins.json").read_text("utf-8")),
        meta["config"], meta["hashes"], meta.get("reports", {}))
    if ck.adaptor.net.in_dim != ck.aligner.text_encoder.out_dim or ck.head.net.in_dim != ck.adaptor.net.out_dim:
        raise MissingCheckpoint("checkpoint dimensions are inconsistent")
    return ck


# ------------------------------------------------------------------ training


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (VoicePriorError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


def _load(corpus_dir):
    return load_corpus(corpus_dir)


def run_training(corpus_dir, config: TrainingConfig = TrainingConfig(), checkpoint_dir=None,
                 log=None) -> PipelineCheckpointSet:
    """Alignment, then Stage I (adaptor + decoder head), then Stage II (prior)."""
    cfg = config.seeded()

    def alignment_stage():
        records, bins = _load(corpus_dir)
        x = audio_inputs(records)
        res = align.train_alignment(x, [r.spec for r in records], cfg.align, log)
        return records, bins, x, res

    records, bins, x, ares = _stage("alignment", alignment_stage)
    aligner, stats = ares.model, ares.stats
    if log:
        log(f"alignment retrieval {ares.retrieval}")

    def decoder_stage():
        y = encode_audio(aligner, x, stats)
        targets = np.stack([normalize_params(r.params) for r in records])
        return y, train_decoder(y, targets, cfg.decoder, log)

    y, dres = _stage("decoder", decoder_stage)
    if log:
        log(f"decoder holdout rmse {dres.holdout_rmse:.4f} (baseline {dres.baseline_rmse:.4f})")

    def prior_stage():
        emb_stats = NormStats.fit(y)
        y_std = emb_stats.apply(y)
        specs = [r.spec for r in records]
        cache: dict[AttributeSpec, np.ndarray] = {}

        def cond(idx, rng):
            out = []
            partial = rng.random(len(idx)) < cfg.partial_caption_prob
            for i, p in zip(idx, partial):
                s = align.sample_partial_spec(specs[i], rng, cfg.partial_max_items) if p else specs[i]
                if s not in cache:
                    cache[s] = encode_text(aligner, s)
                out.append(cache[s])
            return np.stack(out)

        return emb_stats, train_prior(y_std, cond, cfg.sde, cfg.prior, log)

    before = _sha(_dumps(aligner.to_dict()))
    emb_stats, pres = _stage("prior", prior_stage)
    if _sha(_dumps(aligner.to_dict())) != before:
        raise StageError("prior", RuntimeError("aligner changed during Stage II"))

    ck = PipelineCheckpointSet(
        aligner, stats, dres.adaptor, dres.head, pres.model, emb_stats, bins,
        config={"seed": cfg.seed, "align": asdict(cfg.align), "decoder": asdict(cfg.decoder),
                "prior": asdict(cfg.prior), "sde": pres.model.cfg.to_dict(),
                "partial_caption_prob": cfg.partial_caption_prob,
                "partial_max_items": cfg.partial_max_items},
        reports={"alignment": {"initial_loss": ares.initial_loss, "history": ares.history,
                               "retrieval": ares.retrieval},
                 "decoder": {"initial_loss": dres.initial_loss, "history": dres.history,
                             "holdout_rmse": dres.holdout_rmse, "baseline_rmse": dres.baseline_rmse},
                 "prior": {"history": pres.history}})
    optimizers = {"align": ares.optimizer.to_dict(), "decoder": dres.optimizer.to_dict(),
                  "prior": pres.optimizer.to_dict()}
    if checkpoint_dir is not None:
        save_checkpoints(ck, checkpoint_dir, optimizers)
        with open(Path(checkpoint_dir) / "retrieval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RETRIEVAL_HEADER)
            w.writerow([ares.retrieval.get(k) for k in RETRIEVAL_HEADER])
    else:
        ck.hashes = {n: _sha(b) for n, b in _payloads(ck, optimizers).items()}
    return ck


# ------------------------------------------------------------------ inference


def _streams(seed: int):
    prior_seed, synth_seed = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(prior_seed), np.random.default_rng(synth_seed)


def caption_to_params(caption: str, ck: PipelineCheckpointSet, seed: int, n_steps: int = 100):
    """Caption -> (spec, normalized params, SynthParams) without touching the audio encoder."""
    spec = parse_caption(caption)
    z = encode_text(ck.aligner, spec)
    prior_rng, _ = _streams(seed)
    y_std = reverse_ode_sample(guided_score(ck.prior, ck.guidance), z, n_steps, ck.sde, prior_rng)
    y = ck.embedding_stats.invert(y_std)
    u = decode_normalized(ck.head, align.adapt(ck.adaptor, y))
    return spec, u, denormalize_params(u, ck.head.duration_s)


def infer_from_caption(caption: str, ck: PipelineCheckpointSet, seed: int, n_steps: int = 100,
                       sample_rate: int = 22050) -> Waveform:
    _, _, params = caption_to_params(caption, ck, seed, n_steps)
    _, synth_rng = _streams(seed)
    return synthesize(params, synth_rng, sample_rate)


# ------------------------------------------------------------------ evaluation


@dataclass
class SampleRow:
    caption: str
    sample_idx: int
    seed: int
    features: FeatureVector | None
    targets: list[tuple[str, str]]
    assigned: list[str]
    conform: bool | None
    error: str = ""

    def csv_row(self) -> list:
        f = self.features
        vals = [repr(v) for v in f.as_array()] if f is not None else ["nan"] * 5
        return [self.caption, self.sample_idx, self.seed, *vals,
                ";".join(a for a, _ in self.targets), ";".join(t for _, t in self.targets),
                ";".join(self.assigned) if f is not None else "FAILED",
                "" if self.conform is None else int(self.conform)]


@dataclass
class CaptionResult:
    caption: str
    spec: AttributeSpec
    rows: list[SampleRow]

    @property
    def conformance(self) -> float:
        ok = [r.conform for r in self.rows]
        return float(np.mean([bool(c) for c in ok])) if ok else float("nan")


@dataclass
class ControllabilityReport:
    captions: list[CaptionResult]
    summary: list[dict]
    n_per_caption: int

    @property
    def rows(self) -> list[SampleRow]:
        return [r for c in self.captions for r in c.rows]

    def medians(self) -> dict[tuple[str, str], float]:
        return {(s["attribute"], s["tercile"]): s["median"] for s in self.summary}

    def caption_conformance(self) -> dict[str, float]:
        return {c.caption: c.conformance for c in self.captions}


def eval_seed(master: int, caption_idx: int, sample_idx: int) -> int:
    return int(np.random.SeedSequence([master, caption_idx, sample_idx]).generate_state(1)[0])


def _evaluate_sample(caption, spec, ci, si, ck, seed, n_steps, analysis, fatal) -> SampleRow:
    s = eval_seed(seed, ci, si)
    targets = [(a, t) for a, t in spec.entries if a in CONTROLLABLE]
    try:
        wav = infer_from_caption(caption, ck, s, n_steps)
        feats = extract_features(wav, analysis)
    except VoicePriorError as exc:
        if fatal:
            raise
        return SampleRow(caption, si, s, None, targets, [], None, type(exc).__name__)
    values = feats.to_dict()
    assigned = [classify(values[FEATURE_NAME[a]], ck.bins[FEATURE_NAME[a]]) for a, _ in targets]
    conform = all(got == want for got, (_, want) in zip(assigned, targets))
    return SampleRow(caption, si, s, feats, targets, assigned, conform)


def _summarize(results: Sequence[CaptionResult]) -> list[dict]:
    groups: dict[tuple[str, str], list[SampleRow]] = {}
    for res in results:
        if len(res.spec.entries) != 1:
            continue
        key = res.spec.entries[0]
        groups.setdefault(key, []).extend(res.rows)
    out = []
    for attr in CONTROLLABLE:
        for terc in ("Low", "Mid", "Top"):
            rows = groups.get((attr, terc))
            if not rows:
                continue
            vals = np.array([r.features.to_dict()[FEATURE_NAME[attr]] for r in rows if r.features is not None])
            q1, med, q3 = np.percentile(vals, [25, 50, 75]) if vals.size else (np.nan,) * 3
            out.append({"attribute": attr, "tercile": terc, "median": float(med), "iqr": float(q3 - q1),
                        "conformance_rate": float(np.mean([bool(r.conform) for r in rows]))})
    return out


def _evaluate_star(args) -> SampleRow:
    return _evaluate_sample(*args)


def run_controllability(ck: PipelineCheckpointSet, captions: Sequence[str], n_per_caption: int = 20,
                        seed: int = 0, report_dir=None, n_steps: int = 100,
                        analysis: AnalysisConfig = AnalysisConfig(), fatal: bool = False,
                        log=None, jobs: int = 1) -> ControllabilityReport:
    """Infer, analyse and classify ``n_per_caption`` samples for every caption.

    Each sample has its own seed, so ``jobs > 1`` produces the same report.
    """
    if n_per_caption < 1:
        raise PreconditionError("n_per_caption must be >= 1")
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    results = []
    try:
        for ci, caption in enumerate(captions):
            spec = parse_caption(caption)
            args = [(caption, spec, ci, si, ck, seed, n_steps, analysis, fatal) for si in range(n_per_caption)]
            if pool is None:
                rows = [_evaluate_sample(*a) for a in args]
            else:
                rows = list(pool.map(_evaluate_star, args))
            results.append(CaptionResult(caption, spec, rows))
            if log is not None:
                log(f"[{ci + 1}/{len(captions)}] {caption!r}: conformance {results[-1].conformance:.2f}")
    finally:
        if pool is not None:
            pool.shutdown()
    report = ControllabilityReport(results, _summarize(results), n_per_caption)
    if report_dir is not None:
        write_report(report, report_dir)
    return report


def write_report(report: ControllabilityReport, report_dir) -> None:
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for row in report.rows:
            w.writerow(row.csv_row())
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in report.summary:
            w.writerow([s["attribute"], s["tercile"], repr(s["median"]), repr(s["iqr"]),
                        repr(s["conformance_rate"])])
