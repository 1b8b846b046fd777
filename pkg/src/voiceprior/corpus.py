"""Synthetic training corpus, percentile bins and tercile classification."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .captions import AttributeSpec, generate_caption, parse_caption
from .dsp import AnalysisConfig, FeatureVector, Waveform, extract_features, quantize, write_wav
from .errors import InsufficientData, NonFiniteValue, VoicePriorError
from .synth import CORPUS_RANGES, PARAM_NAMES, SynthParams, synthesize

BIN_ATTRIBUTES = ("pitch_mean", "pitch_std", "level_db", "jitter_ratio", "shimmer_ratio",
                  "arousal", "valence", "dominance")
# bin attribute -> caption attribute
SPEC_NAME = {"pitch_mean": "pitch_mean", "pitch_std": "pitch_std", "level_db": "level",
             "jitter_ratio": "jitter", "shimmer_ratio": "shimmer",
             "arousal": "arousal", "valence": "valence", "dominance": "dominance"}
FEATURE_NAME = {v: k for k, v in SPEC_NAME.items()}

MANIFEST = "manifest.jsonl"
BINS = "bins.json"
WAV_DIR = "wav"


class BinBoundaries(dict):
    """Mapping attribute -> ``(p30, p70)``."""

    def validate(self) -> None:
        for attr, (lo, hi) in self.items():
            if lo > hi:
                raise ValueError(f"{attr}: p30 {lo} > p70 {hi}")

    def to_json(self) -> str:
        return json.dumps({k: {"p30": v[0], "p70": v[1]} for k, v in self.items()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BinBoundaries":
        raw = json.loads(text)
        return cls({k: (float(v["p30"]), float(v["p70"])) for k, v in raw.items()})


def nearest_rank(sorted_values: Sequence[float], p: int) -> float:
    """The ceil(p/100 * N)-th smallest value (1-based), computed in integers."""
    n = len(sorted_values)
    rank = max(1, -(-p * n // 100))
    return sorted_values[rank - 1]


def compute_bins(values: Mapping[str, Sequence[float]], min_count: int = 10) -> BinBoundaries:
    bins = BinBoundaries()
    for attr, vals in values.items():
        arr = np.asarray(vals, dtype=np.float64)
        if arr.size < min_count:
            raise InsufficientData(f"{attr}: {arr.size} values, need >= {min_count}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"{attr}: non-finite value")
        s = np.sort(arr)
        bins[attr] = (float(nearest_rank(s, 30)), float(nearest_rank(s, 70)))
    return bins


def classify(value: float, boundaries: tuple[float, float]) -> str:
    p30, p70 = boundaries
    if value < p30:
        return "Low"
    if value < p70:
        return "Mid"
    return "Top"


def emotion_label(terciles: Mapping[str, str]) -> str:
    """Fixed rule table standing in for human emotion labels (first match wins)."""
    level, pitch = terciles["level"], terciles["pitch_mean"]
    if level == "Low" and pitch == "Low":
        return "sad"
    if level == "Top" and terciles["jitter"] == "Top":
        return "angry"
    if pitch == "Top" and terciles["pitch_std"] == "Top":
        return "surprise"
    if level == "Top" or pitch == "Top":
        return "happy"
    return "neutral"


def pseudo_avd(features: np.ndarray) -> np.ndarray:
    """Arousal/valence/dominance proxies from corpus z-scores of the five features."""
    f = np.asarray(features, dtype=np.float64)
    std = f.std(axis=0)
    z = (f - f.mean(axis=0)) / np.where(std > 0, std, 1.0)
    pm, ps, lv, jt, sh = z.T
    return np.stack([lv + ps, -jt - sh, lv - pm], axis=1)


def spec_from_values(row: Mapping[str, float], bins: BinBoundaries) -> AttributeSpec:
    terc = {SPEC_NAME[a]: classify(row[a], bins[a]) for a in BIN_ATTRIBUTES}
    return AttributeSpec.of(terc, emotion_label(terc))


@dataclass
class CorpusRecord:
    utterance_id: str
    params: SynthParams
    features: FeatureVector
    avd: tuple[float, float, float]
    label: str
    caption: str
    spec: AttributeSpec

    def values(self) -> dict:
        d = self.features.to_dict()
        d.update(zip(("arousal", "valence", "dominance"), self.avd))
        return d

    def audio_input(self) -> np.ndarray:
        return np.concatenate([self.features.as_array(), np.asarray(self.avd)])

    def to_json(self) -> str:
        return json.dumps({
            "utterance_id": self.utterance_id,
            "params": self.params.to_dict(),
            "features": self.features.to_dict(),
            "avd": dict(zip(("arousal", "valence", "dominance"), self.avd)),
            "label": self.label,
            "caption": self.caption,
            "spec": self.spec.to_dict(),
        })

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        d = json.loads(line)
        avd = d["avd"]
        return cls(d["utterance_id"], SynthParams.from_dict(d["params"]), FeatureVector(**d["features"]),
                   (avd["arousal"], avd["valence"], avd["dominance"]), d["label"], d["caption"],
                   AttributeSpec.from_dict(d["spec"]))


def audio_inputs(records: Sequence[CorpusRecord]) -> np.ndarray:
    return np.stack([r.audio_input() for r in records])


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 2000
    duration_s: float = 1.0
    seed: int = 0
    sample_rate: int = 22050
    jobs: int = 1
    min_utterances: int = 100


def sample_params(rng: np.random.Generator, duration_s: float) -> SynthParams:
    vals = [rng.uniform(*CORPUS_RANGES[n]) for n in PARAM_NAMES]
    return SynthParams(*vals, duration_s=duration_s)


def _render_one(args):
    index, cfg, analysis, wav_dir = args
    uid = f"utt_{index:05d}"
    param_rng, synth_rng = [np.random.default_rng(s) for s in np.random.SeedSequence([cfg.seed, index]).spawn(2)]
    try:
        params = sample_params(param_rng, cfg.duration_s)
        wav = synthesize(params, synth_rng, cfg.sample_rate)
        stored = Waveform(quantize(wav.samples) / 32768.0, cfg.sample_rate)
        if wav_dir is not None:
            write_wav(stored, Path(wav_dir) / f"{uid}.wav")
        feats = extract_features(stored, analysis)
    except VoicePriorError as exc:
        raise type(exc)(f"{uid}: {exc}") from exc
    return uid, params, feats


def build_synthetic_corpus(config: CorpusConfig, out_dir=None,
                           analysis: AnalysisConfig = AnalysisConfig(), log=None):
    """Synthesize, analyse, bin and caption ``n_utterances`` utterances.

    When ``out_dir`` is given the manifest, ``bins.json`` and WAV files are
    written there. Returns ``(records, bins)``.
    """
    if config.n_utterances < config.min_utterances:
        raise InsufficientData(
            f"{config.n_utterances} utterances requested; binning needs >= {config.min_utterances}")
    wav_dir = None
    if out_dir is not None:
        wav_dir = Path(out_dir) / WAV_DIR
        wav_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, config, analysis, wav_dir) for i in range(config.n_utterances)]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            rendered = list(pool.map(_render_one, jobs, chunksize=16))
    else:
        rendered = []
        for k, job in enumerate(jobs):
            rendered.append(_render_one(job))
            if log is not None and (k + 1) % 250 == 0:
                log(f"corpus: {k + 1}/{config.n_utterances} utterances")

    feats = np.stack([f.as_array() for _, _, f in rendered])
    avd = pseudo_avd(feats)
    table = {a: feats[:, i] for i, a in enumerate(BIN_ATTRIBUTES[:5])}
    table.update({a: avd[:, i] for i, a in enumerate(BIN_ATTRIBUTES[5:])})
    bins = compute_bins(table, min_count=config.min_utterances)

    records = []
    for i, (uid, params, fv) in enumerate(rendered):
        row = {a: table[a][i] for a in BIN_ATTRIBUTES}
        spec = spec_from_values(row, bins)
        caption_rng = np.random.default_rng(np.random.SeedSequence([config.seed, i, 1]))
        caption = generate_caption(spec, caption_rng)
        if parse_caption(caption) != spec:
            raise AssertionError(f"{uid}: caption does not round-trip")
        records.append(CorpusRecord(uid, params, fv, tuple(float(v) for v in avd[i]),
                                    spec.emotion, caption, spec))

    if out_dir is not None:
        write_corpus(records, bins, out_dir)
    return records, bins


def write_corpus(records: Sequence[CorpusRecord], bins: BinBoundaries, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    (out / BINS).write_text(bins.to_json() + "\n", encoding="utf-8")


def load_corpus(corpus_dir):
    d = Path(corpus_dir)
    with open(d / MANIFEST, encoding="utf-8") as fh:
        records = [CorpusRecord.from_json(line) for line in fh if line.strip()]
    bins = BinBoundaries.from_json((d / BINS).read_text(encoding="utf-8"))
    return records, bins


def tercile_counts(values: Sequence[float], boundaries: tuple[float, float]) -> dict[str, int]:
    counts = {"Low": 0, "Mid": 0, "Top": 0}
    for v in values:
        counts[classify(v, boundaries)] += 1
    return counts


def expected_counts(n: int) -> dict[str, int]:
    """Partition sizes implied by nearest-rank percentiles over distinct values."""
    r30, r70 = -(-30 * n // 100), -(-70 * n // 100)
    return {"Low": r30 - 1, "Mid": r70 - r30, "Top": n - r70 + 1}
