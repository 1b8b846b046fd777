"""Command-line entry point: corpus, train, infer, eval, features, caption, parse.

Every subcommand accepts ``--seed``, ``--config run.json`` and ``--jobs``.
The config file mirrors :class:`RunConfig`; any flag given on the command
line overrides the file. Exit status is 0 on success, 1 on a domain error
(the error class name is printed to stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import D_EMO, AlignConfig
from .captions import AttributeSpec, eval_caption_set, generate_caption, parse_caption
from .corpus import CorpusConfig, build_synthetic_corpus
from .dsp import AnalysisConfig, extract_features, format_feature_row, read_wav, write_wav
from .errors import VoicePriorError
from .harness import TrainingConfig, infer_from_caption, load_checkpoints, run_controllability, run_training
from .prior import PriorConfig, SdeConfig
from .synth import DecoderConfig


@dataclass
class SdeSettings:
    # mu and lam are applied to every embedding dimension
    mu: float = 0.0
    lam: float = 1.0
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0
    eps_t: float = 1e-4

    def build(self) -> SdeConfig:
        return SdeConfig(np.full(D_EMO, self.mu), np.full(D_EMO, self.lam),
                         self.beta0, self.beta1, self.T, self.eps_t)


@dataclass
class CorpusSettings:
    n_utterances: int = 2000
    duration_s: float = 1.0


@dataclass
class EvalSettings:
    mode: str = "paper44"
    n_per_caption: int = 20
    n_steps: int = 100
    fatal: bool = False


@dataclass
class RunConfig:
    corpus_dir: str = "run/corpus"
    checkpoint_dir: str = "run/checkpoints"
    report_dir: str = "run/reports"
    seed: int = 0
    jobs: int = 1
    sample_rate: int = 22050
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    sde: SdeSettings = field(default_factory=SdeSettings)
    align: AlignConfig = field(default_factory=AlignConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    partial_caption_prob: float = 0.5
    partial_max_items: int = 3
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _merge(cls(), d)

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(n_utterances=self.corpus.n_utterances, duration_s=self.corpus.duration_s,
                            seed=self.seed, sample_rate=self.sample_rate, jobs=self.jobs)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(self.seed, self.align, self.decoder, self.prior, self.partial_caption_prob,
                              self.partial_max_items, self.sde.build()).seeded()


def _merge(obj, updates: dict, where: str = "config"):
    if not isinstance(updates, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in updates.items():
        if key not in known:
            raise ValueError(f"{where}: unknown key {key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _merge(current, value, f"{where}.{key}")
        else:
            changes[key] = value
    return dataclasses.replace(obj, **changes)


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


# ------------------------------------------------------------------ subcommands


def _cmd_corpus(cfg: RunConfig, args) -> None:
    records, _ = build_synthetic_corpus(cfg.corpus_config(), cfg.corpus_dir, cfg.analysis, log=_log)
    print(f"wrote {len(records)} records to {cfg.corpus_dir}")


def _cmd_train(cfg: RunConfig, args) -> None:
    ck = run_training(cfg.corpus_dir, cfg.training_config(), cfg.checkpoint_dir, log=_log)
    for name, digest in sorted(ck.hashes.items()):
        print(f"{name} {digest}")


def _cmd_infer(cfg: RunConfig, args) -> None:
    ck = load_checkpoints(cfg.checkpoint_dir)
    wav = infer_from_caption(args.caption, ck, cfg.seed, cfg.eval.n_steps, cfg.sample_rate)
    write_wav(wav, args.out)
    print(args.out)


def _cmd_eval(cfg: RunConfig, args) -> None:
    ck = load_checkpoints(cfg.checkpoint_dir)
    report = run_controllability(ck, eval_caption_set(cfg.eval.mode), cfg.eval.n_per_caption, cfg.seed,
                                 cfg.report_dir, cfg.eval.n_steps, cfg.analysis, cfg.eval.fatal,
                                 log=_log, jobs=cfg.jobs)
    print(f"{len(report.rows)} rows written to {cfg.report_dir}")


def _cmd_features(cfg: RunConfig, args) -> None:
    for i, path in enumerate(args.files):
        fv = extract_features(read_wav(path), cfg.analysis)
        sys.stdout.write(format_feature_row(path, fv, header=args.header and i == 0))


def _cmd_caption(cfg: RunConfig, args) -> None:
    try:
        raw = json.loads(args.spec)
    except json.JSONDecodeError as exc:
        raise _UsageError(f"--spec is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise _UsageError("--spec must be a JSON object")
    spec = AttributeSpec.from_dict(raw)
    print(generate_caption(spec, np.random.default_rng(cfg.seed)))


def _cmd_parse(cfg: RunConfig, args) -> None:
    print(parse_caption(args.text))


class _UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--config", help="JSON file mirroring RunConfig")
    common.add_argument("--jobs", type=int, help="worker processes for corpus building and evaluation")

    parser = argparse.ArgumentParser(prog="voiceprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{corpus,train,infer,eval,features,caption,parse}")
    sub.required = True

    p = sub.add_parser("corpus", parents=[common], help="synthesize and caption the training corpus")
    p.add_argument("--out", dest="corpus_dir")
    p.add_argument("--n", dest="n_utterances", type=int)
    p.add_argument("--duration", dest="duration_s", type=float)
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("train", parents=[common], help="alignment, Stage I and Stage II training")
    p.add_argument("--corpus", dest="corpus_dir")
    p.add_argument("--checkpoints", dest="checkpoint_dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", parents=[common], help="caption -> WAV")
    p.add_argument("--caption", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoints", dest="checkpoint_dir")
    p.add_argument("--steps", dest="n_steps", type=int)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="controllability study")
    p.add_argument("--mode", choices=["single", "paper44"])
    p.add_argument("--n", dest="n_per_caption", type=int)
    p.add_argument("--checkpoints", dest="checkpoint_dir")
    p.add_argument("--reports", dest="report_dir")
    p.add_argument("--steps", dest="n_steps", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("features", parents=[common], help="print acoustic features of WAV files as CSV")
    p.add_argument("files", nargs="+")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("caption", parents=[common], help="render a caption from a JSON spec")
    p.add_argument("--spec", required=True, help='e.g. \'{"level": "Top", "emotion": "angry"}\'')
    p.set_defaults(func=_cmd_caption)

    p = sub.add_parser("parse", parents=[common], help="parse a caption into its attribute spec")
    p.add_argument("--text", required=True)
    p.set_defaults(func=_cmd_parse)
    return parser


# flag destination -> (RunConfig section or None, field)
_OVERRIDES = {
    "seed": (None, "seed"),
    "jobs": (None, "jobs"),
    "corpus_dir": (None, "corpus_dir"),
    "checkpoint_dir": (None, "checkpoint_dir"),
    "report_dir": (None, "report_dir"),
    "n_utterances": ("corpus", "n_utterances"),
    "duration_s": ("corpus", "duration_s"),
    "mode": ("eval", "mode"),
    "n_per_caption": ("eval", "n_per_caption"),
    "n_steps": ("eval", "n_steps"),
}


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    updates: dict = {}
    for dest, (section, name) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            updates[name] = value
        else:
            updates.setdefault(section, {})[name] = value
    return _merge(cfg, updates)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"voiceprior: error: bad config: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(cfg, args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"voiceprior: error: {exc}", file=sys.stderr)
        return 2
    except VoicePriorError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())
