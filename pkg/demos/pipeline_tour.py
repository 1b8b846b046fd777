"""
From corpus to controllable voices
==================================

Build a small corpus, train the aligner, decoder and prior, then ask for
voices by caption and check what comes out. A 600-record corpus keeps
this to a few minutes; the acceptance suite uses 2000.

Run with ``python3 demos/pipeline_tour.py [workdir]``.
"""

import sys
import tempfile
from pathlib import Path

from voiceprior.captions import single_attribute_captions
from voiceprior.corpus import CorpusConfig, build_synthetic_corpus
from voiceprior.dsp import extract_features, write_wav
from voiceprior.harness import TrainingConfig, infer_from_caption, run_controllability, run_training

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="voiceprior-"))
records, bins = build_synthetic_corpus(CorpusConfig(n_utterances=600), root / "corpus")
print(f"{len(records)} records; pitch terciles split at {bins['pitch_mean']}")
print("first caption:", records[0].caption)

ck = run_training(root / "corpus", TrainingConfig(seed=0), root / "checkpoints", log=print)

for caption in ("the speaker has a low pitch", "the speaker has a high pitch", "the speaker is loud"):
    wav = infer_from_caption(caption, ck, seed=0)
    out = root / (caption.replace(" ", "_") + ".wav")
    write_wav(wav, out)
    f = extract_features(wav)
    print(f"{caption:35} pitch {f.pitch_mean:6.1f} Hz  level {f.level_db:6.1f} dB  -> {out.name}")

report = run_controllability(ck, single_attribute_captions(), n_per_caption=5, report_dir=root / "reports")
for row in report.summary:
    print(f"{row['attribute']:10} {row['tercile']:3}  median {row['median']:9.4f}  "
          f"conformance {row['conformance_rate']:.2f}")
print("reports in", root / "reports")
