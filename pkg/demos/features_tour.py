"""
Acoustic features of synthetic voices
=====================================

Synthesize a few voices with known controls and read the features back.
Run with ``python3 demos/features_tour.py``.
"""

import numpy as np

from voiceprior.dsp import extract_features
from voiceprior.synth import SynthParams, synthesize

# A steady 200 Hz voice at -18 dBFS, no perturbation.
base = SynthParams(f0=200.0, f0_var=0.0, level_db=-18.0, jitter_pct=0.0, shimmer_pct=0.0, duration_s=1.0)
wav = synthesize(base, np.random.default_rng(0))
print("steady voice:", extract_features(wav))

# Jitter perturbs period lengths, so the measured ratio grows with it.
for jitter in (0.0, 1.0, 2.0, 4.0):
    p = SynthParams(200.0, 5.0, -18.0, jitter, 2.0, 1.0)
    ratios = [extract_features(synthesize(p, np.random.default_rng(s))).jitter_ratio for s in range(10)]
    print(f"jitter {jitter:.0f}%  -> mean jitter ratio {np.mean(ratios):.4f}")

# Level is set exactly by RMS scaling.
for level in (-30.0, -18.0, -6.0):
    f = extract_features(synthesize(SynthParams(150.0, 10.0, level, 0.5, 2.0, 1.0), np.random.default_rng(1)))
    print(f"level {level:+.0f} dB -> measured {f.level_db:+.2f} dB, pitch {f.pitch_mean:.1f} Hz")
