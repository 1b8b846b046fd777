"""
Captions and attribute specs
============================

Render attribute specs as captions, parse them back and list the
evaluation captions. Run with ``python3 demos/captions_tour.py``.
"""

import numpy as np

from voiceprior.captions import AttributeSpec, eval_caption_set, generate_caption, parse_caption

rng = np.random.default_rng(3)
spec = AttributeSpec.of({"pitch_mean": "Top", "jitter": "Low"}, "happy")
for _ in range(3):
    text = generate_caption(spec, rng)
    print(f"{text!r:70} -> {parse_caption(text)}")

# single-attribute captions drive the controllability study
for caption in eval_caption_set("single"):
    print(f"  {caption:50} {parse_caption(caption)}")
print(len(eval_caption_set("paper44")), "captions in the larger set")
