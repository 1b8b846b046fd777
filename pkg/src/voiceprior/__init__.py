"""Text-captioned voice attributes: features, captions, alignment, diffusion prior, synthesis."""

from .captions import AttributeSpec, generate_caption, parse_caption
from .dsp import FeatureVector, Waveform, extract_features, read_wav, write_wav
from .errors import VoicePriorError
from .harness import infer_from_caption, load_checkpoints, run_controllability, run_training

__version__ = "0.1.0"
