"""Template captions for attribute specs, and the parser that inverts them.

A caption is a conjunction of clauses taken from a fixed template table,
e.g. ``"speaker is angry and has a high jitter"``. Generation emits the
clauses in a canonical attribute order so that ``parse_caption`` recovers
the exact spec it came from.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

from .errors import DuplicateAttribute, EmptyCaption, EmptySpec, UnknownAttribute, UnrecognizedClause

TERCILES = ("Low", "Mid", "Top")
ATTRIBUTES = ("pitch_mean", "pitch_std", "level", "jitter", "shimmer", "arousal", "valence", "dominance")
CONTROLLABLE = ATTRIBUTES[:5]
EMOTIONS = ("neutral", "happy", "angry", "sad", "surprise")


@dataclass(frozen=True)
class AttributeSpec:
    """Requested (or observed) tercile per attribute, plus an optional emotion.

    ``entries`` is kept sorted in canonical attribute order so that equal
    specs compare and hash equal regardless of construction order.
    """

    entries: tuple[tuple[str, str], ...] = ()
    emotion: str | None = None

    def __post_init__(self):
        seen = set()
        for attr, terc in self.entries:
            if attr not in ATTRIBUTES:
                raise UnknownAttribute(attr)
            if terc not in TERCILES:
                raise UnknownAttribute(f"{attr}={terc}")
            if attr in seen:
                raise DuplicateAttribute(attr)
            seen.add(attr)
        if self.emotion is not None and self.emotion not in EMOTIONS:
            raise UnknownAttribute(f"emotion={self.emotion}")
        ordered = tuple(sorted(self.entries, key=lambda e: ATTRIBUTES.index(e[0])))
        object.__setattr__(self, "entries", ordered)

    @classmethod
    def of(cls, terciles: Mapping[str, str] | None = None, emotion: str | None = None) -> "AttributeSpec":
        return cls(tuple((terciles or {}).items()), emotion)

    @property
    def terciles(self) -> dict[str, str]:
        return dict(self.entries)

    def is_empty(self) -> bool:
        return not self.entries and self.emotion is None

    def to_dict(self) -> dict:
        d = dict(self.entries)
        if self.emotion is not None:
            d["emotion"] = self.emotion
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "AttributeSpec":
        d = dict(d)
        emotion = d.pop("emotion", None)
        return cls.of(d, emotion)

    def subset(self, attributes: Iterable[str], keep_emotion: bool) -> "AttributeSpec":
        keep = set(attributes)
        return AttributeSpec(tuple(e for e in self.entries if e[0] in keep),
                             self.emotion if keep_emotion else None)

    def __str__(self) -> str:
        parts = []
        if self.emotion is not None:
            parts.append(f"emotion: {self.emotion}")
        parts.extend(f"{a}: {t}" for a, t in self.entries)
        return "{" + ", ".join(parts) + "}"


@dataclass(frozen=True)
class TemplateTable:
    subject: str
    clauses: dict            # attribute -> tercile -> canonical clause
    synonyms: dict           # clause -> (attribute, tercile)
    generation_synonyms: dict  # (attribute, tercile) -> (clause, probability)
    emotion_clause: str
    emotion_words: dict      # label -> accepted words; first one is rendered

    def lookup(self) -> dict[str, tuple[str, str]]:
        table = {}
        for attr, row in self.clauses.items():
            for terc, clause in row.items():
                table[clause] = (attr, terc)
        table.update(self.synonyms)
        return table


def load_templates(path=None) -> TemplateTable:
    if path is None:
        raw = json.loads(resources.files("voiceprior").joinpath("data/templates.json").read_text("utf-8"))
    else:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    canon = [c for row in raw["clauses"].values() for c in row.values()]
    if len(set(canon)) != len(canon):
        raise ValueError("canonical clauses must be pairwise distinct")
    synonyms = {}
    for s in raw["synonyms"]:
        key = s["clause"]
        if key in synonyms or key in canon:
            raise ValueError(f"synonym {key!r} maps to more than one entry")
        synonyms[key] = (s["attribute"], s["tercile"])
    gen = {(s["attribute"], s["tercile"]): (s["clause"], float(s["probability"]))
           for s in raw.get("generation_synonyms", [])}
    return TemplateTable(raw["subject"], raw["clauses"], synonyms, gen,
                         raw["emotion_clause"], raw["emotions"])


@lru_cache(maxsize=1)
def default_templates() -> TemplateTable:
    return load_templates()


def _has_subject(clause: str) -> bool:
    return not (clause.startswith("has ") or clause.startswith("is "))


def _join(clauses: list[str], subject: str) -> str:
    if not _has_subject(clauses[0]):
        clauses = [f"{subject} {clauses[0]}"] + clauses[1:]
    return " and ".join(clauses)


def render_caption(spec: AttributeSpec, overrides: Mapping[str, str] | None = None,
                   templates: TemplateTable | None = None) -> str:
    """Deterministic rendering; ``overrides`` swaps in a specific clause per attribute."""
    t = templates or default_templates()
    if spec.is_empty():
        raise EmptySpec("spec has no attribute entries and no emotion label")
    clauses = []
    if spec.emotion is not None:
        clauses.append(t.emotion_clause.format(emotion=t.emotion_words[spec.emotion][0]))
    for attr, terc in spec.entries:
        clauses.append((overrides or {}).get(attr) or t.clauses[attr][terc])
    return _join(clauses, t.subject)


def generate_caption(spec: AttributeSpec, rng: np.random.Generator,
                     templates: TemplateTable | None = None) -> str:
    """Render ``spec``; each attribute with a generation synonym draws one uniform from ``rng``."""
    t = templates or default_templates()
    overrides = {}
    for attr, terc in spec.entries:
        alt = t.generation_synonyms.get((attr, terc))
        if alt is not None and rng.random() < alt[1]:
            overrides[attr] = alt[0]
    return render_caption(spec, overrides, t)


_SPLIT = re.compile(r"\s+and\s+|\s*,\s*")
_SUBJECTS = ("the speaker ", "speaker ")


def parse_caption(text: str, templates: TemplateTable | None = None) -> AttributeSpec:
    t = templates or default_templates()
    if text is None or not text.strip():
        raise EmptyCaption("caption is empty")
    table = t.lookup()
    words = {w: label for label, ws in t.emotion_words.items() for w in ws}
    norm = " ".join(text.strip().lower().split()).rstrip(".")
    entries: dict[str, str] = {}
    emotion = None
    for raw_clause in _SPLIT.split(norm):
        clause = raw_clause.strip()
        for prefix in _SUBJECTS:
            if clause.startswith(prefix):
                clause = clause[len(prefix):]
                break
        if clause in table:
            attr, terc = table[clause]
            if attr in entries:
                raise DuplicateAttribute(attr)
            entries[attr] = terc
        elif clause.startswith("is ") and clause[3:] in words:
            if emotion is not None:
                raise DuplicateAttribute("emotion")
            emotion = words[clause[3:]]
        else:
            raise UnrecognizedClause(raw_clause)
    return AttributeSpec.of(entries, emotion)


def single_attribute_captions(templates: TemplateTable | None = None) -> list[str]:
    t = templates or default_templates()
    out = [render_caption(AttributeSpec.of({a: terc}), templates=t) for a in CONTROLLABLE for terc in TERCILES]
    # loudness quantifiers, in the order loud / silent / just right
    for terc in ("Top", "Low", "Mid"):
        clause = next(c for c, v in t.synonyms.items() if v == ("level", terc))
        out.append(render_caption(AttributeSpec.of({"level": terc}), {"level": clause}, t))
    return out


def eval_caption_set(mode: str = "paper44", templates: TemplateTable | None = None) -> list[str]:
    """Fixed evaluation captions: ``"single"`` (18) or ``"paper44"`` (44)."""
    t = templates or default_templates()
    captions = single_attribute_captions(t)
    if mode == "single":
        return captions
    if mode != "paper44":
        raise ValueError(f"unknown caption-set mode {mode!r}")
    pairs = []
    for a, b in itertools.combinations(CONTROLLABLE, 2):
        for ta, tb in itertools.product(TERCILES, TERCILES):
            pairs.append(render_caption(AttributeSpec.of({a: ta, b: tb}), templates=t))
    return captions + pairs[: 44 - len(captions)]
