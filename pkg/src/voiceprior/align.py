"""Contrastive audio/text embedding space and the emotion adaptor.

The audio encoder sees eight z-scored numbers per utterance (five acoustic
features and three pseudo arousal/valence/dominance scores); the text
encoder sees a one-hot encoding of the parsed caption. Both emit raw
``D_EMO``-dimensional vectors with no projection head, trained with a
symmetric InfoNCE loss over cosine similarities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .captions import ATTRIBUTES, EMOTIONS, TERCILES, AttributeSpec
from .errors import DimensionMismatch, EmptySpec, InsufficientData, UnknownAttribute, ZeroNormEmbedding
from .nn import AdamState, Layer, Mlp, adam_step, backprop, forward

D_EMO = 16
D_DEC = 8
AUDIO_INPUTS = ("pitch_mean", "pitch_std", "level_db", "jitter_ratio", "shimmer_ratio",
                "arousal", "valence", "dominance")
TEXT_DIM = len(ATTRIBUTES) * len(TERCILES) + len(EMOTIONS)
TAU_RANGE = (0.01, 1.0)


class CallCounter:
    """Counts audio-encoder invocations so caption-only paths can be audited."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


AUDIO_ENCODER_CALLS = CallCounter()


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "NormStats":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class AlignmentModel:
    audio_encoder: Mlp
    text_encoder: Mlp
    temperature: np.ndarray = field(default_factory=lambda: np.array([0.07]))

    def __post_init__(self):
        if self.audio_encoder.out_dim != self.text_encoder.out_dim:
            raise DimensionMismatch("audio and text encoders must share the embedding width")
        if not float(self.temperature[0]) > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 64, d_emo: int = D_EMO, tau: float = 0.07):
        audio = Mlp.init([len(AUDIO_INPUTS), hidden, hidden, d_emo], ["tanh", "tanh", "identity"], rng)
        text = Mlp.init([TEXT_DIM, hidden, d_emo], ["tanh", "identity"], rng)
        return cls(audio, text, np.array([tau]))

    @property
    def tau(self) -> float:
        return float(self.temperature[0])

    def to_dict(self) -> dict:
        return {"audio_encoder": self.audio_encoder.to_dict(), "text_encoder": self.text_encoder.to_dict(),
                "temperature": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentModel":
        return cls(Mlp.from_dict(d["audio_encoder"]), Mlp.from_dict(d["text_encoder"]),
                   np.array([float(d["temperature"])]))


@dataclass
class EmoAdaptor:
    """Affine map from the shared embedding width to the decoder's width."""

    net: Mlp

    @classmethod
    def init(cls, rng: np.random.Generator, d_emo: int = D_EMO, d_dec: int = D_DEC) -> "EmoAdaptor":
        return cls(Mlp.init([d_emo, d_dec], ["identity"], rng))

    @classmethod
    def from_matrix(cls, weight: np.ndarray, bias: np.ndarray) -> "EmoAdaptor":
        return cls(Mlp([Layer(np.asarray(weight, float), np.asarray(bias, float), "identity")]))

    def to_dict(self) -> dict:
        return self.net.to_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "EmoAdaptor":
        return cls(Mlp.from_dict(d))


def adapt(adaptor: EmoAdaptor, y: np.ndarray) -> np.ndarray:
    return adaptor.net(y)


# ------------------------------------------------------------------ encoders


def encode_audio(model: AlignmentModel, inputs: np.ndarray, stats: NormStats) -> np.ndarray:
    """Embed raw (un-normalized) feature + pseudo-A/V/D rows."""
    AUDIO_ENCODER_CALLS.count += 1
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != len(AUDIO_INPUTS):
        raise DimensionMismatch(f"audio input width {x.shape[-1]} != {len(AUDIO_INPUTS)}")
    return model.audio_encoder(stats.apply(x))


def one_hot(spec: AttributeSpec) -> np.ndarray:
    if spec.is_empty():
        raise EmptySpec("cannot encode an empty spec")
    v = np.zeros(TEXT_DIM)
    for attr, terc in spec.entries:
        if attr not in ATTRIBUTES or terc not in TERCILES:
            raise UnknownAttribute(f"{attr}={terc}")
        v[3 * ATTRIBUTES.index(attr) + TERCILES.index(terc)] = 1.0
    if spec.emotion is not None:
        v[3 * len(ATTRIBUTES) + EMOTIONS.index(spec.emotion)] = 1.0
    return v


def encode_text(model: AlignmentModel, spec) -> np.ndarray:
    """Embed one spec (returns a vector) or a list of specs (returns a matrix)."""
    if isinstance(spec, AttributeSpec):
        return model.text_encoder(one_hot(spec))
    return model.text_encoder(np.stack([one_hot(s) for s in spec]))


# ------------------------------------------------------------------ loss


def _normalize_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormEmbedding("an embedding has zero norm")
    return x / norms, norms


def _log_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=axis, keepdims=True))


def contrastive_loss_and_grads(audio: np.ndarray, text: np.ndarray, tau: float):
    """Symmetric InfoNCE; returns ``(loss, d_audio, d_text, d_tau)``."""
    a = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    b = np.atleast_2d(np.asarray(text, dtype=np.float64))
    if a.shape != b.shape:
        raise DimensionMismatch(f"audio {a.shape} vs text {b.shape}")
    n = a.shape[0]
    an, a_norm = _normalize_rows(a)
    bn, b_norm = _normalize_rows(b)
    cos = an @ bn.T
    s = cos / tau
    lr = _log_softmax(s, axis=1)
    lc = _log_softmax(s, axis=0)
    diag = np.arange(n)
    loss = -0.5 * (lr[diag, diag].mean() + lc[diag, diag].mean())

    eye = np.eye(n)
    g_s = 0.5 * ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / n
    g_cos = g_s / tau
    d_tau = -float(np.sum(g_s * s)) / tau
    g_an = g_cos @ bn
    g_bn = g_cos.T @ an
    d_a = (g_an - an * np.sum(an * g_an, axis=1, keepdims=True)) / a_norm
    d_b = (g_bn - bn * np.sum(bn * g_bn, axis=1, keepdims=True)) / b_norm
    return float(loss), d_a, d_b, d_tau


def contrastive_loss(audio: np.ndarray, text: np.ndarray, tau: float) -> float:
    return contrastive_loss_and_grads(audio, text, tau)[0]


# ------------------------------------------------------------------ training


@dataclass
class AlignConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: int = 64
    tau_init: float = 0.07
    holdout: int = 200
    # probability that a training caption keeps only a random subset of the spec
    partial_caption_prob: float = 0.5
    min_records: int = 200


def sample_partial_spec(spec: AttributeSpec, rng: np.random.Generator,
                        max_items: int | None = None) -> AttributeSpec:
    """A non-empty random subset of the spec's entries (emotion counts as one entry).

    The subset size is uniform on ``1..min(max_items, len(entries))``.
    """
    items = [a for a, _ in spec.entries] + (["emotion"] if spec.emotion is not None else [])
    top = len(items) if max_items is None else max(1, min(max_items, len(items)))
    k = int(rng.integers(1, top + 1))
    chosen = set(rng.choice(len(items), size=k, replace=False).tolist())
    keep = [items[i] for i in sorted(chosen)]
    return spec.subset([a for a in keep if a != "emotion"], "emotion" in keep)


def retrieval_accuracy(model: AlignmentModel, audio_inputs: np.ndarray, specs: list[AttributeSpec],
                       stats: NormStats) -> dict:
    """Text-to-audio retrieval over a pool.

    A retrieved clip counts as a hit when its spec equals the query's spec:
    records that share a spec have identical captions, so no text encoder
    can tell them apart. ``*_exact`` fields require the query's own record.
    """
    y = encode_audio(model, audio_inputs, stats)
    z = encode_text(model, list(specs))
    yn = y / np.linalg.norm(y, axis=1, keepdims=True)
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    sim = zn @ yn.T
    rank = np.argsort(-sim, axis=1, kind="stable")
    ids: dict = {}
    keys = np.array([ids.setdefault(s, len(ids)) for s in specs])
    same = keys[rank] == keys[:, None]
    exact = rank == np.arange(len(specs))[:, None]
    return {"pool_size": len(specs),
            "top1": float(same[:, :1].any(axis=1).mean()),
            "top5": float(same[:, :5].any(axis=1).mean()),
            "top1_exact": float(exact[:, :1].any(axis=1).mean()),
            "top5_exact": float(exact[:, :5].any(axis=1).mean())}


@dataclass
class AlignResult:
    model: AlignmentModel
    stats: NormStats
    history: list[float]
    initial_loss: float
    retrieval: dict
    optimizer: AdamState


def _alignment_step_grads(model: AlignmentModel, x: np.ndarray, t: np.ndarray):
    ya, ca = forward(model.audio_encoder, x)
    zt, ct = forward(model.text_encoder, t)
    loss, da, dt, dtau = contrastive_loss_and_grads(ya, zt, model.tau)
    ga, _ = backprop(model.audio_encoder, ca, da)
    gt, _ = backprop(model.text_encoder, ct, dt)
    return loss, ga + gt + [np.array([dtau])]


def alignment_parameters(model: AlignmentModel) -> list[np.ndarray]:
    return model.audio_encoder.parameters() + model.text_encoder.parameters() + [model.temperature]


def train_alignment(audio_inputs: np.ndarray, specs: list[AttributeSpec],
                    config: AlignConfig = AlignConfig(), log=None) -> AlignResult:
    """Fit both encoders and the temperature; hold out ``config.holdout`` records for retrieval."""
    x_all = np.asarray(audio_inputs, dtype=np.float64)
    n = len(specs)
    if n < config.min_records or x_all.shape[0] != n:
        raise InsufficientData(f"need >= {config.min_records} aligned records, got {n}")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    held, train = perm[: config.holdout], perm[config.holdout:]
    stats = NormStats.fit(x_all[train])
    x_train = stats.apply(x_all[train])
    train_specs = [specs[i] for i in train]
    full_hot = np.stack([one_hot(s) for s in train_specs])

    model = AlignmentModel.init(rng, config.hidden, D_EMO, config.tau_init)
    params = alignment_parameters(model)
    opt = AdamState.for_params(params, lr=config.lr)

    initial_loss = _alignment_step_grads(model, x_train, full_hot)[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            partial = rng.random(len(idx)) < config.partial_caption_prob
            hot = full_hot[idx].copy()
            for row, (i, p) in enumerate(zip(idx, partial)):
                if p:
                    hot[row] = one_hot(sample_partial_spec(train_specs[i], rng))
            loss, grads = _alignment_step_grads(model, x_train[idx], hot)
            adam_step(opt, params, grads)
            np.clip(model.temperature, *TAU_RANGE, out=model.temperature)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"alignment epoch {epoch + 1}/{config.epochs} loss {history[-1]:.4f} tau {model.tau:.4f}")

    retrieval = retrieval_accuracy(model, x_all[held], [specs[i] for i in held], stats) if len(held) else {}
    return AlignResult(model, stats, history, float(initial_loss), retrieval, opt)
