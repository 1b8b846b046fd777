"""Parametric vowel-tone synthesizer and the decoder head that drives it.

The synthesizer builds a glottal-like pulse train one period at a time.
Every period reuses the same waveshape (six harmonics, 1/h rolloff)
stretched to the period length, so jitter and shimmer are controlled
exactly by the per-period perturbations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .align import D_DEC, EmoAdaptor
from .dsp import Waveform
from .errors import DimensionMismatch, InsufficientData, InvalidParams
from .nn import AdamState, Mlp, adam_step, backprop, forward

PARAM_NAMES = ("f0", "f0_var", "level_db", "jitter_pct", "shimmer_pct")

# validity ranges for SynthParams
VALID_RANGES = {
    "f0": (80.0, 500.0),
    "f0_var": (0.0, 200.0),
    "level_db": (-40.0, 0.0),
    "jitter_pct": (0.0, 10.0),
    "shimmer_pct": (0.0, 15.0),
    "duration_s": (0.5, 5.0),
}

# sampling ranges of the synthetic corpus; the decoder head emits values in these
CORPUS_RANGES = {
    "f0": (120.0, 350.0),
    "f0_var": (0.0, 40.0),
    "level_db": (-30.0, -6.0),
    "jitter_pct": (0.0, 4.0),
    "shimmer_pct": (0.0, 8.0),
}

N_HARMONICS = 6
F0_WALK_RATE = 5.0   # Hz, knot rate of the slow F0 random walk
VIBRATO_RATE = 5.5   # Hz
FADE_S = 0.010


@dataclass(frozen=True)
class SynthParams:
    f0: float
    f0_var: float
    level_db: float
    jitter_pct: float
    shimmer_pct: float
    duration_s: float = 1.0

    def validate(self) -> None:
        for name, (lo, hi) in VALID_RANGES.items():
            v = getattr(self, name)
            if not np.isfinite(v) or v < lo or v > hi:
                raise InvalidParams(f"{name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        return cls(**{k: float(v) for k, v in d.items()})

    def controls(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])


def normalize_params(p: SynthParams, ranges=CORPUS_RANGES) -> np.ndarray:
    lo = np.array([ranges[n][0] for n in PARAM_NAMES])
    hi = np.array([ranges[n][1] for n in PARAM_NAMES])
    return (p.controls() - lo) / (hi - lo)


def denormalize_params(u: np.ndarray, duration_s: float = 1.0, ranges=CORPUS_RANGES) -> SynthParams:
    lo = np.array([ranges[n][0] for n in PARAM_NAMES])
    hi = np.array([ranges[n][1] for n in PARAM_NAMES])
    v = lo + np.clip(u, 0.0, 1.0) * (hi - lo)
    return SynthParams(*[float(x) for x in v], duration_s=float(duration_s))


def waveshape(phase: np.ndarray) -> np.ndarray:
    h = np.arange(1, N_HARMONICS + 1)
    return np.sin(2.0 * np.pi * np.multiply.outer(phase, h)) @ (1.0 / h)


def f0_contour(params: SynthParams, rng: np.random.Generator):
    """F0 as a function of time: scaled random walk plus vibrato, both of depth ``f0_var``."""
    n_knots = int(np.ceil(params.duration_s * F0_WALK_RATE)) + 2
    knots = np.cumsum(rng.standard_normal(n_knots))
    knots_t = np.arange(n_knots) / F0_WALK_RATE
    phase = rng.uniform(0.0, 2.0 * np.pi)

    # statistics are taken over the utterance on a 1 ms grid so the contour's
    # time average is exactly f0
    grid = np.arange(0.0, knots_t[-1], 1e-3)
    inside = grid <= params.duration_s
    walk = np.interp(grid, knots_t, knots)
    walk -= walk[inside].mean()
    sd = walk[inside].std()
    walk = walk / sd if sd > 0 else np.zeros_like(walk)
    dev = params.f0_var * (walk + np.sin(2.0 * np.pi * VIBRATO_RATE * grid + phase))
    dev -= dev[inside].mean()
    lo, hi = VALID_RANGES["f0"]

    def f0_at(t):
        return np.clip(params.f0 + np.interp(t, grid, dev), lo, hi)

    return f0_at


def synthesize(params: SynthParams, rng: np.random.Generator, sample_rate: int = 22050) -> Waveform:
    params.validate()
    if sample_rate < 16000:
        raise InvalidParams(f"sample_rate {sample_rate} < 16000")
    n = int(round(params.duration_s * sample_rate))
    f0_at = f0_contour(params, rng)
    max_periods = int(np.ceil(params.duration_s * 2 * VALID_RANGES["f0"][1])) + 4
    jit = rng.standard_normal(max_periods)
    shim = rng.standard_normal(max_periods)

    bounds = [0.0]
    gains = []
    k = 0
    while bounds[-1] < params.duration_s:
        t = bounds[-1]
        stretch = max(0.5, 1.0 + params.jitter_pct / 100.0 * jit[k])
        bounds.append(t + stretch / f0_at(t))
        gains.append(max(0.0, 1.0 + params.shimmer_pct / 100.0 * shim[k]))
        k += 1
    bounds = np.asarray(bounds)
    gains = np.asarray(gains)

    t = np.arange(n) / sample_rate
    idx = np.searchsorted(bounds, t, side="right") - 1
    phase = (t - bounds[idx]) / (bounds[idx + 1] - bounds[idx])
    x = waveshape(phase) * gains[idx]

    nf = int(round(FADE_S * sample_rate))
    if nf > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(nf) / nf))
        x[:nf] *= ramp
        x[-nf:] *= ramp[::-1]
    rms = np.sqrt(np.mean(x ** 2))
    x *= 10.0 ** (params.level_db / 20.0) / rms
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


# ------------------------------------------------------------------ decoder head


@dataclass
class DecoderHead:
    net: Mlp
    duration_s: float = 1.0

    @classmethod
    def init(cls, rng: np.random.Generator, d_dec: int = D_DEC, hidden: int = 64,
             duration_s: float = 1.0) -> "DecoderHead":
        net = Mlp.init([d_dec, hidden, hidden, len(PARAM_NAMES)], ["tanh", "tanh", "sigmoid"], rng)
        return cls(net, duration_s)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "duration_s": self.duration_s}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderHead":
        return cls(Mlp.from_dict(d["net"]), d["duration_s"])


def decode_normalized(head: DecoderHead, adapted: np.ndarray) -> np.ndarray:
    adapted = np.asarray(adapted, dtype=np.float64)
    if adapted.shape[-1] != head.net.in_dim:
        raise DimensionMismatch(f"adapted width {adapted.shape[-1]} != {head.net.in_dim}")
    return head.net(adapted)


def decode_params(head: DecoderHead, adapted: np.ndarray) -> SynthParams:
    return denormalize_params(decode_normalized(head, adapted), head.duration_s)


@dataclass
class DecoderConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: int = 64
    holdout_fraction: float = 0.1
    duration_s: float = 1.0
    min_records: int = 200


@dataclass
class DecoderResult:
    adaptor: EmoAdaptor
    head: DecoderHead
    history: list[float]
    initial_loss: float
    holdout_rmse: float
    baseline_rmse: float
    optimizer: AdamState


def stage_one_loss_and_grads(adaptor: EmoAdaptor, head: DecoderHead, y: np.ndarray, target: np.ndarray):
    """Mean squared error on normalized parameters through adaptor and head."""
    a, ca = forward(adaptor.net, y)
    u, cu = forward(head.net, a)
    diff = u - target
    loss = float(np.mean(diff ** 2))
    gu, ga_in = backprop(head.net, cu, 2.0 * diff / diff.size)
    gad, _ = backprop(adaptor.net, ca, ga_in)
    return loss, gad + gu


def train_decoder(y: np.ndarray, targets: np.ndarray, config: DecoderConfig = DecoderConfig(),
                  log=None) -> DecoderResult:
    """Jointly fit the adaptor and decoder head on frozen audio embeddings ``y``.

    ``targets`` are the generating SynthParams, normalized to [0, 1].
    """
    y = np.asarray(y, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = y.shape[0]
    if n < config.min_records:
        raise InsufficientData(f"need >= {config.min_records} records, got {n}")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_hold = int(round(config.holdout_fraction * n))
    held, train = perm[:n_hold], perm[n_hold:]

    adaptor = EmoAdaptor.init(rng, y.shape[1], D_DEC)
    head = DecoderHead.init(rng, D_DEC, config.hidden, config.duration_s)
    params = adaptor.net.parameters() + head.net.parameters()
    opt = AdamState.for_params(params, lr=config.lr)

    initial = stage_one_loss_and_grads(adaptor, head, y[train], targets[train])[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(train)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = stage_one_loss_and_grads(adaptor, head, y[idx], targets[idx])
            adam_step(opt, params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log is not None and (epoch % 25 == 0 or epoch == config.epochs - 1):
            log(f"decoder epoch {epoch + 1}/{config.epochs} loss {history[-1]:.5f}")

    if n_hold:
        pred = decode_normalized(head, adaptor.net(y[held]))
        rmse = float(np.sqrt(np.mean((pred - targets[held]) ** 2)))
        baseline = float(np.sqrt(np.mean((0.5 - targets[held]) ** 2)))
    else:
        rmse = baseline = float("nan")
    return DecoderResult(adaptor, head, history, float(initial), rmse, baseline, opt)
