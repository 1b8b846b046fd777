"""Conditional score-based prior over emotion embeddings.

Forward process (per dimension ``i``, linear noise schedule ``beta_t``)::

    dX = 0.5 * (mu - X) / lam * beta_t dt + sqrt(beta_t) dW

which has Gaussian transitions with

    mean_i = mu_i + (x0_i - mu_i) * exp(-B(t) / (2 lam_i))
    var_i  = lam_i * (1 - exp(-B(t) / lam_i)),      B(t) = int_0^t beta_s ds.

Sampling integrates the matching probability-flow ODE backwards from
``X_T ~ N(mu, lam)`` with explicit Euler steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .align import D_EMO
from .errors import InsufficientData, NonFiniteLoss, NonFiniteState, PreconditionError, TimeOutOfRange
from .nn import AdamState, Mlp, adam_step, backprop, forward

TIME_EMB_DIM = 8


@dataclass
class SdeConfig:
    mu: np.ndarray = field(default_factory=lambda: np.zeros(D_EMO))
    lam: np.ndarray = field(default_factory=lambda: np.ones(D_EMO))
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0
    eps_t: float = 1e-4

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.mu.shape != self.lam.shape:
            raise ValueError("mu and lam must have the same shape")
        if np.any(self.lam <= 0):
            raise ValueError("lam must be elementwise positive")
        if self.T <= 0 or self.beta0 <= 0 or self.beta1 <= 0:
            raise ValueError("T and the beta schedule must be positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def beta(self, t):
        return self.beta0 + np.asarray(t) * (self.beta1 - self.beta0)

    def integrated_beta(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "lam": self.lam.tolist(), "beta0": self.beta0,
                "beta1": self.beta1, "T": self.T, "eps_t": self.eps_t}

    @classmethod
    def from_dict(cls, d: dict) -> "SdeConfig":
        return cls(np.asarray(d["mu"]), np.asarray(d["lam"]), d["beta0"], d["beta1"], d["T"], d["eps_t"])


def _check_time(t, cfg: SdeConfig) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > cfg.T) or not np.all(np.isfinite(t)):
        raise TimeOutOfRange(f"t must lie in [0, {cfg.T}]")
    return t


def forward_marginal(x0: np.ndarray, t, cfg: SdeConfig):
    """Mean and per-dimension variance of ``X_t`` given ``X_0 = x0``.

    ``t`` may be a scalar or an array broadcastable against the leading
    (batch) axis of ``x0``.
    """
    t = _check_time(t, cfg)
    x0 = np.asarray(x0, dtype=np.float64)
    big_b = cfg.integrated_beta(t)
    if big_b.ndim:
        big_b = big_b.reshape(big_b.shape + (1,) * (x0.ndim - big_b.ndim))
    decay = np.exp(-0.5 * big_b / cfg.lam)
    mean = cfg.mu + (x0 - cfg.mu) * decay
    var = cfg.lam * -np.expm1(-big_b / cfg.lam)
    return mean, np.broadcast_to(var, mean.shape).copy()


def sample_forward(x0: np.ndarray, t, cfg: SdeConfig, rng: np.random.Generator) -> np.ndarray:
    mean, var = forward_marginal(x0, t, cfg)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def euler_maruyama(x0: np.ndarray, t_end: float, dt: float, rng: np.random.Generator,
                   mu: float = 0.0, lam: float = 1.0, beta=lambda t: 0.5) -> np.ndarray:
    """Simulate the forward SDE path-by-path (vectorised over ``x0``); used as an oracle."""
    x = np.array(x0, dtype=np.float64, copy=True)
    n = int(round(t_end / dt))
    for k in range(n):
        b = beta(k * dt)
        x += 0.5 * (mu - x) / lam * b * dt + np.sqrt(b * dt) * rng.standard_normal(x.shape)
    return x


# ------------------------------------------------------------------ model


def time_embedding(t) -> np.ndarray:
    """Sinusoidal features of ``1000 t`` at four geometric frequencies (8 values)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10.0 ** -np.arange(TIME_EMB_DIM // 2)
    arg = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class ScoreModel:
    """MLP over ``[x_t | time embedding | caption embedding]``.

    With ``output_scaling="std"`` the network's output is divided by the
    forward-marginal standard deviation at ``t``, so the raw network only
    has to predict a unit-scale noise direction.
    """

    net: Mlp
    cfg: SdeConfig
    output_scaling: str = "std"

    @classmethod
    def init(cls, cfg: SdeConfig, rng: np.random.Generator, cond_dim: int = D_EMO,
             hidden: int = 128, depth: int = 3, output_scaling: str = "std") -> "ScoreModel":
        sizes = [cfg.dim + TIME_EMB_DIM + cond_dim] + [hidden] * depth + [cfg.dim]
        return cls(Mlp.init(sizes, ["tanh"] * depth + ["identity"], rng), cfg, output_scaling)

    def _inputs(self, x, t, z):
        x = np.atleast_2d(x)
        n = x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        z = np.broadcast_to(np.atleast_2d(z), (n, np.atleast_2d(z).shape[1]))
        return np.concatenate([x, time_embedding(t_arr), z], axis=1), t_arr

    def _scale(self, t_arr):
        if self.output_scaling == "std":
            _, var = forward_marginal(np.zeros((len(t_arr), self.cfg.dim)), t_arr, self.cfg)
            return 1.0 / np.sqrt(var)
        return np.ones((len(t_arr), self.cfg.dim))

    def score(self, x, t, z) -> np.ndarray:
        inp, t_arr = self._inputs(x, t, z)
        out = self.net(inp) * self._scale(t_arr)
        return out if np.ndim(x) > 1 else out[0]

    __call__ = score

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "sde": self.cfg.to_dict(), "output_scaling": self.output_scaling}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreModel":
        return cls(Mlp.from_dict(d["net"]), SdeConfig.from_dict(d["sde"]), d.get("output_scaling", "std"))


def dsm_loss_and_grads(model: ScoreModel, y: np.ndarray, z: np.ndarray, cfg: SdeConfig,
                       rng: np.random.Generator, t=None, noise=None):
    """Variance-weighted denoising score matching.

    ``loss = mean_batch || var * (s(x_t) - grad log q(x_t | y)) ||^2 / var``
    i.e. ``mean_batch || sqrt(var) * s + noise ||^2``. ``t`` and ``noise``
    may be pinned for gradient checks; otherwise they are drawn from ``rng``.
    Returns ``(loss, param_grads)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n = y.shape[0]
    if t is None:
        t = rng.uniform(cfg.eps_t, cfg.T, size=n)
    if noise is None:
        noise = rng.standard_normal(y.shape)
    mean, var = forward_marginal(y, t, cfg)
    std = np.sqrt(var)
    x_t = mean + std * noise
    inp, t_arr = model._inputs(x_t, t, z)
    out, cache = forward(model.net, inp)
    scale = model._scale(t_arr)
    resid = std * out * scale + noise
    loss = float(np.sum(resid ** 2) / n)
    if not np.isfinite(loss):
        raise NonFiniteLoss("denoising score-matching loss is not finite")
    grads, _ = backprop(model.net, cache, 2.0 * resid * std * scale / n)
    return loss, grads


def dsm_loss(model: ScoreModel, y, z, cfg: SdeConfig, rng: np.random.Generator, t=None, noise=None) -> float:
    return dsm_loss_and_grads(model, y, z, cfg, rng, t, noise)[0]


@dataclass
class PriorConfig:
    epochs: int = 600
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0
    hidden: int = 128
    depth: int = 3
    min_pairs: int = 200
    # cosine decay from lr to lr_final over the run; None keeps lr fixed
    lr_final: float | None = 1e-4
    # fraction of training rows whose condition is replaced by the null (zero) vector
    cond_dropout: float = 0.15
    # classifier-free guidance weight used at sampling time; 0 samples the plain conditional
    guidance: float = 2.0


@dataclass
class PriorResult:
    model: ScoreModel
    history: list[float]
    optimizer: AdamState


def train_prior(y: np.ndarray, cond_sampler, cfg: SdeConfig, config: PriorConfig = PriorConfig(),
                log=None) -> PriorResult:
    """Fit a conditional score model to embedding targets ``y``.

    ``cond_sampler(indices, rng)`` returns the conditioning embeddings for
    those rows; it is called afresh each batch so caption augmentation can
    vary between epochs.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < config.min_pairs:
        raise InsufficientData(f"need >= {config.min_pairs} training pairs, got {n}")
    rng = np.random.default_rng(config.seed)
    probe = cond_sampler(np.arange(1), rng)
    model = ScoreModel.init(cfg, rng, np.atleast_2d(probe).shape[1], config.hidden, config.depth)
    params = model.net.parameters()
    opt = AdamState.for_params(params, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        if config.lr_final is not None:
            frac = epoch / max(1, config.epochs - 1)
            opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + np.cos(np.pi * frac))
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            z = np.array(cond_sampler(idx, rng), dtype=np.float64)
            if config.cond_dropout > 0:
                z[rng.random(len(idx)) < config.cond_dropout] = 0.0
            loss, grads = dsm_loss_and_grads(model, y[idx], z, cfg, rng)
            adam_step(opt, params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log is not None and (epoch % 25 == 0 or epoch == config.epochs - 1):
            log(f"prior epoch {epoch + 1}/{config.epochs} loss {history[-1]:.4f}")
    return PriorResult(model, history, opt)


# ------------------------------------------------------------------ sampling


def guided_score(model, weight: float):
    """Classifier-free guidance: ``(1 + w) s(x, t, z) - w s(x, t, 0)``."""
    if weight == 0:
        return model

    def score(x, t, z):
        return (1.0 + weight) * model(x, t, z) - weight * model(x, t, np.zeros_like(z))

    return score


def reverse_ode_sample(model, z, n_steps: int, cfg: SdeConfig, rng: np.random.Generator,
                       n_samples: int | None = None, trace_path=None, guard: float = 1e6) -> np.ndarray:
    """Euler integration of the probability-flow ODE from ``T`` down to ``eps_t``.

    ``model(x, t, z)`` must return the score at a batch of states. Returns
    one vector, or an ``(n_samples, dim)`` array when ``n_samples`` is given.
    """
    if n_steps < 1:
        raise PreconditionError("n_steps must be >= 1")
    shape = (1 if n_samples is None else n_samples, cfg.dim)
    x = cfg.mu + np.sqrt(cfg.lam) * rng.standard_normal(shape)
    ts = np.linspace(cfg.T, cfg.eps_t, n_steps + 1)
    rows = []
    if trace_path is not None:
        rows.append([0, ts[0]] + x[0].tolist())
    for k in range(n_steps):
        t, h = ts[k], ts[k] - ts[k + 1]
        drift = 0.5 * cfg.beta(t) * ((cfg.mu - x) / cfg.lam - model(x, t, z))
        x = x - h * drift
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > guard:
            raise NonFiniteState(f"reverse ODE diverged at step {k + 1} (t={ts[k + 1]:.4g})")
        if trace_path is not None:
            rows.append([k + 1, ts[k + 1]] + x[0].tolist())
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t"] + [f"x_{i}" for i in range(cfg.dim)])
            w.writerows(rows)
    return x[0] if n_samples is None else x


def gaussian_score(data_mean: np.ndarray, data_var: np.ndarray, cfg: SdeConfig):
    """Exact score of the forward marginal when the data are ``N(data_mean, diag(data_var))``."""
    data_mean = np.asarray(data_mean, dtype=np.float64)
    data_var = np.asarray(data_var, dtype=np.float64)

    def score(x, t, z=None):
        mean, var = forward_marginal(data_mean, t, cfg)
        decay = np.exp(-0.5 * cfg.integrated_beta(t) / cfg.lam)
        total = data_var * decay ** 2 + var
        return -(x - mean) / total

    return score
