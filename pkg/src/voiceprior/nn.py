"""Small fully-connected networks with hand-written backprop and Adam.

Everything runs in float64. Inputs may be a single vector ``(in,)`` or a
batch ``(n, in)``; outputs follow the same rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteGradient

ACTIVATIONS = ("tanh", "relu", "identity", "sigmoid")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    return a


def _act_grad(name: str, a: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain ``g`` (gradient w.r.t. the activation output ``h``) back to ``a``."""
    if name == "tanh":
        return g * (1.0 - h * h)
    if name == "relu":
        return g * (a > 0.0)
    if name == "sigmoid":
        return g * h * (1.0 - h)
    return g


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "identity"

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise DimensionMismatch(
                    f"layer output {prev.weight.shape[0]} feeds layer input {nxt.weight.shape[1]}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @classmethod
    def init(cls, sizes: list[int], activations: list[str], rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = np.sqrt(6.0 / (n_in + n_out))
            layers.append(Layer(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); mutated in place by optimizers."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def to_dict(self) -> dict:
        return {
            "sizes": [self.in_dim] + [l.weight.shape[0] for l in self.layers],
            "activations": [l.activation for l in self.layers],
            "params": [p.ravel().tolist() for p in self.parameters()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        sizes, acts, flat = d["sizes"], d["activations"], d["params"]
        layers = []
        for i, (n_in, n_out, act) in enumerate(zip(sizes[:-1], sizes[1:], acts)):
            w = np.asarray(flat[2 * i], dtype=np.float64).reshape(n_out, n_in)
            b = np.asarray(flat[2 * i + 1], dtype=np.float64)
            layers.append(Layer(w, b, act))
        return cls(layers)


def forward(model: Mlp, x: np.ndarray):
    """Return ``(output, cache)``; the cache holds every pre- and post-activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.in_dim:
        raise DimensionMismatch(f"input width {x.shape[-1]} != model input {model.in_dim}")
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    cache = {"squeeze": squeeze, "inputs": [], "pre": [], "post": []}
    for layer in model.layers:
        cache["inputs"].append(h)
        a = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, a)
        cache["pre"].append(a)
        cache["post"].append(h)
    return (h[0] if squeeze else h), cache


def backprop(model: Mlp, cache: dict, output_gradient: np.ndarray):
    """Reverse-mode gradients.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` lines up
    with :meth:`Mlp.parameters`. Gradients are summed over the batch.
    """
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape[-1] != model.out_dim:
        raise DimensionMismatch(f"output gradient width {g.shape[-1]} != model output {model.out_dim}")
    if cache["squeeze"]:
        g = g[None, :]
    if g.shape[0] != cache["post"][-1].shape[0]:
        raise DimensionMismatch("output gradient batch does not match the cached forward pass")
    grads: list[np.ndarray] = [None] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        da = _act_grad(layer.activation, cache["pre"][i], cache["post"][i], g)
        grads[2 * i] = da.T @ cache["inputs"][i]
        grads[2 * i + 1] = da.sum(axis=0)
        g = da @ layer.weight
    return grads, (g[0] if cache["squeeze"] else g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
                "m": [a.ravel().tolist() for a in self.m], "v": [a.ravel().tolist() for a in self.v]}

    @classmethod
    def from_dict(cls, d: dict, params: list[np.ndarray]) -> "AdamState":
        m = [np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(d["m"], params)]
        v = [np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(d["v"], params)]
        return cls(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], step=d["step"], m=m, v=v)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatch("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionMismatch(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dominating."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(params: list[np.ndarray], loss_and_grads, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grads()`` must evaluate the loss at the current contents of
    ``params`` and return ``(loss, grads)`` with grads aligned to ``params``.
    Every entry of every array is perturbed; arrays are restored afterwards.
    """
    _, analytic = loss_and_grads()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_and_grads()[0]
            flat[j] = orig - eps
            lm = loss_and_grads()[0]
            flat[j] = orig
            numeric = (lp - lm) / (2.0 * eps)
            worst = max(worst, float(relative_error(gflat[j], numeric, floor)))
    return worst


def model_grad_check(model: Mlp, loss_and_grads, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """:func:`grad_check` over every parameter of ``model``."""
    return grad_check(model.parameters(), loss_and_grads, eps, floor)
