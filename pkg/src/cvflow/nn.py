"""Dense Tanh networks with hand-written backpropagation and Adam.

Arrays are float64 throughout. Every function accepts either a single input
vector of shape ``(d_in,)`` or a batch of shape ``(n, d_in)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "cvflow-mlp"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or gradient array has the wrong shape for the network."""


class DivergenceError(FloatingPointError):
    """A non-finite value appeared during optimization."""


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(n) for n in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ShapeError(f"invalid layer_dims {self.layer_dims}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_dims")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.layer_dims[l], self.layer_dims[l + 1]
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ShapeError(
                    f"layer {l}: expected W {(n_out, n_in)} and b {(n_out,)}, "
                    f"got {w.shape} and {b.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Flat view ``[W0, b0, W1, b1, ...]`` used by the optimizer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, layer_dims, arrays) -> "Mlp":
        return cls(list(layer_dims), list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "Mlp":
        return Mlp.from_arrays(self.layer_dims, [a.copy() for a in self.arrays()])

    def zeros_like(self) -> "Mlp":
        return Mlp.from_arrays(self.layer_dims, [np.zeros_like(a) for a in self.arrays()])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(layer_dims, seed=0) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return Mlp(list(layer_dims), weights, biases)


def zero_mlp(layer_dims) -> Mlp:
    return Mlp(
        list(layer_dims),
        [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
        [np.zeros(o) for o in layer_dims[1:]],
    )


def _as_batch(params: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"expected input of width {params.input_dim}, got shape {x.shape}")
    return x, single


def forward_with_cache(params: Mlp, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on a batch, also returning the activations needed by backward.

    ``cache[0]`` is the input, ``cache[l]`` the Tanh output of hidden layer l.
    """
    x, _ = _as_batch(params, x)
    cache = [x]
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.tanh(h)
            cache.append(h)
    return h, cache


def backward_from_cache(params: Mlp, cache, grad_out) -> tuple[Mlp, np.ndarray]:
    """Reverse pass for ``sum_i <out_i, grad_out_i>`` summed over the batch."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache[0].shape[0], params.output_dim):
        raise ShapeError(
            f"output gradient shape {g.shape} does not match "
            f"({cache[0].shape[0]}, {params.output_dim})"
        )
    n_layers = params.n_layers
    dW = [None] * n_layers
    db = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        h_in = cache[l]
        dW[l] = g.T @ h_in
        db[l] = g.sum(axis=0)
        g = g @ params.weights[l]
        if l > 0:
            g = g * (1.0 - h_in * h_in)
    return Mlp(params.layer_dims, dW, db), g


def mlp_forward(params: Mlp, x) -> np.ndarray:
    single = np.ndim(x) == 1
    out, _ = forward_with_cache(params, x)
    return out[0] if single else out


def mlp_backward(params: Mlp, x, grad_out) -> tuple[Mlp, np.ndarray]:
    """Parameter gradients and input gradient of ``<mlp(x), grad_out>``.

    For a batch the parameter gradients are summed over rows and the input
    gradient is returned per row.
    """
    single = np.ndim(x) == 1
    _, cache = forward_with_cache(params, x)
    grads, g_in = backward_from_cache(params, cache, grad_out)
    return grads, (g_in[0] if single else g_in)


def input_jacobian(params: Mlp, x) -> np.ndarray:
    """d(out)/d(in) per row, shape ``(n, d_in, d_out)``."""
    x, single = _as_batch(params, x)
    _, cache = forward_with_cache(params, x)
    n = x.shape[0]
    jac = np.empty((n, params.input_dim, params.output_dim))
    for j in range(params.output_dim):
        g = np.zeros((n, params.output_dim))
        g[:, j] = 1.0
        _, jac[:, :, j] = backward_from_cache(params, cache, g)
    return jac[0] if single else jac


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0 or not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("Adam requires lr > 0 and betas in (0, 1)")
        if not self.eps > 0 or self.weight_decay < 0:
            raise ValueError("Adam requires eps > 0 and weight_decay >= 0")


def adam_init(params: Mlp, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> AdamState:
    zeros = [np.zeros_like(a) for a in params.arrays()]
    return AdamState(lr, beta1, beta2, eps, weight_decay, 0, zeros, [z.copy() for z in zeros])


def adam_step(params: Mlp, grads: Mlp, state: AdamState) -> tuple[Mlp, AdamState]:
    """One bias-corrected Adam update; weight decay is added to the gradient.

    Returns fresh parameter and state objects; the inputs are not modified.
    """
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if [a.shape for a in p_arrays] != [g.shape for g in g_arrays]:
        raise ShapeError("gradient shapes do not match parameters")
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at Adam step {state.step_count + 1}")
    if not state.m:
        state = adam_init(params, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay)

    t = state.step_count + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        state.lr, state.beta1, state.beta2, state.eps, state.weight_decay, t, new_m, new_v
    )
    return Mlp.from_arrays(params.layer_dims, new_p), new_state


# -- checkpoints ---------------------------------------------------------------


def mlp_to_dict(params: Mlp) -> dict:
    """JSON-ready dict; matrices are flattened row-major (C order)."""
    return {
        "layer_dims": list(params.layer_dims),
        "weights": [w.ravel(order="C").tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def mlp_from_dict(d: dict) -> Mlp:
    dims = [int(n) for n in d["layer_dims"]]
    weights = [
        np.asarray(w, dtype=np.float64).reshape(o, i)
        for w, i, o in zip(d["weights"], dims[:-1], dims[1:])
    ]
    biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
    return Mlp(dims, weights, biases)


def save_checkpoint(path, kind: str, nets: dict, extra: dict | None = None) -> None:
    """Write a checkpoint holding one or more named networks plus metadata.

    Python's float repr round-trips exactly, so the JSON is lossless.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "nets": {name: mlp_to_dict(net) for name, net in nets.items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[str, dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    nets = {name: mlp_from_dict(d) for name, d in doc["nets"].items()}
    return doc["kind"], nets, doc.get("extra", {})
