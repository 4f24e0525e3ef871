"""CV-conditioned flow matching: loss, training loop, and RK4 sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset

log = logging.getLogger(__name__)


@dataclass
class FlowModel:
    """Vector field ``v(x, t; z)`` acting on standardized coordinates.

    The network sees ``[(x - x_mean) / x_std, t, (z - z_mean) / z_std]`` and
    predicts the velocity of the standardized state.
    """

    net: nn.Mlp
    x_mean: np.ndarray
    x_std: np.ndarray
    z_mean: np.ndarray
    z_std: np.ndarray

    def __post_init__(self):
        for name in ("x_mean", "x_std", "z_mean", "z_std"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if len(self.x_mean) != self.d or len(self.z_mean) != self.k:
            raise ValueError("standardization statistics do not match the model dimensions")
        if self.net.input_dim != self.d + 1 + self.k:
            raise ValueError(f"network input width {self.net.input_dim} != d + 1 + k")
        if np.any(self.x_std <= 0) or np.any(self.z_std <= 0):
            raise ValueError("standardization std entries must be strictly positive")

    @property
    def d(self) -> int:
        return self.net.output_dim

    @property
    def k(self) -> int:
        return len(self.z_std)

    @classmethod
    def identity_stats(cls, net: nn.Mlp, k: int) -> "FlowModel":
        d = net.output_dim
        return cls(net, np.zeros(d), np.ones(d), np.zeros(k), np.ones(k))

    def _inputs(self, xs, t, zs):
        n = len(xs)
        t_col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        z_cols = np.broadcast_to(np.asarray(zs, dtype=np.float64).reshape(-1, self.k), (n, self.k))
        return np.concatenate([xs, t_col, z_cols], axis=1)

    def standardized_velocity(self, xs, t, zs):
        return nn.mlp_forward(self.net, self._inputs(xs, t, zs))

    def velocity(self, x, t, z):
        """Velocity in the original coordinates at points ``x`` (n, d)."""
        x = np.atleast_2d(x)
        xs = (x - self.x_mean) / self.x_std
        zs = (np.asarray(z, dtype=np.float64) - self.z_mean) / self.z_std
        return self.x_std * self.standardized_velocity(xs, t, zs)

    def save(self, path, extra=None) -> None:
        stats = {
            "d": self.d,
            "k": self.k,
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "z_mean": self.z_mean.tolist(),
            "z_std": self.z_std.tolist(),
        }
        nn.save_checkpoint(path, "flow", {"vector_field": self.net}, {**stats, **(extra or {})})

    @classmethod
    def load(cls, path) -> "FlowModel":
        kind, nets, extra = nn.load_checkpoint(path)
        if kind != "flow":
            raise ValueError(f"{path}: checkpoint kind {kind!r} is not a flow model")
        model = cls(nets["vector_field"], extra["x_mean"], extra["x_std"], extra["z_mean"], extra["z_std"])
        if model.d != extra["d"] or model.k != extra["k"]:
            raise ValueError(f"{path}: header dimensions disagree with the stored network")
        return model


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int | None = None
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.patience is not None and int(self.patience) < 1:
            raise ValueError("patience must be a positive integer")


def _stats(a, enabled):
    if not enabled:
        return np.zeros(a.shape[1]), np.ones(a.shape[1])
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    # degenerate columns (e.g. a single repeated point) keep unit scale
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def fm_loss_batch(model: FlowModel, x1, z1, rng=None, t=None, x0=None):
    """Empirical flow-matching loss on one batch and its parameter gradient.

    ``x1`` are data points (n, d) and ``z1`` their CV values (n, k), both in
    original coordinates. Unless given, ``t ~ U[0, 1]`` and the standardized
    prior draws ``x0 ~ N(0, I)`` are sampled from ``rng`` (t first, then x0).
    Returns ``(loss, grads)`` with the loss averaged over the batch.
    """
    x1s = (np.atleast_2d(x1) - model.x_mean) / model.x_std
    zs = (np.asarray(z1, dtype=np.float64).reshape(len(x1s), -1) - model.z_mean) / model.z_std
    n = len(x1s)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=n)
    if x0 is None:
        x0 = rng.standard_normal(x1s.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), x1s.shape)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1s
    out, cache = nn.forward_with_cache(model.net, model._inputs(xt, t, zs))
    resid = out - (x1s - x0)
    loss = float(np.sum(resid * resid) / n)
    if not math.isfinite(loss):
        raise nn.DivergenceError("flow-matching loss is non-finite")
    grads, _ = nn.backward_from_cache(model.net, cache, 2.0 * resid / n)
    return loss, grads


def init_flow_model(x, z, hidden=(128, 128), seed=0, standardize=True) -> FlowModel:
    x = np.atleast_2d(x)
    z = np.asarray(z, dtype=np.float64).reshape(len(x), -1)
    d, k = x.shape[1], z.shape[1]
    net = nn.init_mlp([d + 1 + k, *hidden, d], seed)
    xm, xsd = _stats(x, standardize)
    zm, zsd = _stats(z, standardize)
    return FlowModel(net, xm, xsd, zm, zsd)


def train_flow(data: Dataset, m, cfg: TrainConfig, hidden=(128, 128)):
    """Mini-batch Adam on the flow-matching objective.

    CV values ``m.value(x)`` condition each data point. Fresh ``(t, x0)`` are
    drawn for every point in every epoch. With ``patience`` set, training
    stops once the epoch loss has not improved for that many epochs and the
    best parameters are restored. Returns ``(model, history)``.
    """
    x = data.points
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.batch_size > len(x):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(x)}")
    z = m.value(x)
    init_seed, loop_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    model = init_flow_model(x, z, hidden, init_seed, cfg.standardize)
    rng = np.random.default_rng(loop_seed)
    state = nn.adam_init(model.net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n, bs = len(x), cfg.batch_size
    history = []
    best, best_net, since_best = math.inf, model.net, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            try:
                loss, grads = fm_loss_batch(model, x[idx], z[idx], rng)
                model.net, state = nn.adam_step(model.net, grads, state)
            except nn.DivergenceError as exc:
                raise nn.DivergenceError(f"training diverged at epoch {epoch}: {exc}") from None
            total += loss * len(idx)
        history.append(total / n)
        if epoch % 100 == 0 or epoch == cfg.epochs - 1:
            log.info("flow epoch %d loss %.6g", epoch, history[-1])
        if cfg.patience is not None:
            if history[-1] < best:
                best, best_net, since_best = history[-1], model.net, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    log.info("early stopping at epoch %d (best loss %.6g)", epoch, best)
                    break
    if cfg.patience is not None and cfg.epochs > 0:
        model.net = best_net
    return model, history


# -- sampling -------------------------------------------------------------------


def integrate_rk4(f, x0, n_steps, t0=0.0, t1=1.0, snapshot_times=()):
    """Classical RK4 on a uniform grid of ``n_steps`` steps.

    Returns the terminal state and a dict ``{t: state}`` for requested
    snapshot times, each rounded to the nearest grid node.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    snaps = {}
    want = {}
    if n_steps > 0:
        h = (t1 - t0) / n_steps
        for ts in snapshot_times:
            want.setdefault(int(round((ts - t0) / h)), []).append(ts)
    else:
        h = 0.0
    for ts in want.pop(0, []):
        snaps[ts] = x.copy()
    for i in range(n_steps):
        t = t0 + i * h
        k1 = f(x, t)
        k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state during integration at step {i + 1}")
        for ts in want.get(i + 1, []):
            snaps[ts] = x.copy()
    for ts in snapshot_times:
        snaps.setdefault(ts, x.copy())
    return x, snaps


def generate(model: FlowModel, z, n_samples, n_time_steps, seed=0, snapshot_times=()):
    """Push standard-Gaussian draws through the learned ODE for target ``z``.

    Returns a Dataset of final states in original coordinates. With
    ``snapshot_times`` a second value, ``{t: points}``, is also returned.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.shape != (model.k,):
        raise ValueError(f"target z must have length {model.k}")
    zs = (z - model.z_mean) / model.z_std
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((int(n_samples), model.d))
    inputs = model._inputs(x0, 0.0, zs)

    def field(xs, t):
        inputs[:, : model.d] = xs
        inputs[:, model.d] = t
        return nn.mlp_forward(model.net, inputs)

    xs, snaps = integrate_rk4(field, x0, int(n_time_steps), snapshot_times=snapshot_times)
    meta = {"z": z.tolist(), "n_time_steps": int(n_time_steps), "seed": seed}
    ds = Dataset(model.x_mean + model.x_std * xs, None, meta)
    if snapshot_times:
        return ds, {t: model.x_mean + model.x_std * s for t, s in snaps.items()}
    return ds
