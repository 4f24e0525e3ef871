"""Potential energy landscapes and collective-variable maps.

Potentials and CV maps are vectorized over leading axes: ``x`` has shape
``(..., d)``. Potentials additionally expose ``scalar_gradient`` on plain
Python float sequences, which the Langevin integrators use in their
per-step loop where numpy call overhead dominates.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import nn
from .data import Dataset

log = logging.getLogger(__name__)


class RankError(ValueError):
    """The CV Jacobian is rank deficient at the requested point."""


def _check_dim(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (d,):
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x


class MuellerBrown:
    """Four-Gaussian Müller-Brown surface with the standard published constants."""

    kind = "mueller_brown"
    dim = 2
    A = np.array([-200.0, -100.0, -170.0, 15.0])
    a = np.array([-1.0, -1.0, -6.5, 0.7])
    b = np.array([0.0, 0.0, 11.0, 0.6])
    c = np.array([-10.0, -10.0, -6.5, 0.7])
    x0 = np.array([1.0, 0.0, -0.5, -1.0])
    y0 = np.array([0.0, 0.5, 1.5, 1.0])

    def __init__(self):
        self._terms = list(
            zip(*(arr.tolist() for arr in (self.A, self.a, self.b, self.c, self.x0, self.y0)))
        )

    def _gauss(self, x):
        x = _check_dim(x, 2)
        dx = x[..., 0:1] - self.x0
        dy = x[..., 1:2] - self.y0
        e = self.A * np.exp(self.a * dx * dx + self.b * dx * dy + self.c * dy * dy)
        return dx, dy, e

    def energy(self, x):
        _, _, e = self._gauss(x)
        return e.sum(axis=-1)

    def gradient(self, x):
        dx, dy, e = self._gauss(x)
        gx = (e * (2 * self.a * dx + self.b * dy)).sum(axis=-1)
        gy = (e * (self.b * dx + 2 * self.c * dy)).sum(axis=-1)
        return np.stack([gx, gy], axis=-1)

    def scalar_gradient(self, x):
        px, py = x
        gx = gy = 0.0
        for A, a, b, c, x0, y0 in self._terms:
            dx = px - x0
            dy = py - y0
            e = A * math.exp(a * dx * dx + b * dx * dy + c * dy * dy)
            gx += e * (2 * a * dx + b * dy)
            gy += e * (b * dx + 2 * c * dy)
        return [gx, gy]

    def to_dict(self):
        return {"kind": self.kind}


class IsotropicQuadratic:
    """V(x) = stiffness * |x|^2 / 2."""

    kind = "isotropic_quadratic"

    def __init__(self, stiffness=1.0, dim=2):
        if not stiffness > 0:
            raise ValueError("stiffness must be positive")
        self.stiffness = float(stiffness)
        self.dim = int(dim)

    def energy(self, x):
        x = _check_dim(x, self.dim)
        return 0.5 * self.stiffness * np.sum(x * x, axis=-1)

    def gradient(self, x):
        return self.stiffness * _check_dim(x, self.dim)

    def scalar_gradient(self, x):
        k = self.stiffness
        return [k * xi for xi in x]

    def to_dict(self):
        return {"kind": self.kind, "stiffness": self.stiffness, "dim": self.dim}


def make_potential(spec: dict):
    kind = spec.get("kind")
    if kind == MuellerBrown.kind:
        return MuellerBrown()
    if kind == IsotropicQuadratic.kind:
        return IsotropicQuadratic(spec.get("stiffness", 1.0), spec.get("dim", 2))
    raise ValueError(f"unknown potential kind {kind!r}")


def potential_energy(p, x):
    return p.energy(x)


def potential_gradient(p, x):
    return p.gradient(x)


# -- collective variables -------------------------------------------------------


class RadialCV:
    """xi(x) = |x|^2 (one output)."""

    kind = "radial"
    k = 1

    def __init__(self, dim=2):
        self.dim = int(dim)

    def value(self, x):
        x = _check_dim(x, self.dim)
        return np.sum(x * x, axis=-1, keepdims=True)

    def jacobian(self, x):
        x = _check_dim(x, self.dim)
        return 2.0 * x[..., :, None]

    def projected_gradient_divergence(self, x):
        """Analytic div of grad(xi) / |grad(xi)|^2 = x / (2|x|^2), i.e. (d - 2) / (2|x|^2)."""
        x = _check_dim(x, self.dim)
        r2 = np.sum(x * x, axis=-1)
        with np.errstate(divide="ignore"):
            return ((self.dim - 2) / (2.0 * r2))[..., None]

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim}


class EncoderCV:
    """CV given by the encoder half of an autoencoder."""

    kind = "encoder"

    def __init__(self, net: nn.Mlp):
        self.net = net
        self.dim = net.input_dim
        self.k = net.output_dim
        if self.k >= self.dim:
            raise ValueError("a CV must reduce dimension (k < d)")

    def value(self, x):
        x = _check_dim(x, self.dim)
        flat = x.reshape(-1, self.dim)
        return nn.mlp_forward(self.net, flat).reshape(x.shape[:-1] + (self.k,))

    def jacobian(self, x):
        x = _check_dim(x, self.dim)
        flat = x.reshape(-1, self.dim)
        jac = nn.input_jacobian(self.net, flat)
        return jac.reshape(x.shape[:-1] + (self.dim, self.k))

    def affine(self, scale, shift) -> "EncoderCV":
        """Encoder computing ``scale * xi(x) + shift`` (folded into the output layer)."""
        net = self.net.copy()
        net.weights[-1] = net.weights[-1] * scale
        net.biases[-1] = net.biases[-1] * scale + shift
        return EncoderCV(net)

    def to_dict(self):
        return {"kind": self.kind, **nn.mlp_to_dict(self.net)}


def cv_value(m, x):
    return m.value(x)


def cv_jacobian(m, x):
    return m.jacobian(x)


def save_cv(path, m: EncoderCV, decoder: nn.Mlp | None = None, extra=None) -> None:
    nets = {"encoder": m.net}
    if decoder is not None:
        nets["decoder"] = decoder
    nn.save_checkpoint(path, "encoder", nets, extra)


def load_cv(path) -> EncoderCV:
    kind, nets, _ = nn.load_checkpoint(path)
    if kind != "encoder":
        raise ValueError(f"{path}: checkpoint kind {kind!r} is not an encoder CV")
    return EncoderCV(nets["encoder"])


def calibrate_encoder(m: EncoderCV, points, lo, hi) -> EncoderCV:
    """Affinely map the encoder so the data's CV range becomes ``[lo, hi]``.

    Orientation is preserved; only k = 1 is supported.
    """
    if m.k != 1:
        raise ValueError("calibration is defined for one-dimensional CVs only")
    vals = m.value(points)[:, 0]
    vmin, vmax = float(vals.min()), float(vals.max())
    if not vmax > vmin:
        raise ValueError("encoder is constant on the data; cannot calibrate")
    scale = (hi - lo) / (vmax - vmin)
    return m.affine(scale, lo - scale * vmin)


# -- autoencoder ----------------------------------------------------------------


def _reconstruction(enc, dec, x):
    z, enc_cache = nn.forward_with_cache(enc, x)
    y, dec_cache = nn.forward_with_cache(dec, z)
    return y, enc_cache, dec_cache


def reconstruction_error(enc: nn.Mlp, dec: nn.Mlp, points) -> float:
    y, _, _ = _reconstruction(enc, dec, points)
    return float(np.mean((y - points) ** 2))


def train_autoencoder(
    data: Dataset,
    encoder_dims,
    decoder_dims,
    epochs=200,
    lr=1e-3,
    batch_size=128,
    seed=0,
    weight_decay=0.0,
):
    """Fit encoder/decoder by mini-batch Adam on the mean squared reconstruction error.

    Returns ``(EncoderCV, decoder, history)`` where ``history[e]`` is the mean
    batch loss of epoch ``e``.
    """
    x = data.points
    if len(x) == 0:
        raise ValueError("cannot train an autoencoder on an empty dataset")
    if encoder_dims[0] != x.shape[1] or decoder_dims[-1] != x.shape[1]:
        raise ValueError("autoencoder input/output width must match the data dimension")
    if encoder_dims[-1] != decoder_dims[0]:
        raise ValueError("encoder output width must equal decoder input width")
    ss = np.random.SeedSequence(seed)
    enc_seed, dec_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    enc = nn.init_mlp(encoder_dims, enc_seed)
    dec = nn.init_mlp(decoder_dims, dec_seed)
    opt_e = nn.adam_init(enc, lr=lr, weight_decay=weight_decay)
    opt_d = nn.adam_init(dec, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(shuffle_seed)
    n = len(x)
    bs = min(batch_size, n)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            xb = x[order[start : start + bs]]
            y, enc_cache, dec_cache = _reconstruction(enc, dec, xb)
            diff = y - xb
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise nn.DivergenceError(f"autoencoder loss is non-finite at epoch {epoch}")
            g_out = 2.0 * diff / diff.size
            g_dec, g_z = nn.backward_from_cache(dec, dec_cache, g_out)
            g_enc, _ = nn.backward_from_cache(enc, enc_cache, g_z)
            dec, opt_d = nn.adam_step(dec, g_dec, opt_d)
            enc, opt_e = nn.adam_step(enc, g_enc, opt_e)
            total += loss * len(xb)
        history.append(total / n)
        if epoch % 50 == 0 or epoch == epochs - 1:
            log.debug("autoencoder epoch %d loss %.6g", epoch, history[-1])
    return EncoderCV(enc), dec, history
