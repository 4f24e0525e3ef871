"""Overdamped Langevin samplers: unbiased, ABF-biased, and level-set constrained.

Gaussian increments come from ``numpy.random.default_rng(seed)`` (PCG64 bit
generator, ziggurat normals), drawn in order step by step, coordinate by
coordinate. Chunked drawing does not change the sequence, so a trajectory is
reproducible from its seed alone.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .potentials import RadialCV, RankError
from .projection import ProjectionConfig, ProjectionError, project_batch, project_to_levelset

log = logging.getLogger(__name__)

NOISE_CHUNK = 1 << 15
MAX_STEP_HALVINGS = 10


class TrajectoryDivergenceError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"trajectory became non-finite at step {step}")
        self.step = step


@dataclass
class LangevinConfig:
    """Euler-Maruyama settings. ``beta = inf`` switches the noise off."""

    step_size: float
    beta: float
    n_steps: int
    record_every: int = 1
    seed: int = 0
    initial_point: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ValueError("step_size must be positive and finite")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if int(self.n_steps) < 1 or int(self.record_every) < 1:
            raise ValueError("n_steps and record_every must be positive integers")
        self.n_steps = int(self.n_steps)
        self.record_every = int(self.record_every)
        self.initial_point = tuple(float(v) for v in self.initial_point)

    @property
    def noise_scale(self) -> float:
        return 0.0 if math.isinf(self.beta) else math.sqrt(2.0 * self.step_size / self.beta)

    @property
    def total_time(self) -> float:
        return self.step_size * self.n_steps


def _noise(rng, n_steps, d):
    """Yield one list of ``d`` standard normals per step."""
    remaining = n_steps
    while remaining > 0:
        m = min(NOISE_CHUNK, remaining)
        yield from rng.standard_normal((m, d)).tolist()
        remaining -= m


def _meta(p, m, cfg, **extra):
    meta = {"potential": p.to_dict(), "config": asdict(cfg), "seed": cfg.seed}
    if m is not None:
        meta["cv"] = m.kind
    if math.isinf(cfg.beta):
        meta["config"]["beta"] = "inf"
    meta.update(extra)
    return meta


def sample_langevin(p, cfg: LangevinConfig) -> Dataset:
    """Unbiased Euler-Maruyama trajectory; keeps every ``record_every``-th state."""
    x = list(cfg.initial_point)
    if len(x) != p.dim:
        raise ValueError(f"initial point has dimension {len(x)}, potential expects {p.dim}")
    h, s = cfg.step_size, cfg.noise_scale
    grad = p.scalar_gradient
    rng = np.random.default_rng(cfg.seed)
    out = []
    for step, noise in enumerate(_noise(rng, cfg.n_steps, len(x)), start=1):
        g = grad(x)
        x = [xi + h * -gi + s * ni for xi, gi, ni in zip(x, g, noise)]
        if not math.isfinite(sum(x)):
            raise TrajectoryDivergenceError(step)
        if step % cfg.record_every == 0:
            out.append(x)
    return Dataset(np.array(out).reshape(-1, p.dim), None, _meta(p, None, cfg, sampler="langevin"))


# -- mean force -----------------------------------------------------------------


def _projected_gradients(jac):
    """(grad xi)(grad xi^T grad xi)^{-1} per row; raises RankError if singular."""
    if jac.shape[-1] == 1:
        gram = np.sum(jac * jac, axis=-2, keepdims=True)
        if not np.all(gram > 0.0):
            raise RankError("grad(xi) vanishes")
        return jac / gram
    gram = np.einsum("...dk,...dl->...kl", jac, jac)
    scale = np.maximum(np.abs(gram).max(axis=(-2, -1)), np.finfo(float).tiny)
    det = np.linalg.det(gram / scale[..., None, None])
    if np.any(~(np.abs(det) > 1e-12)):
        raise RankError("grad(xi)^T grad(xi) is singular")
    return np.einsum("...dk,...kl->...dl", jac, np.linalg.inv(gram))


_FD_OFFSETS = {}


def _fd_offsets(d, step):
    key = (d, step)
    if key not in _FD_OFFSETS:
        _FD_OFFSETS[key] = np.concatenate([np.zeros((1, d)), step * np.eye(d), -step * np.eye(d)])
    return _FD_OFFSETS[key]


def _mean_force_and_jacobian(m, x, grad_v, beta, divergence="fd", fd_step=1e-5):
    d = x.shape[-1]
    if divergence == "analytic":
        jac = m.jacobian(x)
        proj = _projected_gradients(jac)
        div = m.projected_gradient_divergence(x)
    elif divergence == "fd":
        jacs = m.jacobian(x[None, :] + _fd_offsets(d, fd_step))
        jac = jacs[0]
        fields = _projected_gradients(jacs)
        proj = fields[0]
        plus, minus = fields[1 : d + 1], fields[d + 1 :]
        ll = np.arange(d)
        div = ((plus[ll, ll, :] - minus[ll, ll, :]) / (2.0 * fd_step)).sum(axis=0)
    else:
        raise ValueError(f"unknown divergence method {divergence!r}")
    force = proj.T @ grad_v
    if not math.isinf(beta):
        force = force - div / beta
    return force, jac


def local_mean_force(p, m, x, beta, divergence="fd", fd_step=1e-5):
    """Integrand of the mean-force identity at ``x``.

    ``P^T grad V - beta^{-1} div P`` with ``P = grad xi (grad xi^T grad xi)^{-1}``;
    the divergence is by central differences or, for the radial CV, analytic.
    """
    x = np.asarray(x, dtype=np.float64)
    if divergence == "analytic" and not isinstance(m, RadialCV):
        raise ValueError("analytic divergence is only available for the radial CV")
    force, _ = _mean_force_and_jacobian(m, x, p.gradient(x), beta, divergence, fd_step)
    return force


# -- ABF --------------------------------------------------------------------------


@dataclass
class MeanForceGrid:
    """Running per-cell mean-force estimates on a uniform grid in CV space."""

    lo: np.ndarray
    hi: np.ndarray
    n_cells: tuple
    activation_threshold: float = 100
    visit_count: np.ndarray = field(default=None, repr=False)
    force_sum: np.ndarray = field(default=None, repr=False)
    out_of_range: int = 0

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        self.n_cells = tuple(int(n) for n in np.atleast_1d(self.n_cells))
        k = len(self.lo)
        if len(self.hi) != k or len(self.n_cells) != k:
            raise ValueError("lo, hi and n_cells must have one entry per CV dimension")
        if np.any(self.hi <= self.lo) or min(self.n_cells) < 1:
            raise ValueError("grid needs hi > lo and at least one cell per dimension")
        if not self.activation_threshold >= 1:
            raise ValueError("activation_threshold must be >= 1")
        size = int(np.prod(self.n_cells))
        if self.visit_count is None:
            self.visit_count = np.zeros(size, dtype=np.int64)
        if self.force_sum is None:
            self.force_sum = np.zeros((size, k))
        self._fast = (float(self.lo[0]), float(self.widths[0]), self.n_cells[0])

    @classmethod
    def from_spacing(cls, lo, hi, spacing, activation_threshold=100):
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        n = np.maximum(1, np.round((hi - lo) / spacing).astype(int))
        return cls(lo, hi, tuple(n), activation_threshold)

    @property
    def k(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.n_cells)

    def locate(self, z) -> tuple[int, bool]:
        """Flat index of the cell holding ``z`` (clamped to the edge) and an inside flag."""
        if self.k == 1:
            lo, w, n = self._fast
            i = math.floor((float(z[0]) - lo) / w)
            if 0 <= i < n:
                return i, True
            return (0 if i < 0 else n - 1), False
        rel = (np.asarray(z, dtype=np.float64) - self.lo) / self.widths
        idx = np.floor(rel).astype(int)
        n = np.array(self.n_cells)
        inside = bool(np.all((idx >= 0) & (idx < n)))
        idx = np.clip(idx, 0, n - 1)
        return int(np.ravel_multi_index(tuple(idx), self.n_cells)), inside

    def update(self, cell, force) -> None:
        self.visit_count[cell] += 1
        self.force_sum[cell] += force

    def is_active(self, cell) -> bool:
        return self.visit_count[cell] >= self.activation_threshold

    def mean_force(self) -> np.ndarray:
        """Per-cell mean force; NaN where a cell was never visited."""
        out = np.full_like(self.force_sum, np.nan)
        seen = self.visit_count > 0
        out[seen] = self.force_sum[seen] / self.visit_count[seen, None]
        return out

    def cell_centers(self) -> np.ndarray:
        axes = [
            lo + (np.arange(n) + 0.5) * w for lo, n, w in zip(self.lo, self.n_cells, self.widths)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=1)

    def write_csv(self, path) -> None:
        """Columns ``cell_center,visit_count,mean_force`` (k = 1 layout)."""
        centers, mf = self.cell_centers(), self.mean_force()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_center", "visit_count", "mean_force"])
            for c, n, f in zip(centers, self.visit_count, mf):
                w.writerow([";".join(f"{v:.17g}" for v in c), int(n), ";".join(f"{v:.17g}" for v in f)])


def sample_abf(
    p,
    m,
    cfg: LangevinConfig,
    grid: MeanForceGrid,
    equilibration_steps=0,
    divergence="fd",
):
    """ABF-biased Langevin trajectory.

    Each step updates the running mean force of the cell containing
    ``xi(x_t)``; once that cell has ``activation_threshold`` samples, the drift
    gains ``grad xi(x_t) f_t``. CV values outside the grid are booked in the
    nearest edge cell but receive no bias. States are recorded every
    ``record_every`` steps after ``equilibration_steps``.

    ``grid`` is updated in place and also returned.
    """
    x = list(cfg.initial_point)
    if len(x) != p.dim:
        raise ValueError(f"initial point has dimension {len(x)}, potential expects {p.dim}")
    if grid.k != m.k:
        raise ValueError("grid dimension does not match the CV dimension")
    h, s, beta = cfg.step_size, cfg.noise_scale, cfg.beta
    grad = p.scalar_gradient
    rng = np.random.default_rng(cfg.seed)
    out = []
    for step, noise in enumerate(_noise(rng, cfg.n_steps, len(x)), start=1):
        g = grad(x)
        xa = np.array(x)
        force, jac = _mean_force_and_jacobian(m, xa, np.array(g), beta, divergence)
        cell, inside = grid.locate(m.value(xa))
        if not inside:
            if grid.out_of_range == 0:
                log.warning("ABF: CV value left the grid at step %d; no bias applied there", step)
            grid.out_of_range += 1
        grid.update(cell, force)
        if inside and grid.is_active(cell):
            bias = (jac @ (grid.force_sum[cell] / grid.visit_count[cell])).tolist()
            drift = [-gi + bi for gi, bi in zip(g, bias)]
        else:
            drift = [-gi for gi in g]
        x = [xi + h * di + s * ni for xi, di, ni in zip(x, drift, noise)]
        if not math.isfinite(sum(x)):
            raise TrajectoryDivergenceError(step)
        if step > equilibration_steps and (step - equilibration_steps) % cfg.record_every == 0:
            out.append(x)
    if grid.out_of_range:
        log.warning("ABF: %d steps had CV values outside the grid", grid.out_of_range)
    meta = _meta(
        p, m, cfg, sampler="abf", equilibration_steps=int(equilibration_steps),
        grid={"lo": grid.lo.tolist(), "hi": grid.hi.tolist(), "n_cells": list(grid.n_cells),
              "activation_threshold": grid.activation_threshold},
    )
    return Dataset(np.array(out).reshape(-1, p.dim), None, meta), grid


# -- constrained ----------------------------------------------------------------


def levelset_weights(m, x) -> np.ndarray:
    """det(grad xi^T grad xi)^{-1/2}; equals 1/|grad xi| for one CV."""
    jac = m.jacobian(x)
    gram = np.einsum("...dk,...dl->...kl", jac, jac)
    return 1.0 / np.sqrt(np.linalg.det(gram))


def sample_constrained(
    p,
    m,
    z,
    cfg: LangevinConfig,
    tol=1e-5,
    n_chains=1,
    burn_in=0,
    projection: ProjectionConfig | None = None,
) -> Dataset:
    """Euler-Maruyama step followed by gradient-flow projection back onto ``{xi = z}``.

    ``n_chains`` independent chains start from the projection of
    ``cfg.initial_point`` and advance together; after ``burn_in`` steps, all
    chains are recorded every ``record_every`` steps (step-major order). A
    step whose projection fails is redrawn for that chain with half the step
    size (same Gaussian draw), up to ten times.

    Each state carries the weight ``|grad xi(x)|^{-1}``.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    pcfg = projection or ProjectionConfig(tolerance=tol)
    if pcfg.tolerance != tol:
        pcfg = ProjectionConfig(pcfg.step_size, pcfg.max_steps, tol)
    x0, _ = project_to_levelset(m, z, np.array(cfg.initial_point), pcfg)
    xs = np.tile(x0, (n_chains, 1))
    rng = np.random.default_rng(cfg.seed)
    s = 0.0 if math.isinf(cfg.beta) else math.sqrt(2.0 / cfg.beta)
    out = []
    for step in range(1, cfg.n_steps + burn_in + 1):
        noise = rng.standard_normal(xs.shape)
        h = np.full(n_chains, cfg.step_size)
        pending = np.arange(n_chains)
        for _ in range(MAX_STEP_HALVINGS + 1):
            xp = xs[pending]
            hp = h[pending, None]
            cand = xp - hp * p.gradient(xp) + np.sqrt(hp) * s * noise[pending]
            res = project_batch(m, z, cand, pcfg)
            xs[pending[res.converged]] = res.points[res.converged]
            pending = pending[~res.converged]
            if pending.size == 0:
                break
            h[pending] *= 0.5
            log.debug("constrained sampler: projection failed, halving step for %d chain(s)", pending.size)
        else:
            raise ProjectionError(
                f"constrained step {step}: projection failed after {MAX_STEP_HALVINGS} halvings",
                float(np.max(res.residual)),
            )
        if not np.all(np.isfinite(xs)):
            raise TrajectoryDivergenceError(step)
        if step > burn_in and (step - burn_in) % cfg.record_every == 0:
            out.append(xs.copy())
    pts = np.concatenate(out) if out else np.empty((0, p.dim))
    meta = _meta(p, m, cfg, sampler="constrained", z=z.tolist(), tol=tol,
                 n_chains=int(n_chains), burn_in=int(burn_in))
    return Dataset(pts, levelset_weights(m, pts), meta)
