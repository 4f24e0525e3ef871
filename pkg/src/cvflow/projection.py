"""Projection onto CV level-sets by explicit-Euler gradient flow of G(y) = |xi(y) - z|^2 / 2."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


class ProjectionError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class ProjectionConfig:
    step_size: float = 0.01
    max_steps: int = 7000
    tolerance: float = 1e-3
    # optional cap on how far a point may move in one Euler step; keeps large
    # steps on the continuous flow instead of jumping to another level-set branch
    max_displacement: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError("projection step_size must be positive and finite")
        if not (np.isfinite(self.tolerance) and self.tolerance > 0):
            raise ValueError("projection tolerance must be positive and finite")
        if int(self.max_steps) < 1:
            raise ValueError("projection max_steps must be a positive integer")
        if self.max_displacement is not None and not (self.max_displacement > 0):
            raise ValueError("projection max_displacement must be positive")


@dataclass
class ProjectionResult:
    points: np.ndarray
    steps: np.ndarray
    converged: np.ndarray
    residual: np.ndarray


def _residual(m, z, y):
    r = m.value(y) - z
    return r, np.linalg.norm(r, axis=-1)


def project_batch(m, z, x, cfg: ProjectionConfig = ProjectionConfig(), trace=None) -> ProjectionResult:
    """Project every row of ``x`` onto ``{xi = z}``.

    A step that would increase G is retried with half the step size (kept
    for the rest of that point's trajectory), at most ``MAX_HALVINGS`` times.
    Points whose flow stalls (zero gradient of G) or runs out of steps are
    reported with ``converged = False``; nothing is raised here.

    If ``trace`` is a list, G of the first row is appended after each
    accepted step (including the starting value).
    """
    y = np.array(x, dtype=np.float64, ndmin=2, copy=True)
    n = len(y)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    steps = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    step = np.full(n, float(cfg.step_size))

    r, res = _residual(m, z, y)
    g_val = 0.5 * res**2
    if trace is not None:
        trace.append(float(g_val[0]))
    for _ in range(int(cfg.max_steps) + 1):
        converged |= res < cfg.tolerance
        active = np.flatnonzero(~converged & ~failed & (steps < cfg.max_steps))
        if active.size == 0:
            break
        ya = y[active]
        grad = np.einsum("ndk,nk->nd", m.jacobian(ya), r[active])
        stalled = ~np.any(grad != 0.0, axis=1)
        if np.any(stalled):
            failed[active[stalled]] = True
            active, ya, grad = active[~stalled], ya[~stalled], grad[~stalled]
            if active.size == 0:
                continue
        eff = step[active]
        if cfg.max_displacement is not None:
            eff = np.minimum(eff, cfg.max_displacement / np.linalg.norm(grad, axis=1))
        pending = np.ones(active.size, dtype=bool)
        new_y = ya.copy()
        new_r = r[active].copy()
        new_res = res[active].copy()
        for _halving in range(MAX_HALVINGS + 1):
            idx = np.flatnonzero(pending)
            cand = ya[idx] - eff[idx, None] * grad[idx]
            cr, cres = _residual(m, z, cand)
            ok = cres <= res[active[idx]]
            good = idx[ok]
            new_y[good], new_r[good], new_res[good] = cand[ok], cr[ok], cres[ok]
            pending[good] = False
            bad = idx[~ok]
            if bad.size == 0:
                break
            step[active[bad]] *= 0.5
            eff[bad] *= 0.5
            log.debug("projection: G increased, halving step for %d point(s)", bad.size)
        if np.any(pending):
            failed[active[pending]] = True
        acc = active[~pending]
        y[acc], r[acc], res[acc] = new_y[~pending], new_r[~pending], new_res[~pending]
        steps[acc] += 1
        if trace is not None and acc.size and acc[0] == 0:
            trace.append(float(0.5 * res[0] ** 2))
    converged |= res < cfg.tolerance
    return ProjectionResult(y, steps, converged, res)


def project_to_levelset(m, z, x, cfg: ProjectionConfig = ProjectionConfig()):
    """Project one point; returns ``(point, steps_used)`` or raises ProjectionError."""
    result = project_batch(m, z, np.asarray(x, dtype=np.float64)[None, :], cfg)
    if not result.converged[0]:
        raise ProjectionError(
            f"projection did not reach tolerance {cfg.tolerance} "
            f"(residual {result.residual[0]:.3g} after {result.steps[0]} steps)",
            float(result.residual[0]),
        )
    return result.points[0], int(result.steps[0])
