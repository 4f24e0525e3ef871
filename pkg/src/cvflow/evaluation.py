"""Metrics for conditional generation: CV deviation, proportions, 1-D densities and distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .flow import FlowModel, generate
from .projection import ProjectionConfig, project_batch


class DegenerateDensityError(ValueError):
    """No sample fell inside the histogram bins."""


def _points(samples):
    pts = samples.points if isinstance(samples, Dataset) else np.atleast_2d(samples)
    if len(pts) == 0:
        raise ValueError("empty sample set")
    return pts


def deviation(m, samples, z) -> float:
    """Root-mean-square distance between ``xi(X)`` and the target ``z``."""
    vals = m.value(_points(samples))
    diff = vals - np.asarray(z, dtype=np.float64).reshape(1, -1)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def mean_cv(m, samples) -> np.ndarray:
    return m.value(_points(samples)).mean(axis=0)


def proportion(samples, coord=0, threshold=0.0) -> float:
    """Fraction of samples with ``x[coord] >= threshold``."""
    pts = _points(samples)
    return float(np.mean(pts[:, coord] >= threshold))


def extended_range(values, margin=0.05):
    lo, hi = float(np.min(values)), float(np.max(values))
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


def derive_seed(master, index) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


@dataclass
class DeviationCurve:
    z_values: np.ndarray
    deviation: np.ndarray
    n_samples: np.ndarray
    mean_cv: np.ndarray | None = None
    proportion: np.ndarray | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z", "deviation", "n"])
            for z, dev, n in zip(self.z_values, self.deviation, self.n_samples):
                w.writerow([";".join(f"{v:.17g}" for v in np.atleast_1d(z)), f"{dev:.17g}", int(n)])


def deviation_curve(
    model: FlowModel,
    m,
    z_grid,
    n_samples=1000,
    seed=0,
    with_projection=False,
    n_time_steps=100,
    projection: ProjectionConfig = ProjectionConfig(),
    keep_samples=False,
):
    """Deviation (plus mean CV and x_0 >= 0 proportion) for each target in ``z_grid``.

    ``z_grid`` may be 1-D (k = 1) or ``(n_targets, k)``; target ``i`` uses the
    seed ``derive_seed(seed, i)``. With ``keep_samples`` the generated sets are
    returned alongside the curve.
    """
    grid = np.asarray(z_grid, dtype=np.float64)
    grid2 = grid.reshape(len(grid), -1)
    if len(grid2) == 0:
        raise ValueError("empty z grid")
    devs, means, props, kept = [], [], [], []
    for i, z in enumerate(grid2):
        ds = generate(model, z, n_samples, n_time_steps, derive_seed(seed, i))
        if with_projection:
            ds = Dataset(project_batch(m, z, ds.points, projection).points, None, ds.meta)
        devs.append(deviation(m, ds, z))
        means.append(mean_cv(m, ds))
        props.append(proportion(ds))
        if keep_samples:
            kept.append(ds)
    curve = DeviationCurve(
        grid, np.array(devs), np.full(len(grid2), int(n_samples)), np.array(means), np.array(props)
    )
    return (curve, kept) if keep_samples else curve


@dataclass
class Density1D:
    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.bin_edges.ndim != 1 or len(self.mass) != len(self.bin_edges) - 1:
            raise ValueError("need len(mass) == len(bin_edges) - 1")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "mass"])
            for lo, hi, p in zip(self.bin_edges[:-1], self.bin_edges[1:], self.mass):
                w.writerow([f"{lo:.17g}", f"{hi:.17g}", f"{p:.17g}"])


def default_bins(values, n_bins=64, margin=0.05) -> np.ndarray:
    lo, hi = extended_range(values, margin)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n_bins + 1)


def density_1d(values, weights=None, bin_edges=None) -> Density1D:
    """Histogram with total mass one; samples outside the bins are dropped."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("no values to histogram")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if weights.shape != values.shape:
            raise ValueError("weights must match values")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and positive")
    if bin_edges is None:
        bin_edges = default_bins(values)
    counts, edges = np.histogram(values, bins=np.asarray(bin_edges, dtype=np.float64), weights=weights)
    total = counts.sum()
    if not total > 0:
        raise DegenerateDensityError("all values fall outside the histogram bins")
    return Density1D(edges, counts / total)


def density_distance(a: Density1D, b: Density1D) -> dict:
    """Total variation and first Wasserstein distance (masses at bin centers)."""
    if a.bin_edges.shape != b.bin_edges.shape or not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("densities must share identical bin edges")
    tv = 0.5 * float(np.sum(np.abs(a.mass - b.mass)))
    cdf_gap = np.abs(np.cumsum(a.mass - b.mass))[:-1]
    w1 = float(np.sum(cdf_gap * np.diff(a.centers)))
    return {"tv": tv, "w1": w1}


def cv_density(data, m, bin_edges=None) -> Density1D:
    """Histogram of the (one-dimensional) CV over a dataset, honoring its weights."""
    pts = _points(data)
    vals = m.value(pts)
    if vals.shape[1] != 1:
        raise ValueError("cv_density needs a one-dimensional CV")
    weights = data.weights if isinstance(data, Dataset) else None
    return density_1d(vals[:, 0], weights, bin_edges)


def write_comparison(path, rows) -> None:
    """Rows of ``(metric, model_a, model_b, value)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "model_a", "model_b", "value"])
        for metric, a, b, value in rows:
            w.writerow([metric, a, b, f"{value:.17g}"])
