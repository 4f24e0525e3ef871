"""Point datasets, their CSV/sidecar serialization, and the two-rings generator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Ordered states in R^d with optional positive weights and provenance metadata."""

    points: np.ndarray
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {self.points.shape}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (len(self.points),):
                raise ValueError("need exactly one weight per point")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
                raise ValueError("weights must be finite and strictly positive")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def normalized_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        return self.weights / self.weights.sum()


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_csv(path, dataset: Dataset) -> None:
    """Header ``x0,...,x{d-1}[,weight]``; values printed with 17 significant digits.

    Metadata, when present, goes to a ``.meta`` JSON sidecar with the same basename.
    """
    path = Path(path)
    header = [f"x{i}" for i in range(dataset.dim)]
    if dataset.weights is not None:
        header.append("weight")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(dataset.points):
            vals = [_fmt(v) for v in row]
            if dataset.weights is not None:
                vals.append(_fmt(dataset.weights[i]))
            w.writerow(vals)
    if dataset.meta:
        path.with_suffix(".meta").write_text(json.dumps(dataset.meta, indent=1, sort_keys=True) + "\n")


def read_csv(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    has_w = bool(header) and header[-1] == "weight"
    n_x = len(header) - int(has_w)
    if n_x < 1 or header[:n_x] != [f"x{i}" for i in range(n_x)]:
        raise ValueError(f"{path}: unexpected header {header}")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no data rows")
    try:
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if arr.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    meta_path = path.with_suffix(".meta")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if has_w:
        return Dataset(arr[:, :-1], arr[:, -1], meta)
    return Dataset(arr, None, meta)


def make_circles(n_samples=10_000, r_inner=0.5, r_outer=1.0, noise=0.05, seed=0) -> Dataset:
    """Two concentric noisy rings with equal class sizes.

    Angles are uniform on [0, 2pi); each point gets isotropic Gaussian noise.
    Row order alternates outer/inner so any prefix stays balanced.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_samples)
    radius = np.where(np.arange(n_samples) % 2 == 0, r_outer, r_inner)
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    meta = {
        "source": "circles2d",
        "n_samples": n_samples,
        "r_inner": r_inner,
        "r_outer": r_outer,
        "noise": noise,
        "seed": seed,
    }
    return Dataset(pts, None, meta)
