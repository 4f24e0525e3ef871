"""Experiment steps behind the CLI: datasets, training, generation, projection, evaluation.

Each step reads and writes files inside one run directory::

    run/
      config.json            snapshot of the parsed configuration
      manifest.json          sha256 of every artifact, refreshed after each step
      data/                  datasets (CSV + .meta sidecars), ABF mean-force grid
      models/                CV and flow checkpoints, loss histories
      samples/               generated / projected samples and projection reports
      metrics/               deviation curves, densities, comparison reports
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ExperimentConfig
from .data import Dataset, make_circles, read_csv, write_csv
from .flow import FlowModel, TrainConfig, generate, train_flow
from .potentials import (
    RadialCV,
    calibrate_encoder,
    load_cv,
    make_potential,
    save_cv,
    train_autoencoder,
)
from .projection import ProjectionConfig, project_batch
from .samplers import LangevinConfig, MeanForceGrid, sample_abf, sample_constrained, sample_langevin

log = logging.getLogger(__name__)

FLOW_NAMES = {"circles2d": ("flow",), "mueller_brown": ("unbiased", "abf")}


class Run:
    """Paths of one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def out(self, *parts) -> Path:
        p = self.path(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.is_file():
            raise FileNotFoundError(f"missing input {p}")
        return p

    def start(self, cfg: ExperimentConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(cfg.dumps())

    def write_manifest(self, cfg: ExperimentConfig) -> None:
        files = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                files[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {"experiment": cfg.experiment, "seed": cfg.seed, "files": files}
        self.path("manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def z_tag(z) -> str:
    return "_".join(f"{v:+.3f}" for v in np.atleast_1d(z))


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, f"{v:.17g}"])


def get_cv(cfg: ExperimentConfig, run: Run):
    if cfg.cv.kind == "radial":
        return RadialCV(2)
    path = Path(cfg.cv.checkpoint) if cfg.cv.checkpoint else run.require("models", "cv.json")
    return load_cv(path)


# -- steps ----------------------------------------------------------------------


def make_dataset(cfg: ExperimentConfig, run: Run, kind="unbiased") -> Path:
    """circles2d: the two-ring dataset. mueller_brown: unbiased Langevin or ABF trajectory."""
    if cfg.experiment == "circles2d":
        c = cfg.circles
        ds = make_circles(c.n_samples, c.r_inner, c.r_outer, c.noise, cfg.seed)
        path = run.out("data", "circles.csv")
        write_csv(path, ds)
        return path
    pot = make_potential({"kind": cfg.potential.kind, "stiffness": cfg.potential.stiffness})
    lg = cfg.langevin
    if kind == "unbiased":
        lcfg = LangevinConfig(lg.step_size, lg.beta, lg.n_steps, lg.record_every, cfg.seed, lg.initial_point)
        ds = sample_langevin(pot, lcfg)
        path = run.out("data", "unbiased.csv")
        write_csv(path, ds)
        return path
    if kind != "abf":
        raise ValueError(f"unknown dataset kind {kind!r}")
    cv = get_cv(cfg, run)
    a = cfg.abf
    lcfg = LangevinConfig(lg.step_size, lg.beta, a.n_steps, a.record_every, cfg.seed + 1, lg.initial_point)
    grid = MeanForceGrid.from_spacing(a.grid_lo, a.grid_hi, a.grid_spacing, a.activation_threshold)
    ds, grid = sample_abf(pot, cv, lcfg, grid, a.equilibration_steps)
    path = run.out("data", "abf.csv")
    write_csv(path, ds)
    grid.write_csv(run.out("data", "abf_mean_force.csv"))
    return path


def train_cv(cfg: ExperimentConfig, run: Run, data_path=None) -> Path:
    if cfg.cv.kind != "encoder":
        raise ValueError("train-cv applies to encoder CVs only")
    ds = read_csv(data_path or run.require("data", "unbiased.csv"))
    c = cfg.cv
    d = ds.dim
    enc, dec, history = train_autoencoder(
        ds, [d, *c.encoder_hidden, 1], [1, *c.decoder_hidden, d], c.epochs, c.lr, c.batch_size, cfg.seed
    )
    if c.calibrate_range is not None:
        enc = calibrate_encoder(enc, ds.points, *c.calibrate_range)
    path = run.out("models", "cv.json")
    save_cv(path, enc, dec, {"calibrate_range": c.calibrate_range, "final_loss": history[-1] if history else None})
    write_history(run.out("models", "cv_loss.csv"), history)
    return path


def train_flow_model(cfg: ExperimentConfig, run: Run, name=None, data_path=None) -> Path:
    name = name or FLOW_NAMES[cfg.experiment][0]
    if data_path is None:
        data_path = run.require("data", "circles.csv" if cfg.experiment == "circles2d" else f"{name}.csv")
    ds = read_csv(data_path)
    cv = get_cv(cfg, run)
    f = cfg.flow
    tcfg = TrainConfig(f.epochs, min(f.batch_size, len(ds)), f.lr, f.weight_decay, f.patience,
                       cfg.seed + 7, f.standardize)
    model, history = train_flow(ds, cv, tcfg, tuple(f.hidden))
    path = run.out("models", f"flow_{name}.json")
    model.save(path, {"dataset": Path(data_path).name, "epochs_run": len(history)})
    write_history(run.out("models", f"flow_{name}_loss.csv"), history)
    return path


def project_samples(cfg: ExperimentConfig, run: Run, cv, ds: Dataset, z, stem: str) -> Dataset:
    pc = cfg.projection
    res = project_batch(cv, z, ds.points, ProjectionConfig(pc.step_size, pc.max_steps, pc.tolerance))
    projected = Dataset(res.points, None, {**ds.meta, "projected": True})
    write_csv(run.out("samples", f"{stem}_projected.csv"), projected)
    with open(run.out("samples", f"{stem}_projection_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "residual", "steps", "converged"])
        for i, (r, s, c) in enumerate(zip(res.residual, res.steps, res.converged)):
            w.writerow([i, f"{r:.17g}", int(s), int(c)])
    return projected


def generate_samples(cfg: ExperimentConfig, run: Run, z_values=None, project=False, names=None) -> list[Path]:
    g = cfg.generation
    z_values = g.z_values if z_values is None else z_values
    names = names or FLOW_NAMES[cfg.experiment]
    cv = get_cv(cfg, run) if project else None
    models = {name: FlowModel.load(run.require("models", f"flow_{name}.json")) for name in names}
    written = []
    for name, model in models.items():
        for i, z in enumerate(z_values):
            stem = f"{name}_z{z_tag(z)}"
            ds = generate(model, z, g.n_samples, g.n_time_steps, ev.derive_seed(cfg.seed + 11, i))
            path = run.out("samples", f"{stem}.csv")
            write_csv(path, ds)
            written.append(path)
            if project:
                project_samples(cfg, run, cv, ds, z, stem)
        if g.snapshot_times and len(z_values):
            z0 = z_values[0]
            _, snaps = generate(model, z0, g.snapshot_samples, g.n_time_steps, cfg.seed + 13, g.snapshot_times)
            for t, pts in snaps.items():
                write_csv(run.out("samples", f"{name}_evolution_z{z_tag(z0)}_t{t:.2f}.csv"), Dataset(pts))
    return written


def project_file(cfg: ExperimentConfig, run: Run, input_path, z) -> Path:
    ds = read_csv(input_path)
    cv = get_cv(cfg, run)
    stem = Path(input_path).stem
    project_samples(cfg, run, cv, ds, z, stem)
    return run.path("samples", f"{stem}_projected.csv")


def _z_grid(cfg: ExperimentConfig, cv, data: Dataset) -> np.ndarray:
    e = cfg.evaluation
    if e.z_range is not None:
        lo, hi = e.z_range
    else:
        lo, hi = ev.extended_range(cv.value(data.points)[:, 0], e.margin)
    return np.linspace(lo, hi, e.n_z)


def _data_proportions(cv, data: Dataset, z_grid) -> np.ndarray:
    """Fraction of data with x_0 >= 0 among points whose CV is within half a grid spacing of z."""
    vals = cv.value(data.points)[:, 0]
    half = 0.5 * (z_grid[1] - z_grid[0]) if len(z_grid) > 1 else np.inf
    out = []
    for z in z_grid:
        sel = np.abs(vals - z) <= half
        out.append(float(np.mean(data.points[sel, 0] >= 0)) if sel.any() else float("nan"))
    return np.array(out)


def write_conditional_metrics(path, curve: ev.DeviationCurve, data_prop) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z", "mean_cv", "deviation", "proportion", "data_proportion", "n"])
        for z, m, d, p, dp, n in zip(curve.z_values, curve.mean_cv[:, 0], curve.deviation,
                                      curve.proportion, data_prop, curve.n_samples):
            w.writerow([f"{z:.17g}", f"{m:.17g}", f"{d:.17g}", f"{p:.17g}", f"{dp:.17g}", int(n)])


def low_density_mask(cv, data: Dataset, z_grid, n_bins=30) -> np.ndarray:
    """Grid points strictly between the two highest CV-histogram modes of ``data``."""
    vals = cv.value(data.points)[:, 0]
    counts, edges = np.histogram(vals, bins=np.linspace(z_grid[0], z_grid[-1], n_bins + 1))
    padded = np.concatenate([[-1], counts, [-1]])
    peaks = [i for i in range(n_bins) if padded[i + 1] > padded[i] and padded[i + 1] >= padded[i + 2]]
    if len(peaks) < 2:
        return np.zeros(len(z_grid), dtype=bool)
    top = sorted(sorted(peaks, key=lambda i: counts[i])[-2:])
    centers = 0.5 * (edges[1:] + edges[:-1])
    lo, hi = centers[top[0]], centers[top[1]]
    return (z_grid > lo) & (z_grid < hi)


def evaluate(cfg: ExperimentConfig, run: Run) -> dict:
    """Write metric CSVs; returns the numbers they contain for programmatic use."""
    if cfg.experiment == "circles2d":
        return _evaluate_circles(cfg, run)
    return _evaluate_mueller_brown(cfg, run)


def _evaluate_circles(cfg, run):
    e = cfg.evaluation
    data = read_csv(run.require("data", "circles.csv"))
    model = FlowModel.load(run.require("models", "flow_flow.json"))
    cv = get_cv(cfg, run)
    z_grid = _z_grid(cfg, cv, data)
    pc = cfg.projection
    curve = ev.deviation_curve(model, cv, z_grid, e.n_samples, cfg.seed + 17, e.with_projection,
                               e.n_time_steps, ProjectionConfig(pc.step_size, pc.max_steps, pc.tolerance))
    curve.write_csv(run.out("metrics", "deviation.csv"))
    data_prop = _data_proportions(cv, data, z_grid)
    write_conditional_metrics(run.out("metrics", "conditional_metrics.csv"), curve, data_prop)
    cv_vals = cv.value(data.points)[:, 0]
    ev.cv_density(data, cv, ev.default_bins(cv_vals, e.n_bins, e.margin)).write_csv(run.out("metrics", "cv_density.csv"))
    return {"curve": curve, "data_proportion": data_prop}


def _shared_bins(arrays, n_bins, margin):
    return ev.default_bins(np.concatenate([np.ravel(a) for a in arrays]), n_bins, margin)


def _evaluate_mueller_brown(cfg, run):
    e = cfg.evaluation
    cv = get_cv(cfg, run)
    unbiased = read_csv(run.require("data", "unbiased.csv"))
    abf = read_csv(run.require("data", "abf.csv"))
    models = {name: FlowModel.load(run.require("models", f"flow_{name}.json")) for name in ("unbiased", "abf")}
    pc = cfg.projection
    pcfg = ProjectionConfig(pc.step_size, pc.max_steps, pc.tolerance)
    z_grid = _z_grid(cfg, cv, unbiased)
    rows = []
    curves = {}
    for name, model in models.items():
        curves[name] = ev.deviation_curve(model, cv, z_grid, e.n_samples, cfg.seed + 17, e.with_projection,
                                          e.n_time_steps, pcfg)
        curves[name].write_csv(run.out("metrics", f"deviation_{name}.csv"))
    low = low_density_mask(cv, unbiased, z_grid)
    dev_u, dev_a = curves["unbiased"].deviation, curves["abf"].deviation
    rows.append(("mean_deviation", "unbiased", "abf", float(dev_u.mean())))
    rows.append(("mean_deviation", "abf", "unbiased", float(dev_a.mean())))
    rows.append(("low_density_points", "unbiased", "abf", float(low.sum())))
    frac = float(np.mean(dev_a[low] < dev_u[low])) if low.any() else float("nan")
    rows.append(("low_density_fraction_abf_lower", "abf", "unbiased", frac))

    cv_bins = ev.default_bins(cv.value(np.concatenate([unbiased.points, abf.points]))[:, 0], e.n_bins, e.margin)
    for name, ds in (("unbiased", unbiased), ("abf", abf)):
        ev.cv_density(ds, cv, cv_bins).write_csv(run.out("metrics", f"cv_density_{name}_data.csv"))

    result = {"curves": curves, "low_density": low, "z_grid": z_grid, "densities": {}, "projection": {}}
    reference = None
    ref_cfg = e.reference
    if ref_cfg is not None:
        reference = _reference(cfg, run, cv)
    g = cfg.generation
    for i, z in enumerate(e.density_z_values):
        sets = {}
        for name, model in models.items():
            stem = f"{name}_z{z_tag(z)}"
            ds = generate(model, z, e.n_samples, e.n_time_steps, ev.derive_seed(cfg.seed + 19, i))
            write_csv(run.out("samples", f"{stem}.csv"), ds)
            res = project_batch(cv, z, ds.points, pcfg)
            proj = Dataset(res.points, None, {**ds.meta, "projected": True})
            write_csv(run.out("samples", f"{stem}_projected.csv"), proj)
            sets[name] = ds
            sets[f"{name}_projected"] = proj
            conv = float(res.converged.mean())
            result["projection"][(name, z)] = res
            rows.append((f"projection_converged_fraction_z{z_tag(z)}", name, name, conv))
        use_ref = reference is not None and np.isclose(z, ref_cfg.z)
        arrays = [s.points[:, 0] for s in sets.values()]
        if use_ref:
            arrays.append(reference.points[:, 0])
        bins = _shared_bins(arrays, e.n_bins, e.margin)
        dens = {key: ev.density_1d(s.points[:, 0], None, bins) for key, s in sets.items()}
        if use_ref:
            dens["reference"] = ev.density_1d(reference.points[:, 0], reference.weights, bins)
        for key, d in dens.items():
            d.write_csv(run.out("metrics", f"density_x0_{key}_z{z_tag(z)}.csv"))
        for name in models:
            dist = ev.density_distance(dens[name], dens[f"{name}_projected"])
            rows.append((f"tv_before_after_projection_z{z_tag(z)}", name, f"{name}_projected", dist["tv"]))
            rows.append((f"w1_before_after_projection_z{z_tag(z)}", name, f"{name}_projected", dist["w1"]))
            if use_ref:
                for key in (name, f"{name}_projected"):
                    dist = ev.density_distance(dens[key], dens["reference"])
                    rows.append((f"tv_vs_reference_z{z_tag(z)}", key, "reference", dist["tv"]))
                    rows.append((f"w1_vs_reference_z{z_tag(z)}", key, "reference", dist["w1"]))
        result["densities"][z] = dens
    ev.write_comparison(run.out("metrics", "comparison.csv"), rows)
    result["rows"] = rows
    return result


def _reference(cfg, run, cv) -> Dataset:
    """Constrained-sampler ensemble on ``{xi = reference.z}``; cached in ``data/``."""
    r = cfg.evaluation.reference
    path = run.path("data", f"reference_z{z_tag(r.z)}.csv")
    if path.is_file():
        return read_csv(path)
    pot = make_potential({"kind": cfg.potential.kind, "stiffness": cfg.potential.stiffness})
    lcfg = LangevinConfig(r.step_size, cfg.langevin.beta, r.n_steps, r.record_every, cfg.seed + 23,
                          cfg.langevin.initial_point)
    ds = sample_constrained(pot, cv, r.z, lcfg, r.tolerance, r.n_chains, r.burn_in,
                            ProjectionConfig(r.projection_step, cfg.projection.max_steps, r.tolerance,
                                             r.projection_max_displacement))
    write_csv(run.out("data", path.name), ds)
    return ds


def reproduce(cfg: ExperimentConfig, run: Run) -> dict:
    """Every step of an experiment, in order."""
    run.start(cfg)
    make_dataset(cfg, run)
    if cfg.experiment == "mueller_brown":
        train_cv(cfg, run)
        make_dataset(cfg, run, "abf")
    for name in FLOW_NAMES[cfg.experiment]:
        train_flow_model(cfg, run, name)
    generate_samples(cfg, run, project=cfg.experiment == "mueller_brown")
    result = evaluate(cfg, run)
    run.write_manifest(cfg)
    return result
