import csv

import numpy as np
import pytest

from cvflow import nn
from cvflow.data import Dataset
from cvflow.evaluation import (
    DegenerateDensityError,
    Density1D,
    default_bins,
    density_1d,
    density_distance,
    derive_seed,
    deviation,
    deviation_curve,
    extended_range,
    proportion,
    write_comparison,
    cv_density,
)
from cvflow.flow import FlowModel
from cvflow.potentials import RadialCV


def test_deviation_on_and_off_levelset():
    m = RadialCV()
    assert deviation(m, np.array([[1.0, 0.0], [0.0, -1.0]]), 1.0) == 0.0
    assert deviation(m, np.array([[2.0, 0.0], [0.0, 0.0]]), 1.0) == pytest.approx(np.sqrt((9 + 1) / 2))


def test_proportion():
    pts = np.array([[0.0, 1.0], [-1.0, 0.0], [2.0, 0.0], [-0.1, 3.0]])
    assert proportion(pts) == 0.5
    assert proportion(Dataset(pts), coord=1, threshold=1.0) == 0.5
    with pytest.raises(ValueError):
        proportion(np.empty((0, 2)))


def test_extended_range_and_bins():
    assert extended_range([0.0, 10.0], 0.1) == (-1.0, 11.0)
    edges = default_bins([1.0, 1.0], n_bins=4)
    assert len(edges) == 5 and edges[0] < 1.0 < edges[-1]


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert len({derive_seed(0, i) for i in range(50)}) == 50


def test_density_normalized_and_weighted():
    d = density_1d([0.1, 0.2, 0.7], bin_edges=[0.0, 0.5, 1.0])
    assert d.mass.tolist() == pytest.approx([2 / 3, 1 / 3])
    w = density_1d([0.1, 0.7], weights=[1.0, 3.0], bin_edges=[0.0, 0.5, 1.0])
    assert w.mass.tolist() == pytest.approx([0.25, 0.75])
    assert d.centers.tolist() == [0.25, 0.75]


def test_density_errors():
    with pytest.raises(DegenerateDensityError):
        density_1d([5.0], bin_edges=[0.0, 1.0])
    with pytest.raises(ValueError):
        density_1d([0.5], weights=[0.0], bin_edges=[0.0, 1.0])
    with pytest.raises(ValueError):
        Density1D([0.0, 0.0, 1.0], [0.5, 0.5])


def test_distance_identities():
    edges = np.linspace(0, 4, 5)
    a = Density1D(edges, [1.0, 0, 0, 0])
    b = Density1D(edges, [0, 0, 0, 1.0])
    assert density_distance(a, a) == {"tv": 0.0, "w1": 0.0}
    dist = density_distance(a, b)
    assert dist["tv"] == 1.0 and dist["w1"] == pytest.approx(3.0)
    assert density_distance(b, a) == dist
    with pytest.raises(ValueError):
        density_distance(a, Density1D(np.linspace(0, 1, 5), [0.25] * 4))


def test_distance_triangle_inequality():
    rng = np.random.default_rng(0)
    edges = np.linspace(-1, 1, 11)
    ds = [Density1D(edges, p / p.sum()) for p in rng.uniform(size=(3, 10))]
    for key in ("tv", "w1"):
        ab, bc, ac = (density_distance(x, y)[key] for x, y in [(ds[0], ds[1]), (ds[1], ds[2]), (ds[0], ds[2])])
        assert ac <= ab + bc + 1e-12


def test_cv_density_uses_weights():
    pts = np.array([[0.5, 0.0], [1.0, 0.0]])
    d = cv_density(Dataset(pts, np.array([3.0, 1.0])), RadialCV(), bin_edges=[0.0, 0.5, 1.5])
    assert d.mass.tolist() == pytest.approx([0.75, 0.25])


def test_deviation_curve_shapes_and_seeds():
    model = FlowModel.identity_stats(nn.init_mlp([4, 8, 2], seed=0), 1)
    m = RadialCV()
    curve = deviation_curve(model, m, [0.5, 1.0, 2.0], n_samples=50, seed=3, n_time_steps=5)
    again = deviation_curve(model, m, [0.5, 1.0, 2.0], n_samples=50, seed=3, n_time_steps=5)
    assert curve.deviation.shape == (3,) and curve.proportion.shape == (3,)
    assert curve.deviation.tobytes() == again.deviation.tobytes()
    proj = deviation_curve(model, m, [0.5, 1.0], n_samples=50, seed=3, n_time_steps=5, with_projection=True)
    assert np.all(proj.deviation < 1e-3)


def test_csv_writers(tmp_path):
    write_comparison(tmp_path / "c.csv", [("tv", "abf", "reference", 0.125)])
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows == [["metric", "model_a", "model_b", "value"], ["tv", "abf", "reference", "0.125"]]
    Density1D([0.0, 1.0], [1.0]).write_csv(tmp_path / "d.csv")
    assert open(tmp_path / "d.csv").read().splitlines() == ["bin_left,bin_right,mass", "0,1,1"]
    model = FlowModel.identity_stats(nn.zero_mlp([4, 2]), 1)
    deviation_curve(model, RadialCV(), [1.0], n_samples=5, n_time_steps=1).write_csv(tmp_path / "v.csv")
    head, row = open(tmp_path / "v.csv").read().splitlines()
    assert head == "z,deviation,n" and row.startswith("1,") and row.endswith(",5")
