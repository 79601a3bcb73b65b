import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from eggfm.data import Dataset, sample_sphere
from eggfm.eval import (
    EnergyGrid, EvalReport, PlaneSpec, average_geodesic_error, chord_path, combine_reports, export_energy_grid,
    leave_one_out_eval, sphere_geodesic, wasserstein1,
)
from eggfm.geometry import constant_metric
from eggfm.nn import DTYPE
from eggfm.score import NoiseSchedule, energy_at, make_energy_model
from eggfm.transport import multi_timepoint_schedule

from oracles import CHORD_AVE, chord_ave_mc, chord_ave_quad, hungarian


# --------------------------------------------------------------------------- sphere geodesics

def test_slerp_endpoints_and_midpoint():
    x0, x1 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    np.testing.assert_allclose(sphere_geodesic(x0, x1, 0.0), x0, atol=1e-15)
    np.testing.assert_allclose(sphere_geodesic(x0, x1, 1.0), x1, atol=1e-15)
    np.testing.assert_allclose(sphere_geodesic(x0, x1, 0.5), [[np.sqrt(2) / 2] * 2], rtol=1e-14)


@given(st.integers(2, 12), st.integers(0, 10 ** 6), st.floats(0, 1))
def test_slerp_unit_norm(dim, seed, t):
    pts = sample_sphere(dim, 2, seed).points
    out = sphere_geodesic(pts[:1], pts[1:], t)
    assert abs(np.linalg.norm(out) - 1) < 1e-12


def test_antipodal_rejected():
    with pytest.raises(ValueError, match="antipodal"):
        sphere_geodesic([[1.0, 0.0]], [[-1.0, 0.0]], 0.5)


def test_ave_zero_for_identical_paths_and_symmetric():
    pts = sample_sphere(5, 200, 0).points
    assert average_geodesic_error(sphere_geodesic, sphere_geodesic, pts).value == 0.0
    swapped = lambda a, b, t: chord_path(b, a, 1 - np.asarray(t))
    a = average_geodesic_error(chord_path, sphere_geodesic, pts, seed=3).value
    b = average_geodesic_error(swapped, lambda x, y, t: sphere_geodesic(y, x, 1 - np.asarray(t)), pts, seed=3).value
    assert a == pytest.approx(b, rel=1e-10)


def test_chord_oracles_agree():
    # Monte Carlo oracle against quadrature, and the frozen constants against quadrature
    assert chord_ave_quad(3) == pytest.approx(CHORD_AVE[3], rel=1e-9)
    for dim in (3, 10):
        assert chord_ave_mc(dim, 100_000, seed=1) == pytest.approx(CHORD_AVE[dim], rel=0.02)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_chord_ave_10d_reproducible(seed):
    sampler = lambda rng, n: (sample_sphere(10, n, int(rng.integers(1 << 30))).points,
                              sample_sphere(10, n, int(rng.integers(1 << 30))).points)
    rep = average_geodesic_error(chord_path, sphere_geodesic, sampler=sampler, n_pairs=100_000, n_t=4, seed=seed)
    assert rep.value == pytest.approx(CHORD_AVE[10], rel=0.02)


# --------------------------------------------------------------------------- W1

def test_w1_examples():
    x = np.random.default_rng(0).standard_normal((30, 3))
    assert wasserstein1(x, x) == 0.0
    assert wasserstein1([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0


@pytest.mark.parametrize("seed", range(3))
def test_w1_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((64, 4)), rng.standard_normal((64, 4)) + 0.5
    c = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
    assert abs(wasserstein1(a, b) - hungarian(c)[0] / 64) < 1e-12


def test_w1_metric_properties():
    rng = np.random.default_rng(4)
    a, b, c = rng.standard_normal((3, 32, 2))
    ab, ba = wasserstein1(a, b), wasserstein1(b, a)
    assert ab == pytest.approx(ba, abs=1e-12) and ab >= 0
    assert wasserstein1(a, c) <= ab + wasserstein1(b, c) + 1e-12


def test_w1_subsampling_stability():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2)) + [1.0, 0]
    full, half = wasserstein1(a, b, 1024), wasserstein1(a, b, 512)
    assert abs(full - half) / full < 0.1


def test_w1_unequal_sizes_and_empty():
    rng = np.random.default_rng(6)
    assert wasserstein1(rng.standard_normal((50, 2)), rng.standard_normal((80, 2))) > 0
    with pytest.raises(ValueError):
        wasserstein1(np.zeros((0, 2)), np.zeros((3, 2)))


# --------------------------------------------------------------------------- leave-one-out

def test_leave_one_out_with_exact_flow():
    # three clouds on a line, drifting by +1 per timepoint; the exact field is constant
    rng = np.random.default_rng(0)
    base = rng.normal(0, 0.1, (300, 2))
    pts = np.vstack([base + [k, 0.0] for k in range(3)])
    ds = Dataset(pts, timepoint=np.repeat([0, 1, 2], 300))
    sched = multi_timepoint_schedule([0, 1, 2], holdout=1)
    field = lambda t, y: torch.tensor([2.0, 0.0], dtype=DTYPE).expand_as(y)
    rep = leave_one_out_eval(field, ds, sched, n_steps=10)
    assert rep.metric == "w1" and rep.value < 1e-9
    noisy = leave_one_out_eval(field, Dataset(np.vstack([base, rng.normal(0, 0.1, (300, 2)) + [1, 0], base + [2, 0]]),
                                              timepoint=ds.timepoint), sched, n_steps=10)
    assert noisy.value < 0.1


# --------------------------------------------------------------------------- reports

def test_report_validation_and_combination(tmp_path):
    with pytest.raises(FloatingPointError):
        EvalReport("w1", float("nan"))
    with pytest.raises(ValueError):
        EvalReport("w1", 1.0, std=-1)
    rep = combine_reports([EvalReport("ave", 1.0, 0.1, 10, [0]), EvalReport("ave", 3.0, 0.2, 10, [1])])
    assert (rep.value, rep.std, rep.n, rep.seeds) == (2.0, 1.0, 20, [0, 1])
    assert json.loads(rep.to_json())["extra"]["per_seed"] == [1.0, 3.0]
    path = tmp_path / "r.csv"
    rep.append_csv(path)
    rep.append_csv(path)
    assert len(path.read_text().splitlines()) == 3


# --------------------------------------------------------------------------- grids

def test_constant_grid_and_round_trip(tmp_path):
    grid = export_energy_grid(constant_metric(2.0), PlaneSpec.coordinates(3, 0, 2, fixed=[0, 0.5, 0]), 8)
    assert grid.energy.shape == (8, 8) and np.all(grid.energy == 0) and np.all(grid.metric == 2.0)
    p = tmp_path / "g.csv"
    grid.write_csv(p)
    back = EnergyGrid.read_csv(p)
    assert back.plane == grid.plane
    np.testing.assert_array_equal(back.energy, grid.energy)
    np.testing.assert_array_equal(back.u, grid.u)
    assert back.plane.origin == (0.0, 0.5, 0.0)
    svg = tmp_path / "g.svg"
    grid.write_svg(svg, "metric")
    assert svg.read_text().count("<rect") == 64


def test_grid_axes_orientation():
    e = make_energy_model(2, NoiseSchedule(0.01, 0.2, 2), hidden_dim=8, n_layers=2, n_freq=4)
    grid = export_energy_grid(e, PlaneSpec.coordinates(2), 5)
    # row indexes v (second axis), column indexes u (first axis)
    assert grid.energy[1, 3] == pytest.approx(energy_at(e, [[grid.u[3], grid.v[1]]])[0], rel=1e-12)


def test_grid_resolution_error():
    with pytest.raises(ValueError):
        export_energy_grid(constant_metric(), PlaneSpec.coordinates(2), 1)
