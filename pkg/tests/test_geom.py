import functools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import RegularGridInterpolator

from cfmplan import geom
from cfmplan.errors import ConfigError, DegenerateInputError
from oracles import brute_force_esdf, ray_cast_inside


def dense_projection(line, p, step=1e-3):
    pts = geom.resample_polyline(line, step)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return s[np.argmin(np.linalg.norm(pts - p, axis=1))]


# ---------------------------------------------------------------------------
# scenarios


def test_straight_region_is_the_rectangle(straight):
    sc, _ = straight
    poly = sc.drivable_region[0]
    assert poly.min(axis=0).tolist() == [0.0, -3.0]
    assert poly.max(axis=0).tolist() == [60.0, 3.0]
    assert sc.command == "straight"


@pytest.mark.parametrize("gen", ["straight", "curve-left", "curve-right", "intersection", "fork"])
def test_generators_deterministic(gen):
    r = geom.ScenarioRecipe(gen, width=6.0, radius=20.0, seed=1, n_obstacles=2)
    a, b = geom.build_scenario(r), geom.build_scenario(r)
    assert a.id == b.id
    assert all(np.array_equal(p, q) for p, q in zip(a.drivable_region, b.drivable_region))
    assert np.array_equal(a.centerline, b.centerline)
    assert a.obstacles == b.obstacles


def test_curve_commands():
    assert geom.build_scenario(geom.ScenarioRecipe("curve-left", radius=20)).command == "left"
    assert geom.build_scenario(geom.ScenarioRecipe("curve-right", radius=20)).command == "right"


def test_recipe_errors():
    with pytest.raises(ConfigError):
        geom.build_scenario(geom.ScenarioRecipe("straight", width=0.0))
    with pytest.raises(ConfigError):
        geom.build_scenario(geom.ScenarioRecipe("roundabout"))
    with pytest.raises(ConfigError):
        geom.build_scenario({"generator": "straight", "length": -1.0})


def test_scenario_invariants():
    box = [[0, -1], [10, -1], [10, 1], [0, 1]]
    with pytest.raises(ConfigError):
        geom.Scenario((box,), [[0, 0], [20, 0]])  # centreline leaves the road
    with pytest.raises(ConfigError):
        geom.Scenario(([[0, 0], [1, 1], [1, 0], [0, 1]],), [[0.2, 0.5], [0.3, 0.5]])  # bow tie
    with pytest.raises(ConfigError):
        geom.Scenario((box,), [[0, 0], [5, 0]], obstacles=(((3, 3), 0.0),))
    with pytest.raises(ConfigError):
        geom.Scenario((box,), [[0, 0]])


def test_obstacles_stay_off_the_route():
    for seed in range(10):
        sc = geom.build_scenario(geom.ScenarioRecipe("curve-right", radius=40, seed=seed, n_obstacles=2))
        assert len(sc.obstacles) == 2
        assert geom.obstacle_clearance(geom.resample_polyline(sc.centerline, 0.5), sc) > 3.0


# ---------------------------------------------------------------------------
# rasterisation


def test_rectangle_cell_count(straight):
    sc, _ = straight
    mask = geom.rasterize_road(sc, 0.5)
    xx, yy = geom.cell_centers(mask.origin, mask.grid.shape, 0.5)
    oracle = ray_cast_inside(sc.drivable_region[0], xx, yy)
    assert oracle.sum() == 12 * 120
    assert mask.grid.sum() == 12 * 120
    assert np.array_equal(mask.grid, oracle)


@pytest.mark.parametrize("gen", ["curve-left", "intersection"])
def test_rasterize_matches_point_in_polygon(gen):
    sc = geom.build_scenario(geom.ScenarioRecipe(gen, width=6.0, radius=25.0, seed=3))
    mask = geom.rasterize_road(sc, 1.0)
    xx, yy = geom.cell_centers(mask.origin, mask.grid.shape, 1.0)
    oracle = np.zeros_like(mask.grid)
    for poly in sc.drivable_region:
        oracle |= ray_cast_inside(poly, xx, yy)
    assert np.array_equal(mask.grid, oracle)


def test_rasterize_rejects_coarse_grid(straight):
    with pytest.raises(ConfigError):
        geom.rasterize_road(straight[0], 50.0)
    with pytest.raises(ConfigError):
        geom.rasterize_road(straight[0], 0.0)


# ---------------------------------------------------------------------------
# ESDF


def test_single_true_cell():
    grid = np.zeros((5, 5), dtype=bool)
    grid[2, 2] = True
    f = geom.compute_esdf(geom.BinaryRoadMask(grid, (0, 0), 1.0))
    assert f.grid[2, 2] == 1.0
    assert f.grid[0, 0] == -math.sqrt(8)


@pytest.mark.parametrize("seed", range(5))
def test_esdf_brute_force(seed):
    r = np.random.default_rng(seed)
    h, w = r.integers(2, 33, size=2)
    grid = r.random((h, w)) < r.uniform(0.2, 0.8)
    grid[0, 0], grid[-1, -1] = True, False
    res = float(r.choice([0.25, 0.5, 1.0]))
    f = geom.compute_esdf(geom.BinaryRoadMask(grid, (0, 0), res))
    np.testing.assert_allclose(f.grid, brute_force_esdf(grid, res), atol=1e-9, rtol=0)
    assert np.array_equal(f.grid > 0, grid)


def test_esdf_degenerate():
    with pytest.raises(DegenerateInputError):
        geom.compute_esdf(geom.BinaryRoadMask(np.ones((4, 4), dtype=bool), (0, 0), 1.0))
    with pytest.raises(DegenerateInputError):
        geom.BinaryRoadMask(np.zeros((4, 4), dtype=bool), (0, 0), 1.0)


@pytest.mark.parametrize("angle", [0.0, 17.0, 45.0])
def test_esdf_near_eikonal(angle):
    res = 0.5
    xx, yy = geom.cell_centers((0.25, 0.25), (80, 80), res)
    a = math.radians(angle)
    grid = (math.cos(a) * xx + math.sin(a) * yy) < 20.0
    f = geom.compute_esdf(geom.BinaryRoadMask(grid, (0.25, 0.25), res))
    gy, gx = np.gradient(f.grid, res)
    mag = np.hypot(gx, gy)
    interior = np.abs(f.grid) >= 2 * res
    interior[:2, :] = interior[-2:, :] = interior[:, :2] = interior[:, -2:] = False
    # the opposite class is only reached across the line, not through the grid border
    assert np.all((mag[interior] >= 0.8) & (mag[interior] <= 1.2))


def test_esdf_sign_agrees_with_mask(curve):
    sc, f = curve
    mask = geom.rasterize_road(sc)
    assert np.array_equal(f.grid > 0, mask.grid)
    assert np.all(f.grid != 0)


# ---------------------------------------------------------------------------
# bilinear lookup


def test_lookup_at_cell_centre_and_midpoint(curve):
    _, f = curve
    xx, yy = geom.cell_centers(f.origin, f.grid.shape, f.resolution)
    j, i = 40, 70
    assert geom.esdf_at(f, (xx[j, i], yy[j, i])) == (f.grid[j, i], False)
    mid = ((xx[j, i] + xx[j, i + 1]) / 2, yy[j, i])
    assert geom.esdf_at(f, mid)[0] == pytest.approx((f.grid[j, i] + f.grid[j, i + 1]) / 2, abs=1e-12)


def test_lookup_matches_independent_interpolator(curve, rng):
    _, f = curve
    h, w = f.grid.shape
    xs = f.origin[0] + f.resolution * np.arange(w)
    ys = f.origin[1] + f.resolution * np.arange(h)
    oracle = RegularGridInterpolator((ys, xs), f.grid, method="linear")
    x0, x1, y0, y1 = f.extent
    pts = np.stack([rng.uniform(x0, x1, 500), rng.uniform(y0, y1, 500)], axis=1)
    val, clamped = geom.esdf_lookup(f, pts)
    np.testing.assert_allclose(val, oracle(pts[:, ::-1]), atol=1e-9)
    assert not clamped.any()


def test_lookup_outside_is_clamped(straight):
    _, f = straight
    x0, x1, y0, y1 = f.extent
    v, c = geom.esdf_at(f, (x1 + 5.0, 0.0))
    assert c
    assert v == geom.esdf_at(f, (x1, 0.0))[0]


# ---------------------------------------------------------------------------
# DAC and EP


def test_dac_examples(straight):
    sc, f = straight
    line = np.stack([np.linspace(1, 50, 8), np.zeros(8)], axis=1)
    assert geom.dac_compliant(line, f)
    bad = line.copy()
    bad[4, 1] = 5.0  # 2 m beyond the edge
    assert not geom.dac_compliant(bad, f)
    assert not geom.dac_compliant(line + [100.0, 0.0], f)  # off the grid


def test_dac_matches_mask_lookup(straight, rng):
    sc, f = straight
    mask = geom.rasterize_road(sc)
    trajs = np.stack([rng.uniform(5, 55, (100, 8)), rng.uniform(-4, 4, (100, 8))], axis=-1)
    # nearest-cell lookup in the binary mask
    i = np.rint((trajs[..., 0] - mask.origin[0]) / mask.resolution).astype(int)
    j = np.rint((trajs[..., 1] - mask.origin[1]) / mask.resolution).astype(int)
    oracle = mask.grid[j, i].all(axis=1)
    got = np.array([geom.dac_compliant(t, f) for t in trajs])
    assert np.array_equal(got, oracle)
    assert np.array_equal(geom.dac_compliant_many(trajs, f), oracle)
    assert 0 < oracle.sum() < len(oracle)  # both outcomes exercised


@given(st.lists(st.tuples(st.floats(0, 60), st.floats(-4, 4)), min_size=2, max_size=10), st.integers(0, 9))
def test_dac_monotone_under_removal(pts, k):
    f = straight_field()
    traj = np.array(pts)
    k = k % len(traj)
    if geom.dac_compliant(traj, f):
        assert geom.dac_compliant(np.delete(traj, k, axis=0), f)


@functools.lru_cache(maxsize=1)
def straight_field():
    return geom.compute_esdf(geom.rasterize_road(geom.build_scenario(geom.ScenarioRecipe("straight"))))


def test_ep_examples(straight):
    sc, _ = straight
    end = np.array([[0.0, 0.0], [60.0, 0.0]])
    assert geom.ep_score(end, sc, max_progress=60.0) == 1.0
    assert geom.ep_score(np.zeros((8, 2)), sc) == 0.0
    half = np.array([[0.0, 0.0], [30.0, 1.0]])
    assert geom.ep_score(half, sc, max_progress=60.0) == pytest.approx(0.5, abs=1e-12)


def test_ep_matches_dense_projection(curve, rng):
    sc, _ = curve
    for _ in range(20):
        p = rng.uniform([0, -2], [30, 25])
        s = dense_projection(sc.centerline, p)
        ref = min(sc.centerline_length, 50.0)
        assert geom.ep_score(np.array([p]), sc) == pytest.approx(min(s / ref, 1.0), abs=2e-3)


@given(st.floats(0, 1), st.floats(0, 1))
def test_ep_monotone_along_centreline(a, b):
    sc = geom.build_scenario(geom.ScenarioRecipe("curve-left", radius=30.0))
    lo, hi = sorted((a, b))
    p_lo, _ = geom.point_at_arclength(sc.centerline, lo * sc.centerline_length)
    p_hi, _ = geom.point_at_arclength(sc.centerline, hi * sc.centerline_length)
    assert geom.ep_score(p_lo[None], sc) <= geom.ep_score(p_hi[None], sc)


# ---------------------------------------------------------------------------
# persistence


def test_scenario_round_trip(tmp_path):
    sc = geom.build_scenario(geom.ScenarioRecipe("intersection", seed=4, n_obstacles=2))
    geom.save_scenario(sc, tmp_path / "s.json")
    back = geom.load_scenario(tmp_path / "s.json")
    assert back.id == sc.id and back.obstacles == sc.obstacles
    assert np.array_equal(back.centerline, sc.centerline)
    assert all(np.array_equal(p, q) for p, q in zip(back.drivable_region, sc.drivable_region))


def test_esdf_csv_round_trip(tmp_path, curve):
    _, f = curve
    geom.save_esdf_csv(f, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[:3]] == ["origin", "resolution", "shape"]
    back = geom.load_esdf_csv(tmp_path / "f.csv")
    assert np.array_equal(back.grid, f.grid) and back.origin == f.origin and back.resolution == f.resolution
