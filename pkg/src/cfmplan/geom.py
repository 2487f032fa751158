"""Synthetic road scenarios, road masks, signed distance fields and DAC/EP checks.

Coordinates are metric and expressed in the ego frame: x forward, y left,
origin at the ego rear axle at t=0. Grids are stored row-major with rows
indexing y and columns indexing x; ``origin`` is the centre of cell (0, 0).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import shapely
from scipy.ndimage import distance_transform_edt

from .errors import ConfigError, DegenerateInputError

# x_min, x_max, y_min, y_max in metres
DEFAULT_EXTENT = (-8.0, 72.0, -32.0, 32.0)
DEFAULT_RESOLUTION = 0.5
DEFAULT_MAX_PROGRESS = 50.0

# keep route endpoints away from the lateral grid border
_Y_CAP = 28.0

COMMANDS = ("left", "straight", "right", "unknown")


class Obstacle(NamedTuple):
    center: tuple
    radius: float


@dataclass(frozen=True, eq=False)
class Scenario:
    drivable_region: tuple
    centerline: np.ndarray
    obstacles: tuple = ()
    id: str = ""

    def __post_init__(self):
        polys = tuple(_frozen(np.asarray(p, dtype=float)) for p in self.drivable_region)
        if not polys:
            raise ConfigError("drivable_region needs at least one polygon")
        for k, p in enumerate(polys):
            if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
                raise ConfigError(f"polygon {k} must be an (n>=3, 2) array")
            if not shapely.Polygon(p).is_valid:
                raise ConfigError(f"polygon {k} is self-intersecting")
        line = _frozen(np.asarray(self.centerline, dtype=float))
        if line.ndim != 2 or line.shape[1] != 2 or len(line) < 2:
            raise ConfigError("centerline needs at least two (x, y) points")
        obstacles = tuple(
            Obstacle((float(o[0][0]), float(o[0][1])), float(o[1])) for o in self.obstacles
        )
        for o in obstacles:
            if not o.radius > 0:
                raise ConfigError("obstacle radius must be positive")
        object.__setattr__(self, "drivable_region", polys)
        object.__setattr__(self, "centerline", line)
        object.__setattr__(self, "obstacles", obstacles)
        if not np.all(self.contains(resample_polyline(line, 0.5), tol=1e-6)):
            raise ConfigError("centerline leaves the drivable region")

    @cached_property
    def region(self):
        geom = shapely.union_all([shapely.Polygon(p) for p in self.drivable_region])
        shapely.prepare(geom)
        return geom

    @cached_property
    def command(self) -> str:
        return route_command(self.centerline)

    @cached_property
    def centerline_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)))

    def contains(self, points, tol=0.0) -> np.ndarray:
        """Closed point-in-region test for an (..., 2) array of points."""
        pts = np.asarray(points, dtype=float)
        geom = self.region if tol == 0 else self.region.buffer(tol)
        return shapely.intersects_xy(geom, pts[..., 0], pts[..., 1])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=a.dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BinaryRoadMask:
    grid: np.ndarray
    origin: tuple
    resolution: float

    def __post_init__(self):
        grid = _frozen(np.asarray(self.grid, dtype=bool))
        if grid.ndim != 2:
            raise ConfigError("mask grid must be 2-D")
        if not self.resolution > 0:
            raise ConfigError("resolution must be positive")
        if not grid.any():
            raise DegenerateInputError("road mask has no drivable cell")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "resolution", float(self.resolution))


@dataclass(frozen=True, eq=False)
class SignedDistanceField:
    grid: np.ndarray
    origin: tuple
    resolution: float

    def __post_init__(self):
        grid = _frozen(np.asarray(self.grid, dtype=float))
        if grid.ndim != 2 or min(grid.shape) < 2:
            raise ConfigError("field grid must be 2-D with at least 2x2 cells")
        if not self.resolution > 0:
            raise ConfigError("resolution must be positive")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def shape(self):
        return self.grid.shape

    @property
    def extent(self):
        """(x_min, x_max, y_min, y_max) spanned by the cell centres."""
        h, w = self.grid.shape
        ox, oy = self.origin
        return (ox, ox + (w - 1) * self.resolution, oy, oy + (h - 1) * self.resolution)


# ---------------------------------------------------------------------------
# scenario generators


@dataclass(frozen=True)
class ScenarioRecipe:
    generator: str
    width: float = 6.0
    length: float = 60.0
    radius: float = 30.0
    seed: int = 0
    n_obstacles: int = 0
    # fork geometry: branch angle in degrees and distance of the split point
    fork_angle: float = 30.0
    fork_at: float = 10.0


def _rect(x0, x1, y0, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _arc_band(radius, width, phi, sign, n):
    theta = np.linspace(0.0, phi, n)
    ro, ri = radius + width / 2, radius - width / 2
    outer = np.stack([ro * np.sin(theta), sign * (radius - ro * np.cos(theta))], axis=1)
    inner = np.stack([ri * np.sin(theta), sign * (radius - ri * np.cos(theta))], axis=1)
    return np.concatenate([outer, inner[::-1]])


def _straight(recipe, rng):
    w, length = recipe.width, recipe.length
    region = [_rect(0.0, length, -w / 2, w / 2)]
    line = np.array([[0.0, 0.0], [length, 0.0]])
    return region, line


def _curve(sign):
    def gen(recipe, rng):
        r, w = recipe.radius, recipe.width
        if r <= w / 2:
            raise ConfigError("curve radius must exceed half the road width")
        phi = min(recipe.length / r, math.pi / 2)
        if r > _Y_CAP:
            phi = min(phi, math.acos(1.0 - _Y_CAP / r))
        n = max(16, int(math.ceil(r * phi)) + 1)
        theta = np.linspace(0.0, phi, n)
        line = np.stack([r * np.sin(theta), sign * r * (1 - np.cos(theta))], axis=1)
        return [_arc_band(r, w, phi, sign, 2 * n)], line

    return gen


def _intersection(recipe, rng):
    w, length = recipe.width, recipe.length
    xc = float(rng.uniform(0.3, 0.6) * length)
    route = ("left", "straight", "right")[int(rng.integers(3))]
    y_span = _Y_CAP + 2.0
    region = [_rect(0.0, length, -w / 2, w / 2), _rect(xc - w / 2, xc + w / 2, -y_span, y_span)]
    if route == "straight":
        line = np.array([[0.0, 0.0], [length, 0.0]])
    else:
        sign = 1.0 if route == "left" else -1.0
        r = w / 2
        theta = np.linspace(0.0, math.pi / 2, 12)
        arc = np.stack([xc - r + r * np.sin(theta), sign * r * (1 - np.cos(theta))], axis=1)
        line = np.concatenate([[[0.0, 0.0]], arc, [[xc, sign * _Y_CAP]]])
    return region, line


def _fork(recipe, rng):
    w, length = recipe.width, recipe.length
    xf = recipe.fork_at
    alpha = math.radians(recipe.fork_angle)
    branch_len = length - xf
    if branch_len <= 0:
        raise ConfigError("fork_at must be shorter than the road length")
    region = [_rect(0.0, xf, -w / 2, w / 2)]
    starts = []
    ends = {}
    for sign in (1.0, -1.0):
        d = np.array([math.cos(alpha), sign * math.sin(alpha)])
        n = np.array([-d[1], d[0]])
        p0 = np.array([xf, 0.0])
        p1 = p0 + branch_len * d
        region.append(np.array([p0 - n * w / 2, p1 - n * w / 2, p1 + n * w / 2, p0 + n * w / 2]))
        starts += [p0 - n * w / 2, p0 + n * w / 2]
        ends[sign] = p1
    joint = np.concatenate([np.array(starts), [[xf, w / 2], [xf, -w / 2]]])
    region.append(np.asarray(shapely.MultiPoint(joint).convex_hull.exterior.coords)[:-1])
    sign = 1.0 if rng.random() < 0.5 else -1.0
    line = np.array([[0.0, 0.0], [xf, 0.0], ends[sign]])
    return region, line


GENERATORS = {
    "straight": _straight,
    "curve-left": _curve(1.0),
    "curve-right": _curve(-1.0),
    "intersection": _intersection,
    "fork": _fork,
}


def _place_obstacles(line, width, n, rng):
    dense = resample_polyline(line, 0.5)
    s = _arc_lengths(dense)
    normals = _polyline_normals(dense)
    out = []
    for _ in range(n):
        k = int(np.searchsorted(s, rng.uniform(0.2, 0.9) * s[-1]))
        k = min(k, len(dense) - 1)
        radius = float(rng.uniform(0.5, 1.5))
        side = 1.0 if rng.random() < 0.5 else -1.0
        offset = width / 2 + radius + float(rng.uniform(0.3, 2.0))
        c = dense[k] + side * offset * normals[k]
        out.append(Obstacle((float(c[0]), float(c[1])), radius))
    return tuple(out)


def build_scenario(recipe) -> Scenario:
    """Build a scenario from a :class:`ScenarioRecipe` or an equivalent dict.

    The result depends only on the recipe; the seed drives the random parts
    (intersection route and crossing position, fork branch, obstacles).
    """
    if isinstance(recipe, dict):
        recipe = ScenarioRecipe(**recipe)
    gen = GENERATORS.get(recipe.generator)
    if gen is None:
        raise ConfigError(f"unknown scenario generator {recipe.generator!r}")
    if not recipe.width > 0:
        raise ConfigError("road width must be positive")
    if not recipe.length > 0:
        raise ConfigError("road length must be positive")
    rng = np.random.default_rng(recipe.seed)
    region, line = gen(recipe, rng)
    obstacles = _place_obstacles(line, recipe.width, recipe.n_obstacles, rng)
    sid = f"{recipe.generator}-w{recipe.width:g}-l{recipe.length:g}-s{recipe.seed}"
    return Scenario(tuple(region), line, obstacles, sid)


def route_command(centerline, threshold_deg=20.0) -> str:
    """Driving command implied by the heading change between route start and end."""
    d0 = centerline[1] - centerline[0]
    d1 = centerline[-1] - centerline[-2]
    turn = math.degrees(math.atan2(d0[0] * d1[1] - d0[1] * d1[0], d0 @ d1))
    if turn > threshold_deg:
        return "left"
    if turn < -threshold_deg:
        return "right"
    return "straight"


# ---------------------------------------------------------------------------
# polylines


def _arc_lengths(poly):
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _polyline_normals(poly):
    tang = np.gradient(poly, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def resample_polyline(poly, step):
    """Points along ``poly`` spaced at most ``step`` apart, vertices included."""
    poly = np.asarray(poly, dtype=float)
    out = [poly[:1]]
    for a, b in zip(poly[:-1], poly[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        u = np.arange(1, n + 1)[:, None] / n
        out.append(a + u * (b - a))
    return np.concatenate(out)


def point_at_arclength(poly, s):
    """Positions and unit left normals at arc lengths ``s`` along ``poly`` (clamped)."""
    poly = np.asarray(poly, dtype=float)
    cum = _arc_lengths(poly)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 2)
    seg = poly[k + 1] - poly[k]
    seg_len = np.linalg.norm(seg, axis=-1)
    u = np.where(seg_len > 0, (s - cum[k]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    pos = poly[k] + u[..., None] * seg
    tang = seg / np.where(seg_len > 0, seg_len, 1.0)[..., None]
    normal = np.stack([-tang[..., 1], tang[..., 0]], axis=-1)
    return pos, normal


def project_to_arclength(poly, points):
    """Arc length of the closest point on ``poly`` for each of ``points``."""
    poly = np.asarray(poly, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    u = np.clip(np.einsum("pij,ij->pi", pts[:, None, :] - a[None], ab) / denom, 0.0, 1.0)
    closest = a[None] + u[..., None] * ab[None]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=-1)
    k = np.argmin(dist, axis=1)
    cum = _arc_lengths(poly)
    rows = np.arange(len(pts))
    return cum[k] + u[rows, k] * np.sqrt(denom[k])


# ---------------------------------------------------------------------------
# rasters and distance fields


def grid_geometry(extent, resolution):
    """(origin, shape) of the cell-centred grid covering ``extent``."""
    if not resolution > 0:
        raise ConfigError("resolution must be positive")
    x0, x1, y0, y1 = extent
    w = int(round((x1 - x0) / resolution))
    h = int(round((y1 - y0) / resolution))
    return (x0 + resolution / 2, y0 + resolution / 2), (h, w)


def cell_centers(origin, shape, resolution):
    h, w = shape
    xs = origin[0] + resolution * np.arange(w)
    ys = origin[1] + resolution * np.arange(h)
    return np.meshgrid(xs, ys)


def rasterize_road(scenario: Scenario, resolution=DEFAULT_RESOLUTION, extent=DEFAULT_EXTENT):
    """Binary road mask: a cell is true iff its centre lies in the drivable region."""
    origin, shape = grid_geometry(extent, resolution)
    if shape[0] * shape[1] < 4 or min(shape) < 1:
        raise ConfigError(f"resolution {resolution} gives a grid of {shape}, need >= 4 cells")
    xx, yy = cell_centers(origin, shape, resolution)
    grid = shapely.intersects_xy(scenario.region, xx, yy)
    return BinaryRoadMask(grid, origin, resolution)


def compute_esdf(mask: BinaryRoadMask) -> SignedDistanceField:
    """Exact signed distance (metres) from every cell centre to the nearest cell
    centre of the opposite class; positive on the road."""
    grid = mask.grid
    if grid.all() or not grid.any():
        raise DegenerateInputError("ESDF undefined for a mask with a single class")
    inside = distance_transform_edt(grid, sampling=mask.resolution)
    outside = distance_transform_edt(~grid, sampling=mask.resolution)
    return SignedDistanceField(np.where(grid, inside, -outside), mask.origin, mask.resolution)


def esdf_lookup(field: SignedDistanceField, points):
    """Bilinear ESDF values at ``points`` (..., 2).

    Returns ``(values, clamped)``; points outside the cell-centre extent are
    clamped onto it and flagged in ``clamped``.
    """
    pts = np.asarray(points, dtype=float)
    h, w = field.grid.shape
    fx = (pts[..., 0] - field.origin[0]) / field.resolution
    fy = (pts[..., 1] - field.origin[1]) / field.resolution
    eps = 1e-9
    clamped = (fx < -eps) | (fx > w - 1 + eps) | (fy < -eps) | (fy > h - 1 + eps)
    fx = np.clip(fx, 0.0, w - 1)
    fy = np.clip(fy, 0.0, h - 1)
    i = np.minimum(np.floor(fx).astype(int), w - 2)
    j = np.minimum(np.floor(fy).astype(int), h - 2)
    u = fx - i
    v = fy - j
    g = field.grid
    val = (
        (1 - u) * (1 - v) * g[j, i]
        + u * (1 - v) * g[j, i + 1]
        + (1 - u) * v * g[j + 1, i]
        + u * v * g[j + 1, i + 1]
    )
    return val, clamped


def esdf_at(field: SignedDistanceField, p):
    """Interpolated ESDF at a single point; returns ``(value, clamped)``."""
    val, clamped = esdf_lookup(field, np.asarray(p, dtype=float).reshape(2))
    return float(val), bool(clamped)


def dac_compliant(traj, field: SignedDistanceField) -> bool:
    """True iff every waypoint lies inside the grid and on non-negative ESDF."""
    val, clamped = esdf_lookup(field, np.asarray(traj, dtype=float).reshape(-1, 2))
    return bool(np.all(val >= 0) and not np.any(clamped))


def dac_compliant_many(trajs, field: SignedDistanceField) -> np.ndarray:
    """Vectorised :func:`dac_compliant` over an (N, T, 2) stack."""
    val, clamped = esdf_lookup(field, trajs)
    return np.all((val >= 0) & ~clamped, axis=-1)


def min_clearance(trajs, field: SignedDistanceField) -> np.ndarray:
    val, _ = esdf_lookup(field, trajs)
    return val.min(axis=-1)


def ep_score(traj, scenario: Scenario, max_progress=DEFAULT_MAX_PROGRESS) -> float:
    """Progress proxy in [0, 1]: centreline arc length at the projection of the
    trajectory endpoint over min(centreline length, ``max_progress``)."""
    ref = min(scenario.centerline_length, max_progress)
    if not ref > 0:
        raise ConfigError("centerline has zero length")
    end = np.asarray(traj, dtype=float).reshape(-1, 2)[-1]
    s = project_to_arclength(scenario.centerline, end[None])[0]
    return float(np.clip(s / ref, 0.0, 1.0))


def ep_score_many(trajs, scenario: Scenario, max_progress=DEFAULT_MAX_PROGRESS) -> np.ndarray:
    ref = min(scenario.centerline_length, max_progress)
    ends = np.asarray(trajs, dtype=float)[..., -1, :].reshape(-1, 2)
    return np.clip(project_to_arclength(scenario.centerline, ends) / ref, 0.0, 1.0)


def obstacle_clearance(traj, scenario: Scenario) -> float:
    """Minimum waypoint distance to an obstacle surface (inf without obstacles)."""
    if not scenario.obstacles:
        return math.inf
    pts = np.asarray(traj, dtype=float).reshape(-1, 2)
    c = np.array([o.center for o in scenario.obstacles])
    r = np.array([o.radius for o in scenario.obstacles])
    d = np.linalg.norm(pts[:, None, :] - c[None], axis=-1) - r[None]
    return float(d.min())


# ---------------------------------------------------------------------------
# persistence


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "id": s.id,
        "drivable_region": [p.tolist() for p in s.drivable_region],
        "centerline": s.centerline.tolist(),
        "obstacles": [{"center": list(o.center), "radius": o.radius} for o in s.obstacles],
    }


def scenario_from_dict(d: dict) -> Scenario:
    try:
        return Scenario(
            tuple(np.asarray(p, dtype=float) for p in d["drivable_region"]),
            np.asarray(d["centerline"], dtype=float),
            tuple((tuple(o["center"]), o["radius"]) for o in d.get("obstacles", [])),
            str(d.get("id", "")),
        )
    except KeyError as exc:
        raise ConfigError(f"scenario file lacks field {exc}") from None


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n")


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def save_esdf_csv(field: SignedDistanceField, path) -> None:
    """CSV grid preceded by three header lines: origin, resolution, shape."""
    h, w = field.grid.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["origin", repr(field.origin[0]), repr(field.origin[1])])
        wr.writerow(["resolution", repr(field.resolution)])
        wr.writerow(["shape", h, w])
        for row in field.grid:
            wr.writerow([repr(float(v)) for v in row])


def load_esdf_csv(path) -> SignedDistanceField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or [r[0] for r in rows[:3]] != ["origin", "resolution", "shape"]:
        raise ConfigError(f"{path}: not an ESDF csv")
    origin = (float(rows[0][1]), float(rows[0][2]))
    res = float(rows[1][1])
    h, w = int(rows[2][1]), int(rows[2][2])
    grid = np.array([[float(v) for v in r] for r in rows[3:]], dtype=float)
    if grid.shape != (h, w):
        raise ConfigError(f"{path}: grid shape {grid.shape} != header {(h, w)}")
    return SignedDistanceField(grid, origin, res)
