"""Procedural stair heightfields and the spatial queries the simulator needs.

Heights live on a regular grid indexed ``heights[ix, iy]``; cell ``(ix, iy)``
covers ``[ix*c, (ix+1)*c) x [iy*c, (iy+1)*c)`` in world metres with the grid
corner at the origin. Stairs are piecewise constant, so every query is a
nearest-cell lookup.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Mapping

import numpy as np

VOID_HEIGHT = -10.0
CELL_SIZE = 0.05
HEIGHTMAP_SIZE = 21
HEIGHTMAP_SPACING = 0.10
MAX_GRID_CELLS = (400, 400)

APRON_DEPTH = 1.5
WALL_THICKNESS = 0.1
DIVIDER_WIDTH = 0.2
MARGIN = 1.0
SPIRAL_INNER_RADIUS = 0.5


class StairKind(str, enum.Enum):
    PYRAMID = "pyramid"
    STRAIGHT = "straight"
    L_SHAPED = "l_shaped"
    U_SHAPED = "u_shaped"
    SPIRAL = "spiral"

    @classmethod
    def parse(cls, value: "str | StairKind") -> "StairKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"l": "l_shaped", "u": "u_shaped", "lshaped": "l_shaped", "ushaped": "u_shaped"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown stair kind {value!r}; expected one of {[k.value for k in cls]}") from None


class Mode(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


# (steps_per_run, runs) per kind at desk scale
DEFAULT_LAYOUT = {
    StairKind.PYRAMID: (8, 1),
    StairKind.STRAIGHT: (10, 1),
    StairKind.L_SHAPED: (7, 2),
    StairKind.U_SHAPED: (9, 2),
    StairKind.SPIRAL: (10, 1),
}


@dataclass(frozen=True)
class Ramp:
    """Linear riser/tread ramp over ``n_levels`` difficulty levels."""

    riser_lo: float
    riser_hi: float
    tread_lo: float
    tread_hi: float
    n_levels: int

    def riser(self, index: int) -> float:
        return self.riser_lo + (index - 1) * ((self.riser_hi - self.riser_lo) / (self.n_levels - 1))

    def tread(self, index: int) -> float:
        return self.tread_lo - (index - 1) * ((self.tread_lo - self.tread_hi) / (self.n_levels - 1))


TRAIN_RAMP = Ramp(riser_lo=0.08, riser_hi=0.20, tread_lo=0.32, tread_hi=0.26, n_levels=10)
TEST_RAMP = Ramp(riser_lo=0.09, riser_hi=0.19, tread_lo=0.31, tread_hi=0.27, n_levels=6)


@dataclass(frozen=True)
class DifficultyLevel:
    index: int
    mode: Mode = Mode.TRAIN
    ramp: Ramp | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        n = self._ramp.n_levels
        if not 1 <= self.index <= n:
            raise ValueError(f"{self.mode.value} level must be in 1..{n}, got {self.index}")

    @property
    def _ramp(self) -> Ramp:
        if self.ramp is not None:
            return self.ramp
        return TRAIN_RAMP if self.mode is Mode.TRAIN else TEST_RAMP

    @property
    def riser_height(self) -> float:
        return self._ramp.riser(self.index)

    @property
    def tread_depth(self) -> float:
        return self._ramp.tread(self.index)


@dataclass(frozen=True)
class StairSpec:
    kind: StairKind
    riser_height: float
    tread_depth: float
    stair_width: float = 1.0
    steps_per_run: int = 10
    landing_depth: float = 1.0
    runs: int = 1
    wall_height: float = 1.0
    spiral_inner_radius: float = SPIRAL_INNER_RADIUS
    spiral_total_turn: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StairKind.parse(self.kind))
        if not self.riser_height > 0:
            raise ValueError("riser_height must be positive")
        if not self.tread_depth > 0:
            raise ValueError("tread_depth must be positive")
        if not self.stair_width > 0:
            raise ValueError("stair_width must be positive")
        if self.steps_per_run < 1:
            raise ValueError("steps_per_run must be at least 1")
        expected_runs = 2 if self.kind in (StairKind.L_SHAPED, StairKind.U_SHAPED) else 1
        if self.runs != expected_runs:
            raise ValueError(f"{self.kind.value} stairs need runs={expected_runs}, got {self.runs}")

    @property
    def total_rise(self) -> float:
        return self.runs * self.steps_per_run * self.riser_height

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["kind"] = self.kind.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StairSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown StairSpec fields: {sorted(unknown)}")
        return cls(**dict(data))


def difficulty_to_spec(
    kind: "StairKind | str",
    level: "int | DifficultyLevel",
    mode: "Mode | str" = Mode.TRAIN,
    ramp: Ramp | None = None,
) -> StairSpec:
    """Stair geometry for a curriculum (train) or evaluation (test) level."""
    kind = StairKind.parse(kind)
    if not isinstance(level, DifficultyLevel):
        level = DifficultyLevel(int(level), Mode(mode), ramp)
    steps, runs = DEFAULT_LAYOUT[kind]
    riser, tread = level.riser_height, level.tread_depth
    turn = 0.0
    if kind is StairKind.SPIRAL:
        mid_radius = SPIRAL_INNER_RADIUS + 0.5
        turn = (steps - 1) * tread / mid_radius
    return StairSpec(
        kind=kind,
        riser_height=riser,
        tread_depth=tread,
        steps_per_run=steps,
        runs=runs,
        spiral_total_turn=turn,
    )


@dataclass(frozen=True, eq=False)
class HeightField:
    """Immutable terrain grid plus the metadata the env and evaluators read.

    ``ascent_dir[ix, iy]`` is the unit direction in which stairs climb at that
    cell; ``wall_mask`` flags wall and column cells.
    """

    cell_size: float
    heights: np.ndarray
    spawn_pose: tuple[float, float, float]
    goal_pose: tuple[float, float, float, float]
    centerline: np.ndarray
    arclength: np.ndarray
    ascent_dir: np.ndarray
    wall_mask: np.ndarray
    spec: StairSpec
    seed: int = 0
    run_directions: tuple[tuple[float, float], ...] = field(default=())

    @property
    def nx(self) -> int:
        return self.heights.shape[0]

    @property
    def ny(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.nx * self.cell_size, self.ny * self.cell_size


class _Layout:
    """Rectangles painted in order in stair-local coordinates."""

    def __init__(self):
        self.rects: list[tuple[float, float, float, float, float, bool, tuple[float, float]]] = []

    def floor(self, x0, x1, y0, y1, h, direction):
        self.rects.append((x0, x1, y0, y1, h, False, direction))

    def wall(self, x0, x1, y0, y1, h):
        self.rects.append((x0, x1, y0, y1, h, True, (0.0, 0.0)))

    def bounds(self):
        arr = np.array([r[:4] for r in self.rects])
        return arr[:, 0].min(), arr[:, 1].max(), arr[:, 2].min(), arr[:, 3].max()

    def paint(self, X, Y, h, wall, asc):
        for x0, x1, y0, y1, height, is_wall, direction in self.rects:
            m = (X >= x0) & (X < x1) & (Y >= y0) & (Y < y1)
            h[m] = height
            wall[m] = is_wall
            asc[m] = direction


def _run_risers(layout, start, axis, sign, base, n, spec, lo, hi, direction):
    """Paint the ``n - 1`` treads of one run; returns the coordinate where the run ends."""
    t, r = spec.tread_depth, spec.riser_height
    for k in range(n - 1):
        a, b = start + sign * k * t, start + sign * (k + 1) * t
        a, b = min(a, b), max(a, b)
        if axis == 0:
            layout.floor(a, b, lo, hi, base + (k + 1) * r, direction)
        else:
            layout.floor(lo, hi, a, b, base + (k + 1) * r, direction)
    return start + sign * (n - 1) * t


def _straight(spec: StairSpec):
    n, r, w, L = spec.steps_per_run, spec.riser_height, spec.stair_width, spec.landing_depth
    top = spec.total_rise + spec.wall_height
    d = (1.0, 0.0)
    lay = _Layout()
    lay.floor(0.0, APRON_DEPTH, 0.0, w, 0.0, d)
    x_land = _run_risers(lay, APRON_DEPTH, 0, 1, 0.0, n, spec, 0.0, w, d)
    lay.floor(x_land, x_land + L, 0.0, w, n * r, d)
    x_end = x_land + L
    lay.wall(APRON_DEPTH, x_end, -WALL_THICKNESS, 0.0, top)
    lay.wall(APRON_DEPTH, x_end, w, w + WALL_THICKNESS, top)
    centerline = [(0.0, w / 2), (x_land + L / 2, w / 2)]
    spawn = (0.5, w / 2, 0.0)
    goal = (x_land + L / 2, w / 2, 0.0)
    return lay, centerline, spawn, goal, (d,)


def _l_shaped(spec: StairSpec):
    n, r, w, L = spec.steps_per_run, spec.riser_height, spec.stair_width, spec.landing_depth
    top = spec.total_rise + spec.wall_height
    wt = WALL_THICKNESS
    d1, d2 = (1.0, 0.0), (0.0, 1.0)
    lay = _Layout()
    lay.floor(0.0, APRON_DEPTH, 0.0, w, 0.0, d1)
    xl = _run_risers(lay, APRON_DEPTH, 0, 1, 0.0, n, spec, 0.0, w, d1)
    lay.floor(xl, xl + w, 0.0, w, n * r, d2)
    y2 = _run_risers(lay, w, 1, 1, n * r, n, spec, xl, xl + w, d2)
    lay.floor(xl, xl + w, y2, y2 + L, 2 * n * r, d2)
    lay.wall(APRON_DEPTH, xl + w + wt, -wt, 0.0, top)
    lay.wall(APRON_DEPTH, xl, w, w + wt, top)
    lay.wall(xl - wt, xl, w, y2 + L, top)
    lay.wall(xl + w, xl + w + wt, -wt, y2 + L, top)
    centerline = [(0.0, w / 2), (xl + w / 2, w / 2), (xl + w / 2, y2 + L / 2)]
    spawn = (0.5, w / 2, 0.0)
    goal = (xl + w / 2, y2 + L / 2, math.pi / 2)
    return lay, centerline, spawn, goal, (d1, d2)


def _u_shaped(spec: StairSpec):
    n, r, w, L = spec.steps_per_run, spec.riser_height, spec.stair_width, spec.landing_depth
    if L > APRON_DEPTH:
        raise ValueError("u_shaped landing_depth must not exceed the apron depth")
    top = spec.total_rise + spec.wall_height
    wt, g = WALL_THICKNESS, DIVIDER_WIDTH
    d1, d2 = (1.0, 0.0), (-1.0, 0.0)
    y_lo2, y_hi2 = w + g, 2 * w + g
    lay = _Layout()
    lay.floor(0.0, APRON_DEPTH, 0.0, w, 0.0, d1)
    xl = _run_risers(lay, APRON_DEPTH, 0, 1, 0.0, n, spec, 0.0, w, d1)
    lay.floor(xl, xl + w, 0.0, y_hi2, n * r, d2)
    x2 = _run_risers(lay, xl, 0, -1, n * r, n, spec, y_lo2, y_hi2, d2)
    lay.floor(x2 - L, x2, y_lo2, y_hi2, 2 * n * r, d2)
    lay.wall(APRON_DEPTH, xl + w + wt, -wt, 0.0, top)
    lay.wall(xl + w, xl + w + wt, -wt, y_hi2 + wt, top)
    lay.wall(x2 - L, xl + w + wt, y_hi2, y_hi2 + wt, top)
    lay.wall(x2 - L, xl, w, w + g, top)
    yc2 = (y_lo2 + y_hi2) / 2
    centerline = [(0.0, w / 2), (xl + w / 2, w / 2), (xl + w / 2, yc2), (x2 - L / 2, yc2)]
    spawn = (0.5, w / 2, 0.0)
    goal = (x2 - L / 2, yc2, math.pi)
    return lay, centerline, spawn, goal, (d1, d2)


def _spiral_paint(spec: StairSpec):
    n, r, w = spec.steps_per_run, spec.riser_height, spec.stair_width
    r_in = spec.spiral_inner_radius
    r_mid = r_in + w / 2
    r_out = r_in + w
    turn = spec.spiral_total_turn if n > 1 else 0.0
    dphi = turn / (n - 1) if n > 1 else 0.0
    phi_entry = APRON_DEPTH / r_mid
    phi_land = spec.landing_depth / r_mid
    if phi_entry + turn + phi_land > 2 * math.pi - 0.05:
        raise ValueError("spiral sweep overlaps itself; reduce spiral_total_turn or landing depth")
    base = -math.pi / 2  # entry sector starts due south, climbing counter-clockwise
    top = spec.total_rise + spec.wall_height
    outer = r_out + WALL_THICKNESS

    def paint(X, Y, h, wall, asc):
        rho = np.hypot(X, Y)
        phi = np.arctan2(Y, X)
        theta = np.mod(phi - base, 2 * math.pi)
        ring = (rho >= r_in) & (rho < r_out)
        hh = np.full(X.shape, top)
        hh = np.where(theta < phi_entry, 0.0, hh)
        if n > 1:
            k = np.floor((theta - phi_entry) / dphi)
            tread = (theta >= phi_entry) & (theta < phi_entry + turn)
            hh = np.where(tread, (k + 1) * r, hh)
        land = (theta >= phi_entry + turn) & (theta < phi_entry + turn + phi_land)
        hh = np.where(land, n * r, hh)
        is_wall_ring = ring & (hh == top)
        h[ring] = hh[ring]
        wall[ring] = is_wall_ring[ring]
        column = rho < r_in
        h[column] = top
        wall[column] = True
        shell = (rho >= r_out) & (rho < outer)
        h[shell] = top
        wall[shell] = True
        tangent = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
        asc[ring] = tangent[ring]

    def at(theta):
        ang = base + theta
        return r_mid * math.cos(ang), r_mid * math.sin(ang), ang + math.pi / 2

    theta_goal = phi_entry + turn + phi_land / 2
    m = max(2, int(math.ceil(theta_goal / 0.05)) + 1)
    centerline = [at(t)[:2] for t in np.linspace(0.0, theta_goal, m)]
    sx, sy, syaw = at(0.5 / r_mid)
    gx, gy, gyaw = at(theta_goal)
    bounds = (-outer, outer, -outer, outer)
    ang1 = base + phi_entry
    return paint, bounds, centerline, (sx, sy, syaw), (gx, gy, gyaw), ((-math.sin(ang1), math.cos(ang1)),)


def _pyramid_paint(spec: StairSpec):
    n, r, t = spec.steps_per_run, spec.riser_height, spec.tread_depth
    half_top = spec.landing_depth / 2
    half = half_top + (n - 1) * t

    def paint(X, Y, h, wall, asc):
        d = np.maximum(np.abs(X), np.abs(Y))
        ring = np.floor((d - half_top) / t) + 1
        level = np.where(d < half_top, n, np.maximum(0, n - ring))
        inside = d < half + t
        h[inside] = (level * r)[inside]
        xdom = np.abs(X) >= np.abs(Y)
        dirx = np.where(xdom, -np.sign(X), 0.0)
        diry = np.where(xdom, 0.0, -np.sign(Y))
        dirx = np.where((dirx == 0) & (diry == 0), 1.0, dirx)
        asc[inside] = np.stack([dirx, diry], axis=-1)[inside]

    x0 = -(half + APRON_DEPTH)
    centerline = [(x0, 0.0), (0.0, 0.0)]
    spawn = (-(half + APRON_DEPTH / 2), 0.0, 0.0)
    goal = (0.0, 0.0, 0.0)
    bounds = (x0, half + t, -(half + t), half + t)
    return paint, bounds, centerline, spawn, goal, ((1.0, 0.0),)


def _builder(spec: StairSpec) -> tuple[Callable, tuple, list, tuple, tuple, tuple]:
    if spec.kind in (StairKind.STRAIGHT, StairKind.L_SHAPED, StairKind.U_SHAPED):
        make = {StairKind.STRAIGHT: _straight, StairKind.L_SHAPED: _l_shaped, StairKind.U_SHAPED: _u_shaped}
        lay, centerline, spawn, goal, dirs = make[spec.kind](spec)
        x0, x1, y0, y1 = lay.bounds()
        x0 = min(x0, 0.0)
        return lay.paint, (x0, x1, y0, y1), centerline, spawn, goal, dirs
    if spec.kind is StairKind.SPIRAL:
        return _spiral_paint(spec)
    return _pyramid_paint(spec)


def generate(
    spec: StairSpec,
    seed: int = 0,
    cell_size: float = CELL_SIZE,
    max_cells: tuple[int, int] = MAX_GRID_CELLS,
) -> HeightField:
    """Rasterise ``spec`` onto a grid with a flat margin around the footprint.

    Geometry is fully determined by ``spec``; ``seed`` is carried into the
    manifest so exports stay traceable.
    """
    paint, (x0, x1, y0, y1), centerline, spawn, goal, dirs = _builder(spec)
    ox, oy = MARGIN - x0, MARGIN - y0
    nx = int(math.ceil((x1 - x0 + 2 * MARGIN) / cell_size))
    ny = int(math.ceil((y1 - y0 + 2 * MARGIN) / cell_size))
    if nx > max_cells[0] or ny > max_cells[1]:
        raise ValueError(f"stair footprint needs {nx}x{ny} cells, exceeds maximum {max_cells}")

    xc = (np.arange(nx) + 0.5) * cell_size - ox
    yc = (np.arange(ny) + 0.5) * cell_size - oy
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    heights = np.zeros((nx, ny))
    wall = np.zeros((nx, ny), dtype=bool)
    asc = np.zeros((nx, ny, 2))
    asc[...] = dirs[0]
    paint(X, Y, heights, wall, asc)

    cl = np.asarray(centerline, dtype=float) + (ox, oy)
    seg = np.hypot(*np.diff(cl, axis=0).T)
    arclength = np.concatenate([[0.0], np.cumsum(seg)])

    spawn_pose = (float(spawn[0] + ox), float(spawn[1] + oy), wrap_angle(spawn[2]))
    gx, gy = float(goal[0] + ox), float(goal[1] + oy)
    for arr in (heights, wall, asc, cl, arclength):
        arr.setflags(write=False)
    hf = HeightField(
        cell_size=cell_size,
        heights=heights,
        spawn_pose=spawn_pose,
        goal_pose=(gx, gy, 0.0, 0.0),
        centerline=cl,
        arclength=arclength,
        ascent_dir=asc,
        wall_mask=wall,
        spec=spec,
        seed=int(seed),
        run_directions=tuple(tuple(map(float, d)) for d in dirs),
    )
    return replace(hf, goal_pose=(gx, gy, float(sample_height(hf, gx, gy)), wrap_angle(goal[2])))


def wrap_angle(a):
    """Wrap to ``[-pi, pi)``."""
    out = np.mod(np.asarray(a, dtype=float) + math.pi, 2 * math.pi) - math.pi
    return float(out) if out.ndim == 0 else out


def sample_height(hf: HeightField, x, y):
    """Height of the cell containing ``(x, y)``; :data:`VOID_HEIGHT` off-grid."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ix = np.floor(x / hf.cell_size).astype(np.int64)
    iy = np.floor(y / hf.cell_size).astype(np.int64)
    ok = (ix >= 0) & (ix < hf.nx) & (iy >= 0) & (iy < hf.ny)
    out = np.full(np.broadcast(x, y).shape, VOID_HEIGHT)
    out[ok] = hf.heights[ix[ok], iy[ok]]
    return out[()] if out.ndim == 0 else out


def heightmap_offsets(size: int = HEIGHTMAP_SIZE, spacing: float = HEIGHTMAP_SPACING):
    """Body-frame (forward, left) lattice offsets, row-major with rows along forward."""
    k = (np.arange(size) - size // 2) * spacing
    fwd, left = np.meshgrid(k, k, indexing="ij")
    return fwd.ravel(), left.ravel()


def local_heightmap(hf: HeightField, pose, size: int = HEIGHTMAP_SIZE, spacing: float = HEIGHTMAP_SPACING):
    """Yaw-aligned ``size x size`` scan around ``pose = (x, y, z_base, yaw)``, relative to ``z_base``."""
    x, y, z_base, yaw = pose
    fwd, left = heightmap_offsets(size, spacing)
    c, s = math.cos(yaw), math.sin(yaw)
    px = x + c * fwd - s * left
    py = y + s * fwd + c * left
    return (sample_height(hf, px, py) - z_base).reshape(size, size)


def centerline_progress(hf: HeightField, x, y):
    """Arclength of the closest centerline point and signed lateral offset (left positive)."""
    return project_polyline(hf.centerline, hf.arclength, x, y)


def project_polyline(points: np.ndarray, arclength: np.ndarray, x, y):
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    shape = x.shape
    p = np.stack([x.ravel(), y.ravel()], axis=-1)[:, None, :]
    a = points[:-1]
    ab = points[1:] - a
    seg_len = np.hypot(ab[:, 0], ab[:, 1])
    ap = p - a
    t = np.clip(np.sum(ap * ab, axis=-1) / np.maximum(seg_len**2, 1e-18), 0.0, 1.0)
    off = ap - t[..., None] * ab
    dist2 = off[..., 0] ** 2 + off[..., 1] ** 2
    k = np.argmin(dist2, axis=1)
    rows = np.arange(len(k))
    s = arclength[k] + t[rows, k] * seg_len[k]
    ux = ab[k, 0] / seg_len[k]
    uy = ab[k, 1] / seg_len[k]
    lateral = ux * ap[rows, k, 1] - uy * ap[rows, k, 0]
    if not shape:
        return float(s[0]), float(lateral[0])
    return s.reshape(shape), lateral.reshape(shape)
