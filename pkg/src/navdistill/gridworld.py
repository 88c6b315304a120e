"""Static world geometry: scenes, occupancy grids, lidar and egocentric crops.

Conventions:
- World frame: x to the right, y up, origin at the lower-left scene corner.
- ``grid.cells[iy, ix]`` covers ``[ix*res, (ix+1)*res) x [iy*res, (iy+1)*res)``.
- Ego maps are indexed ``[channel, row, col]``; columns run along the robot's
  heading (+x) and rows along its left (+y), so a yaw-0 crop at a cell-aligned
  pose is a plain sub-array of the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

SCENE_SCHEMA_VERSION = 1
DEFAULT_RESOLUTION = 0.04
DEFAULT_WALL_THICKNESS = 0.04

EGO_CHANNELS = ("occupancy", "goal", "footprint")


class SceneError(ValueError):
    """Raised for malformed or invalid scene files."""


class GridError(ValueError):
    """Raised for invalid geometric queries."""


def wrap_angle(angle: float) -> float:
    """Map an angle into (-pi, pi]; values already in range are returned untouched."""
    if -math.pi < angle <= math.pi:
        return angle
    wrapped = math.pi - ((math.pi - angle) % (2.0 * math.pi))
    return math.pi if wrapped <= -math.pi else wrapped


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


Rect = tuple[float, float, float, float]


def _rect_inside(rect: Rect, width: float, height: float, tol: float = 1e-9) -> bool:
    x, y, w, h = rect
    return w > 0 and h > 0 and x >= -tol and y >= -tol and x + w <= width + tol and y + h <= height + tol


@dataclass(frozen=True)
class Scene:
    name: str
    physical_extent: tuple[float, float]
    obstacles: tuple[Rect, ...] = ()
    spawn_region: Rect | None = None
    goal_count: int = 5
    wall_thickness: float = DEFAULT_WALL_THICKNESS

    def __post_init__(self) -> None:
        width, height = (float(v) for v in self.physical_extent)
        object.__setattr__(self, "physical_extent", (width, height))
        object.__setattr__(self, "obstacles", tuple(tuple(float(v) for v in ob) for ob in self.obstacles))
        if self.spawn_region is None:
            t = self.wall_thickness
            object.__setattr__(self, "spawn_region", (t, t, width - 2 * t, height - 2 * t))
        else:
            object.__setattr__(self, "spawn_region", tuple(float(v) for v in self.spawn_region))
        self.validate()

    def validate(self) -> None:
        width, height = self.physical_extent
        if not (width > 0 and height > 0):
            raise SceneError(f"scene {self.name!r}: extent must be positive, got {self.physical_extent}")
        if not 0 < self.wall_thickness < min(width, height) / 2:
            raise SceneError(f"scene {self.name!r}: wall_thickness {self.wall_thickness} out of range")
        for i, ob in enumerate(self.obstacles):
            if len(ob) != 4:
                raise SceneError(f"scene {self.name!r}: obstacles[{i}] must be [x, y, w, h]")
            if not _rect_inside(ob, width, height):
                raise SceneError(f"scene {self.name!r}: obstacles[{i}] {list(ob)} lies outside extent {list(self.physical_extent)}")
        if len(self.spawn_region) != 4 or not _rect_inside(self.spawn_region, width, height):
            raise SceneError(f"scene {self.name!r}: spawn {list(self.spawn_region)} lies outside extent {list(self.physical_extent)}")
        if int(self.goal_count) != self.goal_count or self.goal_count < 1:
            raise SceneError(f"scene {self.name!r}: goal_count must be a positive integer")

    def walls(self) -> tuple[Rect, ...]:
        width, height = self.physical_extent
        t = self.wall_thickness
        return (
            (0.0, 0.0, width, t),
            (0.0, height - t, width, t),
            (0.0, 0.0, t, height),
            (width - t, 0.0, t, height),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCENE_SCHEMA_VERSION,
            "name": self.name,
            "extent": list(self.physical_extent),
            "obstacles": [list(ob) for ob in self.obstacles],
            "spawn": list(self.spawn_region),
            "goal_count": int(self.goal_count),
            "wall_thickness": self.wall_thickness,
        }


_SCENE_FIELDS = {"schema_version", "name", "extent", "obstacles", "spawn", "goal_count", "wall_thickness"}


def scene_from_dict(doc: dict, source: str = "<scene>") -> Scene:
    if not isinstance(doc, dict):
        raise SceneError(f"{source}: top level must be an object")
    unknown = set(doc) - _SCENE_FIELDS
    if unknown:
        raise SceneError(f"{source}: unknown field(s) {sorted(unknown)}")
    for key in ("schema_version", "name", "extent", "obstacles", "spawn", "goal_count"):
        if key not in doc:
            raise SceneError(f"{source}: missing required field {key!r}")
    if doc["schema_version"] != SCENE_SCHEMA_VERSION:
        raise SceneError(f"{source}: field 'schema_version': unsupported version {doc['schema_version']!r}")
    try:
        extent = tuple(float(v) for v in doc["extent"])
        obstacles = tuple(tuple(float(v) for v in ob) for ob in doc["obstacles"])
        spawn = tuple(float(v) for v in doc["spawn"])
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{source}: numeric field malformed: {exc}") from None
    if len(extent) != 2:
        raise SceneError(f"{source}: field 'extent' must be [width, height]")
    return Scene(
        name=str(doc["name"]),
        physical_extent=extent,
        obstacles=obstacles,
        spawn_region=spawn,
        goal_count=doc["goal_count"],
        wall_thickness=float(doc.get("wall_thickness", DEFAULT_WALL_THICKNESS)),
    )


def load_scene(path: str | Path) -> Scene:
    """Parse and validate a JSON scene file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneError(f"{path}: cannot read scene file: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}:{exc.lineno}:{exc.colno}: parse error: {exc.msg}") from None
    return scene_from_dict(doc, source=str(path))


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n", encoding="utf-8")


def bundled_scene_path(name: str) -> Path:
    """Path of a scene shipped with the package (``train``, ``test``, ``small_train``, ``small_test``)."""
    ref = resources.files("navdistill") / "scenes" / f"{name}.json"
    path = Path(str(ref))
    if not path.exists():
        raise SceneError(f"no bundled scene named {name!r}")
    return path


def bundled_scene(name: str) -> Scene:
    return load_scene(bundled_scene_path(name))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    resolution: float
    cells: np.ndarray
    occupied: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise GridError(f"resolution must be > 0, got {self.resolution}")
        cells = np.array(self.cells, dtype=np.float32)
        if cells.ndim != 2:
            raise GridError("cells must be 2-D")
        if cells.size and (cells.min() < 0 or cells.max() > 1):
            raise GridError("cell values must lie in [0, 1]")
        cells.setflags(write=False)
        occupied = cells >= 0.5
        occupied.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "occupied", occupied)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        return (self.width * self.resolution, self.height * self.resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = (np.arange(self.width) + 0.5) * self.resolution
        ys = (np.arange(self.height) + 0.5) * self.resolution
        return xs, ys

    def contains(self, x: float, y: float) -> bool:
        w, h = self.extent
        return 0.0 <= x < w and 0.0 <= y < h


def rasterize(scene: Scene, resolution: float = DEFAULT_RESOLUTION) -> OccupancyGrid:
    """Mark a cell occupied iff its center lies in an obstacle or boundary wall."""
    if not resolution > 0:
        raise GridError(f"resolution must be > 0, got {resolution}")
    width_m, height_m = scene.physical_extent
    nx = int(round(width_m / resolution))
    ny = int(round(height_m / resolution))
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    cells = np.zeros((ny, nx), dtype=np.float32)
    for x, y, w, h in scene.walls() + scene.obstacles:
        in_x = (xs >= x) & (xs < x + w)
        in_y = (ys >= y) & (ys < y + h)
        cells[np.ix_(in_y, in_x)] = 1.0
    return OccupancyGrid(resolution=resolution, cells=cells)


# --- kernels -----------------------------------------------------------------


@njit(cache=True)
def _cast_ray(occ, res, ox, oy, angle, max_range):
    height, width = occ.shape
    cx = ox / res
    cy = oy / res
    ix = int(math.floor(cx))
    iy = int(math.floor(cy))
    if occ[iy, ix]:
        return 0.0
    dx = math.cos(angle)
    dy = math.sin(angle)
    inf = np.inf
    if dx > 0.0:
        step_x = 1
        t_delta_x = 1.0 / dx
        t_max_x = (ix + 1 - cx) * t_delta_x
    elif dx < 0.0:
        step_x = -1
        t_delta_x = -1.0 / dx
        t_max_x = (cx - ix) * t_delta_x
    else:
        step_x = 0
        t_delta_x = inf
        t_max_x = inf
    if dy > 0.0:
        step_y = 1
        t_delta_y = 1.0 / dy
        t_max_y = (iy + 1 - cy) * t_delta_y
    elif dy < 0.0:
        step_y = -1
        t_delta_y = -1.0 / dy
        t_max_y = (cy - iy) * t_delta_y
    else:
        step_y = 0
        t_delta_y = inf
        t_max_y = inf
    t_limit = max_range / res
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_delta_x
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_delta_y
        if t >= t_limit:
            return max_range
        if ix < 0 or iy < 0 or ix >= width or iy >= height:
            return t * res
        if occ[iy, ix]:
            return t * res


@njit(cache=True)
def _scan(occ, res, ox, oy, angles, max_range, out):
    for k in range(angles.shape[0]):
        out[k] = _cast_ray(occ, res, ox, oy, angles[k], max_range)


@njit(cache=True)
def _crop(cells, res, px, py, yaw, n, has_goal, gx, gy, sigma, out):
    height, width = cells.shape
    c = math.cos(yaw)
    s = math.sin(yaw)
    half = 0.5 * n * res
    if has_goal:
        gu = c * (gx - px) + s * (gy - py)
        gv = -s * (gx - px) + c * (gy - py)
        has_goal = abs(gu) <= half and abs(gv) <= half
    inv_two_var = 1.0 / (2.0 * sigma * sigma)
    # marker truncated at 5 sigma (value < 4e-6)
    cutoff = 25.0 * sigma * sigma
    inv_res = 1.0 / res
    for r in range(n):
        v = (r + 0.5) * res - half
        for col in range(n):
            u = (col + 0.5) * res - half
            wx = px + c * u - s * v
            wy = py + s * u + c * v
            ix = int(math.floor(wx * inv_res))
            iy = int(math.floor(wy * inv_res))
            if ix < 0 or iy < 0 or ix >= width or iy >= height:
                out[0, r, col] = 1.0
            else:
                out[0, r, col] = cells[iy, ix]
            d2 = (u - gu) ** 2 + (v - gv) ** 2 if has_goal else cutoff
            if d2 < cutoff:
                out[1, r, col] = math.exp(-d2 * inv_two_var)
            else:
                out[1, r, col] = 0.0


@njit(cache=True)
def _collides(occ, res, px, py, radius):
    height, width = occ.shape
    r2 = radius * radius
    ix0 = int(math.floor((px - radius) / res))
    ix1 = int(math.floor((px + radius) / res))
    iy0 = int(math.floor((py - radius) / res))
    iy1 = int(math.floor((py + radius) / res))
    for iy in range(iy0, iy1 + 1):
        for ix in range(ix0, ix1 + 1):
            cx = (ix + 0.5) * res
            cy = (iy + 0.5) * res
            if (cx - px) ** 2 + (cy - py) ** 2 <= r2:
                # outside the grid counts as wall
                if ix < 0 or iy < 0 or ix >= width or iy >= height:
                    return True
                if occ[iy, ix]:
                    return True
    return False


# --- queries -----------------------------------------------------------------


def _check_origin(grid: OccupancyGrid, origin: Pose) -> None:
    if not grid.contains(origin.x, origin.y):
        raise GridError(f"origin ({origin.x:.3f}, {origin.y:.3f}) outside grid extent {grid.extent}")


def raycast(grid: OccupancyGrid, origin: Pose, angle_offset: float, max_range: float) -> float:
    """Distance along ``yaw + angle_offset`` to the first occupied cell, clamped to ``max_range``."""
    _check_origin(grid, origin)
    return float(_cast_ray(grid.occupied, grid.resolution, origin.x, origin.y, origin.yaw + angle_offset, float(max_range)))


def ray_offsets(n_rays: int, fov: float) -> np.ndarray:
    if n_rays < 1:
        raise GridError(f"n_rays must be >= 1, got {n_rays}")
    if n_rays == 1:
        return np.zeros(1)
    return -fov / 2 + np.arange(n_rays) * (fov / (n_rays - 1))


def scan(grid: OccupancyGrid, origin: Pose, n_rays: int = 60, fov: float = math.radians(270.0),
         max_range: float = 5.0) -> np.ndarray:
    """Lidar sweep from ``-fov/2`` to ``+fov/2``, normalized by ``max_range`` into [0, 1]."""
    offsets = ray_offsets(n_rays, fov)
    _check_origin(grid, origin)
    out = np.empty(n_rays)
    _scan(grid.occupied, grid.resolution, origin.x, origin.y, origin.yaw + offsets, float(max_range), out)
    return out / max_range


@lru_cache(maxsize=32)
def _footprint(n: int, resolution: float, robot_radius: float) -> np.ndarray:
    centers = (np.arange(n) + 0.5) * resolution - 0.5 * n * resolution
    disk = (centers[None, :] ** 2 + centers[:, None] ** 2 <= robot_radius ** 2).astype(np.float32)
    disk.setflags(write=False)
    return disk


def footprint_disk(n: int, resolution: float, robot_radius: float) -> np.ndarray:
    return _footprint(int(n), float(resolution), float(robot_radius))


def goal_blob(n: int, resolution: float, pose: Pose, goal: Sequence[float] | None, sigma: float) -> np.ndarray:
    """Gaussian marker at ``goal`` in window coordinates; zeros when off-window."""
    out = np.zeros((n, n), dtype=np.float32)
    if goal is None:
        return out
    half = 0.5 * n * resolution
    dxw, dyw = goal[0] - pose.x, goal[1] - pose.y
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    gu = c * dxw + s * dyw
    gv = -s * dxw + c * dyw
    if abs(gu) > half or abs(gv) > half:
        return out
    centers = (np.arange(n) + 0.5) * resolution - half
    du = (centers - gu) ** 2
    dv = (centers - gv) ** 2
    out[:] = np.exp(-(dv[:, None] + du[None, :]) / (2.0 * sigma ** 2))
    return out


def crop_egocentric(grid: OccupancyGrid, pose: Pose, window_extent: float = 2.56, goals: Sequence | None = None,
                    active_goal_index: int | None = 0, robot_radius: float = 0.18,
                    goal_sigma: float = 0.1) -> np.ndarray:
    """Heading-aligned ``3 x n x n`` crop: occupancy, active-goal marker, robot footprint.

    Samples use nearest-neighbour lookup; samples off the grid read as occupied.
    """
    if not window_extent > 0:
        raise GridError(f"window_extent must be > 0, got {window_extent}")
    n_float = window_extent / grid.resolution
    n = int(round(n_float))
    if abs(n - n_float) > 1e-6 or n < 1:
        raise GridError(f"window_extent {window_extent} is not a whole number of cells at {grid.resolution} m/cell")
    goal = None
    if goals is not None and active_goal_index is not None and 0 <= active_goal_index < len(goals):
        goal = goals[active_goal_index]
    out = np.empty((3, n, n), dtype=np.float32)
    gx, gy = (float(goal[0]), float(goal[1])) if goal is not None else (0.0, 0.0)
    _crop(grid.cells, grid.resolution, pose.x, pose.y, pose.yaw, n, goal is not None, gx, gy, float(goal_sigma), out)
    out[2] = footprint_disk(n, grid.resolution, robot_radius)
    return out


def check_collision(grid: OccupancyGrid, pose: Pose, robot_radius: float) -> bool:
    """True iff an occupied cell center (or off-grid cell) lies within ``robot_radius``."""
    if not robot_radius > 0:
        raise GridError(f"robot_radius must be > 0, got {robot_radius}")
    return bool(_collides(grid.occupied, grid.resolution, pose.x, pose.y, float(robot_radius)))
