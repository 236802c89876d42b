"""Occupancy-grid worlds: map loading, lidar raycasting and collision queries.

Grid convention: ``cells[iy, ix]`` covers
``[ox + ix*res, ox + (ix+1)*res) x [oy + iy*res, oy + (iy+1)*res)`` with row
0 at the bottom of the map; True means occupied.  Lidar beams are ordered
counterclockwise starting from the rightmost beam.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels


class MapParseError(ValueError):
    pass


class MapValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    cells: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError("cells must be a non-empty 2D array")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(ix, iy) of the cell containing a world point."""
        return (
            int(math.floor((x - self.origin[0]) / self.resolution)),
            int(math.floor((y - self.origin[1]) / self.resolution)),
        )

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )

    def is_free(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return not _kernels.occupied(self.cells, ix, iy)

    def to_cell_units(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.origin[0]) / self.resolution, (y - self.origin[1]) / self.resolution

    @cached_property
    def fingerprint(self) -> bytes:
        return np.packbits(self.cells).tobytes() + repr((self.cells.shape, self.resolution, self.origin)).encode()


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    name: str
    grid: OccupancyGrid
    start: tuple[float, float, float]
    goal: tuple[float, float]
    goal_tolerance: float = 0.3
    source: Path | None = field(default=None, compare=False)


def close_boundary(cells: np.ndarray) -> np.ndarray:
    cells = np.array(cells, dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    return cells


def _parse_numbers(line: str, keyword: str, count: int, lineno: int) -> list[float]:
    parts = line.split()
    if len(parts) != count + 1 or parts[0] != keyword:
        raise MapParseError(f"line {lineno}: expected '{keyword}' followed by {count} numbers")
    try:
        return [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise MapParseError(f"line {lineno}: {exc}") from None


def connected(grid: OccupancyGrid, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """8-connected flood fill over free cells."""
    cells = grid.cells
    seen = np.zeros_like(cells)
    queue = deque([a])
    seen[a[1], a[0]] = True
    while queue:
        ix, iy = queue.popleft()
        if (ix, iy) == b:
            return True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nx, ny = ix + dx, iy + dy
                if 0 <= nx < grid.width and 0 <= ny < grid.height and not cells[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((nx, ny))
    return False


def load_environment(text: str, name: str = "env", goal_tolerance: float = 0.3) -> EnvironmentSpec:
    """Parse the ASCII map format and validate start/goal.

    Format::

        resolution <meters>
        start <x> <y> <theta>
        goal <x> <y>
        <grid rows, top row first; '#' occupied, '.' free>
    """
    lines = [ln.rstrip("\r\n") for ln in text.splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) < 4:
        raise MapParseError("map needs a resolution, start, goal line and at least one grid row")
    (resolution,) = _parse_numbers(lines[0], "resolution", 1, 1)
    if resolution <= 0:
        raise MapParseError("line 1: resolution must be positive")
    sx, sy, sth = _parse_numbers(lines[1], "start", 3, 2)
    gx, gy = _parse_numbers(lines[2], "goal", 2, 3)
    rows = [ln.strip() for ln in lines[3:]]
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MapParseError(f"line {i + 4}: row length {len(row)} != {width}")
        bad = set(row) - {"#", "."}
        if bad:
            raise MapParseError(f"line {i + 4}: unexpected characters {sorted(bad)}")
    cells = np.array([[c == "#" for c in row] for row in reversed(rows)], dtype=bool)
    grid = OccupancyGrid(close_boundary(cells), resolution)

    start_cell = grid.cell_of(sx, sy)
    goal_cell = grid.cell_of(gx, gy)
    if not grid.is_free(sx, sy):
        raise MapValidationError("start is occupied")
    if not grid.is_free(gx, gy):
        raise MapValidationError("goal is occupied")
    if not connected(grid, start_cell, goal_cell):
        raise MapValidationError("start and goal are disconnected")
    return EnvironmentSpec(name, grid, (sx, sy, sth), (gx, gy), goal_tolerance)


def read_environment(path: str | Path, goal_tolerance: float = 0.3) -> EnvironmentSpec:
    path = Path(path)
    spec = load_environment(path.read_text(), name=path.stem, goal_tolerance=goal_tolerance)
    return EnvironmentSpec(spec.name, spec.grid, spec.start, spec.goal, spec.goal_tolerance, source=path)


def dump_environment(spec: EnvironmentSpec) -> str:
    g = spec.grid
    head = [
        f"resolution {g.resolution!r}",
        "start {!r} {!r} {!r}".format(*spec.start),
        "goal {!r} {!r}".format(*spec.goal),
    ]
    rows = ["".join("#" if c else "." for c in row) for row in g.cells[::-1]]
    return "\n".join(head + rows) + "\n"


def raycast(grid: OccupancyGrid, origin: tuple[float, float], angle: float, max_range: float) -> float:
    """Distance (m) to the near face of the first occupied cell along a ray."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    px, py = grid.to_cell_units(*origin)
    d = _kernels.raycast_cells(grid.cells, px, py, float(angle), max_range / grid.resolution)
    if d < 0:
        raise ValueError("raycast from occupied cell")
    return min(d * grid.resolution, max_range)


def beam_angles(theta: float, n_beams: int, fov: float) -> np.ndarray:
    if n_beams == 1:
        return np.array([theta])
    return theta - 0.5 * fov + np.arange(n_beams) * (fov / (n_beams - 1))


def scan(
    grid: OccupancyGrid,
    pose: tuple[float, float, float],
    n_beams: int = 720,
    fov: float = math.radians(270.0),
    max_range: float = 5.0,
) -> np.ndarray:
    px, py = grid.to_cell_units(pose[0], pose[1])
    out = _kernels.scan_cells(grid.cells, px, py, float(pose[2]), n_beams, fov, max_range / grid.resolution)
    if out.size and out.min() < 0:
        raise ValueError("raycast from occupied cell")
    return np.minimum(out * grid.resolution, max_range)


def obstacle_distance(grid: OccupancyGrid, point: tuple[float, float], cap: float) -> float:
    """Exact distance (m) from a point to the nearest occupied cell, clipped to ``cap``."""
    px, py = grid.to_cell_units(*point)
    return _kernels.obstacle_distance(grid.cells, px, py, cap / grid.resolution) * grid.resolution


def collision_check(grid: OccupancyGrid, pose, robot_radius: float) -> bool:
    """True iff an occupied cell overlaps the open disc of ``robot_radius``."""
    if robot_radius <= 0:
        raise ValueError("robot_radius must be positive")
    r = robot_radius / grid.resolution
    px, py = grid.to_cell_units(pose[0], pose[1])
    return _kernels.obstacle_distance(grid.cells, px, py, r) < r


def clearance(grid: OccupancyGrid, pose, robot_radius: float, cap: float) -> float:
    """Gap between the robot disc edge and the nearest obstacle, clipped to ``cap``."""
    return obstacle_distance(grid, (pose[0], pose[1]), robot_radius + cap) - robot_radius


BUNDLED_MAPS = Path(__file__).parent / "maps"


def bundled_environment(index: int, goal_tolerance: float = 0.3) -> EnvironmentSpec:
    return read_environment(BUNDLED_MAPS / f"env{index}.map", goal_tolerance)
