"""Fixed global path (Dijkstra, 8-connected) and local-goal extraction."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .world import OccupancyGrid

SQRT2 = math.sqrt(2.0)
_NEIGHBORS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GlobalPath:
    waypoints: np.ndarray  # (N, 2) world points
    cumulative_arclength: np.ndarray  # (N,)
    cost: float

    def __len__(self) -> int:
        return len(self.waypoints)


def inflated_blocked(grid: OccupancyGrid, radius: float) -> np.ndarray:
    """Cells that are occupied or whose center lies within ``radius`` of an
    occupied cell."""
    blocked = grid.cells.copy()
    if radius <= 0:
        return blocked
    cap = radius / grid.resolution
    for iy, ix in zip(*np.nonzero(~grid.cells)):
        if _kernels.obstacle_distance(grid.cells, ix + 0.5, iy + 0.5, cap) < cap:
            blocked[iy, ix] = True
    return blocked


def dijkstra(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> tuple[list[tuple[int, int]], float]:
    """Shortest 8-connected path between (row, col) cells, in cell units.

    Ties on cost pop in (row, col) lexicographic order; a node's parent is the
    first neighbor that reached it with the minimal cost.
    """
    rows, cols = blocked.shape
    dist = {start: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    heap = [(0.0, start[0], start[1])]
    done = set()
    while heap:
        d, r, c = heapq.heappop(heap)
        node = (r, c)
        if node in done:
            continue
        done.add(node)
        if node == goal:
            path = [node]
            while path[-1] != start:
                path.append(parent[path[-1]])
            return path[::-1], d
        for dr, dc in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or blocked[nr, nc]:
                continue
            nd = d + (SQRT2 if dr and dc else 1.0)
            if nd < dist.get((nr, nc), math.inf):
                dist[(nr, nc)] = nd
                parent[(nr, nc)] = node
                heapq.heappush(heap, (nd, nr, nc))
    raise NoPathError("no path")


def plan_global(
    grid: OccupancyGrid,
    start: tuple[float, float],
    goal: tuple[float, float],
    inflation_radius: float = 0.0,
) -> GlobalPath:
    sx, sy = grid.cell_of(start[0], start[1])
    gx, gy = grid.cell_of(goal[0], goal[1])
    if not grid.is_free(*start[:2]) or not grid.is_free(*goal[:2]):
        raise ValueError("start and goal must lie in free cells")
    blocked = inflated_blocked(grid, inflation_radius)
    # endpoints may sit inside the inflation band
    blocked[sy, sx] = False
    blocked[gy, gx] = False
    cells, cost = dijkstra(blocked, (sy, sx), (gy, gx))
    pts = np.array([grid.cell_center(c, r) for r, c in cells], dtype=float)
    seg = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    arclength = np.concatenate([[0.0], np.cumsum(seg)])
    return GlobalPath(pts, arclength, cost * grid.resolution)


def point_at_arclength(path: GlobalPath, s: float) -> np.ndarray:
    """Linear interpolation along the waypoint polyline, clamped to its end."""
    arc = path.cumulative_arclength
    if s >= arc[-1]:
        return path.waypoints[-1].copy()
    i = int(np.searchsorted(arc, s, side="right"))
    i = max(i, 1)
    t = (s - arc[i - 1]) / (arc[i] - arc[i - 1])
    return path.waypoints[i - 1] + t * (path.waypoints[i] - path.waypoints[i - 1])


def nearest_waypoint(path: GlobalPath, x: float, y: float) -> int:
    d2 = (path.waypoints[:, 0] - x) ** 2 + (path.waypoints[:, 1] - y) ** 2
    return int(np.argmin(d2))


def local_goal_world(path: GlobalPath, pose, lookahead: float = 1.0) -> np.ndarray:
    i = nearest_waypoint(path, pose[0], pose[1])
    return point_at_arclength(path, path.cumulative_arclength[i] + lookahead)


def to_robot_frame(point, pose) -> tuple[float, float]:
    dx = point[0] - pose[0]
    dy = point[1] - pose[1]
    c, s = math.cos(pose[2]), math.sin(pose[2])
    return (c * dx + s * dy, -s * dx + c * dy)


def local_goal(path: GlobalPath, pose, lookahead: float = 1.0) -> tuple[float, float]:
    """Point ``lookahead`` meters past the nearest waypoint, in the robot frame."""
    return to_robot_frame(local_goal_world(path, pose, lookahead), pose)
