from __future__ import annotations

import math

import numpy as np
import pytest

from lifelong_nav.world import OccupancyGrid, bundled_environment, close_boundary


def box_grid(width: int, height: int, resolution: float = 0.1, walls=()) -> OccupancyGrid:
    """Closed rectangular room; ``walls`` are (ix0, iy0, ix1, iy1) inclusive blocks."""
    cells = np.zeros((height, width), dtype=bool)
    for ix0, iy0, ix1, iy1 in walls:
        cells[iy0 : iy1 + 1, ix0 : ix1 + 1] = True
    return OccupancyGrid(close_boundary(cells), resolution)


def ray_oracle(grid: OccupancyGrid, origin, angle: float, max_range: float) -> float:
    """Slab entry distance of the ray into every occupied cell, minimized."""
    ox, oy = origin
    dx, dy = math.cos(angle), math.sin(angle)
    res = grid.resolution
    iy, ix = np.nonzero(grid.cells)
    x0 = grid.origin[0] + ix * res
    y0 = grid.origin[1] + iy * res
    with np.errstate(divide="ignore", invalid="ignore"):
        if abs(dx) > 1e-15:
            tx0, tx1 = (x0 - ox) / dx, (x0 + res - ox) / dx
            txn, txf = np.minimum(tx0, tx1), np.maximum(tx0, tx1)
        else:
            inside = (ox >= x0) & (ox < x0 + res)
            txn = np.where(inside, -np.inf, np.inf)
            txf = np.where(inside, np.inf, -np.inf)
        if abs(dy) > 1e-15:
            ty0, ty1 = (y0 - oy) / dy, (y0 + res - oy) / dy
            tyn, tyf = np.minimum(ty0, ty1), np.maximum(ty0, ty1)
        else:
            inside = (oy >= y0) & (oy < y0 + res)
            tyn = np.where(inside, -np.inf, np.inf)
            tyf = np.where(inside, np.inf, -np.inf)
    t_in = np.maximum(txn, tyn)
    t_out = np.minimum(txf, tyf)
    hit = (t_in <= t_out) & (t_out > 0)
    if not hit.any():
        return max_range
    return min(float(np.maximum(t_in[hit], 0.0).min()), max_range)


def disc_hits_cell_oracle(grid: OccupancyGrid, x: float, y: float, r: float) -> bool:
    """Open disc overlaps some occupied square: point-to-box distance < r."""
    res = grid.resolution
    iy, ix = np.nonzero(grid.cells)
    x0 = grid.origin[0] + ix * res
    y0 = grid.origin[1] + iy * res
    ddx = np.maximum(np.maximum(x0 - x, 0.0), x - (x0 + res))
    ddy = np.maximum(np.maximum(y0 - y, 0.0), y - (y0 + res))
    return bool((np.hypot(ddx, ddy) < r).any())


@pytest.fixture(scope="session")
def bundled():
    return {i: bundled_environment(i) for i in (1, 2, 3)}


# one line per acceptance criterion, repeated after the run summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
