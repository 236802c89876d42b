"""Regenerate the bundled environment maps.

Each map is a closed room at 0.05 m resolution whose global path runs
through passages narrow enough that the initial planner hesitates.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

RES = 0.05


class Canvas:
    def __init__(self, width_m: float, height_m: float):
        self.cells = np.zeros((round(height_m / RES), round(width_m / RES)), dtype=bool)

    def _idx(self, v: float) -> int:
        return int(round(v / RES))

    def block(self, x0: float, y0: float, x1: float, y1: float) -> None:
        self.cells[self._idx(y0) : self._idx(y1), self._idx(x0) : self._idx(x1)] = True

    def clear(self, x0: float, y0: float, x1: float, y1: float) -> None:
        self.cells[self._idx(y0) : self._idx(y1), self._idx(x0) : self._idx(x1)] = False

    def wall_x(self, x: float, doors: list[tuple[float, float]], thick: float = 0.1) -> None:
        """Vertical wall at x with door openings given as (center y, width)."""
        self.block(x, 0.0, x + thick, self.cells.shape[0] * RES)
        for yc, w in doors:
            self.clear(x, yc - w / 2, x + thick, yc + w / 2)

    def wall_y(self, y: float, doors: list[tuple[float, float]], thick: float = 0.1) -> None:
        self.block(0.0, y, self.cells.shape[1] * RES, y + thick)
        for xc, w in doors:
            self.clear(xc - w / 2, y, xc + w / 2, y + thick)

    def render(self, start, goal) -> str:
        cells = self.cells.copy()
        cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True
        head = [f"resolution {RES}", "start {} {} {}".format(*start), "goal {} {}".format(*goal)]
        rows = ["".join("#" if c else "." for c in row) for row in cells[::-1]]
        return "\n".join(head + rows) + "\n"


def env1() -> str:
    """Two doorways stepping down to the right across a long hall."""
    c = Canvas(10.0, 4.5)
    c.wall_x(3.5, [(2.3, 0.8)])
    c.wall_x(7.0, [(1.2, 0.85)])
    return c.render((0.8, 3.4, 0.0), (9.2, 1.0))


def env2() -> str:
    """A narrow corridor that bends left."""
    c = Canvas(7.0, 7.0)
    c.block(0.0, 0.0, 7.0, 7.0)
    c.clear(0.3, 0.3, 3.0, 2.7)  # entry room
    c.clear(3.0, 1.1, 5.3, 1.9)  # corridor east
    c.clear(4.5, 1.1, 5.3, 4.5)  # corridor north
    c.clear(3.5, 4.5, 6.7, 6.7)  # exit room
    return c.render((0.9, 1.5, 0.0), (5.0, 6.0))


def env3() -> str:
    """Thick walls whose gaps step up to the left."""
    c = Canvas(8.0, 4.5)
    c.wall_x(2.6, [(2.25, 0.75)], thick=0.4)
    c.wall_x(5.0, [(3.4, 0.8)], thick=0.4)
    return c.render((0.8, 1.1, 0.0), (7.2, 3.5))


MAPS = {1: env1, 2: env2, 3: env3}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src" / "lifelong_nav" / "maps")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, fn in MAPS.items():
        (args.out / f"env{i}.map").write_text(fn())
        print(args.out / f"env{i}.map")


if __name__ == "__main__":
    main()
