"""Aggregate evaluation trials into grids, a summary table and figures."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import REGIMES

GRID_FIELDS = ["deploy_env", "train_env", "segment", "mean_time", "std_time", "mean_rec", "mean_col", "n"]
PLOT_FIELDS = ["regime", "segment", "mean_time", "std_time", "mean_rec", "mean_col", "n"]
LABELS = {"dwa_only": "Initial policy", "sequential": "Sequential", "lifelong": "Lifelong", "individual": "Individual"}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    mean_time: float
    std_time: float
    mean_rec: float
    mean_col: float
    n: int


EvalGrid = dict  # (deploy_env, train_env, segment) -> Cell


def aggregate(rows: list[dict]) -> EvalGrid:
    """Group trial rows into cells; std is the population standard deviation."""
    groups: dict[tuple[int, int, int], list[dict]] = defaultdict(list)
    for r in rows:
        groups[(int(r["deploy_env"]), int(r["train_env"]), int(r["segment"]))].append(r)
    grid = {}
    for key in sorted(groups):
        g = groups[key]
        t = np.array([float(r["time"]) for r in g])
        grid[key] = Cell(
            float(t.mean()),
            float(t.std()),
            float(np.mean([int(r["recoveries"]) for r in g])),
            float(np.mean([int(r["collisions"]) for r in g])),
            len(g),
        )
    return grid


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def write_grid_csv(grid: EvalGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_FIELDS)
        for (dep, tr, seg), c in sorted(grid.items()):
            w.writerow([dep, tr, seg, _fmt(c.mean_time), _fmt(c.std_time), _fmt(c.mean_rec), _fmt(c.mean_col), c.n])


def read_grid_csv(path: str | Path) -> EvalGrid:
    validate_grid_csv(path)
    grid = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            grid[(int(r["deploy_env"]), int(r["train_env"]), int(r["segment"]))] = Cell(
                float(r["mean_time"]), float(r["std_time"]), float(r["mean_rec"]), float(r["mean_col"]), int(r["n"])
            )
    return grid


def validate_grid_csv(path: str | Path) -> int:
    """Check header, types and value ranges; returns the row count."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != GRID_FIELDS:
            raise SchemaError(f"{path}: header {header} != {GRID_FIELDS}")
        n = 0
        for i, row in enumerate(reader, start=2):
            if len(row) != len(GRID_FIELDS):
                raise SchemaError(f"{path}:{i}: expected {len(GRID_FIELDS)} fields")
            try:
                dep, tr, seg, cnt = int(row[0]), int(row[1]), int(row[2]), int(row[7])
                mt, st, mr, mc = (float(x) for x in row[3:7])
            except ValueError as exc:
                raise SchemaError(f"{path}:{i}: {exc}") from None
            if dep < 1 or tr < 0 or seg < 0 or cnt < 1:
                raise SchemaError(f"{path}:{i}: index out of range")
            if not (0 < mt <= 100.0 and st >= 0 and mr >= 0 and mc >= 0):
                raise SchemaError(f"{path}:{i}: value out of range")
            n += 1
    return n


def final_cell(grid: EvalGrid, regime: str, deploy: int, n_envs: int, n_segments: int) -> Cell | None:
    """Cell reported for a regime in the summary table."""
    if regime == "dwa_only":
        return grid.get((deploy, 0, 0))
    if regime == "individual":
        return grid.get((deploy, deploy, n_segments))
    return grid.get((deploy, n_envs, n_segments))


def markdown_table(grids: dict[str, EvalGrid], n_envs: int, n_segments: int) -> str:
    lines = [
        "| Environment | Method | Time (s) | Rec. | Col. |",
        "|---|---|---|---|---|",
    ]
    for dep in range(1, n_envs + 1):
        for regime in REGIMES:
            if regime not in grids:
                continue
            c = final_cell(grids[regime], regime, dep, n_envs, n_segments)
            if c is None:
                continue
            lines.append(
                f"| {dep} | {LABELS[regime]} | {c.mean_time:.1f} ± {c.std_time:.1f} | {c.mean_rec:.2f} | {c.mean_col:.2f} |"
            )
    return "\n".join(lines) + "\n"


def write_plot_data(grids: dict[str, EvalGrid], out: Path, n_envs: int) -> list[Path]:
    """One CSV per (deploy, train) subplot with a line per trained regime."""
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for dep in range(1, n_envs + 1):
        for tr in range(1, n_envs + 1):
            p = out / f"deploy{dep}_train{tr}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(PLOT_FIELDS)
                for regime in REGIMES:
                    grid = grids.get(regime)
                    if grid is None or regime == "dwa_only":
                        continue
                    for (d, t, seg), c in sorted(grid.items()):
                        if d == dep and t == tr:
                            w.writerow(
                                [regime, seg, _fmt(c.mean_time), _fmt(c.std_time), _fmt(c.mean_rec), _fmt(c.mean_col), c.n]
                            )
            paths.append(p)
    return paths


def plot_grid(grids: dict[str, EvalGrid], path: Path, n_envs: int) -> None:
    """Deploy-by-train panel of traversal time against training segment."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(n_envs, n_envs, figsize=(3.2 * n_envs, 2.6 * n_envs), sharex=True, sharey=True, squeeze=False)
    for dep in range(1, n_envs + 1):
        for tr in range(1, n_envs + 1):
            ax = axes[dep - 1][tr - 1]
            for regime in ("sequential", "lifelong", "individual"):
                grid = grids.get(regime)
                if grid is None:
                    continue
                cells = sorted((seg, c) for (d, t, seg), c in grid.items() if d == dep and t == tr)
                if not cells:
                    continue
                x = [s for s, _ in cells]
                y = np.array([c.mean_time for _, c in cells])
                e = np.array([c.std_time for _, c in cells])
                ax.plot(x, y, marker="o", ms=3, label=LABELS[regime])
                ax.fill_between(x, y - e, y + e, alpha=0.15)
            if "dwa_only" in grids and (dep, 0, 0) in grids["dwa_only"]:
                ax.axhline(grids["dwa_only"][(dep, 0, 0)].mean_time, color="0.5", ls="--", lw=0.8)
            if dep == n_envs:
                ax.set_xlabel(f"segment (train env {tr})")
            if tr == 1:
                ax.set_ylabel(f"deploy env {dep}\ntime (s)")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_reports(run_dir: str | Path) -> dict[str, Path]:
    """Render every report artifact from ``run_dir/eval``."""
    from .study import read_eval

    run_dir = Path(run_dir)
    eval_dir = run_dir / "eval"
    if not eval_dir.is_dir():
        raise FileNotFoundError(f"{eval_dir}: no evaluation results")
    out = run_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    grids = {}
    for regime in REGIMES:
        p = eval_dir / f"{regime}.csv"
        if p.exists():
            grids[regime] = aggregate(read_eval(p))
    if not grids:
        raise FileNotFoundError(f"{eval_dir}: no evaluation results")
    n_envs = max(max(k[0] for k in g) for g in grids.values())
    trained = [g for r, g in grids.items() if r != "dwa_only"]
    n_segments = max((max(k[2] for k in g) for g in trained), default=0)
    written = {}
    for regime, grid in grids.items():
        p = out / f"grid_{regime}.csv"
        write_grid_csv(grid, p)
        written[f"grid_{regime}"] = p
    (out / "table.md").write_text(markdown_table(grids, n_envs, n_segments))
    written["table"] = out / "table.md"
    if trained:
        write_plot_data(grids, out / "plots", n_envs)
        plot_grid(grids, out / "figure_grid.png", n_envs)
        written["figure"] = out / "figure_grid.png"
    return written
