"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import REGIMES, TRAINED_REGIMES, load_config, print_schema
from .report import write_reports
from .study import evaluate_regime, run_collect, run_study, study_summary, train_regime, write_config


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lifelong-nav", description="Self-improving lifelong navigation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="run the initial policy and mine corrections for one environment")
    p.add_argument("--config", required=True)
    p.add_argument("--env", type=int, required=True, help="1-based environment index")

    p = sub.add_parser("train", help="train every policy of a regime")
    p.add_argument("--config", required=True)
    p.add_argument("--regime", required=True, choices=TRAINED_REGIMES)

    p = sub.add_parser("eval", help="evaluate a regime on every environment")
    p.add_argument("--config", required=True)
    p.add_argument("--regime", required=True, choices=REGIMES)

    p = sub.add_parser("report", help="render tables and figures from a run directory")
    p.add_argument("--run", required=True)

    p = sub.add_parser("study", help="collect, train, evaluate and report in one go")
    p.add_argument("--config", required=True)

    p = sub.add_parser("config", help="configuration helpers")
    p.add_argument("--print-schema", action="store_true", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "config":
        print(print_schema())
        return 0
    if args.command == "report":
        for name, path in write_reports(args.run).items():
            print(f"{name}: {path}")
        return 0

    cfg = load_config(args.config)
    write_config(cfg)
    t0 = time.perf_counter()
    if args.command == "collect":
        col = run_collect(cfg, args.env)
        for t, m in enumerate(col.metrics):
            print(f"trial {t}: time {m.traversal_time:.1f} s, recoveries {m.recoveries}, collisions {m.collisions}")
        print(f"corrections {col.n_events}, segment buffer sizes {[len(b) for b in col.segments]}")
    elif args.command == "train":
        audit = train_regime(cfg, args.regime)
        for e in audit["envs"]:
            print(f"env {e['env_id']}: buffers {e['buffer_sizes']}, memory {e['memory_sizes']}, projections {e['projections']}")
    elif args.command == "eval":
        rows = evaluate_regime(cfg, args.regime)
        print(f"{args.regime}: {len(rows)} evaluation trials")
    elif args.command == "study":
        print(study_summary(run_study(cfg)))
    print(f"done in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
