"""Experiment orchestration: collection with the initial policy, cumulative
segment buffers, the training regimes and the evaluation grid.

Run directory layout::

    config.txt                      resolved configuration
    logs/collect_env<k>.csv         per-trial collection metrics
    logs/audit_<regime>.json        memory-budget peaks and training counts
    buffers/env<k>_seg<j>.buf       cumulative training buffer j of environment k
    memory/lifelong_env<k>.buf      long-term memory after environment k
    checkpoints/<regime>/env<k>_seg<j>.ckpt
    eval/<regime>.csv               one row per evaluation trial
    reports/                        grid CSVs, markdown table, plot data, figures

Seeds: every random stream is ``SeedSequence([seed, purpose, a, b])`` with
purpose 1 = network init, 2 = training (a = environment, b = segment),
3 = collection start jitter (a = environment, b = trial), 4 = evaluation
start jitter (a = deploy environment, b = trial).  Training and jitter
streams do not depend on the regime, so regimes are comparable
trial-for-trial.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import policy_net
from ..global_planner import GlobalPath, NoPathError, plan_global
from ..kinematics import TrialMetrics, run_episode
from ..lifelong import (
    CorrectionRecorder,
    GatedController,
    LongTermBuffer,
    MemoryMonitor,
    TrainingBuffer,
    TrainStats,
    build_segments,
    consolidate,
    load_training_buffer,
    save_long_term,
    save_training_buffer,
    shrink_sections,
    train_environment,
)
from ..world import EnvironmentSpec, collision_check, read_environment
from .config import TRAINED_REGIMES, RunConfig, dump_config

log = logging.getLogger(__name__)

INIT, TRAIN, COLLECT_JITTER, EVAL_JITTER = 1, 2, 3, 4

EVAL_FIELDS = [
    "regime",
    "deploy_env",
    "train_env",
    "segment",
    "trial",
    "time",
    "recoveries",
    "collisions",
    "success",
    "learned_steps",
]


class StudyError(RuntimeError):
    pass


def rng_for(seed: int, purpose: int, a: int = 0, b: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, a, b]))


# ------------------------------------------------------------ environments


@lru_cache(maxsize=32)
def _load(path: str, goal_tolerance: float, inflation: float, radius: float) -> tuple[EnvironmentSpec, GlobalPath]:
    env = read_environment(path, goal_tolerance)
    try:
        path_ = plan_global(env.grid, env.start[:2], env.goal, inflation)
    except NoPathError:
        path_ = plan_global(env.grid, env.start[:2], env.goal, radius)
    return env, path_


def environment(cfg: RunConfig, env_id: int) -> tuple[EnvironmentSpec, GlobalPath]:
    """Environment ``env_id`` (1-based) with its fixed global path."""
    if not 1 <= env_id <= len(cfg.environments):
        raise StudyError(f"environment {env_id} out of range 1..{len(cfg.environments)}")
    p = cfg.environments[env_id - 1]
    return _load(str(p), cfg.goal_tolerance, cfg.planner_inflation, cfg.sim.robot_radius)


def start_pose(cfg: RunConfig, env: EnvironmentSpec, purpose: int, env_id: int, trial: int):
    """Nominal start perturbed by the trial's jitter stream (nominal if the
    perturbed pose would collide)."""
    rng = rng_for(cfg.seed, purpose, env_id, trial)
    dx, dy = rng.uniform(-cfg.start_jitter_xy, cfg.start_jitter_xy, 2) if cfg.start_jitter_xy > 0 else (0.0, 0.0)
    dth = rng.uniform(-cfg.start_jitter_theta, cfg.start_jitter_theta) if cfg.start_jitter_theta > 0 else 0.0
    x, y, th = env.start
    pose = (x + float(dx), y + float(dy), th + float(dth))
    if collision_check(env.grid, pose, cfg.sim.robot_radius):
        return env.start
    return pose


def capacity(cfg: RunConfig, env_id: int) -> int:
    """Per-environment training-buffer budget n / k."""
    return cfg.memory_budget // env_id


# ------------------------------------------------------------- collection


@dataclass
class Collection:
    env_id: int
    metrics: list[TrialMetrics]
    segments: list[TrainingBuffer]
    n_flagged: int
    n_events: int
    total_steps: int
    debug_checks: int


def collect(cfg: RunConfig, env_id: int, monitor: MemoryMonitor | None = None) -> Collection:
    """Initial-policy trials with the full correction-recording path active;
    the streaming buffer persists across trials."""
    env, path = environment(cfg, env_id)
    cap = capacity(cfg, env_id)
    recorder = CorrectionRecorder(
        env_id,
        capacity=cap,
        eta=cfg.eta,
        stream_capacity=cfg.stream_capacity,
        include_goal=cfg.include_goal,
        monitor=monitor,
        debug=cfg.debug,
    )
    metrics = []
    for trial in range(cfg.schedule.collection_trials):
        ctrl = GatedController(env, path, None, cfg.dwa, cfg.sensor, cfg.sim.limits, recorder=recorder)
        try:
            m = run_episode(
                env,
                ctrl,
                cfg.sim.dt,
                cfg.sim.timeout,
                cfg.sim.robot_radius,
                cfg.sim.limits,
                start=start_pose(cfg, env, COLLECT_JITTER, env_id, trial),
            )
        except Exception as exc:
            raise StudyError(f"collection env {env_id} trial {trial}: {exc}") from exc
        metrics.append(m)
    segments = build_segments(recorder.events, recorder.step_index, cap, cfg.schedule.segments)
    return Collection(
        env_id, metrics, segments, recorder.n_flagged, len(recorder.events), recorder.step_index, recorder.debug_checks
    )


def _dirs(cfg: RunConfig) -> dict[str, Path]:
    root = Path(cfg.run_dir)
    d = {k: root / k for k in ("logs", "buffers", "memory", "checkpoints", "eval", "reports")}
    d["root"] = root
    return d


def write_config(cfg: RunConfig) -> None:
    root = Path(cfg.run_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(dump_config(cfg))


def run_collect(cfg: RunConfig, env_id: int) -> Collection:
    d = _dirs(cfg)
    for k in ("logs", "buffers"):
        d[k].mkdir(parents=True, exist_ok=True)
    monitor = MemoryMonitor(cfg.stream_capacity, cfg.memory_budget)
    col = collect(cfg, env_id, monitor)
    for j, bk in enumerate(col.segments, start=1):
        save_training_buffer(d["buffers"] / f"env{env_id}_seg{j}.buf", bk, env_id)
    with open(d["logs"] / f"collect_env{env_id}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "time", "recoveries", "collisions", "success"])
        for t, m in enumerate(col.metrics):
            w.writerow([t, f"{m.traversal_time:.1f}", m.recoveries, m.collisions, int(m.success)])
    summary = {
        "env_id": env_id,
        "flagged": col.n_flagged,
        "corrections": col.n_events,
        "steps": col.total_steps,
        "segment_sizes": [len(b) for b in col.segments],
        "peak_streaming": monitor.peak_short,
        "peak_training": monitor.peak_training,
        "debug_checks": col.debug_checks,
    }
    (d["logs"] / f"collect_env{env_id}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log.info("collected env %d: %s", env_id, summary)
    return col


def load_segments(cfg: RunConfig, env_id: int) -> list[TrainingBuffer]:
    d = _dirs(cfg)["buffers"]
    paths = [d / f"env{env_id}_seg{j}.buf" for j in range(1, cfg.schedule.segments + 1)]
    if not all(p.exists() for p in paths):
        run_collect(cfg, env_id)
    return [load_training_buffer(p) for p in paths]


# --------------------------------------------------------------- training


def checkpoint_path(cfg: RunConfig, regime: str, env_id: int, segment: int) -> Path:
    return _dirs(cfg)["checkpoints"] / regime / f"env{env_id}_seg{segment}.ckpt"


def _fit(cfg, start, bk, memory, env_id, segment, monitor, stats):
    if len(bk) == 0:
        # no corrections mined: the policy carries over unchanged
        return start
    return train_environment(start, bk, memory, cfg.hyper, int(rng_for(cfg.seed, TRAIN, env_id, segment).integers(2**31)), monitor, stats)


def train_regime(cfg: RunConfig, regime: str) -> dict:
    """Train every (environment, segment) policy of a regime and write its
    checkpoints.  Returns an audit record."""
    if regime not in TRAINED_REGIMES:
        raise StudyError(f"regime {regime!r} has no training stage")
    d = _dirs(cfg)
    (d["checkpoints"] / regime).mkdir(parents=True, exist_ok=True)
    monitor = MemoryMonitor(cfg.stream_capacity, cfg.memory_budget)
    init_seed = int(rng_for(cfg.seed, INIT).integers(2**31))
    params = policy_net.quantize(policy_net.init_params(init_seed))
    blong = LongTermBuffer(capacity=cfg.memory_budget)
    audit: dict = {"regime": regime, "envs": []}
    for env_id in range(1, len(cfg.environments) + 1):
        segs = load_segments(cfg, env_id)
        memory = None
        if regime == "lifelong" and len(blong):
            blong = shrink_sections(blong, capacity(cfg, env_id))
            memory = blong
        start = params
        stats = TrainStats()
        for j, bk in enumerate(segs, start=1):
            try:
                p = _fit(cfg, start, bk, memory, env_id, j, monitor, stats)
            except Exception as exc:
                raise StudyError(f"training {regime} env {env_id} segment {j}: {exc}") from exc
            p = policy_net.quantize(p)
            policy_net.save_checkpoint(checkpoint_path(cfg, regime, env_id, j), p)
            if j == len(segs):
                params = p
        entry = {
            "env_id": env_id,
            "buffer_sizes": [len(b) for b in segs],
            "memory_sizes": memory.sizes if memory is not None else [],
            "updates": stats.updates,
            "projections": stats.projections,
        }
        if regime == "lifelong":
            final_bk = segs[-1]
            monitor.check(bk=len(final_bk), blong=len(blong))
            blong = consolidate(blong, final_bk, cfg.memory_budget, env_id, params)
            d["memory"].mkdir(parents=True, exist_ok=True)
            save_long_term(d["memory"] / f"lifelong_env{env_id}.buf", blong)
            entry["memory_after"] = blong.sizes
        audit["envs"].append(entry)
    audit["peak_training"] = monitor.peak_training
    audit["budget_checks"] = monitor.checks
    d["logs"].mkdir(parents=True, exist_ok=True)
    (d["logs"] / f"audit_{regime}.json").write_text(json.dumps(audit, indent=1, sort_keys=True) + "\n")
    return audit


# ------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalJob:
    regime: str
    deploy_env: int
    train_env: int
    segment: int
    trial: int
    checkpoint: str | None


def _digest(path: str | None) -> str:
    if path is None:
        return "pi0"
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _episode(cfg: RunConfig, deploy_env: int, trial: int, checkpoint: str | None) -> tuple[TrialMetrics, int]:
    env, path = environment(cfg, deploy_env)
    params = policy_net.load_checkpoint(checkpoint) if checkpoint is not None else None
    ctrl = GatedController(env, path, params, cfg.dwa, cfg.sensor, cfg.sim.limits)
    m = run_episode(
        env,
        ctrl,
        cfg.sim.dt,
        cfg.sim.timeout,
        cfg.sim.robot_radius,
        cfg.sim.limits,
        start=start_pose(cfg, env, EVAL_JITTER, deploy_env, trial),
    )
    return m, ctrl.learned_steps


def _episode_star(args):
    return _episode(*args)


def plan_jobs(cfg: RunConfig, regime: str) -> list[EvalJob]:
    m, reps = len(cfg.environments), cfg.schedule.eval_repeats
    jobs = []
    if regime == "dwa_only":
        for dep in range(1, m + 1):
            for t in range(reps):
                jobs.append(EvalJob(regime, dep, 0, 0, t, None))
        return jobs
    for dep in range(1, m + 1):
        for k in range(1, m + 1):
            for j in range(cfg.schedule.segments + 1):
                ckpt = None if j == 0 else str(checkpoint_path(cfg, regime, k, j))
                for t in range(reps):
                    jobs.append(EvalJob(regime, dep, k, j, t, ckpt))
    return jobs


def planned_count(cfg: RunConfig, regime: str) -> int:
    """Evaluation trials a regime requires: deploy envs x policies x repeats,
    where a trained regime's policies are (train env, segment 0..S) cells."""
    m, reps = len(cfg.environments), cfg.schedule.eval_repeats
    if regime == "dwa_only":
        return m * reps
    return m * m * (cfg.schedule.segments + 1) * reps


def evaluate_regime(cfg: RunConfig, regime: str, cache: dict | None = None) -> list[dict]:
    """Evaluate every policy of a regime on every environment.

    Trials are deterministic in (policy bytes, deploy env, trial), so
    identical policies share one simulated episode through ``cache``.
    """
    jobs = plan_jobs(cfg, regime)
    for job in jobs:
        if job.checkpoint is not None and not Path(job.checkpoint).exists():
            raise StudyError(f"missing checkpoint {job.checkpoint}; run train first")
    cache = {} if cache is None else cache
    keys = [(_digest(j.checkpoint), j.deploy_env, j.trial) for j in jobs]
    todo, seen = [], set()
    for job, key in zip(jobs, keys):
        if key not in cache and key not in seen:
            seen.add(key)
            todo.append((key, (cfg, job.deploy_env, job.trial, job.checkpoint)))
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_episode_star, [a for _, a in todo], chunksize=4))
    else:
        results = [_episode_star(a) for _, a in todo]
    for (key, _), res in zip(todo, results):
        cache[key] = res
    rows = []
    for job, key in zip(jobs, keys):
        m, learned = cache[key]
        rows.append(
            {
                "regime": job.regime,
                "deploy_env": job.deploy_env,
                "train_env": job.train_env,
                "segment": job.segment,
                "trial": job.trial,
                "time": f"{m.traversal_time:.1f}",
                "recoveries": m.recoveries,
                "collisions": m.collisions,
                "success": int(m.success),
                "learned_steps": learned,
            }
        )
    if len(rows) != planned_count(cfg, regime):
        raise StudyError(f"{regime}: planned {planned_count(cfg, regime)} trials, executed {len(rows)}")
    d = _dirs(cfg)["eval"]
    d.mkdir(parents=True, exist_ok=True)
    with open(d / f"{regime}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, EVAL_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    log.info("%s: %d trials (%d simulated)", regime, len(rows), len(todo))
    return rows


def read_eval(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("deploy_env", "train_env", "segment", "trial", "recoveries", "collisions", "success", "learned_steps"):
            r[k] = int(r[k])
        r["time"] = float(r["time"])
    return rows


# ------------------------------------------------------------------ study


def run_study(cfg: RunConfig) -> dict:
    """Collect, train and evaluate every configured regime, then report."""
    from .report import write_reports

    write_config(cfg)
    for env_id in range(1, len(cfg.environments) + 1):
        run_collect(cfg, env_id)
    cache: dict = {}
    audits = {}
    counts = {}
    for regime in cfg.regimes:
        if regime != "dwa_only":
            audits[regime] = train_regime(cfg, regime)
        rows = evaluate_regime(cfg, regime, cache)
        counts[regime] = len(rows)
    write_reports(cfg.run_dir)
    trained = [r for r in cfg.regimes if r != "dwa_only"]
    planned = sum(planned_count(cfg, r) for r in trained)
    executed = sum(counts[r] for r in trained)
    if planned != executed:
        raise StudyError(f"planned {planned} evaluation trials, executed {executed}")
    log.info("evaluation trials: planned %d, executed %d, simulated %d", planned, executed, len(cache))
    return {"audits": audits, "planned": planned, "executed": executed, "simulated": len(cache)}


def study_summary(result: dict) -> str:
    return f"evaluation trials planned {result['planned']}, executed {result['executed']}, simulated {result['simulated']}"

