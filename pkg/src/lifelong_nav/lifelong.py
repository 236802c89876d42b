"""Self-supervised lifelong navigation: the gated controller, the streaming /
training / long-term buffers, correction mining and per-environment GEM
training."""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dwa, policy_net
from .dwa import DwaConfig, DwaController, DwaOutput, Source
from .gem import EpisodicMemory, MemorySection, gem_step
from .global_planner import GlobalPath, local_goal
from .kinematics import Action, Limits, DEFAULT_LIMITS, RobotState
from .world import EnvironmentSpec, OccupancyGrid, scan

ETA = 0.75
STREAM_CAPACITY = 300
MEMORY_BUDGET = 300

BUFFER_MAGIC = b"LNAVBUFR"
BUFFER_VERSION = 2


class MemoryBudgetError(AssertionError):
    pass


def _f32(x):
    """Round to float32 so in-memory experience equals its snapshot."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class Experience:
    obs: np.ndarray  # flattened Observation, length 722
    action: Action
    score: float
    similarity: float = -math.inf
    env_id: int = 0
    step_index: int = 0

    @property
    def lidar(self) -> np.ndarray:
        return self.obs[: policy_net.N_BEAMS]

    @property
    def key(self) -> tuple[int, int]:
        return (self.env_id, self.step_index)


def make_experience(obs, action: Action, score: float, env_id: int, step_index: int) -> Experience:
    vec = obs.vector() if isinstance(obs, policy_net.Observation) else np.asarray(obs, dtype=float)
    v, w = _f32([action.v, action.omega])
    return Experience(_f32(vec), Action(float(v), float(w)), float(score), -math.inf, env_id, step_index)


# ---------------------------------------------------------------- buffers


class StreamingBuffer:
    """FIFO of the most recent executed steps."""

    def __init__(self, capacity: int = STREAM_CAPACITY):
        self.capacity = capacity
        self.entries: deque[Experience] = deque(maxlen=capacity)
        self._consumed: set[tuple[int, int]] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Experience:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    def push(self, exp: Experience) -> None:
        if self.entries and exp.step_index <= self.entries[-1].step_index and exp.env_id == self.entries[-1].env_id:
            raise ValueError("step_index must increase")
        if len(self.entries) == self.capacity:
            self._consumed.discard(self.entries[0].key)
        self.entries.append(exp)

    @property
    def full(self) -> bool:
        return len(self.entries) == self.capacity


class TrainingBuffer:
    """Per-environment demonstrations kept sorted by similarity, descending."""

    def __init__(self, capacity: int, entries: Iterable[Experience] = ()):
        self.capacity = capacity
        self.entries: list[Experience] = []
        for e in entries:
            update_training_buffer(self, (e, e.similarity))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def top(self, n: int) -> TrainingBuffer:
        return TrainingBuffer(n, self.entries[:n])

    def copy(self) -> TrainingBuffer:
        out = TrainingBuffer(self.capacity)
        out.entries = list(self.entries)
        return out


class LongTermBuffer(EpisodicMemory):
    """Per-environment sections of past demonstrations; doubles as the GEM
    episodic memory."""

    def __init__(self, sections: Sequence[MemorySection] = (), capacity: int = MEMORY_BUDGET):
        super().__init__(list(sections))
        self.capacity = capacity


class MemoryMonitor:
    """Asserts the onboard memory budget every time it is consulted."""

    def __init__(self, short_capacity: int = STREAM_CAPACITY, budget: int = MEMORY_BUDGET):
        self.short_capacity = short_capacity
        self.budget = budget
        self.checks = 0
        self.peak_short = 0
        self.peak_training = 0

    def check(self, short: int = 0, bk: int = 0, blong: int = 0) -> None:
        self.checks += 1
        self.peak_short = max(self.peak_short, short)
        self.peak_training = max(self.peak_training, bk + blong)
        if short > self.short_capacity:
            raise MemoryBudgetError(f"streaming buffer holds {short} > {self.short_capacity}")
        if bk + blong > self.budget:
            raise MemoryBudgetError(f"|B_k| + |B_long| = {bk + blong} > {self.budget}")


# ------------------------------------------------------- correction mining


def flag_suboptimal(buffer: StreamingBuffer, eta: float = ETA) -> Experience | None:
    """Midpoint of a full streaming window when its score is below ``eta``."""
    if not buffer.full:
        return None
    mid = buffer[buffer.capacity // 2]
    if mid.score >= eta or mid.key in buffer._consumed:
        return None
    buffer._consumed.add(mid.key)
    return mid


def _features(exp: Experience, include_goal: bool) -> np.ndarray:
    return exp.obs if include_goal else exp.lidar


def a_correct(
    s_p: Experience,
    buffer: StreamingBuffer | Sequence[Experience],
    eta: float = ETA,
    include_goal: bool = False,
    debug: bool = False,
) -> tuple[Experience, float] | None:
    """Most similar qualifying entry: argmax of -||lidar(s) - lidar(s_p)||
    over entries with score >= eta.  Ties go to the entry closest in time to
    ``s_p``, then to the earlier one."""
    cands = [e for e in buffer if e.score >= eta]
    if not cands:
        return None
    feats = np.stack([_features(e, include_goal) for e in cands])
    diff = feats - _features(s_p, include_goal)
    sims = -np.sqrt(np.sum(diff * diff, axis=1))
    steps = np.array([e.step_index for e in cands])
    order = np.lexsort((steps, np.abs(steps - s_p.step_index), -sims))
    best = int(order[0])
    result = (cands[best], float(_f32(sims[best])))
    if debug:
        check = exhaustive_a_correct(s_p, buffer, eta, include_goal)
        if check is None or check[0] is not result[0]:
            raise AssertionError("a_correct disagrees with exhaustive scan")
    return result


def exhaustive_a_correct(s_p, buffer, eta=ETA, include_goal=False):
    """Plain linear scan; the reference the vectorized search is held to."""
    best = None
    for e in buffer:
        if e.score < eta:
            continue
        d = _features(e, include_goal) - _features(s_p, include_goal)
        sim = -float(np.sqrt(np.sum(d * d)))
        key = (sim, -abs(e.step_index - s_p.step_index), -e.step_index)
        if best is None or key > best[0]:
            best = (key, e, sim)
    return None if best is None else (best[1], best[2])


def update_training_buffer(bk: TrainingBuffer, cand: tuple[Experience, float]) -> TrainingBuffer:
    """Insert a demonstration; evict the least similar entry when over capacity."""
    exp, sim = cand
    exp = replace(exp, similarity=float(sim))
    for i, e in enumerate(bk.entries):
        if e.key == exp.key:
            if e.similarity >= exp.similarity:
                return bk
            del bk.entries[i]
            break
    # stable descending insert: equal similarity goes after existing entries
    pos = len(bk.entries)
    for i, e in enumerate(bk.entries):
        if e.similarity < exp.similarity:
            pos = i
            break
    bk.entries.insert(pos, exp)
    while len(bk.entries) > bk.capacity:
        bk.entries.pop()
    return bk


# ------------------------------------------------------ memory management


def shrink_sections(blong: LongTermBuffer, per_section: int) -> LongTermBuffer:
    """Keep the ``per_section`` most similar entries of every section."""
    sections = []
    for s in blong.sections:
        order = sorted(range(len(s)), key=lambda i: -s.examples[i].similarity)[:per_section]
        if order:
            sections.append(s.subset(order))
    return LongTermBuffer(sections, blong.capacity)


def consolidate(
    blong: LongTermBuffer,
    bk: TrainingBuffer,
    n_max: int,
    env_id: int | None = None,
    params: np.ndarray | None = None,
) -> LongTermBuffer:
    """Shrink the long-term memory to ``n_max - |bk|`` by evicting the least
    similar entries across all sections, then append ``bk`` as a section.
    With ``params``, the new section records each example's loss under them
    as its reference."""
    if len(bk) > n_max:
        raise ValueError("training buffer exceeds the memory budget")
    keep = n_max - len(bk)
    pool = [(e.similarity, -si, -j, si, j) for si, s in enumerate(blong.sections) for j, e in enumerate(s.examples)]
    # evict lowest similarity first; among ties the newest section, then the latest entry
    pool.sort(reverse=True)
    survivors = {(si, j) for *_, si, j in pool[:keep]}
    sections = []
    for si, s in enumerate(blong.sections):
        kept = [j for j in range(len(s)) if (si, j) in survivors]
        if kept:
            sections.append(s.subset(kept))
    if len(bk):
        if env_id is None:
            env_id = bk.entries[0].env_id
        refs = () if params is None else tuple(_f32(policy_net.sample_losses(params, bk.entries)))
        sections.append(MemorySection(env_id, list(bk.entries), refs))
    return LongTermBuffer(sections, n_max)


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainHyper:
    alpha: float = 1e-2
    epochs: int = 300
    batch_size: int = 64
    # keep every memory loss at or below its value before this environment
    loss_guard: bool = True
    guard_tolerance: float = 0.02


class NothingToLearn(ValueError):
    pass


@dataclass
class TrainStats:
    updates: int = 0
    projections: int = 0
    skipped: int = 0
    losses: list[float] = field(default_factory=list)


def train_environment(
    params: np.ndarray,
    bk: TrainingBuffer | Sequence[Experience],
    blong: EpisodicMemory | None,
    hyper: TrainHyper = TrainHyper(),
    seed: int = 0,
    monitor: MemoryMonitor | None = None,
    stats: TrainStats | None = None,
) -> np.ndarray:
    """Minibatch GEM over ``bk`` with ``blong`` sections as constraints.

    With an empty ``blong`` this is plain behavior cloning by SGD.
    """
    entries = list(bk)
    if not entries:
        raise NothingToLearn("nothing to learn")
    x, a = policy_net._as_arrays(entries)
    memory = blong if blong is not None and len(blong) else None
    references = None
    if memory is not None and hyper.loss_guard:
        references = [
            s.reference if s.reference is not None else policy_net.bc_loss(params, s.batch) for s in memory.sections
        ]
    rng = np.random.default_rng(seed)
    n = len(entries)
    bs = n if n <= hyper.batch_size else hyper.batch_size
    for _ in range(hyper.epochs):
        order = rng.permutation(n) if n > bs else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if monitor is not None:
                monitor.check(bk=n, blong=len(memory) if memory else 0)
            params, proj = gem_step(
                params, (x[idx], a[idx]), memory, hyper.alpha, references,
                tolerance=hyper.guard_tolerance,
            )
            if stats is not None:
                stats.updates += 1
                stats.projections += bool(proj is not None and proj.projected)
                stats.skipped += proj is not None and proj.step == 0.0
        if stats is not None:
            stats.losses.append(policy_net.bc_loss(params, (x, a)))
    return params


# -------------------------------------------------------------- control


@dataclass(frozen=True)
class SensorConfig:
    n_beams: int = policy_net.N_BEAMS
    fov: float = math.radians(270.0)
    max_range: float = 5.0
    lookahead: float = 1.0


def observe(grid: OccupancyGrid, path: GlobalPath, state: RobotState, sensor: SensorConfig = SensorConfig()):
    ranges = scan(grid, state.pose, sensor.n_beams, sensor.fov, sensor.max_range)
    goal = local_goal(path, state.pose, sensor.lookahead)
    return policy_net.make_observation(ranges, goal, sensor.max_range, sensor.lookahead)


def gated_control(
    state: RobotState,
    grid: OccupancyGrid,
    path: GlobalPath,
    pi0_out: DwaOutput,
    params: np.ndarray | None,
    obs=None,
    config: DwaConfig = DwaConfig(),
    sensor: SensorConfig = SensorConfig(),
    limits: Limits = DEFAULT_LIMITS,
) -> tuple[Action, dwa.ScoredAction, policy_net.Observation | None]:
    """Execute whichever of the initial and learned actions the
    discriminator scores higher; ties go to the initial policy."""
    a0 = pi0_out.action
    s0 = dwa.discriminate(obs, a0, Source.INITIAL, grid, state, config)
    chosen = dwa.ScoredAction(a0, Source.INITIAL, s0)
    if params is not None:
        if obs is None:
            obs = observe(grid, path, state, sensor)
        a1 = policy_net.act(params, obs, limits)
        s1 = dwa.discriminate(obs, a1, Source.LEARNED, grid, state, config)
        if s1 > s0:
            chosen = dwa.ScoredAction(a1, Source.LEARNED, s1)
    return chosen.action, chosen, obs


class CorrectionRecorder:
    """Streaming buffer, midpoint flagging and training-buffer updates
    running alongside navigation in one environment."""

    def __init__(
        self,
        env_id: int,
        capacity: int = MEMORY_BUDGET,
        eta: float = ETA,
        stream_capacity: int = STREAM_CAPACITY,
        include_goal: bool = False,
        monitor: MemoryMonitor | None = None,
        debug: bool = False,
    ):
        self.env_id = env_id
        self.eta = eta
        self.include_goal = include_goal
        self.debug = debug
        self.stream = StreamingBuffer(stream_capacity)
        self.bk = TrainingBuffer(capacity)
        self.monitor = monitor
        self.step_index = 0
        # (flag step, demonstration with similarity) in order of discovery
        self.events: list[tuple[int, Experience]] = []
        self.n_flagged = 0
        self.debug_checks = 0

    def record(self, obs, action: Action, score: float) -> Experience:
        exp = make_experience(obs, action, score, self.env_id, self.step_index)
        self.stream.push(exp)
        flagged = flag_suboptimal(self.stream, self.eta)
        if flagged is not None:
            self.n_flagged += 1
            found = a_correct(flagged, self.stream, self.eta, self.include_goal, debug=self.debug)
            self.debug_checks += self.debug
            if found is not None:
                demo, sim = found
                update_training_buffer(self.bk, (demo, sim))
                self.events.append((self.step_index, replace(demo, similarity=sim)))
        if self.monitor is not None:
            self.monitor.check(short=len(self.stream), bk=len(self.bk))
        self.step_index += 1
        return exp


class GatedController:
    """Initial policy plus an optional learned policy behind the discriminator.

    Exposes ``recovering`` for episode metrics, mirroring whether the
    initial policy has a recovery cycle in progress.

    A learned policy that holds the robot in place passes the safety check
    indefinitely.  When the robot covers less than the stall distance within
    the stall time while the learned policy drives, the learned policy is
    withheld until the initial policy either completes a recovery cycle or
    produces steady forward motion.
    """

    def __init__(
        self,
        env: EnvironmentSpec,
        path: GlobalPath,
        params: np.ndarray | None = None,
        config: DwaConfig = DwaConfig(),
        sensor: SensorConfig = SensorConfig(),
        limits: Limits = DEFAULT_LIMITS,
        recorder: CorrectionRecorder | None = None,
        log: list | None = None,
    ):
        self.env = env
        self.path = path
        self.params = params
        self.config = config
        self.sensor = sensor
        self.limits = limits
        self.pi0 = DwaController(env.grid, path, config)
        self.recorder = recorder
        self.log = log
        self.recovering = False
        self.learned_steps = 0
        self.withheld = False
        self.withheld_count = 0
        window = max(1, int(round(config.stall_time / config.control_dt)))
        self._history: deque[tuple[float, float, bool]] = deque(maxlen=window + 1)

    def _learned_stalled(self) -> bool:
        h = self._history
        if len(h) < h.maxlen or not h[-1][2]:
            return False
        return math.hypot(h[-1][0] - h[0][0], h[-1][1] - h[0][1]) < self.config.stall_distance

    def __call__(self, state: RobotState) -> Action:
        out = self.pi0.propose(state)
        obs = None
        if self.recorder is not None or self.params is not None:
            obs = observe(self.env.grid, self.path, state, self.sensor)
        params = None if self.withheld else self.params
        action, chosen, obs = gated_control(
            state, self.env.grid, self.path, out, params, obs, self.config, self.sensor, self.limits
        )
        executed_initial = chosen.source == Source.INITIAL
        level = self.pi0.relax_level
        self.pi0.commit(state, out, executed_initial)
        self.recovering = self.pi0.recovering
        self.learned_steps += not executed_initial
        self._history.append((state.x, state.y, not executed_initial))
        if self.withheld:
            if chosen.score >= 1.0 or self.pi0.relax_level > level:
                self.withheld = False
                self._history.clear()
        elif self._learned_stalled():
            self.withheld = True
            self.withheld_count += 1
        if self.log is not None:
            self.log.append((state, out, chosen))
        if self.recorder is not None:
            self.recorder.record(obs, action, chosen.score)
        return action


# -------------------------------------------------------- segment replay


def build_segments(
    events: Sequence[tuple[int, Experience]], total_steps: int, capacity: int = MEMORY_BUDGET, n_segments: int = 5
) -> list[TrainingBuffer]:
    """Cumulative training buffers from the first j/n_segments of experience."""
    buffers = []
    bk = TrainingBuffer(capacity)
    i = 0
    ordered = sorted(events, key=lambda ev: ev[0])
    for j in range(1, n_segments + 1):
        cutoff = total_steps * j / n_segments
        while i < len(ordered) and ordered[i][0] < cutoff:
            update_training_buffer(bk, (ordered[i][1], ordered[i][1].similarity))
            i += 1
        buffers.append(bk.copy())
    return buffers


# ------------------------------------------------------------- snapshots


def _record_dtype(obs_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("obs", "<f4", (obs_dim,)),
            ("action", "<f4", (2,)),
            ("score", "<f4"),
            ("similarity", "<f4"),
            ("env_id", "<u4"),
            ("step_index", "<u4"),
            ("reference", "<f4"),
        ]
    )


def write_snapshot(
    path: str | Path,
    sections: Sequence[tuple[int, Sequence[Experience], int]],
    references: Sequence[Sequence[float]] | None = None,
) -> None:
    """Buffer snapshot: magic, version, obs_dim, section count, then per
    section (env_id, count, capacity) as uint32 LE, then the records.  A
    record's reference loss is NaN when none is known."""
    obs_dim = policy_net.OBS_DIM
    header = BUFFER_MAGIC + struct.pack("<III", BUFFER_VERSION, obs_dim, len(sections))
    table = b"".join(struct.pack("<III", env_id, len(ex), cap) for env_id, ex, cap in sections)
    dt = _record_dtype(obs_dim)
    entries = [e for _, ex, _ in sections for e in ex]
    refs = []
    for k, (_, ex, _) in enumerate(sections):
        r = references[k] if references is not None and references[k] else ()
        refs.extend(r if r else [math.nan] * len(ex))
    recs = np.zeros(len(entries), dtype=dt)
    for i, e in enumerate(entries):
        recs[i] = (e.obs, (e.action.v, e.action.omega), e.score, e.similarity, e.env_id, e.step_index, refs[i])
    Path(path).write_bytes(header + table + recs.tobytes())


def read_snapshot(path: str | Path) -> list[tuple[int, list[Experience], int, tuple[float, ...]]]:
    """Sections as (env_id, experiences, capacity, reference losses); the
    references are empty when the snapshot carries none."""
    data = Path(path).read_bytes()
    if not data.startswith(BUFFER_MAGIC):
        raise ValueError(f"{path}: not a buffer snapshot")
    off = len(BUFFER_MAGIC)
    version, obs_dim, n_sections = struct.unpack_from("<III", data, off)
    if version != BUFFER_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    off += 12
    table = [struct.unpack_from("<III", data, off + 12 * i) for i in range(n_sections)]
    off += 12 * n_sections
    total = sum(t[1] for t in table)
    recs = np.frombuffer(data, dtype=_record_dtype(obs_dim), count=total, offset=off)
    out, i = [], 0
    for env_id, count, cap in table:
        ex = [
            Experience(
                r["obs"].astype(np.float64),
                Action(float(r["action"][0]), float(r["action"][1])),
                float(r["score"]),
                float(r["similarity"]),
                int(r["env_id"]),
                int(r["step_index"]),
            )
            for r in recs[i : i + count]
        ]
        refs = recs["reference"][i : i + count]
        out.append((env_id, ex, cap, () if np.isnan(refs).any() else tuple(float(r) for r in refs)))
        i += count
    return out


def save_training_buffer(path, bk: TrainingBuffer, env_id: int) -> None:
    write_snapshot(path, [(env_id, bk.entries, bk.capacity)])


def load_training_buffer(path) -> TrainingBuffer:
    ((_, ex, cap, _),) = read_snapshot(path)
    out = TrainingBuffer(cap)
    out.entries = ex
    return out


def save_long_term(path, blong: LongTermBuffer) -> None:
    write_snapshot(
        path, [(s.env_id, s.examples, len(s)) for s in blong.sections], [s.references for s in blong.sections]
    )


def load_long_term(path, capacity: int = MEMORY_BUDGET) -> LongTermBuffer:
    return LongTermBuffer(
        [MemorySection(env_id, ex, refs) for env_id, ex, _, refs in read_snapshot(path)], capacity
    )
