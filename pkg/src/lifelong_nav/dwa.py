"""The initial policy: Dynamic Window Approach, recovery behaviors and the
heuristic action discriminator."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import _kernels
from .global_planner import GlobalPath, local_goal_world, nearest_waypoint
from .kinematics import Action, RobotState, n_rollout_steps, rollout_collides
from .world import OccupancyGrid


class RecoveryPhase(str, Enum):
    NONE = "none"
    ROTATE = "rotate"
    BACKUP = "backup"


class Source(str, Enum):
    INITIAL = "initial"
    LEARNED = "learned"


@dataclass(frozen=True)
class DwaConfig:
    v_samples: int = 7
    w_samples: int = 15
    accel_v: float = 2.0
    accel_w: float = 3.0
    sim_horizon: float = 1.5
    sim_dt: float = 0.1
    control_dt: float = 0.1
    max_speed: float = 0.5
    max_yaw_rate: float = 1.5
    weight_heading: float = 1.0
    weight_clearance: float = 1.5
    weight_velocity: float = 0.6
    clearance_min: float = 0.25
    clearance_cap: float = 0.6
    lookahead: float = 1.0
    robot_radius: float = 0.21
    # recovery schedule
    rotate_speed: float = 0.8
    rotate_time: float = 2.0
    backup_speed: float = 0.2
    backup_time: float = 1.0
    # each completed recovery cycle scales clearance_min and the clearance
    # weight by this factor until the robot has advanced relax_reset_distance
    # along the global path
    relax_factor: float = 0.5
    relax_reset_distance: float = 1.5
    # oscillation watchdog: less than stall_distance covered in stall_time
    stall_time: float = 2.0
    stall_distance: float = 0.05
    # discriminator
    forward_threshold: float = 0.15
    safety_horizon: float = 1.0

    def __post_init__(self):
        if self.v_samples < 2 or self.w_samples < 2:
            raise ValueError("sample counts must be >= 2")
        if min(self.weight_heading, self.weight_clearance, self.weight_velocity) < 0:
            raise ValueError("weights must be nonnegative")
        if self.sim_horizon <= 0:
            raise ValueError("sim_horizon must be positive")


@dataclass(frozen=True)
class DwaOutput:
    action: Action
    feasible: bool
    in_recovery: bool
    recovery_phase: RecoveryPhase = RecoveryPhase.NONE


@dataclass(frozen=True)
class ScoredAction:
    action: Action
    source: Source
    score: float


def dynamic_window(state: RobotState, config: DwaConfig) -> tuple[np.ndarray, np.ndarray]:
    """(v, w) sample grid, v-major, over the reachable window."""
    dv = config.accel_v * config.control_dt
    dw = config.accel_w * config.control_dt
    v_lo = max(0.0, state.v - dv)
    v_hi = max(v_lo, min(config.max_speed, state.v + dv))
    w_lo = max(-config.max_yaw_rate, state.omega - dw)
    w_hi = max(w_lo, min(config.max_yaw_rate, state.omega + dw))
    vs = np.linspace(v_lo, v_hi, config.v_samples)
    ws = np.linspace(w_lo, w_hi, config.w_samples)
    vv, ww = np.meshgrid(vs, ws, indexing="ij")
    return vv.ravel(), ww.ravel()


def heading_term(final_pose, goal) -> float:
    """1 when the rollout ends pointing at the goal, 0 when pointing away."""
    bearing = math.atan2(goal[1] - final_pose[1], goal[0] - final_pose[0])
    return 1.0 - abs(_kernels.wrap_angle(bearing - final_pose[2])) / math.pi


def score_sample(v: float, final_pose, gap: float, goal, config: DwaConfig) -> float:
    """Weighted heading, clearance and velocity terms, each in [0, 1]; ``gap``
    is the rollout's smallest distance between disc edge and obstacle."""
    clear = min(gap, config.clearance_cap) / config.clearance_cap
    return (
        config.weight_heading * heading_term(final_pose, goal)
        + config.weight_clearance * clear
        + config.weight_velocity * (v / config.max_speed)
    )


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Every window sample with its survival flag and score (-inf when
    discarded)."""

    v: np.ndarray
    w: np.ndarray
    survives: np.ndarray
    score: np.ndarray


def evaluate_window(
    state: RobotState,
    grid: OccupancyGrid,
    path: GlobalPath,
    config: DwaConfig = DwaConfig(),
    clearance_min: float | None = None,
) -> SampleSet:
    """Roll out and score every sample of the dynamic window.

    Rollouts that collide or pass closer than ``clearance_min`` to an
    obstacle are discarded.
    """
    if clearance_min is None:
        clearance_min = config.clearance_min
    vs, ws = dynamic_window(state, config)
    goal = local_goal_world(path, state.pose, config.lookahead)
    ox, oy = grid.origin
    n_steps = n_rollout_steps(config.sim_horizon, config.sim_dt)
    res = grid.resolution
    cap = (config.robot_radius + config.clearance_cap) / res
    dist, final = _kernels.evaluate_samples(
        grid.cells, ox, oy, res, state.x, state.y, state.theta, vs, ws, config.sim_dt, n_steps, cap
    )
    r = config.robot_radius / res
    survives = np.zeros(len(vs), dtype=bool)
    score = np.full(len(vs), -math.inf)
    for i in range(len(vs)):
        if dist[i] < r:
            continue
        gap = dist[i] * res - config.robot_radius
        if gap < clearance_min:
            continue
        survives[i] = True
        score[i] = score_sample(vs[i], final[i], gap, goal, config)
    return SampleSet(vs, ws, survives, score)


def dwa_plan(
    state: RobotState,
    grid: OccupancyGrid,
    path: GlobalPath,
    config: DwaConfig = DwaConfig(),
    clearance_min: float | None = None,
) -> DwaOutput:
    """One DWA planning cycle: the surviving sample maximizing the weighted
    heading, clearance and velocity terms wins (first in sample order on
    ties); with no survivor the output is infeasible and starts recovery."""
    samples = evaluate_window(state, grid, path, config, clearance_min)
    if not samples.survives.any():
        return DwaOutput(recovery_action(RecoveryPhase.ROTATE, state, config), False, True, RecoveryPhase.ROTATE)
    best = int(np.argmax(samples.score))
    return DwaOutput(Action(float(samples.v[best]), float(samples.w[best])), True, False)


def recovery_action(phase: RecoveryPhase, state: RobotState | None = None, config: DwaConfig = DwaConfig()) -> Action:
    if phase == RecoveryPhase.ROTATE:
        return Action(0.0, config.rotate_speed)
    if phase == RecoveryPhase.BACKUP:
        return Action(-config.backup_speed, 0.0)
    raise ValueError("no recovery action for phase 'none'")


def discriminate(
    obs,
    action: Action,
    source: Source,
    grid: OccupancyGrid,
    state: RobotState,
    config: DwaConfig = DwaConfig(),
) -> float:
    """Heuristic action score in {0.0, 0.5, 1.0}.

    Steady forward motion from the initial policy scores 1.0; a learned
    action whose forward simulation stays collision-free scores 0.5.
    """
    if source == Source.INITIAL:
        return 1.0 if action.v > config.forward_threshold else 0.0
    if rollout_collides(state, action, config.safety_horizon, config.sim_dt, grid, config.robot_radius):
        return 0.0
    return 0.5


class DwaController:
    """Stateful initial policy: DWA plus the rotate/backup recovery schedule.

    ``propose`` computes this step's output; ``commit`` advances the recovery
    schedule and watchdog once the caller knows whether the proposal was
    actually executed.  Calling the object does both.

    A recovery cycle starts when a recovery action is first executed and
    only advances on steps where the initial policy is in control.  While
    another policy drives, the cycle is paused; it is cancelled as soon as a
    nominal plan offers steady forward motion again.

    After every completed cycle the planner retries with ``clearance_min``
    and the clearance weight scaled by ``relax_factor``; the scaling resets
    once the robot has advanced ``relax_reset_distance`` along the global
    path beyond where the last cycle ended.
    """

    def __init__(self, grid: OccupancyGrid, path: GlobalPath, config: DwaConfig = DwaConfig()):
        self.grid = grid
        self.path = path
        self.config = config
        self.phase = RecoveryPhase.NONE
        self.phase_elapsed = 0.0
        self.relax_level = 0
        window = max(1, int(round(config.stall_time / config.control_dt)))
        self._history: deque[tuple[float, float]] = deque(maxlen=window + 1)
        self._escalated_at = 0.0
        self._paused = False
        self.recovering = False
        self.cycles_started = 0

    def _stalled(self) -> bool:
        h = self._history
        if len(h) < h.maxlen:
            return False
        return math.hypot(h[-1][0] - h[0][0], h[-1][1] - h[0][1]) < self.config.stall_distance

    def _relaxed(self, level: int) -> DwaConfig:
        if level == 0:
            return self.config
        f = self.config.relax_factor**level
        return replace(
            self.config,
            clearance_min=self.config.clearance_min * f,
            weight_clearance=self.config.weight_clearance * f,
        )

    def _progress(self, state: RobotState) -> float:
        return float(self.path.cumulative_arclength[nearest_waypoint(self.path, state.x, state.y)])

    def _nominal(self, state: RobotState) -> DwaOutput:
        out = dwa_plan(state, self.grid, self.path, self._relaxed(self.relax_level))
        if out.feasible and self._stalled():
            return DwaOutput(recovery_action(RecoveryPhase.ROTATE, state, self.config), False, True, RecoveryPhase.ROTATE)
        return out

    def propose(self, state: RobotState) -> DwaOutput:
        cfg = self.config
        if self.phase == RecoveryPhase.NONE:
            return self._nominal(state)
        if self._paused:
            out = self._nominal(state)
            if out.feasible and out.action.v > cfg.forward_threshold:
                return out
        if self.phase == RecoveryPhase.BACKUP:
            back = recovery_action(self.phase, state, cfg)
            if rollout_collides(state, back, 0.5, cfg.sim_dt, self.grid, cfg.robot_radius):
                back = Action(0.0, 0.0)  # blocked behind: wait out the phase
            return DwaOutput(back, False, True, self.phase)
        return DwaOutput(recovery_action(self.phase, state, cfg), False, True, self.phase)

    def commit(self, state: RobotState, out: DwaOutput, executed: bool) -> None:
        cfg = self.config
        self._history.append((state.x, state.y))
        if not executed:
            self._paused = self.phase != RecoveryPhase.NONE
            self.recovering = self._paused
            return
        self._paused = False
        if not out.in_recovery:
            # a nominal plan was executed: any pending cycle is abandoned
            self.phase, self.phase_elapsed = RecoveryPhase.NONE, 0.0
            self.recovering = False
            if self.relax_level and self._progress(state) > self._escalated_at + cfg.relax_reset_distance:
                self.relax_level = 0
            return
        if self.phase == RecoveryPhase.NONE:
            self.cycles_started += 1
            self.phase, self.phase_elapsed = out.recovery_phase, 0.0
        self.recovering = True
        self.phase_elapsed += cfg.control_dt
        if self.phase == RecoveryPhase.ROTATE and self.phase_elapsed >= cfg.rotate_time - 1e-9:
            self.phase, self.phase_elapsed = RecoveryPhase.BACKUP, 0.0
        elif self.phase == RecoveryPhase.BACKUP and self.phase_elapsed >= cfg.backup_time - 1e-9:
            self.phase, self.phase_elapsed = RecoveryPhase.NONE, 0.0
            self.recovering = False
            self.relax_level += 1
            self._escalated_at = self._progress(state)
            self._history.clear()

    def __call__(self, state: RobotState) -> Action:
        out = self.propose(state)
        self.commit(state, out, executed=True)
        return out.action
