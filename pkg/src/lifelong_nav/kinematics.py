"""Unicycle integration, constant-twist rollouts and episode execution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from . import _kernels
from .world import EnvironmentSpec, OccupancyGrid, collision_check

PENALTY_TIME = 100.0


@dataclass(frozen=True)
class Limits:
    v_max: float = 2.0
    omega_max: float = 2.0


DEFAULT_LIMITS = Limits()


@dataclass(frozen=True)
class Action:
    v: float
    omega: float

    def clamped(self, limits: Limits = DEFAULT_LIMITS) -> Action:
        return Action(
            min(max(self.v, -limits.v_max), limits.v_max),
            min(max(self.omega, -limits.omega_max), limits.omega_max),
        )


STOP = Action(0.0, 0.0)


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    v: float = 0.0
    omega: float = 0.0

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class TrialMetrics:
    traversal_time: float
    recoveries: int
    collisions: int
    success: bool
    timed_out: bool


wrap_angle = _kernels.wrap_angle


def step(state: RobotState, action: Action, dt: float, limits: Limits = DEFAULT_LIMITS) -> RobotState:
    """Exact constant-twist arc integration; the action is clamped to ``limits``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = action.clamped(limits)
    x, y, th = _kernels.step_pose(state.x, state.y, state.theta, a.v, a.omega, dt)
    return RobotState(x, y, th, a.v, a.omega)


def n_rollout_steps(horizon: float, dt: float) -> int:
    # tolerate horizon/dt landing a hair above an integer
    return max(1, math.ceil(horizon / dt - 1e-9))


def rollout(
    state: RobotState,
    action: Action,
    horizon: float,
    dt: float,
    grid: OccupancyGrid,
    radius: float,
    limits: Limits = DEFAULT_LIMITS,
) -> tuple[list[tuple[float, float, float]], bool]:
    """Poses after each of ceil(horizon/dt) steps and whether any collides."""
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    a = action.clamped(limits)
    poses = _kernels.rollout_poses(state.x, state.y, state.theta, a.v, a.omega, dt, n_rollout_steps(horizon, dt))
    out = [tuple(p) for p in poses]
    collides = any(collision_check(grid, p, radius) for p in out)
    return out, collides


def rollout_collides(
    state: RobotState, action: Action, horizon: float, dt: float, grid: OccupancyGrid, radius: float,
    limits: Limits = DEFAULT_LIMITS,
) -> bool:
    a = action.clamped(limits)
    poses = _kernels.rollout_poses(state.x, state.y, state.theta, a.v, a.omega, dt, n_rollout_steps(horizon, dt))
    ox, oy = grid.origin
    r = radius / grid.resolution
    return _kernels.min_distance_along(grid.cells, poses, ox, oy, grid.resolution, r) < r


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    timeout: float = PENALTY_TIME
    robot_radius: float = 0.21
    limits: Limits = DEFAULT_LIMITS


Controller = Callable[[RobotState], Action]


def goal_reached(env: EnvironmentSpec, state: RobotState) -> bool:
    return math.hypot(state.x - env.goal[0], state.y - env.goal[1]) <= env.goal_tolerance


def run_episode(
    env: EnvironmentSpec,
    controller: Controller,
    dt: float = 0.1,
    timeout: float = PENALTY_TIME,
    radius: float = 0.21,
    limits: Limits = DEFAULT_LIMITS,
    start: tuple[float, float, float] | None = None,
    trace: list | None = None,
) -> TrialMetrics:
    """Drive ``controller`` from the start pose until goal, collision or timeout.

    If the controller has a ``recovering`` attribute it is read after every
    call; each contiguous run of True counts as one recovery.  A collision
    halts the trial with the penalty time.  ``trace``, when given, receives
    one (state, action, recovering) tuple per control step.
    """
    x, y, th = env.start if start is None else start
    state = RobotState(x, y, th)
    max_steps = int(round(timeout / dt))
    recoveries = 0
    was_recovering = False
    for k in range(max_steps):
        if goal_reached(env, state):
            return TrialMetrics(round(k * dt, 9), recoveries, 0, True, False)
        action = controller(state)
        recovering = bool(getattr(controller, "recovering", False))
        if recovering and not was_recovering:
            recoveries += 1
        was_recovering = recovering
        if trace is not None:
            trace.append((state, action, recovering))
        state = step(state, action, dt, limits)
        if collision_check(env.grid, state.pose, radius):
            return TrialMetrics(PENALTY_TIME, recoveries, 1, False, False)
    return TrialMetrics(PENALTY_TIME, recoveries, 0, False, True)

