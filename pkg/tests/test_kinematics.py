from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lifelong_nav.dwa import DwaController
from lifelong_nav.global_planner import plan_global
from lifelong_nav.kinematics import (
    PENALTY_TIME,
    Action,
    Limits,
    RobotState,
    rollout,
    rollout_collides,
    run_episode,
    step,
)
from lifelong_nav.world import EnvironmentSpec, collision_check

from conftest import box_grid


def _pose(s: RobotState):
    return np.array([s.x, s.y, s.theta])


def test_straight_line():
    s = step(RobotState(0, 0, 0), Action(1.0, 0.0), 0.1)
    assert _pose(s) == pytest.approx([0.1, 0.0, 0.0], abs=1e-12)


def test_rotate_in_place_wraps_to_pi():
    s = step(RobotState(0, 0, 0), Action(0.0, 1.0), math.pi)
    assert s.x == pytest.approx(0.0, abs=1e-12) and s.y == pytest.approx(0.0, abs=1e-12)
    assert abs(abs(s.theta) - math.pi) < 1e-12
    assert -math.pi < s.theta <= math.pi


def test_quarter_circle():
    s = step(RobotState(0, 0, 0), Action(1.0, 1.0), math.pi / 2)
    assert _pose(s) == pytest.approx([1.0, 1.0, math.pi / 2], abs=1e-9)


def test_actions_are_clamped_and_dt_checked():
    s = step(RobotState(0, 0, 0), Action(5.0, -9.0), 0.1, Limits(2.0, 2.0))
    assert (s.v, s.omega) == (2.0, -2.0)
    with pytest.raises(ValueError):
        step(RobotState(0, 0, 0), Action(1.0, 0.0), 0.0)


def _arc_oracle(x, y, th, v, w, dt):
    if abs(w) < 1e-6:
        return x + v * dt * math.cos(th), y + v * dt * math.sin(th), th
    return (
        x + v / w * (math.sin(th + w * dt) - math.sin(th)),
        y - v / w * (math.cos(th + w * dt) - math.cos(th)),
        th + w * dt,
    )


def _angle_close(a, b, tol):
    return abs(math.remainder(a - b, 2 * math.pi)) < tol


states = st.builds(
    RobotState,
    st.floats(-5, 5),
    st.floats(-5, 5),
    st.floats(-math.pi, math.pi),
)
actions = st.builds(Action, st.floats(-2, 2), st.floats(-2, 2))


@settings(max_examples=300, deadline=None)
@given(states, actions, st.floats(0.01, 2.0))
def test_step_matches_closed_form(s, a, dt):
    out = step(s, a, dt)
    x, y, th = _arc_oracle(s.x, s.y, s.theta, a.v, a.omega, dt)
    assert out.x == pytest.approx(x, abs=1e-9) and out.y == pytest.approx(y, abs=1e-9)
    assert _angle_close(out.theta, th, 1e-9)
    assert -math.pi < out.theta <= math.pi


@settings(max_examples=300, deadline=None)
@given(states, actions, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_step_composes(s, a, dt1, dt2):
    whole = step(s, a, dt1 + dt2)
    parts = step(step(s, a, dt1), a, dt2)
    assert whole.x == pytest.approx(parts.x, abs=1e-9) and whole.y == pytest.approx(parts.y, abs=1e-9)
    assert _angle_close(whole.theta, parts.theta, 1e-9)


@settings(max_examples=200, deadline=None)
@given(states, actions, st.floats(0.01, 1.0), st.floats(-math.pi, math.pi))
def test_step_rotation_invariant(s, a, dt, phi):
    c, sn = math.cos(phi), math.sin(phi)
    rotated = RobotState(c * s.x - sn * s.y, sn * s.x + c * s.y, s.theta + phi)
    out = step(s, a, dt)
    out_r = step(rotated, a, dt)
    assert out_r.x == pytest.approx(c * out.x - sn * out.y, abs=1e-9)
    assert out_r.y == pytest.approx(sn * out.x + c * out.y, abs=1e-9)
    assert _angle_close(out_r.theta, out.theta + phi, 1e-9)


# ------------------------------------------------------------------ rollout


def test_rollout_open_space():
    g = box_grid(200, 200, 0.05)
    poses, hit = rollout(RobotState(5, 5, 0), Action(0.3, 0.4), 1.5, 0.1, g, 0.21)
    assert not hit and len(poses) == 15


def test_rollout_into_wall_collides():
    g = box_grid(60, 40, 0.1, walls=[(30, 0, 30, 39)])  # face at x = 3.0
    _, hit = rollout(RobotState(2.5, 2.0, 0.0), Action(1.0, 0.0), 1.0, 0.1, g, 0.21)
    assert hit
    with pytest.raises(ValueError):
        rollout(RobotState(2.5, 2.0, 0.0), Action(1.0, 0.0), 0.05, 0.1, g, 0.21)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1.0, 2.6),
    st.floats(1.0, 2.6),
    st.floats(-math.pi, math.pi),
    st.floats(0.0, 1.0),
    st.floats(-1.5, 1.5),
)
def test_rollout_matches_per_pose_oracle(x, y, th, v, w):
    g = box_grid(40, 40, 0.1, walls=[(20, 20, 24, 24)])  # corner block at (2.0, 2.0)
    s = RobotState(x, y, th)
    poses, hit = rollout(s, Action(v, w), 1.0, 0.1, g, 0.21)
    cur = s
    expected = []
    for _ in range(10):
        cur = step(cur, Action(v, w), 0.1)
        expected.append(cur.pose)
    assert np.allclose(poses, expected, atol=1e-12)
    oracle = any(collision_check(g, p, 0.21) for p in expected)
    assert hit == oracle
    assert rollout_collides(s, Action(v, w), 1.0, 0.1, g, 0.21) == oracle


# --------------------------------------------------------------- episodes


def _open_env(start, goal):
    return EnvironmentSpec("open", box_grid(100, 100, 0.05), start, goal, 0.3)


def test_goal_at_start_is_immediate_success():
    env = _open_env((2.0, 2.0, 0.0), (2.1, 2.0))
    m = run_episode(env, lambda s: Action(1.0, 0.0))
    assert (m.traversal_time, m.recoveries, m.collisions, m.success, m.timed_out) == (0.0, 0, 0, True, False)


def test_stopped_controller_times_out():
    env = _open_env((1.0, 1.0, 0.0), (4.0, 4.0))
    m = run_episode(env, lambda s: Action(0.0, 0.0))
    assert m.timed_out and not m.success and m.traversal_time == PENALTY_TIME


def test_straight_run_time_is_steps_times_dt():
    env = _open_env((1.0, 2.5, 0.0), (2.98, 2.5))
    m = run_episode(env, lambda s: Action(0.5, 0.0))
    # the first pose within 0.3 m of the goal is x = 2.7, after 34 steps
    assert m.success and m.traversal_time == pytest.approx(3.4, abs=1e-9)


def test_collision_halts_with_penalty():
    env = _open_env((1.0, 2.5, 0.0), (4.0, 4.0))
    m = run_episode(env, lambda s: Action(1.0, 0.0))
    assert m.collisions == 1 and not m.success and not m.timed_out and m.traversal_time == PENALTY_TIME


class _Flagger:
    """Reports a scripted recovering flag; never moves."""

    def __init__(self, flags):
        self.flags = list(flags)
        self.recovering = False

    def __call__(self, state):
        self.recovering = self.flags.pop(0) if self.flags else False
        return Action(0.0, 0.0)


def test_recoveries_count_contiguous_intervals():
    flags = [False, True, True, False, True, False, False, True, True, True]
    env = _open_env((1.0, 1.0, 0.0), (4.0, 4.0))
    m = run_episode(env, _Flagger(flags), timeout=1.5)
    # three contiguous True runs
    assert m.recoveries == 3


def test_initial_policy_recovers_on_first_map(bundled):
    env = bundled[1]
    path = plan_global(env.grid, env.start[:2], env.goal, 0.3)
    a = run_episode(env, DwaController(env.grid, path))
    b = run_episode(env, DwaController(env.grid, path))
    assert a.success and a.recoveries >= 1
    assert a == b
    assert a.success != (a.timed_out or a.collisions > 0)
