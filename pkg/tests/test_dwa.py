from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lifelong_nav.dwa import (
    DwaConfig,
    DwaController,
    RecoveryPhase,
    Source,
    discriminate,
    dwa_plan,
    evaluate_window,
    recovery_action,
)
from lifelong_nav.global_planner import local_goal_world, plan_global
from lifelong_nav.kinematics import Action, RobotState, rollout, run_episode, step
from lifelong_nav.lifelong import ETA
from lifelong_nav.world import EnvironmentSpec, OccupancyGrid, obstacle_distance

from conftest import box_grid

CFG = DwaConfig()


@pytest.fixture(scope="module")
def logged(bundled):
    """50 states visited by the initial policy across the bundled maps."""
    out = []
    for env_id in (1, 2, 3):
        env = bundled[env_id]
        path = plan_global(env.grid, env.start[:2], env.goal, 0.3)
        trace = []
        run_episode(env, DwaController(env.grid, path), trace=trace)
        picks = np.linspace(0, len(trace) - 1, 17 if env_id < 3 else 16).astype(int)
        out.extend((env, path, trace[i][0]) for i in picks)
    assert len(out) == 50
    return out


def oracle_plan(state, grid, path, config, clearance_min):
    """Brute-force re-scoring of every window sample, written from the
    definition: pose-by-pose rollouts, exact obstacle distances, normalized
    terms, first maximum wins."""
    dt = config.control_dt
    v_lo = max(0.0, state.v - config.accel_v * dt)
    v_hi = max(v_lo, min(config.max_speed, state.v + config.accel_v * dt))
    w_lo = max(-config.max_yaw_rate, state.omega - config.accel_w * dt)
    w_hi = max(w_lo, min(config.max_yaw_rate, state.omega + config.accel_w * dt))
    goal = local_goal_world(path, state.pose, config.lookahead)
    r = config.robot_radius
    best, best_a, scores = -math.inf, None, []
    for v in np.linspace(v_lo, v_hi, config.v_samples):
        for w in np.linspace(w_lo, w_hi, config.w_samples):
            poses, _ = rollout(state, Action(v, w), config.sim_horizon, config.sim_dt, grid, r)
            d = min(obstacle_distance(grid, p[:2], r + config.clearance_cap) for p in poses)
            gap = d - r
            if d < r or gap < clearance_min:
                scores.append(-math.inf)
                continue
            fx, fy, fth = poses[-1]
            err = math.remainder(math.atan2(goal[1] - fy, goal[0] - fx) - fth, 2 * math.pi)
            s = (
                config.weight_heading * (1 - abs(err) / math.pi)
                + config.weight_clearance * min(gap, config.clearance_cap) / config.clearance_cap
                + config.weight_velocity * v / config.max_speed
            )
            scores.append(s)
            if s > best:
                best, best_a = s, Action(float(v), float(w))
    return best_a, np.array(scores)


@pytest.mark.parametrize("relax", [1.0, 0.5, 0.25])
def test_selected_action_matches_exhaustive_rescoring(logged, relax):
    cm = CFG.clearance_min * relax
    for env, path, state in logged:
        out = dwa_plan(state, env.grid, path, CFG, cm)
        best, scores = oracle_plan(state, env.grid, path, CFG, cm)
        samples = evaluate_window(state, env.grid, path, CFG, cm)
        assert np.array_equal(np.isfinite(scores), samples.survives)
        assert np.allclose(samples.score[samples.survives], scores[samples.survives], atol=1e-12)
        if best is None:
            assert not out.feasible and out.in_recovery
        else:
            assert out.feasible
            i = int(np.argmax(samples.score))
            # identical choice, or a numerically tied one
            assert out.action == best or scores[i] >= scores.max() - 1e-12


def test_feasible_actions_never_collide(logged):
    for env, path, state in logged:
        out = dwa_plan(state, env.grid, path, CFG, 0.0)
        if out.feasible:
            _, hit = rollout(state, out.action, CFG.sim_horizon, CFG.sim_dt, env.grid, CFG.robot_radius)
            assert not hit


def test_open_space_goes_straight_fast():
    g = box_grid(200, 200, 0.05)
    path = plan_global(g, (2.025, 5.025), (8.025, 5.025))
    state = RobotState(2.025, 5.025, 0.0, 0.5, 0.0)
    out = dwa_plan(state, g, path)
    assert out.feasible and not out.in_recovery and out.recovery_phase == RecoveryPhase.NONE
    assert abs(out.action.omega) < 1e-9
    assert out.action.v == pytest.approx(CFG.max_speed)


def test_boxed_in_robot_is_infeasible():
    cells = np.ones((40, 40), bool)
    cells[18:22, 18:22] = False  # 0.2 m pocket, narrower than the robot
    g = OccupancyGrid(cells, 0.05)
    path = plan_global(g, (1.0, 1.0), (1.05, 1.05))
    out = dwa_plan(RobotState(1.0, 1.0, 0.0), g, path)
    assert not out.feasible and out.in_recovery and out.recovery_phase == RecoveryPhase.ROTATE


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 49), st.integers(0, 2**31))
def test_adding_obstacles_only_removes_survivors(logged, k, seed):
    env, path, state = logged[k]
    rng = np.random.default_rng(seed)
    cells = env.grid.cells.copy()
    ix, iy = env.grid.cell_of(state.x, state.y)
    for _ in range(5):
        dx, dy = rng.integers(-25, 26, 2)
        if (dx, dy) != (0, 0):
            cells[np.clip(iy + dy, 0, cells.shape[0] - 1), np.clip(ix + dx, 0, cells.shape[1] - 1)] = True
    more = OccupancyGrid(cells, env.grid.resolution)
    a = evaluate_window(state, env.grid, path, CFG, 0.1).survives
    b = evaluate_window(state, more, path, CFG, 0.1).survives
    assert not np.any(b & ~a)


def test_plan_is_deterministic(logged):
    env, path, state = logged[7]
    assert dwa_plan(state, env.grid, path) == dwa_plan(state, env.grid, path)


# ------------------------------------------------------------------ recovery


def test_recovery_constants():
    assert recovery_action(RecoveryPhase.ROTATE) == Action(0.0, 0.8)
    assert recovery_action(RecoveryPhase.BACKUP) == Action(-0.2, 0.0)
    with pytest.raises(ValueError):
        recovery_action(RecoveryPhase.NONE)


def _corner_env():
    # robot tucked into a dead-end pocket facing the wall
    cells = np.zeros((80, 80), bool)
    cells[30:50, 30:32] = True
    cells[30:32, 30:50] = True
    cells[48:50, 30:50] = True
    spec_cells = np.pad(cells[1:-1, 1:-1], 1, constant_values=True)
    return EnvironmentSpec("corner", OccupancyGrid(spec_cells, 0.05), (1.9, 2.0, math.pi), (3.5, 3.5), 0.3)


def test_recovery_schedule_and_interval_count():
    env = _corner_env()
    path = plan_global(env.grid, env.start[:2], env.goal, 0.0)
    ctrl = DwaController(env.grid, path)
    outputs = []
    state = RobotState(*env.start)
    for _ in range(30):
        out = ctrl.propose(state)
        outputs.append(out)
        ctrl.commit(state, out, True)
    assert not outputs[0].feasible
    phases = [o.recovery_phase for o in outputs[:30]]
    assert phases[:20] == [RecoveryPhase.ROTATE] * 20
    assert phases[20:30] == [RecoveryPhase.BACKUP] * 10

    # full episode: metric counter against an interval count over the log
    trace = []
    m = run_episode(env, DwaController(env.grid, path), timeout=40.0, trace=trace)
    flags = [rec for _, _, rec in trace]
    intervals = sum(1 for i, f in enumerate(flags) if f and (i == 0 or not flags[i - 1]))
    assert m.recoveries == intervals >= 1
    assert m.success or m.timed_out


def test_output_invariants_over_logged_run(bundled):
    env = bundled[2]
    path = plan_global(env.grid, env.start[:2], env.goal, 0.3)
    ctrl = DwaController(env.grid, path)
    state = RobotState(*env.start)
    for _ in range(400):
        out = ctrl.propose(state)
        if not out.feasible:
            assert out.in_recovery
        assert (out.recovery_phase == RecoveryPhase.NONE) == (not out.in_recovery)
        ctrl.commit(state, out, True)
        state = step(state, out.action, 0.1)


# ------------------------------------------------------------ discriminator


def test_discriminator_table():
    g = box_grid(60, 40, 0.1, walls=[(30, 0, 30, 39)])
    s = RobotState(2.0, 2.0, 0.0)
    assert discriminate(None, Action(0.5, 0.0), Source.INITIAL, g, s) == 1.0
    assert discriminate(None, Action(0.0, 0.8), Source.INITIAL, g, s) == 0.0
    assert discriminate(None, Action(0.15, 0.0), Source.INITIAL, g, s) == 0.0
    assert discriminate(None, Action(0.0, 0.5), Source.LEARNED, g, s) == 0.5
    assert discriminate(None, Action(1.5, 0.0), Source.LEARNED, g, s) == 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-0.5, 2.0),
    st.floats(-2.0, 2.0),
    st.sampled_from([Source.INITIAL, Source.LEARNED]),
    st.floats(0.5, 3.5),
    st.floats(0.5, 3.5),
    st.floats(-math.pi, math.pi),
)
def test_discriminator_scores_are_three_levels(v, w, source, x, y, th):
    g = box_grid(60, 40, 0.1, walls=[(30, 0, 30, 39)])
    d = discriminate(None, Action(v, w), source, g, RobotState(x, y, th))
    assert d in (0.0, 0.5, 1.0)
    # only steady forward initial-policy motion clears the demonstration bar
    assert (d >= ETA) == (source == Source.INITIAL and v > 0.15)


def test_config_validation():
    with pytest.raises(ValueError):
        DwaConfig(v_samples=1)
    with pytest.raises(ValueError):
        DwaConfig(weight_heading=-1.0)
    with pytest.raises(ValueError):
        DwaConfig(sim_horizon=0.0)
