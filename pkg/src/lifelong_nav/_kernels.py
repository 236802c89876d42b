"""Compiled inner loops shared by the world, kinematics and DWA modules.

All geometry here works in *cell units*: a point (px, py) lies in cell
(floor(px), floor(py)); ``cells[iy, ix]`` is True when occupied.  Anything
outside the array counts as occupied.  Callers convert from meters.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def wrap_angle(theta):
    w = (theta + math.pi) % TWO_PI - math.pi
    if w <= -math.pi:
        w += TWO_PI
    return w


@njit(cache=True)
def occupied(cells, ix, iy):
    h, w = cells.shape
    if ix < 0 or iy < 0 or ix >= w or iy >= h:
        return True
    return cells[iy, ix]


@njit(cache=True)
def raycast_cells(cells, px, py, angle, max_cells):
    """Grid traversal from (px, py); distance in cells to the first occupied
    cell face, capped at ``max_cells``.  Returns -1.0 if the origin cell is
    occupied."""
    ix = int(math.floor(px))
    iy = int(math.floor(py))
    if occupied(cells, ix, iy):
        return -1.0
    dx = math.cos(angle)
    dy = math.sin(angle)
    inf = math.inf
    if dx > 0.0:
        step_x = 1
        t_max_x = (ix + 1 - px) / dx
        t_delta_x = 1.0 / dx
    elif dx < 0.0:
        step_x = -1
        t_max_x = (px - ix) / -dx
        t_delta_x = -1.0 / dx
    else:
        step_x = 0
        t_max_x = inf
        t_delta_x = inf
    if dy > 0.0:
        step_y = 1
        t_max_y = (iy + 1 - py) / dy
        t_delta_y = 1.0 / dy
    elif dy < 0.0:
        step_y = -1
        t_max_y = (py - iy) / -dy
        t_delta_y = -1.0 / dy
    else:
        step_y = 0
        t_max_y = inf
        t_delta_y = inf
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_delta_x
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_delta_y
        if t >= max_cells:
            return max_cells
        if occupied(cells, ix, iy):
            return t


@njit(cache=True)
def scan_cells(cells, px, py, theta, n_beams, fov, max_cells):
    out = np.empty(n_beams)
    if n_beams == 1:
        out[0] = raycast_cells(cells, px, py, theta, max_cells)
        return out
    inc = fov / (n_beams - 1)
    start = theta - 0.5 * fov
    for i in range(n_beams):
        out[i] = raycast_cells(cells, px, py, start + i * inc, max_cells)
    return out


@njit(cache=True)
def obstacle_distance(cells, px, py, cap):
    """Exact distance from a point to the nearest occupied cell square,
    clipped to ``cap`` (all in cells)."""
    best = cap
    x0 = int(math.floor(px - cap))
    x1 = int(math.floor(px + cap))
    y0 = int(math.floor(py - cap))
    y1 = int(math.floor(py + cap))
    for iy in range(y0, y1 + 1):
        if py < iy:
            ddy = iy - py
        elif py > iy + 1:
            ddy = py - (iy + 1)
        else:
            ddy = 0.0
        if ddy >= best:
            continue
        for ix in range(x0, x1 + 1):
            if not occupied(cells, ix, iy):
                continue
            if px < ix:
                ddx = ix - px
            elif px > ix + 1:
                ddx = px - (ix + 1)
            else:
                ddx = 0.0
            d = math.sqrt(ddx * ddx + ddy * ddy)
            if d < best:
                best = d
    return best


@njit(cache=True)
def step_pose(x, y, theta, v, omega, dt):
    if abs(omega) < 1e-6:
        nx = x + v * dt * math.cos(theta)
        ny = y + v * dt * math.sin(theta)
        nth = theta
    else:
        r = v / omega
        nth = theta + omega * dt
        nx = x + r * (math.sin(nth) - math.sin(theta))
        ny = y - r * (math.cos(nth) - math.cos(theta))
    return nx, ny, wrap_angle(nth)


@njit(cache=True)
def rollout_poses(x, y, theta, v, omega, dt, n_steps):
    out = np.empty((n_steps, 3))
    for k in range(n_steps):
        x, y, theta = step_pose(x, y, theta, v, omega, dt)
        out[k, 0] = x
        out[k, 1] = y
        out[k, 2] = theta
    return out


@njit(cache=True)
def min_distance_along(cells, poses, ox, oy, res, cap):
    """Smallest capped obstacle distance (cells) over a pose sequence."""
    best = cap
    for k in range(poses.shape[0]):
        d = obstacle_distance(cells, (poses[k, 0] - ox) / res, (poses[k, 1] - oy) / res, best)
        if d < best:
            best = d
    return best


@njit(cache=True)
def evaluate_samples(cells, ox, oy, res, x, y, theta, vs, ws, dt, n_steps, cap):
    """Roll out every (v, w) sample; return per-sample minimum obstacle
    distance (cells, capped) and final pose."""
    n = vs.shape[0]
    dist = np.empty(n)
    final = np.empty((n, 3))
    for i in range(n):
        poses = rollout_poses(x, y, theta, vs[i], ws[i], dt, n_steps)
        dist[i] = min_distance_along(cells, poses, ox, oy, res, cap)
        final[i, 0] = poses[n_steps - 1, 0]
        final[i, 1] = poses[n_steps - 1, 1]
        final[i, 2] = poses[n_steps - 1, 2]
    return dist, final
