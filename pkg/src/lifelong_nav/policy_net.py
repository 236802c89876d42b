"""The learnable policy: a tanh MLP over (lidar, local goal) with exact
backprop for the smoothed-L2 behavior-cloning loss.

Parameters live in one flat float64 vector.  Layer-major layout: for each
layer the weight matrix of shape (fan_in, fan_out) in row-major order, then
its bias of length fan_out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import Action, DEFAULT_LIMITS, Limits

N_BEAMS = 720
OBS_DIM = N_BEAMS + 2
LAYER_SIZES = (OBS_DIM, 64, 64, 64, 2)
LOSS_EPS = 1e-8

CKPT_MAGIC = b"LNAVCKPT"
CKPT_VERSION = 1


def n_params(sizes: Sequence[int] = LAYER_SIZES) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


N_PARAMS = n_params()


@dataclass(frozen=True, eq=False)
class Observation:
    """Normalized policy input: lidar in (0, 1] and the local goal scaled by
    the lookahead distance."""

    lidar: np.ndarray
    local_goal: tuple[float, float]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.lidar, self.local_goal])


def make_observation(ranges: np.ndarray, goal_robot_frame, max_range: float, lookahead: float = 1.0) -> Observation:
    lidar = np.minimum(np.asarray(ranges, dtype=float), max_range) / max_range
    g = (goal_robot_frame[0] / lookahead, goal_robot_frame[1] / lookahead)
    return Observation(lidar, g)


def unpack(params: np.ndarray, sizes: Sequence[int] = LAYER_SIZES) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into the flat vector."""
    if params.shape != (n_params(sizes),):
        raise ValueError(f"expected {n_params(sizes)} parameters, got {params.shape}")
    layers, i = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[i : i + fan_in * fan_out].reshape(fan_in, fan_out)
        i += fan_in * fan_out
        b = params[i : i + fan_out]
        i += fan_out
        layers.append((w, b))
    return layers


def init_params(seed: int, sizes: Sequence[int] = LAYER_SIZES) -> np.ndarray:
    """Uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, fan_out))
    return np.concatenate(chunks)


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, a = batch
        return np.atleast_2d(x), np.atleast_2d(a)
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = np.stack([e.obs.vector() if isinstance(e.obs, Observation) else e.obs for e in batch])
    a = np.array([(e.action.v, e.action.omega) for e in batch], dtype=float)
    return x, a


def forward_batch(params: np.ndarray, x: np.ndarray, sizes: Sequence[int] = LAYER_SIZES) -> np.ndarray:
    h = x
    layers = unpack(params, sizes)
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def forward(params: np.ndarray, obs: Observation | np.ndarray) -> Action:
    """Raw (unclamped) network output as an action."""
    x = obs.vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=float)
    out = forward_batch(params, x[None, :])[0]
    return Action(float(out[0]), float(out[1]))


def act(params: np.ndarray, obs: Observation | np.ndarray, limits: Limits = DEFAULT_LIMITS) -> Action:
    """Executable action: forward pass clamped to v in [0, v_max], |w| <= w_max."""
    a = forward(params, obs)
    return Action(min(max(a.v, 0.0), limits.v_max), min(max(a.omega, -limits.omega_max), limits.omega_max))


def sample_losses(params: np.ndarray, batch, eps: float = LOSS_EPS) -> np.ndarray:
    """Per-example sqrt(||a - pi(s)||^2 + eps^2)."""
    x, a = _as_arrays(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    r = forward_batch(params, x) - a
    return np.sqrt(np.sum(r * r, axis=1) + eps * eps)


def bc_loss(params: np.ndarray, batch, eps: float = LOSS_EPS) -> float:
    """Mean of sqrt(||a - pi(s)||^2 + eps^2) over the batch."""
    return float(np.mean(sample_losses(params, batch, eps)))


def loss_and_grad(params: np.ndarray, batch, eps: float = LOSS_EPS) -> tuple[float, np.ndarray]:
    x, a = _as_arrays(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    layers = unpack(params)
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w_out, b_out = layers[-1]
    out = h @ w_out + b_out
    r = out - a
    norm = np.sqrt(np.sum(r * r, axis=1) + eps * eps)
    loss = float(np.mean(norm))

    g = np.empty_like(params)
    grads = unpack(g)
    delta = r / (norm[:, None] * len(x))
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw, gb = grads[li]
        gw[...] = acts[li].T @ delta
        gb[...] = delta.sum(axis=0)
        if li:
            delta = (delta @ w.T) * (1.0 - acts[li] ** 2)
    return loss, g


def grad(params: np.ndarray, batch, eps: float = LOSS_EPS) -> np.ndarray:
    return loss_and_grad(params, batch, eps)[1]


def sgd_step(params: np.ndarray, g: np.ndarray, alpha: float) -> np.ndarray:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return params - alpha * g


def save_checkpoint(path: str | Path, params: np.ndarray, sizes: Sequence[int] = LAYER_SIZES) -> None:
    """Magic, version, layer count, layer sizes (uint32 LE), then float32 LE params."""
    if params.shape != (n_params(sizes),):
        raise ValueError("parameter vector does not match layer sizes")
    header = CKPT_MAGIC + struct.pack(f"<II{len(sizes)}I", CKPT_VERSION, len(sizes), *sizes)
    Path(path).write_bytes(header + np.asarray(params, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a policy checkpoint")
    off = len(CKPT_MAGIC)
    version, n = struct.unpack_from("<II", data, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    sizes = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    if tuple(sizes) != LAYER_SIZES:
        raise ValueError(f"{path}: layer sizes {sizes} do not match {LAYER_SIZES}")
    params = np.frombuffer(data, dtype="<f4", offset=off)
    if params.size != n_params(sizes):
        raise ValueError(f"{path}: truncated checkpoint")
    return params.astype(np.float64)


def quantize(params: np.ndarray) -> np.ndarray:
    """Round to the values a checkpoint stores."""
    return params.astype(np.float32).astype(np.float64)
