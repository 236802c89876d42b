from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lifelong_nav import policy_net as pn
from lifelong_nav.kinematics import Limits

SIZES = pn.LAYER_SIZES


def _layers_oracle(params):
    """Slice the flat vector by hand: per layer W (fan_in x fan_out) row-major, then b."""
    out, i = [], 0
    for fi, fo in zip(SIZES[:-1], SIZES[1:]):
        W = np.array([[params[i + r * fo + c] for c in range(fo)] for r in range(fi)])
        i += fi * fo
        b = np.array(params[i : i + fo])
        i += fo
        out.append((W, b))
    assert i == len(params)
    return out


def forward_oracle(params, x):
    h = np.asarray(x, dtype=float)
    layers = _layers_oracle(params)
    for W, b in layers[:-1]:
        h = np.array([math.tanh(sum(h[r] * W[r, c] for r in range(len(h))) + b[c]) for c in range(W.shape[1])])
    W, b = layers[-1]
    return np.array([sum(h[r] * W[r, c] for r in range(len(h))) + b[c] for c in range(W.shape[1])])


def _batch(rng, n):
    x = np.concatenate([rng.uniform(0.05, 1.0, (n, pn.N_BEAMS)), rng.uniform(-1, 1, (n, 2))], axis=1)
    a = np.stack([rng.uniform(0, 0.5, n), rng.uniform(-1, 1, n)], axis=1)
    return x, a


def test_parameter_count():
    assert pn.N_PARAMS == 722 * 64 + 64 + 64 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2 == 54722
    assert pn.init_params(0).shape == (54722,)


def test_init_deterministic_and_seeded():
    assert np.array_equal(pn.init_params(3), pn.init_params(3))
    assert not np.array_equal(pn.init_params(0), pn.init_params(1))


@pytest.mark.parametrize("seed", range(10))
def test_init_std_matches_uniform_moment(seed):
    for (w, b), fan_in in zip(pn.unpack(pn.init_params(seed)), SIZES[:-1]):
        target = 1.0 / math.sqrt(3 * fan_in)
        assert abs(w.std() / target - 1) < 0.2
        bound = 1 / math.sqrt(fan_in)
        assert np.abs(w).max() <= bound and np.abs(b).max() <= bound


def test_zero_params_give_zero_output():
    a = pn.forward(np.zeros(pn.N_PARAMS), np.full(pn.OBS_DIM, 0.5))
    assert (a.v, a.omega) == (0.0, 0.0)


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for seed in range(3):
        p = pn.init_params(seed) * rng.uniform(0.5, 3.0)
        x, _ = _batch(rng, 1)
        a = pn.forward(p, x[0])
        assert np.allclose([a.v, a.omega], forward_oracle(p, x[0]), rtol=0, atol=1e-12)
        b = pn.forward(p, x[0])
        assert a == b


def test_observation_layout_and_normalization():
    obs = pn.make_observation(np.array([1.0, 2.5, 9.0] + [5.0] * 717), (0.6, -0.2), max_range=5.0, lookahead=1.0)
    v = obs.vector()
    assert v.shape == (722,)
    assert v[:3] == pytest.approx([0.2, 0.5, 1.0]) and np.all(v[3:720] == 1.0)
    assert v[720:] == pytest.approx([0.6, -0.2])


def test_act_clamps_only_at_execution():
    p = np.zeros(pn.N_PARAMS)
    (_, b_out) = pn.unpack(p)[-1]
    b_out[:] = [-1.0, 9.0]
    raw = pn.forward(p, np.zeros(pn.OBS_DIM))
    assert (raw.v, raw.omega) == (-1.0, 9.0)
    ex = pn.act(p, np.zeros(pn.OBS_DIM), Limits(2.0, 2.0))
    assert (ex.v, ex.omega) == (0.0, 2.0)


# --------------------------------------------------------------------- loss


def test_loss_at_exact_fit_is_eps():
    rng = np.random.default_rng(1)
    p = pn.init_params(1)
    x, _ = _batch(rng, 5)
    a = pn.forward_batch(p, x)
    assert pn.bc_loss(p, (x, a)) == pytest.approx(pn.LOSS_EPS, rel=1e-6)
    assert np.linalg.norm(pn.grad(p, (x, a))) < 1e-6


def test_three_four_five():
    p = np.zeros(pn.N_PARAMS)
    assert pn.bc_loss(p, (np.zeros((1, pn.OBS_DIM)), np.array([[3.0, 4.0]]))) == pytest.approx(5.0, abs=1e-7)


def test_loss_matches_per_example_oracle():
    rng = np.random.default_rng(2)
    p = pn.init_params(2)
    x, a = _batch(rng, 8)
    out = pn.forward_batch(p, x)
    expect = sum(math.sqrt((a[i, 0] - out[i, 0]) ** 2 + (a[i, 1] - out[i, 1]) ** 2 + 1e-16) for i in range(8)) / 8
    assert pn.bc_loss(p, (x, a)) == pytest.approx(expect, abs=1e-12)


def test_empty_batch_errors():
    p = np.zeros(pn.N_PARAMS)
    with pytest.raises(ValueError):
        pn.bc_loss(p, [])
    with pytest.raises(ValueError):
        pn.grad(p, [])


# ----------------------------------------------------------------- gradient


def fd_check(p, batch, coords, h=1e-5):
    g = pn.grad(p, batch)
    worst = 0.0
    for i in coords:
        e = np.zeros_like(p)
        e[i] = h
        fd = (pn.bc_loss(p + e, batch) - pn.bc_loss(p - e, batch)) / (2 * h)
        # absolute floor keeps round-off on near-zero components from dominating
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
    return worst


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = pn.init_params(seed % 1000) * rng.uniform(0.5, 2.0)
    batch = _batch(rng, 4)
    assert fd_check(p, batch, rng.choice(pn.N_PARAMS, 100, replace=False)) < 1e-4


def test_duplicated_batch_same_gradient():
    rng = np.random.default_rng(4)
    p = pn.init_params(4)
    x, a = _batch(rng, 1)
    g1 = pn.grad(p, (x, a))
    g2 = pn.grad(p, (np.repeat(x, 2, axis=0), np.repeat(a, 2, axis=0)))
    # equal up to BLAS summation order
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------- SGD


def test_sgd_step_examples():
    p = pn.init_params(0)
    assert np.array_equal(pn.sgd_step(p, np.zeros_like(p), 0.5), p)
    assert np.allclose(pn.sgd_step(p, np.ones_like(p), 0.1), p - 0.1)
    with pytest.raises(ValueError):
        pn.sgd_step(p, p, 0.0)


def test_sgd_loss_decreases_over_every_window():
    rng = np.random.default_rng(5)
    p = pn.init_params(5)
    batch = _batch(rng, 32)
    losses = []
    for _ in range(200):
        loss, g = pn.loss_and_grad(p, batch)
        losses.append(loss)
        p = pn.sgd_step(p, g, 1e-3)
    losses.append(pn.bc_loss(p, batch))
    assert all(losses[t + 50] < losses[t] for t in range(len(losses) - 50))


# ---------------------------------------------------------------- Lipschitz


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-6, 1e-1))
def test_forward_lipschitz_in_observation(seed, scale):
    rng = np.random.default_rng(seed)
    p = pn.init_params(seed % 100)
    L = np.prod([np.linalg.norm(w, 2) for w, _ in pn.unpack(p)])
    x, _ = _batch(rng, 1)
    dx = rng.normal(size=x.shape) * scale
    d_out = pn.forward_batch(p, x + dx) - pn.forward_batch(p, x)
    assert np.linalg.norm(d_out) <= L * np.linalg.norm(dx) * (1 + 1e-9)


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    p = pn.quantize(pn.init_params(7) * 3)
    f = tmp_path / "p.ckpt"
    pn.save_checkpoint(f, p)
    q = pn.load_checkpoint(f)
    assert np.array_equal(p, q)
    raw = f.read_bytes()
    assert raw.startswith(pn.CKPT_MAGIC)
    version, n = struct.unpack_from("<II", raw, len(pn.CKPT_MAGIC))
    assert (version, n) == (pn.CKPT_VERSION, len(SIZES))
    assert len(raw) == len(pn.CKPT_MAGIC) + 8 + 4 * n + 4 * pn.N_PARAMS


def test_checkpoint_rejects_corruption(tmp_path):
    p = pn.init_params(0)
    f = tmp_path / "p.ckpt"
    pn.save_checkpoint(f, p)
    raw = f.read_bytes()
    (tmp_path / "a").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "b").write_bytes(raw[:-4])
    (tmp_path / "c").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    for name in "abc":
        with pytest.raises(ValueError):
            pn.load_checkpoint(tmp_path / name)
    with pytest.raises(ValueError):
        pn.save_checkpoint(f, p[:-1])
