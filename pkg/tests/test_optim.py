"""AdamW update and the learning-rate schedule."""

import math

import numpy as np
import pytest

from pewire.autodiff import Param
from pewire.errors import NumericFault
from pewire.optim import OptimizerState, adamw_step, cosine_lr, no_decay


def scalar_adamw(theta, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0, dt=float):
    """Scalar reference for one element, every intermediate rounded to ``dt``."""
    m = dt(dt(b1) * m + dt(1 - b1) * g)
    v = dt(dt(b2) * v + dt(1 - b2) * dt(g * g))
    m_hat = dt(m / dt(1 - b1 ** t))
    v_hat = dt(v / dt(1 - b2 ** t))
    new = dt(theta - dt(lr) * dt(m_hat / dt(dt(math.sqrt(v_hat)) + dt(eps))))
    if wd:
        new = dt(new - dt(lr * wd) * theta)
    return new, m, v


def test_scalar_example():
    p = Param("w", np.array([1.0]))
    adamw_step(OptimizerState(weight_decay=0.0), [p], {"w": np.array([1.0])}, 0.1)
    expected, _, _ = scalar_adamw(1.0, 1.0, 0.0, 0.0, 1, 0.1)
    assert expected == pytest.approx(0.9 + 0.1 * 1e-8, abs=1e-15)
    assert abs(p.data[0] - expected) < 1e-12


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matches_scalar_loop_over_steps(rng, dtype):
    shape = (3, 4)
    p = Param("layer.0.mlp.fc1.weight", rng.standard_normal(shape).astype(dtype))
    q = Param("layer.0.ln_mlp.gamma", rng.standard_normal(4).astype(dtype))
    state = OptimizerState(weight_decay=0.05)
    dt = np.dtype(dtype).type
    ref = {n: [(dt(x), dt(0), dt(0)) for x in par.data.reshape(-1)] for n, par in (("p", p), ("q", q))}
    for t in range(1, 6):
        gp = rng.standard_normal(shape).astype(dtype)
        gq = rng.standard_normal(4).astype(dtype)
        lr = 1e-2 * t
        adamw_step(state, [p, q], {p.name: gp, q.name: gq}, lr)
        for key, g, wd in (("p", gp, 0.05), ("q", gq, 0.0)):
            ref[key] = [scalar_adamw(th, dt(gi), m, v, t, lr, wd=wd, dt=dt)
                        for (th, m, v), gi in zip(ref[key], g.reshape(-1))]
        for key, par in (("p", p), ("q", q)):
            expected = np.array([r[0] for r in ref[key]]).reshape(par.data.shape)
            assert np.abs(par.data - expected).max() < 1e-7
            assert par.data.dtype == dtype


def test_zero_grad_zero_decay_is_identity(rng):
    params = [Param(f"p{i}", rng.standard_normal((2, 3)).astype(np.float32)) for i in range(3)]
    before = [p.data.copy() for p in params]
    state = OptimizerState(weight_decay=0.0)
    for _ in range(3):
        adamw_step(state, params, {p.name: np.zeros_like(p.data) for p in params}, 1e-3)
    for p, b in zip(params, before):
        np.testing.assert_array_equal(p.data, b)


def test_decay_is_decoupled_from_moments(rng):
    p = Param("head.weight", rng.standard_normal(5))
    state = OptimizerState(weight_decay=0.05)
    adamw_step(state, [p], {p.name: rng.standard_normal(5)}, 1e-2)
    # warm moments, zero gradient: the step is the Adam part plus theta * (1 - lr * wd)
    theta = p.data.copy()
    m, v, t = state.m[p.name].copy(), state.v[p.name].copy(), state.step + 1
    adamw_step(state, [p], {p.name: np.zeros(5)}, 1e-2)
    m2, v2 = 0.9 * m, 0.999 * v
    adam = (m2 / (1 - 0.9 ** t)) / (np.sqrt(v2 / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, theta * (1 - 1e-2 * 0.05) - 1e-2 * adam, atol=1e-14)


@pytest.mark.parametrize("name", ["pos_embed", "layer.3.ln_pe.gamma", "last_ln_pe.beta", "last_ln.gamma"])
def test_no_decay_set_unchanged_under_zero_grad(name, rng):
    p = Param(name, rng.standard_normal(4))
    before = p.data.copy()
    adamw_step(OptimizerState(weight_decay=0.5), [p], {name: np.zeros(4)}, 0.1)
    np.testing.assert_array_equal(p.data, before)


def test_no_decay_membership():
    assert no_decay("pos_embed") and no_decay("layer.0.ln_attn.beta")
    assert not no_decay("cls_token")
    assert not no_decay("layer.0.attn.qkv.bias")
    assert not no_decay("patch_embed.weight")


def test_nonfinite_grad_aborts_without_change(rng):
    p = Param("w", rng.standard_normal(3))
    q = Param("u", rng.standard_normal(3))
    before = p.data.copy()
    state = OptimizerState()
    with pytest.raises(NumericFault) as info:
        adamw_step(state, [p, q], {"w": np.zeros(3), "u": np.array([0.0, np.inf, 0.0])}, 0.1)
    assert "u" in str(info.value)
    np.testing.assert_array_equal(p.data, before)
    assert state.step == 0


def test_frozen_param_skipped(rng):
    p = Param("w", rng.standard_normal(3), trainable=False)
    before = p.data.copy()
    adamw_step(OptimizerState(), [p], {"w": np.ones(3)}, 0.1)
    np.testing.assert_array_equal(p.data, before)


def test_negative_lr():
    with pytest.raises(ValueError):
        adamw_step(OptimizerState(), [], {}, -1.0)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 10, 100, 5e-4, 1e-5) == 0
        assert cosine_lr(10, 10, 100, 5e-4, 1e-5) == pytest.approx(5e-4)
        assert cosine_lr(100, 10, 100, 5e-4, 1e-5) == pytest.approx(1e-5)

    def test_warmup_linear_and_midpoint(self):
        assert cosine_lr(5, 10, 110, 1.0) == pytest.approx(0.5)
        assert cosine_lr(60, 10, 110, 1.0, 0.0) == pytest.approx(0.5)

    def test_monotone_decay(self):
        lrs = [cosine_lr(s, 4, 40, 1.0, 0.1) for s in range(4, 41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup(self):
        assert cosine_lr(0, 0, 10, 2.0) == 2.0
