import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbdm.errors import ConfigError, NumericFailure, UsageError
from mbdm.nn import AdamState, Tensor, adam_step, init_mlp, loss_and_grad, mlp_forward, sinusoidal_embed
from mbdm.nn.mlp import frequency_ladder

from oracles import naive_mlp


def random_params(rng, dim=3, hidden=5, blocks=2, embed_dim=4, cond_dim=0, scale=0.5):
    p = init_mlp(dim, hidden, blocks, embed_dim, cond_dim, rng=rng)
    return p.with_arrays({k: rng.normal(scale=scale, size=v.shape) for k, v in p.arrays.items()})


def fd_param_grad(params, loss_fn, h=1e-5):
    out = {}
    for k, a in params.arrays.items():
        g = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            plus, minus = {**params.arrays}, {**params.arrays}
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            plus[k], minus[k] = ap, am
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
        out[k] = g
    return out


# ---------------------------------------------------------------- embedding
def test_embed_zero_phase():
    assert np.array_equal(sinusoidal_embed(1.0, 4), [0.0, 1.0, 0.0, 1.0])


def test_embed_range_and_shape():
    e = sinusoidal_embed(np.geomspace(3e-5, 80, 50), 128)
    assert e.shape == (50, 128)
    assert np.all(np.abs(e) <= 1.0)


def test_embed_endpoints_distinguishable():
    assert np.linalg.norm(sinusoidal_embed(80.0, 128) - sinusoidal_embed(3e-5, 128)) > 1.0


def test_embed_ladder_spans_periods():
    f = frequency_ladder(128)
    assert math.isclose(2 * math.pi / f[0], 2 * math.pi * 1e-5)
    assert math.isclose(2 * math.pi / f[-1], 2 * math.pi * 1e3)


def test_embed_odd_dim_rejected():
    with pytest.raises(ConfigError):
        sinusoidal_embed(1.0, 5)


# ---------------------------------------------------------------- forward
def test_zero_output_projection_gives_zero():
    rng = np.random.default_rng(0)
    p = init_mlp(3, 8, 2, 4, rng=rng)
    x = rng.normal(size=(6, 3))
    assert np.array_equal(mlp_forward(p, x, sinusoidal_embed(np.ones(6), 4)), np.zeros((6, 3)))


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    x, e = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
    assert np.array_equal(mlp_forward(p, x, e), mlp_forward(p, x, e))


@pytest.mark.parametrize("cond_dim", [0, 2])
def test_forward_matches_naive_oracle(cond_dim):
    rng = np.random.default_rng(2 + cond_dim)
    p = random_params(rng, cond_dim=cond_dim)
    x, e = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    c = rng.normal(size=(5, cond_dim)) if cond_dim else None
    got = mlp_forward(p, x, e, c)
    for i in range(5):
        want = naive_mlp(p.arrays, p.blocks, x[i], e[i], c[i] if cond_dim else ())
        np.testing.assert_allclose(got[i], want, rtol=0, atol=1e-12)


def test_forward_linear_in_output_weights():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    p.arrays["out.b"][:] = 0.0
    x, e = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
    scaled = p.with_arrays({**p.arrays, "out.W": 4.0 * p.arrays["out.W"]})
    np.testing.assert_array_equal(mlp_forward(scaled, x, e), 4.0 * mlp_forward(p, x, e))


def test_forward_shape_errors():
    rng = np.random.default_rng(4)
    p = random_params(rng, cond_dim=2)
    with pytest.raises(ConfigError):
        mlp_forward(p, rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 2)))
    with pytest.raises(ConfigError):
        mlp_forward(p, rng.normal(size=(2, 3)), rng.normal(size=(2, 4)))
    q = random_params(rng)
    with pytest.raises(ConfigError):
        mlp_forward(q, rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_forward_nonfinite_reports_layer():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    p.arrays["block0.W1"][0, 0] = 1e308
    x = np.full((1, 3), 1e10)
    with pytest.raises(NumericFailure) as exc:
        mlp_forward(p, x, np.ones((1, 4)))
    assert "layer" in exc.value.context


# ---------------------------------------------------------------- gradients
def test_quadratic_gradient_is_w():
    rng = np.random.default_rng(6)
    p = random_params(rng)
    loss, g = loss_and_grad(p, lambda w: w["in.W"].square().sum() * 0.5)
    assert math.isclose(loss, 0.5 * float((p.arrays["in.W"] ** 2).sum()))
    np.testing.assert_array_equal(g["in.W"], p.arrays["in.W"])
    assert all(not g[k].any() for k in g if k != "in.W")


def test_unused_parameter_has_zero_gradient():
    rng = np.random.default_rng(7)
    p = random_params(rng, blocks=1)
    _, g = loss_and_grad(p, lambda w: (w["out.W"] * 2.0).sum())
    assert np.array_equal(g["block0.W1"], np.zeros_like(g["block0.W1"]))


@pytest.mark.parametrize("seed", range(5))
def test_denoising_gradient_matches_fd(seed):
    rng = np.random.default_rng(100 + seed)
    p = random_params(rng, cond_dim=seed % 2 * 2)
    x, e = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    c = rng.normal(size=(6, p.cond_dim)) if p.cond_dim else None
    target = rng.normal(size=(6, 3))

    def closure(w):
        return (mlp_forward(p, x, e, c, weights=w) - target).square().sum() * (1 / 6)

    _, g = loss_and_grad(p, closure)
    fd = fd_param_grad(p, lambda arrs: float(((mlp_forward(p, x, e, c, weights=arrs) - target) ** 2).sum() / 6))
    for k in g:
        big = np.abs(fd[k]) >= 1e-8
        rel = np.abs(g[k] - fd[k])[big] / np.abs(fd[k])[big]
        assert rel.size == 0 or rel.max() <= 1e-4, k
        assert np.all(np.abs(g[k] - fd[k])[~big] <= 1e-8), k


def test_graph_reuse_raises():
    t = Tensor(np.ones(3), requires_grad=True)
    loss = (t * 2.0).sum()
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises():
    p = random_params(np.random.default_rng(8))
    with pytest.raises(NumericFailure):
        loss_and_grad(p, lambda w: (w["in.W"] * np.inf).sum())


def test_broadcast_add_gradient():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    ((a + b) * (a + b)).sum().backward()
    np.testing.assert_allclose(b.grad, (2 * (1 + np.arange(3.0))) * 4)


# ---------------------------------------------------------------- Adam
def test_adam_zero_gradient_leaves_params():
    arrays = {"p": np.array([1.0, -2.0])}
    new, st_ = adam_step(arrays, {"p": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(new["p"], arrays["p"])
    assert st_.step == 1


def test_adam_first_step_hand_value():
    new, _ = adam_step({"p": np.array([0.0])}, {"p": np.array([1.0])}, AdamState(lr=0.1))
    # m_hat = 1, v_hat = 1 -> -0.1 / (1 + 1e-8)
    assert math.isclose(new["p"][0], -0.1 / (1 + 1e-8), rel_tol=1e-14)


def test_adam_deterministic_and_pure():
    arrays = {"p": np.array([0.3, 0.1])}
    g = {"p": np.array([0.5, -2.0])}
    s = AdamState(lr=0.01)
    a1, s1 = adam_step(arrays, g, s)
    a2, s2 = adam_step(arrays, g, s)
    np.testing.assert_array_equal(a1["p"], a2["p"])
    assert s.step == 0 and s1.step == s2.step == 1
    np.testing.assert_array_equal(arrays["p"], [0.3, 0.1])


def test_adam_nan_gradient_keeps_params():
    arrays = {"p": np.array([0.3])}
    with pytest.raises(NumericFailure):
        adam_step(arrays, {"p": np.array([np.nan])}, AdamState())
    assert arrays["p"][0] == 0.3


def test_adam_shape_mismatch():
    with pytest.raises(ConfigError):
        adam_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, AdamState())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5), st.integers(1, 20))
def test_adam_step_counter_strictly_increases(g, n):
    arrays = {"p": np.zeros(len(g))}
    s = AdamState()
    for _ in range(n):
        arrays, s2 = adam_step(arrays, {"p": np.array(g)}, s)
        assert s2.step == s.step + 1
        s = s2
    # each coordinate's update never exceeds lr in magnitude per step (bias-corrected Adam bound)
    assert np.all(np.abs(arrays["p"]) <= n * s.lr * (1 + 1e-9) + 1e-12)
