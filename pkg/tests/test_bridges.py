import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mbdm.bridges import (
    ComposedScore,
    EmptyIntersectionWarning,
    GammaSchedule,
    IntervalBridge,
    ManualBridge,
    arch_compose,
    bridge_eval,
    combine,
    conditioning_signal,
    conditioning_width,
    gamma_eval,
    guidance_score,
    prior_score,
    truncated_normal_mean,
    truncated_normal_ratio,
)
from mbdm.constraints import BoxField, Checkerboard, CollisionField, DrivableRegion, LinearField, OffroadField
from mbdm.errors import ConfigError, DomainError, NumericFailure
from mbdm.nn import init_mlp

from oracles import uniform_diffusion_score


def random_net(dim, cond, seed=0):
    rng = np.random.default_rng(seed)
    p = init_mlp(dim, 8, 1, 4, cond, rng=rng)
    return p.with_arrays({k: rng.normal(scale=0.3, size=v.shape) for k, v in p.arrays.items()})


class ZeroField(LinearField):
    """l == 0 everywhere: the whole space is the constraint set."""

    def __init__(self, dim):
        super().__init__(np.zeros(dim), -1.0)
        self.name = "zero"


# ---------------------------------------------------------------- gamma
def test_gamma_examples():
    assert gamma_eval(GammaSchedule("inverse", 1.0), 2.0) == 0.25
    assert gamma_eval(GammaSchedule("inverse", 10.0), 1.0) == pytest.approx(0.1)
    assert gamma_eval(GammaSchedule("watermark", sigma_data=0.5), 0.5) == pytest.approx(2.0)
    # independent evaluation of the watermark form
    s, sd = 0.5, 0.5
    assert (1 / s**2) * sd**2 / (s**2 + sd**2) == pytest.approx(2.0)


@pytest.mark.parametrize("g", [GammaSchedule("inverse", 1.0), GammaSchedule("inverse", 10.0),
                               GammaSchedule("inverse", 100.0), GammaSchedule("watermark", sigma_data=0.5)])
def test_gamma_endpoints(g):
    assert g(80.0) <= 1e-3 * g(1.0)
    assert g(3e-5) >= 1e6
    assert np.all(g(np.geomspace(3e-5, 80, 50)) > 0)


def test_gamma_domain():
    with pytest.raises(DomainError):
        GammaSchedule()(0.0)
    with pytest.raises(ConfigError):
        GammaSchedule("cubic")


# ---------------------------------------------------------------- manual bridge
def test_bridge_zero_inside():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    assert not bridge_eval(b, np.array([0.5, 0.5]), 1.0).any()


def test_bridge_checkerboard_example():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    np.testing.assert_allclose(bridge_eval(b, np.array([1.25, 0.5]), 1.0), [-0.5, 0.0])


def test_bridge_clamp():
    f = LinearField([10.0, 0.0])
    b = ManualBridge(f, GammaSchedule(), clamp=1.0)
    v = b(np.array([1.0, 0.0]), 1.0)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(v / np.linalg.norm(v), [-1.0, 0.0])
    t = b.terms(np.array([[1.0, 0.0]]), 1.0)
    assert t.active[0]


def test_bridge_nonfinite_gradient():
    class Bad(LinearField):
        def _value_and_grad(self, x, sigma):
            v, g = super()._value_and_grad(x, sigma)
            return v, g * np.nan

    with pytest.raises(NumericFailure) as exc:
        ManualBridge(Bad([1.0]), GammaSchedule())(np.array([[1.0]]), 1.0)
    assert "index" in exc.value.context


# ---------------------------------------------------------------- combination
def test_combine_with_zero_field_is_identity():
    b1 = ManualBridge(Checkerboard(), GammaSchedule())
    c = combine([b1, ManualBridge(ZeroField(2), GammaSchedule())])
    x = np.random.default_rng(0).uniform(-3, 3, (200, 2))
    np.testing.assert_array_equal(c(x, 0.7), b1(x, 0.7))
    np.testing.assert_array_equal(c.member(x), b1.member(x))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(1e-3, 10))
def test_combine_additive(x, y, s):
    b1 = ManualBridge(Checkerboard(), GammaSchedule())
    b2 = ManualBridge(BoxField([-1, -1], [1, 1]), GammaSchedule("inverse", 10.0))
    p = np.array([[x, y]])
    np.testing.assert_array_equal(combine([b1, b2])(p, s), b1(p, s) + b2(p, s))
    np.testing.assert_allclose(combine([b1, b1])(p, s), 2 * b1(p, s))


def test_combine_scene_membership_is_conjunction():
    rng = np.random.default_rng(1)
    region = DrivableRegion([[(-2, -0.5), (2, -0.5), (2, 0.5), (-2, 0.5)]])
    col = ManualBridge(CollisionField(2), GammaSchedule("inverse", 10.0))
    off = ManualBridge(OffroadField(2, region), GammaSchedule("inverse", 100.0))
    x = np.zeros((10_000, 14))
    for a in range(2):
        x[:, 7 * a] = rng.uniform(-2.5, 2.5, 10_000)
        x[:, 7 * a + 1] = rng.uniform(-1, 1, 10_000)
        x[:, 7 * a + 2] = np.log(rng.uniform(0.5, 1.2, 10_000))
        x[:, 7 * a + 3] = np.log(rng.uniform(0.3, 0.5, 10_000))
        h = rng.uniform(-np.pi, np.pi, 10_000)
        x[:, 7 * a + 4], x[:, 7 * a + 5] = np.cos(h), np.sin(h)
    c = combine([col, off])
    both = col.member(x) & off.member(x)
    np.testing.assert_array_equal(c.member(x), both)
    assert 0 < both.mean() < 1
    np.testing.assert_allclose(c.value(x), col.value(x) + off.value(x))


def test_combine_empty_intersection_warns():
    left = ManualBridge(LinearField([1.0], 1.0), GammaSchedule())    # x <= -1
    right = ManualBridge(LinearField([-1.0], -1.0), GammaSchedule())  # x >= 1
    with pytest.warns(EmptyIntersectionWarning):
        combine([left, right], probe_box=([-3.0], [3.0]), n_probe=10_000)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        combine([left, ManualBridge(LinearField([1.0], 0.0), GammaSchedule())], probe_box=([-3.0], [3.0]))


def test_combine_validation():
    with pytest.raises(ConfigError):
        combine([])
    with pytest.raises(ConfigError):
        combine([ManualBridge(Checkerboard(), GammaSchedule()), ManualBridge(LinearField([1.0]), GammaSchedule())])


# ---------------------------------------------------------------- interval bridge
def test_truncated_ratio_matches_scipy():
    rng = np.random.default_rng(2)
    a = rng.uniform(-10, 10, 2000)
    b = a + rng.uniform(0.01, 5, 2000)
    want = stats.truncnorm.mean(a, b)
    np.testing.assert_allclose(truncated_normal_ratio(a, b), want, rtol=1e-9, atol=1e-12)


def test_truncated_ratio_far_tail_stable():
    # both limits 40 sd into either tail: the mean sits just inside the near limit
    r = truncated_normal_ratio(np.array([40.0, -41.0]), np.array([41.0, -40.0]))
    assert np.all(np.isfinite(r))
    assert r[0] == pytest.approx(40.0 + 1 / 40.0, rel=1e-3)
    assert r[1] == pytest.approx(-40.0 - 1 / 40.0, rel=1e-3)


def test_interval_symmetric_zero():
    b = IntervalBridge([-1.0], [1.0])
    assert abs(b(np.array([0.0]), 0.7)[0]) <= 1e-16


def test_interval_example_value():
    b = IntervalBridge([-1.0], [1.0])
    m = truncated_normal_mean(2.0, 1.0, -1.0, 1.0)
    assert b(np.array([2.0]), 1.0)[0] == pytest.approx(m - 2.0, rel=1e-14)
    assert b(np.array([2.0]), 1.0)[0] == pytest.approx(-1.51005, abs=1e-5)


def test_interval_monte_carlo():
    rng = np.random.default_rng(3)
    draws = 2.0 + rng.standard_normal(2 * 10**7)
    kept = draws[(draws >= -1) & (draws <= 1)][:10**7]
    est, se = kept.mean() - 2.0, kept.std(ddof=1) / math.sqrt(len(kept))
    got = IntervalBridge([-1.0], [1.0])(np.array([2.0]), 1.0)[0]
    assert abs(got - est) <= 3 * se


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_interval_matches_quadrature():
    b = IntervalBridge([-1.0], [1.0])
    xs = np.linspace(-3, 3, 50)
    worst = 0.0
    for s in np.geomspace(1e-2, 80, 20):
        got = b(xs[:, None], s)[:, 0]
        want = np.array([uniform_diffusion_score(x, s) for x in xs])
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-6


def test_interval_large_sigma_vanishes():
    b = IntervalBridge([-1.0, 0.0], [1.0, 3.0])
    x = np.array([[2.0, -1.0]])
    s = 1e4
    np.testing.assert_allclose(b(x, s), (np.array([[0.0, 1.5]]) - x) / s**2, rtol=1e-6)


def test_interval_validation():
    with pytest.raises(ConfigError):
        IntervalBridge([1.0], [0.0])
    with pytest.raises(DomainError):
        IntervalBridge([0.0], [1.0])(np.array([0.5]), 0.0)


# ---------------------------------------------------------------- conditioning
def test_conditioning_zero_inside():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    c = conditioning_signal([b], np.array([[0.5, 0.5]]), 1.0, 0.5)
    assert c.shape == (1, conditioning_width([b], 2)) == (1, 3)
    assert not c.any()


def test_conditioning_limits():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    x = np.array([[1.25, 0.5]])
    far = conditioning_signal([b], x, 1e8, 0.5)
    assert np.abs(far[0, :2]).max() < 1e-8 and far[0, 2] == 1.0
    # at sigma -> 0 the weight is 1 and the signal is -grad l
    near = conditioning_signal([b], x, 1e-12, 0.5)
    np.testing.assert_allclose(near[0, :2], -Checkerboard().grad(x)[0], rtol=1e-12)


# ---------------------------------------------------------------- architectures
def test_zero_bridge_collapses_architectures():
    zb = ManualBridge(ZeroField(2), GammaSchedule())
    x = np.random.default_rng(4).normal(size=(50, 2))
    plain = ComposedScore("plain", random_net(2, 0))
    db = ComposedScore("DB", random_net(2, 0), [zb])
    np.testing.assert_array_equal(arch_compose(db, x, 0.3), arch_compose(plain, x, 0.3))
    c = ComposedScore("C", random_net(2, 3), [zb])
    mbm = ComposedScore("MBM", random_net(2, 3), [zb])
    np.testing.assert_array_equal(mbm(x, 0.3), c(x, 0.3))


def test_prior_is_bridge():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    x = np.random.default_rng(5).uniform(-3, 3, size=(100, 2))
    np.testing.assert_array_equal(prior_score([b])(x, 0.2), b(x, 0.2))


def test_mbm_is_c_plus_bridge():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    x = np.random.default_rng(6).uniform(-3, 3, size=(100, 2))
    net = random_net(2, 3, seed=7)
    c = ComposedScore("C", net, [b])
    mbm = ComposedScore("MBM", net, [b])
    np.testing.assert_allclose(mbm(x, 0.4), c(x, 0.4) + b(x, 0.4), rtol=1e-13, atol=1e-13)


def test_architecture_width_checks():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    with pytest.raises(ConfigError):
        ComposedScore("C", random_net(2, 0), [b])
    with pytest.raises(ConfigError):
        ComposedScore("DB", random_net(2, 3), [b])
    with pytest.raises(ConfigError):
        ComposedScore("MBM", random_net(2, 3), [])
    with pytest.raises(ConfigError):
        guidance_score(ComposedScore("DB", random_net(2, 0), [b]), [b])


def test_guidance_adds_bridge_to_plain():
    b = ManualBridge(Checkerboard(), GammaSchedule())
    plain = ComposedScore("plain", random_net(2, 0))
    x = np.random.default_rng(8).uniform(-3, 3, size=(20, 2))
    np.testing.assert_allclose(guidance_score(plain, [b])(x, 0.5), plain(x, 0.5) + b(x, 0.5), rtol=1e-13, atol=1e-13)
