import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from odergru import geometry as geo
from odergru import manifold_ode as mo

from conftest import grads_close, rand_points, rel_err

P = 10  # d = 4


def field(rng, p=P, hidden=(8,), scale=1.0):
    return mo.VectorField.init(p, hidden, rng, out_scale=scale)


def fd_params(fn, params, eps=1e-6):
    out = []
    for a in params:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            o = a[i]
            a[i] = o + eps
            hi = fn()
            a[i] = o - eps
            lo = fn()
            a[i] = o
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# config and schedule


def test_config_validation():
    for bad in (dict(n_steps=0), dict(solver="rk4"), dict(backward="magic"),
                dict(time_normalization=0.0), dict(n_steps=2.5)):
        with pytest.raises(ValueError):
            mo.OdeConfig(**bad)


def test_step_counts():
    assert mo.n_euler_steps(0.0, 16) == 1
    assert mo.n_euler_steps(1.0, 16) == 16
    assert mo.n_euler_steps(0.3, 10) == 3      # 0.3 * 10 rounds to 3, not 4
    assert mo.n_euler_steps(0.31, 10) == 4
    with pytest.raises(ValueError):
        mo.n_euler_steps(-1.0, 4)


def test_normalize_times():
    t = np.array([2.0, 3.0, 6.0])
    assert mo.normalize_times(t, mo.OdeConfig()).tolist() == [0.0, 0.25, 1.0]
    assert mo.normalize_times(t, mo.OdeConfig(time_normalization=2.0)).tolist() == [1.0, 1.5, 3.0]
    assert mo.normalize_times(np.array([5.0]), mo.OdeConfig()).tolist() == [0.0]


# ---------------------------------------------------------------------------
# vector field


def test_zero_field(rng):
    f = mo.VectorField.zero(P, (8,))
    assert not f(rng.normal(size=(3, P)), rng.random(3)).any()
    g = field(rng)
    g.params[-2][:] = 0.0
    assert not g(rng.normal(size=(3, P)), 0.7).any()


def test_time_independence_when_time_weight_zero(rng):
    f = field(rng)
    f.params[0][:, -1] = 0.0
    u = rng.normal(size=(4, P))
    assert np.array_equal(f(u, 0.1), f(u, 0.9))


def test_field_shapes_and_errors(rng):
    f = field(rng, hidden=(8, 5))
    assert f(rng.normal(size=(2, 3, P)), 0.5).shape == (2, 3, P)
    with pytest.raises(ValueError):
        mo.VectorField([np.zeros((10, 4)), np.zeros(10)])
    with pytest.raises(ValueError):
        mo.VectorField([np.zeros((10, 11))])


def test_jvp_matches_finite_differences(rng):
    f = field(rng, hidden=(8, 6))
    for _ in range(5):
        u, du = rng.normal(size=(2, 3, P))
        t, dt = rng.random(3), rng.normal(size=3)
        eps = 1e-6
        fd = (f(u + eps * du, t + eps * dt) - f(u - eps * du, t - eps * dt)) / (2 * eps)
        assert rel_err(f.jvp(u, t, du, dt), fd) <= 1e-4


def test_vjp_is_adjoint_of_jvp(rng):
    f = field(rng, hidden=(8,))
    u, du, g = rng.normal(size=(3, 2, P))
    t, dt = rng.random(2), rng.normal(size=2)
    gu, gt, _ = f.vjp(u, t, g)
    lhs = np.sum(g * f.jvp(u, t, du, dt))
    assert np.isclose(lhs, np.sum(gu * du) + np.sum(gt * dt), rtol=1e-12)


def test_vjp_parameter_gradient(rng):
    f = field(rng, hidden=(6,))
    u, g = rng.normal(size=(2, 3, P))
    t = rng.random(3)
    _, _, gp = f.vjp(u, t, g)
    fd = fd_params(lambda: np.sum(g * f(u, t)), f.params)
    ok, errs = grads_close(gp, fd)
    assert ok, errs


# ---------------------------------------------------------------------------
# forward solve


def test_zero_interval_returns_input_exactly(rng):
    f = field(rng)
    u = rng.normal(size=(3, P))
    assert np.array_equal(mo.ode_solve(f, u, 0.4, 0.4, mo.OdeConfig()), u)


def test_zero_field_is_identity(rng):
    u = rng.normal(size=P)
    out = mo.ode_solve(mo.VectorField.zero(P), u, 0.0, 2.3, mo.OdeConfig(n_steps=7))
    assert np.array_equal(out, u)


def test_constant_field_is_exact(rng):
    c = rng.normal(size=P)
    f = mo.VectorField.linear(np.zeros((P, P)), c)
    u = rng.normal(size=P)
    out = mo.ode_solve(f, u, 0.25, 1.0, mo.OdeConfig(n_steps=5))
    assert np.allclose(out, u + 0.75 * c, rtol=0, atol=1e-14)


def test_linear_decay_first_order():
    f = mo.VectorField.linear(-np.eye(P))
    u0 = np.linspace(-1, 1, P)
    ns = [4, 8, 16, 32, 64]
    errs = [np.abs(mo.ode_solve(f, u0, 0.0, 1.0, mo.OdeConfig(n_steps=n)) - np.exp(-1) * u0).max()
            for n in ns]
    order = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 0.8 <= order <= 1.2


def test_euler_step_formula(rng):
    f = field(rng)
    u = rng.normal(size=P)
    out = mo.ode_solve(f, u, 0.0, 0.5, mo.OdeConfig(n_steps=4))
    ref = u.copy()
    for k in range(2):
        ref = ref + 0.25 * f(ref[None], np.array([0.25 * k]))[0]
    assert np.array_equal(out, ref)


def test_batched_rows_match_individual_solves(rng):
    f = field(rng)
    u = rng.normal(size=(4, P))
    t0 = np.array([0.0, 0.1, 0.5, 0.2])
    t1 = np.array([1.0, 0.1, 0.7, 0.9])
    cfg = mo.OdeConfig(n_steps=8)
    batched = mo.ode_solve(f, u, t0, t1, cfg)
    for i in range(4):
        single = mo.ode_solve(f, u[i], t0[i], t1[i], cfg)
        assert np.allclose(batched[i], single, rtol=0, atol=1e-14)


def test_interval_additivity_on_aligned_grid(rng):
    f = field(rng)
    u = rng.normal(size=P)
    cfg = mo.OdeConfig(n_steps=8)
    whole = mo.ode_solve(f, u, 0.0, 1.0, cfg)
    split = mo.ode_solve(f, mo.ode_solve(f, u, 0.0, 0.5, cfg), 0.5, 1.0, cfg)
    assert np.allclose(whole, split, rtol=0, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_reports_step():
    f = mo.VectorField.linear(np.eye(P) * 1e308)
    with pytest.raises(mo.OdeError) as info:
        mo.ode_solve(f, np.ones(P), 0.0, 1.0, mo.OdeConfig(n_steps=4))
    assert info.value.step >= 1


# ---------------------------------------------------------------------------
# evolve_hidden


def test_evolve_hidden_identities(rng):
    h = rand_points(rng, 4, 3)
    f = field(rng)
    cfg = mo.OdeConfig()
    assert np.max(np.abs(mo.evolve_hidden(h, 0.3, 0.3, f, cfg) - h)) <= 1e-12
    assert np.max(np.abs(mo.evolve_hidden(h, 0.0, 5.0, mo.VectorField.zero(P), cfg) - h)) <= 1e-12


def test_evolve_hidden_uses_identity_chart(rng):
    h = rand_points(rng, 4)
    f = field(rng)
    cfg = mo.OdeConfig(n_steps=4)
    u1 = mo.ode_solve(f, geo.log_at_identity(h), 0.0, 1.0, cfg)
    assert np.array_equal(mo.evolve_hidden(h, 0.0, 1.0, f, cfg), geo.exp_at_identity(u1))


@given(st.integers(0, 2 ** 32 - 1))
def test_evolve_hidden_closure(seed):
    rng = np.random.default_rng(seed)
    f = field(rng, scale=float(rng.uniform(0.1, 2.0)))
    h = rand_points(rng, 4, 50, scale=1.5)
    t0 = rng.random(50)
    out = mo.evolve_hidden(h, t0, t0 + rng.uniform(0, 2, 50), f, mo.OdeConfig(n_steps=8))
    assert np.all(out[:, geo.diag_indices(4)] > 0)


# ---------------------------------------------------------------------------
# reverse mode


def test_unrolled_identity_step(rng):
    f = mo.VectorField.zero(P, (8,))
    u = rng.normal(size=P)
    _, tape = mo.ode_solve(f, u, 0.0, 0.05, mo.OdeConfig(n_steps=4), return_tape=True)
    assert len(tape.us) == 1
    g = rng.normal(size=P)
    gu, gp = mo.backward_unrolled(g, tape, f)
    assert np.array_equal(gu, g)
    # only the output bias sees the cotangent, scaled by the step
    assert np.allclose(gp[-1], 0.05 * g, rtol=1e-12)
    assert not any(a.any() for a in gp[:-1])


def test_unrolled_missing_tape():
    with pytest.raises(ValueError, match="tape"):
        mo.backward_unrolled(np.zeros(P), None, mo.VectorField.zero(P))


@pytest.mark.parametrize("case", range(20))
def test_unrolled_matches_finite_differences(case):
    rng = np.random.default_rng([11, case])
    f = field(rng, hidden=(6,))
    u = rng.normal(size=(2, P))
    t0 = rng.random(2)
    t1 = t0 + rng.uniform(0, 1, 2)
    cfg = mo.OdeConfig(n_steps=6)
    g = rng.normal(size=u.shape)
    out, tape = mo.ode_solve(f, u, t0, t1, cfg, return_tape=True)
    gu, gp = mo.backward_unrolled(g, tape, f)

    def loss():
        return np.sum(g * mo.ode_solve(f, u, t0, t1, cfg))

    fd = fd_params(loss, [u] + f.params)
    ok, errs = grads_close([gu] + gp, fd)
    assert ok, errs


def test_gradient_additivity_across_split_intervals(rng):
    f = field(rng)
    u = rng.normal(size=P)
    g = rng.normal(size=P)
    cfg = mo.OdeConfig(n_steps=8)
    out, tape = mo.ode_solve(f, u, 0.0, 1.0, cfg, return_tape=True)
    gu_whole, gp_whole = mo.backward_unrolled(g, tape, f)
    mid, tape1 = mo.ode_solve(f, u, 0.0, 0.5, cfg, return_tape=True)
    _, tape2 = mo.ode_solve(f, mid, 0.5, 1.0, cfg, return_tape=True)
    g_mid, gp2 = mo.backward_unrolled(g, tape2, f)
    gu_split, gp1 = mo.backward_unrolled(g_mid, tape1, f)
    assert np.max(np.abs(gu_split - gu_whole)) <= 1e-10
    for a, b, c in zip(gp1, gp2, gp_whole):
        assert np.max(np.abs(a + b - c)) <= 1e-10


def test_adjoint_zero_field(rng):
    f = mo.VectorField.zero(P, (8,))
    g = rng.normal(size=P)
    gu, gp = mo.backward_adjoint(g, rng.normal(size=P), 0.0, 1.0, f, mo.OdeConfig())
    assert np.array_equal(gu, g)
    assert np.allclose(gp[-1], g, rtol=1e-12)
    assert not any(a.any() for a in gp[:-1])


def test_adjoint_linear_field_against_matrix_exponential(rng):
    # d = 2: for f(u) = A u the exact sensitivity is g expm(A T)
    a = rng.normal(scale=0.5, size=(3, 3))
    f = mo.VectorField.linear(a)
    u0 = rng.normal(size=3)
    g = rng.normal(size=3)
    cfg = mo.OdeConfig(n_steps=4096)
    u1 = mo.ode_solve(f, u0, 0.0, 1.0, cfg)
    gu, _ = mo.backward_adjoint(g, u1, 0.0, 1.0, f, cfg)
    assert rel_err(gu, g @ expm(a)) <= 1e-3


@pytest.mark.parametrize("case", range(10))
def test_adjoint_matches_unrolled_at_128_steps(case):
    rng = np.random.default_rng([13, case])
    f = field(rng, hidden=(16,))
    u = rng.normal(size=(3, P))
    t0 = rng.uniform(0, 0.5, 3)
    t1 = t0 + rng.uniform(0, 1, 3)
    cfg = mo.OdeConfig(n_steps=128)
    g = rng.normal(size=u.shape)
    out, tape = mo.ode_solve(f, u, t0, t1, cfg, return_tape=True)
    gu, gp = mo.backward_unrolled(g, tape, f)
    ga, gpa = mo.backward_adjoint(g, out, t0, t1, f, cfg)
    assert rel_err(ga, gu) <= 1e-3
    for x, y in zip(gpa, gp):
        assert rel_err(x, y) <= 1e-3
