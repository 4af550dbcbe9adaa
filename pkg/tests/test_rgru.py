import numpy as np
import pytest
from hypothesis import given, strategies as st

from odergru import geometry as geo
from odergru import rgru
from odergru.errors import NumericalError

from conftest import grads_close, rand_points


def random_raw(rng, d, scale=0.5):
    p = geo.n_entries(d)
    return rgru.RgruParams(*(rng.normal(scale=scale, size=(2, p)) for _ in range(3)),
                           *(rng.normal(scale=scale, size=p) for _ in range(3)))


def reference_step(h, x, eff, candidate="softplus"):
    """The gate equations written with the geometry module's public ops."""
    def gate_mean(a, b, w):
        return geo.weighted_frechet_mean(np.stack([a, b]), w)

    z = geo.sigmoid_gate(geo.translate(gate_mean(x, h, eff.w_z), eff.b_z))
    r = geo.sigmoid_gate(geo.translate(gate_mean(x, h, eff.w_r), eff.b_r))
    l = geo.translate(gate_mean(x, r * h, eff.w_l), eff.b_l)
    if candidate == "softplus":
        hh = geo.split_activation(l)
    else:
        hh = np.where(geo.diag_mask(geo.dim_from_entries(l.size)), geo.sigmoid(l), np.tanh(l))
    return geo.one_minus(z) * h + z * hh


def test_init_state():
    s = rgru.init_state(3)
    assert np.array_equal(s.H, geo.identity(3)) and s.step_index == 0
    assert geo.distance(s.H, s.H) == 0
    geo.CholeskyPoint(s.H)
    with pytest.raises(ValueError):
        rgru.init_state(0)


def test_init_params_start_as_plain_mean(rng):
    raw = rgru.init_params(4, rng)
    eff = rgru.reparameterize(raw)
    di = geo.diag_indices(4)
    for name, v in eff.items():
        assert np.all(v[..., di] == 1.0), name
    for name in ("b_z", "b_r", "b_l"):
        assert np.all(getattr(eff, name)[~geo.diag_mask(4)] == 0)
    assert np.all(np.abs(raw.w_z[:, ~geo.diag_mask(4)]) < 0.5)


def test_reparameterize_examples():
    p = geo.n_entries(2)
    raw = rgru.RgruParams(*(np.zeros((2, p)) for _ in range(3)), *(np.zeros(p) for _ in range(3)))
    raw.b_z[:] = [-2.0, 0.7, 0.0]
    eff = rgru.reparameterize(raw)
    assert eff.b_z.tolist() == [2.0 + geo.EPS_POS, 0.7, geo.EPS_POS]
    assert eff.w_z[0].tolist() == [geo.EPS_POS, 0.0, geo.EPS_POS]
    loose = rgru.reparameterize(raw, positive_weights=False)
    assert loose.w_z[0].tolist() == [0.0, 0.0, 0.0]
    assert loose.b_z.tolist() == eff.b_z.tolist()


@given(st.integers(0, 2 ** 32 - 1))
def test_reparameterize_always_valid(seed):
    rng = np.random.default_rng(seed)
    raw = random_raw(rng, 3, scale=10.0)
    eff = rgru.reparameterize(raw)
    di = geo.diag_indices(3)
    for name, v in eff.items():
        assert np.all(v[..., di] > 0)
    assert raw.b_z is not eff.b_z


def test_reparameterize_subgradient_zero_at_kink():
    p = geo.n_entries(2)
    raw = rgru.RgruParams(*(np.zeros((2, p)) for _ in range(3)), *(np.zeros(p) for _ in range(3)))
    g = {name: np.ones_like(v) for name, v in raw.items()}
    out = rgru.reparameterize_backward(g, raw)
    assert out["b_z"].tolist() == [0.0, 1.0, 0.0]


def test_step_matches_reference_composition(rng):
    for cand in rgru.CANDIDATE_ACTIVATIONS:
        raw = random_raw(rng, 4)
        h, x = rand_points(rng, 4, 2)
        st_ = rgru.step(rgru.RgruState(h, 5), x, raw, candidate=cand)
        assert st_.step_index == 6
        ref = reference_step(h, x, rgru.reparameterize(raw), cand)
        assert np.allclose(st_.H, ref, rtol=1e-13, atol=1e-14)


def test_step_is_batched(rng):
    raw = random_raw(rng, 3)
    h, x = rand_points(rng, 3, 7), rand_points(rng, 3, 7)
    batched = rgru.step(rgru.RgruState(h), x, raw).H
    single = np.stack([rgru.step(rgru.RgruState(h[i]), x[i], raw).H for i in range(7)])
    assert np.allclose(batched, single, rtol=1e-15, atol=0)


def saturate(raw, gate, sign):
    d = raw.hidden_dim
    dm = geo.diag_mask(d)
    b = np.where(dm, np.exp(30.0) if sign > 0 else 1e-300, sign * 30.0)
    w = np.zeros_like(getattr(raw, "w_" + gate))
    return rgru.with_params(raw, **{"b_" + gate: b, "w_" + gate: w})


def test_update_gate_endpoints(rng):
    raw = random_raw(rng, 3)
    h, x = rand_points(rng, 3, 2)
    eff_open = rgru.reparameterize(saturate(raw, "z", +1))
    _, c = rgru.cell_forward(h, x, eff_open)
    assert np.allclose(rgru.step(rgru.RgruState(h), x, saturate(raw, "z", +1)).H, c["hhat"],
                       rtol=0, atol=1e-12)
    closed = saturate(raw, "z", -1)
    # sigmoid(-30) ~ 1e-13 on strict-lower coordinates: they stay put
    h_new = rgru.step(rgru.RgruState(h), x, closed).H
    sl = ~geo.diag_mask(3)
    assert np.max(np.abs(h_new[sl] - h[sl])) <= 1e-12 * (1 + np.abs(h).max())


@given(st.integers(0, 2 ** 32 - 1))
def test_gate_diagonals_lie_above_one_half(seed):
    # the translated mean has a positive diagonal, so sigmoid maps it into (1/2, 1)
    rng = np.random.default_rng(seed)
    raw = random_raw(rng, 3, scale=3.0)
    h, x = rand_points(rng, 3, 2, scale=2.0)
    _, c = rgru.cell_forward(h, x, rgru.reparameterize(raw))
    di = geo.diag_indices(3)
    for g in ("z", "r"):
        assert np.all((c[g][di] >= 0.5) & (c[g][di] <= 1.0))


def test_step_exactly_keeps_state_when_gate_is_zero(rng):
    raw = random_raw(rng, 3)
    h, x = rand_points(rng, 3, 2)
    _, c = rgru.cell_forward(h, x, rgru.reparameterize(raw))
    z0 = np.zeros_like(h)
    assert np.array_equal((1.0 - z0) * h + z0 * c["hhat"], h)


@pytest.mark.parametrize("d", [2, 8, 32])
def test_closure_under_fuzzing(d):
    rng = np.random.default_rng(d)
    min_diag = np.inf
    for _ in range(34):
        raw = random_raw(rng, d, scale=float(rng.uniform(0.1, 3.0)))
        h = rand_points(rng, d, 100, scale=1.0)
        x = rand_points(rng, d, 100, scale=1.0)
        state = rgru.RgruState(h)
        for _ in range(3):
            state = rgru.step(state, x, raw)
        min_diag = min(min_diag, state.H[:, geo.diag_indices(d)].min())
    assert min_diag > 0


def test_step_is_deterministic(rng):
    raw = random_raw(rng, 4)
    h, x = rand_points(rng, 4, 2)
    a = rgru.step(rgru.RgruState(h), x, raw).H
    b = rgru.step(rgru.RgruState(h.copy()), x.copy(), raw).H
    assert np.array_equal(a, b)


def test_errors(rng):
    raw = random_raw(rng, 3)
    with pytest.raises(ValueError, match="dimension"):
        rgru.step(rgru.RgruState(geo.identity(3)), geo.identity(2), raw)
    with pytest.raises(ValueError, match="cache"):
        rgru.step_backward(np.zeros(6), None)
    huge = rgru.with_params(raw, b_l=np.full(6, 1e308), w_l=np.full((2, 6), 1e308))
    with pytest.raises(NumericalError, match="gate"):
        rgru.step(rgru.RgruState(rand_points(rng, 3)), rand_points(rng, 3, scale=3.0), huge)
    with pytest.raises(ValueError, match="candidate"):
        rgru.step(rgru.RgruState(geo.identity(3)), geo.identity(3), raw, candidate="relu")


# ---------------------------------------------------------------------------
# reverse mode


def fd_step(h, x, raw, g, positive_weights, candidate, eps=1e-6):
    def loss():
        return np.sum(g * rgru.step(rgru.RgruState(h), x, raw, positive_weights,
                                    candidate=candidate).H)

    out = {}
    for name, v in [("x", x), ("h", h)] + raw.items():
        gr = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            o = v[i]
            v[i] = o + eps
            a = loss()
            v[i] = o - eps
            b = loss()
            v[i] = o
            gr[i] = (a - b) / (2 * eps)
        out[name] = gr
    return out


def test_step_backward_zero_upstream(rng):
    raw = random_raw(rng, 3)
    h, x = rand_points(rng, 3, 2)
    _, cache = rgru.step(rgru.RgruState(h), x, raw, return_cache=True)
    gx, gh, gp = rgru.step_backward(np.zeros_like(h), cache)
    assert not gx.any() and not gh.any() and not any(v.any() for v in gp.values())


@pytest.mark.parametrize("case", range(20))
def test_step_backward_matches_finite_differences(case):
    rng = np.random.default_rng([7, case])
    d = 4
    raw = random_raw(rng, d)
    # keep raw diagonals away from the |.| kink
    for _, v in raw.items():
        di = geo.diag_indices(d)
        v[..., di] = np.where(np.abs(v[..., di]) < 1e-3, 0.1, v[..., di])
    h = rand_points(rng, d, 2)
    x = rand_points(rng, d, 2)
    g = rng.normal(size=h.shape)
    pw = bool(case % 2)
    cand = rgru.CANDIDATE_ACTIVATIONS[case % 3 == 0]
    _, cache = rgru.step(rgru.RgruState(h), x, raw, pw, return_cache=True, candidate=cand)
    gx, gh, gp = rgru.step_backward(g, cache)
    fd = fd_step(h, x, raw, g, pw, cand)
    names = ["x", "h"] + [n for n, _ in raw.items()]
    ok, errs = grads_close([gx, gh] + [gp[n] for n, _ in raw.items()], [fd[n] for n in names])
    assert ok, dict(zip(names, errs))


def test_saturated_gate_blocks_parameter_gradient(rng):
    # with z == 1 at a coordinate, H_prev no longer reaches the output there,
    # and the update-gate parameters receive no gradient
    d = 3
    raw = random_raw(rng, d)
    raw = rgru.with_params(raw, b_z=np.where(geo.diag_mask(d), 1e300, 1e3), w_z=np.zeros((2, 6)))
    h, x = rand_points(rng, d, 2)
    _, cache = rgru.step(rgru.RgruState(h), x, raw, return_cache=True)
    assert np.all(cache["z"] == 1.0)
    _, _, gp = rgru.step_backward(rng.normal(size=6), cache)
    assert not gp["w_z"].any()
    fd = fd_step(h, x, raw, np.ones(6), True, "softplus")
    assert not fd["w_z"].any()
