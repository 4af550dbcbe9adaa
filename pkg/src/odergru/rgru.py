"""Gated recurrent cell on the Cholesky space.

Gates, candidate and hidden state are all lower-triangular matrices with
positive diagonal, stored packed. With ``chart(X) = log_map(I, X)`` (log on
the diagonal, identity elsewhere) one step reads::

    z  = sigmoid(wFM({X, H}, W_z) (+) B_z)
    r  = sigmoid(wFM({X, H}, W_r) (+) B_r)
    l  = wFM({X, r * H}, W_l) (+) B_l
    H~ = tanh(strict(l)) + softplus(diag(l))
    H' = (1 - z) * H + z * H~

where ``wFM`` is the entrywise-weighted log-Cholesky mean, ``(+)`` the
group translation and ``*`` the entrywise product. Each ``W`` holds one
weight matrix per wFM input, so it has shape ``(2, p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import geometry as geo
from .errors import NumericalError

GATES = ("z", "r", "l")
CANDIDATE_ACTIVATIONS = ("softplus", "sigmoid")


@dataclass
class RgruParams:
    """Raw (unconstrained) cell parameters, packed lower-triangular."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_l: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_l: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return geo.dim_from_entries(self.b_z.shape[-1])

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class RgruState:
    H: np.ndarray
    step_index: int = 0


def init_state(d: int) -> RgruState:
    """Hidden state at the identity."""
    if d < 1:
        raise ValueError("hidden dimension must be positive")
    return RgruState(geo.identity(d), 0)


def init_params(d: int, rng) -> RgruParams:
    """Weights start as an unweighted mean and biases at the identity.

    Strict-lower weight entries are uniform in ``(-1/sqrt(d), 1/sqrt(d))``;
    raw diagonals are ``1 - EPS_POS`` so the effective values are exactly 1.
    """
    p = geo.n_entries(d)
    dm = geo.diag_mask(d)
    s = 1.0 / np.sqrt(d)
    one = 1.0 - geo.EPS_POS

    def weight():
        return np.where(dm, one, rng.uniform(-s, s, size=(2, p)))

    def bias():
        return np.where(dm, one, 0.0)

    return RgruParams(weight(), weight(), weight(), bias(), bias(), bias())


def reparameterize(raw: RgruParams, positive_weights=True) -> RgruParams:
    """Effective parameters: diagonals become ``|raw| + EPS_POS``.

    Biases are always constrained; weight diagonals only when
    ``positive_weights``. Strict-lower entries pass through.
    """
    dm = geo.diag_mask(raw.hidden_dim)
    out = {}
    for name, v in raw.items():
        if name.startswith("b") or positive_weights:
            v = np.where(dm, np.abs(v) + geo.EPS_POS, v)
        out[name] = v
    return RgruParams(**out)


def reparameterize_backward(grads: dict, raw: RgruParams, positive_weights=True) -> dict:
    """Map gradients w.r.t. effective parameters to raw storage (subgradient 0 at 0)."""
    dm = geo.diag_mask(raw.hidden_dim)
    out = {}
    for name, v in raw.items():
        g = grads[name]
        if name.startswith("b") or positive_weights:
            g = np.where(dm, np.sign(v) * g, g)
        out[name] = g
    return out


def _chart(x, dm):
    return np.where(dm, np.log(np.where(dm, x, 1.0)), x)


def _unchart(q, dm):
    return np.where(dm, np.exp(np.where(dm, q, 0.0)), q)


def _check(name, v):
    if not np.isfinite(v).all():
        raise NumericalError(f"non-finite values produced by gate {name!r}")
    return v


def cell_forward(h, x, eff: RgruParams, candidate="softplus"):
    """One batched step on packed arrays ``h, x`` of shape ``(..., p)``.

    ``candidate`` picks the positive activation for the diagonal of the
    candidate state; strict-lower entries always use tanh.

    Returns the new hidden state and the cache for :func:`cell_backward`.
    """
    d = geo.dim_from_entries(h.shape[-1])
    if x.shape[-1] != h.shape[-1]:
        raise ValueError(f"dimension mismatch: input {x.shape}, hidden {h.shape}")
    dm = geo.diag_mask(d)
    cx, ch = _chart(x, dm), _chart(h, dm)
    c = {"dm": dm, "x": x, "h": h, "cx": cx, "ch": ch}
    for g in ("z", "r"):
        w, b = getattr(eff, "w_" + g), getattr(eff, "b_" + g)
        m = _unchart(0.5 * (w[0] * cx + w[1] * ch), dm)
        gate = _check(g, geo.sigmoid(np.where(dm, m * b, m + b)))
        c["m" + g], c[g] = m, gate
    rh = c["r"] * h
    crh = _chart(rh, dm)
    ml = _unchart(0.5 * (eff.w_l[0] * cx + eff.w_l[1] * crh), dm)
    l = _check("l", np.where(dm, ml * eff.b_l, ml + eff.b_l))
    if candidate == "softplus":
        sp = geo.softplus(l)
    elif candidate == "sigmoid":
        sp = geo.sigmoid(l)
    else:
        raise ValueError(f"unknown candidate activation {candidate!r}")
    floored = sp < geo.EPS_POS
    hhat = np.where(dm, np.where(floored, geo.EPS_POS, sp), np.tanh(l))
    z = c["z"]
    h_new = _check("H", (1.0 - z) * h + z * hhat)
    c.update(rh=rh, crh=crh, ml=ml, l=l, hhat=hhat, floored=floored, eff=eff,
             candidate=candidate)
    return h_new, c


def cell_backward(g_new, c):
    """Reverse-mode pass of :func:`cell_forward`.

    Returns ``(g_x, g_h, grads)`` where ``grads`` maps effective parameter
    names to gradients summed over the batch axes.
    """
    dm, eff, h, x = c["dm"], c["eff"], c["h"], c["x"]
    z, r, hhat, l = c["z"], c["r"], c["hhat"], c["l"]
    batch_axes = tuple(range(g_new.ndim - 1))
    grads = {}

    g_z = g_new * (hhat - h)
    g_h = g_new * (1.0 - z)
    g_hhat = g_new * z
    if c["candidate"] == "softplus":
        d_pos = geo.sigmoid(l)
    else:
        d_pos = hhat * (1.0 - hhat)
    d_split = np.where(dm, np.where(c["floored"], 0.0, d_pos), 1.0 - hhat ** 2)
    g_l = g_hhat * d_split

    ml = c["ml"]
    grads["b_l"] = np.sum(g_l * np.where(dm, ml, 1.0), axis=batch_axes)
    g_q = g_l * np.where(dm, eff.b_l, 1.0) * np.where(dm, ml, 1.0)
    grads["w_l"] = 0.5 * np.stack([np.sum(g_q * c["cx"], axis=batch_axes),
                                   np.sum(g_q * c["crh"], axis=batch_axes)])
    g_cx = 0.5 * g_q * eff.w_l[0]
    g_rh = 0.5 * g_q * eff.w_l[1] * np.where(dm, 1.0 / np.where(dm, c["rh"], 1.0), 1.0)
    g_r = g_rh * h
    g_h = g_h + g_rh * r
    g_ch = np.zeros_like(g_h)

    for g, g_gate in (("z", g_z), ("r", g_r)):
        gate, m = c[g], c["m" + g]
        w, b = getattr(eff, "w_" + g), getattr(eff, "b_" + g)
        g_pre = g_gate * gate * (1.0 - gate)
        grads["b_" + g] = np.sum(g_pre * np.where(dm, m, 1.0), axis=batch_axes)
        g_q = g_pre * np.where(dm, b, 1.0) * np.where(dm, m, 1.0)
        grads["w_" + g] = 0.5 * np.stack([np.sum(g_q * c["cx"], axis=batch_axes),
                                          np.sum(g_q * c["ch"], axis=batch_axes)])
        g_cx = g_cx + 0.5 * g_q * w[0]
        g_ch = g_ch + 0.5 * g_q * w[1]

    g_x = g_cx * np.where(dm, 1.0 / np.where(dm, x, 1.0), 1.0)
    g_h = g_h + g_ch * np.where(dm, 1.0 / np.where(dm, h, 1.0), 1.0)
    return g_x, g_h, grads


def step(state: RgruState, x, params: RgruParams, positive_weights=True, return_cache=False,
         candidate="softplus"):
    """Advance ``state`` by one observation ``x`` using raw ``params``."""
    eff = reparameterize(params, positive_weights)
    (h, xx), _ = geo._as_packed(state.H, x)
    with np.errstate(over="ignore", invalid="ignore"):
        h_new, cache = cell_forward(h, xx, eff, candidate)
    new = RgruState(h_new, state.step_index + 1)
    if return_cache:
        cache["raw"] = params
        cache["positive_weights"] = positive_weights
        return new, cache
    return new


def step_backward(g_h_new, cache):
    """Gradients of a :func:`step` w.r.t. its input, previous state and raw parameters.

    Returns ``(g_x, g_h_prev, raw_param_grads)``.
    """
    if cache is None or "raw" not in cache:
        raise ValueError("step_backward needs the cache from step(..., return_cache=True)")
    g_x, g_h, grads = cell_backward(np.asarray(g_h_new, dtype=float), cache)
    raw_grads = reparameterize_backward(grads, cache["raw"], cache["positive_weights"])
    return g_x, g_h, raw_grads


def with_params(params: RgruParams, **changes) -> RgruParams:
    return replace(params, **changes)
