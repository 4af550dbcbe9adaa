"""Reference geometry on the SPD manifold and the Cholesky diffeomorphism.

The affine-invariant operations here cost an eigendecomposition per call
and serve as independent oracles for :mod:`odergru.geometry` and as the
slow side of the complexity benchmark. Nothing on the training path
depends on them except :func:`cholesky_decompose`.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lapack
from threadpoolctl import threadpool_limits

from . import geometry as geo
from .errors import NumericalError


class CholeskyError(NumericalError):
    """Raised when a matrix is not positive definite.

    ``pivot`` is the 1-based index of the leading minor that failed and
    ``index`` the position of the offending matrix within the batch.
    """

    def __init__(self, pivot, index=()):
        self.pivot = pivot
        self.index = index
        where = f" (batch index {index})" if index != () else ""
        super().__init__(f"matrix is not positive definite: leading minor {pivot} failed{where}")


class KarcherError(NumericalError):
    def __init__(self, n_iter, residual):
        self.n_iter = n_iter
        self.residual = residual
        super().__init__(f"Karcher flow did not converge in {n_iter} iterations (residual {residual:.3e})")


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky_decompose(s) -> np.ndarray:
    """Packed Cholesky factor of SPD matrices ``s`` of shape ``(..., d, d)``.

    Raises
    ------
    CholeskyError
        If some matrix is not positive definite; the failing pivot comes
        from LAPACK ``potrf``.
    """
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise NumericalError("non-finite entries in matrix to factorise")
    try:
        low = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        flat = s.reshape((-1,) + s.shape[-2:])
        for i, m in enumerate(flat):
            _, info = lapack.dpotrf(m, lower=1)
            if info > 0:
                idx = np.unravel_index(i, s.shape[:-2]) if s.ndim > 2 else ()
                raise CholeskyError(int(info), tuple(int(j) for j in idx)) from None
        raise
    return geo.pack(low)


def cholesky_compose(l) -> np.ndarray:
    """``L L^T`` for packed Cholesky factors."""
    low = geo.unpack(l)
    return low @ np.swapaxes(low, -1, -2)


def _eig_fn(a, fn):
    w, v = np.linalg.eigh(symmetrize(a))
    return (v * fn(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def sqrtm(p):
    return _eig_fn(p, np.sqrt)


def invsqrtm(p):
    return _eig_fn(p, lambda w: 1.0 / np.sqrt(w))


def logm(p):
    return _eig_fn(p, np.log)


def expm(q):
    return _eig_fn(q, np.exp)


def spd_exp(p, q) -> np.ndarray:
    """Affine-invariant exponential map at ``p`` of the symmetric tangent ``q``.

    ``P^{1/2} exp(P^{-1/2} Q P^{-1/2}) P^{1/2}``.
    """
    p, q = np.asarray(p, float), np.asarray(q, float)
    if p.shape[-2:] != q.shape[-2:]:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    ph, pih = sqrtm(p), invsqrtm(p)
    return symmetrize(ph @ expm(pih @ q @ pih) @ ph)


def spd_log(q, p) -> np.ndarray:
    """Affine-invariant logarithm at base ``q`` of the SPD matrix ``p``.

    ``Q^{1/2} log(Q^{-1/2} P Q^{-1/2}) Q^{1/2}``.
    """
    q, p = np.asarray(q, float), np.asarray(p, float)
    if p.shape[-2:] != q.shape[-2:]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {p.shape}")
    qh, qih = sqrtm(q), invsqrtm(q)
    return symmetrize(qh @ logm(qih @ p @ qih) @ qh)


def affine_invariant_distance(p1, p2) -> np.ndarray:
    """``0.5 * ||log(P1^{-1/2} P2 P1^{-1/2})||_F``."""
    p1, p2 = np.asarray(p1, float), np.asarray(p2, float)
    ih = invsqrtm(p1)
    w = np.linalg.eigvalsh(symmetrize(ih @ p2 @ ih))
    return 0.5 * np.sqrt(np.sum(np.log(w) ** 2, axis=-1))


@dataclass(frozen=True)
class ManifoldMaps:
    """An exp/log pair plus a tangent norm, used by :func:`karcher_flow_mean`."""

    exp: Callable
    log: Callable
    norm: Callable


def _chol_norm(base, u):
    return np.sqrt(geo.metric(base, u, u))


def _affine_norm(base, q):
    ih = invsqrtm(base)
    return np.linalg.norm(ih @ q @ ih, axis=(-2, -1))


CHOLESKY_MAPS = ManifoldMaps(geo.exp_map, geo.log_map, _chol_norm)
AFFINE_MAPS = ManifoldMaps(spd_exp, spd_log, _affine_norm)


@dataclass
class KarcherResult:
    mean: np.ndarray
    n_iter: int
    residual: float


def karcher_flow_mean(points, maps: ManifoldMaps | str = "cholesky", max_iter=100, tol=1e-10,
                      step=1.0, init=None, full_output=False):
    """Fréchet mean by fixed-point iteration in the tangent space.

    Iterates ``mu <- Exp_mu(step * mean_i Log_mu(X_i))`` until the norm of
    the tangent mean drops below ``tol``.

    Parameters
    ----------
    points : array_like
        Stack of points along axis 0: packed Cholesky factors for the
        ``"cholesky"`` maps, dense SPD matrices for ``"affine"``.
    maps : {"cholesky", "affine"} or ManifoldMaps
    init : array_like, optional
        Starting point, defaults to the first point.

    Raises
    ------
    KarcherError
        If the residual is still above ``tol`` after ``max_iter`` iterations.
    """
    if isinstance(maps, str):
        maps = {"cholesky": CHOLESKY_MAPS, "affine": AFFINE_MAPS}[maps]
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] == 0:
        raise ValueError("karcher_flow_mean needs at least one point")
    mu = pts[0].copy() if init is None else np.asarray(init, dtype=float)
    residual = np.inf
    for it in range(1, max_iter + 1):
        t = maps.log(mu, pts).mean(axis=0)
        residual = float(maps.norm(mu, t))
        if residual < tol:
            out = KarcherResult(mu, it, residual)
            return out if full_output else mu
        mu = maps.exp(mu, step * t)
    raise KarcherError(max_iter, residual)


def random_cholesky(rng, d, size=None, scale=0.5):
    """Random packed Cholesky points ``exp_map(I, K)`` with Gaussian ``K``."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    return geo.exp_at_identity(rng.normal(scale=scale, size=shape + (geo.n_entries(d),)))


def _median_time(fn, repeats, budget_s=None):
    """Median wall time of ``fn`` in ns.

    With ``budget_s`` the loop stops early once that much time has been spent
    (at least one call is always timed).
    """
    ts = []
    start = time.perf_counter()
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        ts.append(time.perf_counter_ns() - t0)
        if budget_s is not None and time.perf_counter() - start > budget_s:
            break
    return int(np.median(ts))


def complexity_benchmark(d_list: Sequence[int], n_points=768, repeats=21, seed=0, path=None,
                         karcher_repeats=5, karcher_budget_s=2.0, working_set_bytes=16 << 20,
                         scale=0.05):
    """Time the closed-form log-Cholesky mean against affine Karcher flow.

    Returns rows ``(d, n, t_closed_ns, t_karcher_ns)`` with median wall
    times; if ``path`` is given they are also written there as CSV. BLAS is
    pinned to one thread while timing.

    The closed form is timed round-robin over enough independent copies of
    the point set to fill ``working_set_bytes``, so that each call reads
    data that is not already in the core's private cache whatever ``d`` is.
    Timing one small array in a tight loop would measure it from L2 and the
    large ones from further out, which bends the scaling curve.
    """
    d_list = list(d_list)
    if d_list != sorted(d_list):
        raise ValueError("d_list must be sorted ascending")
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for d in d_list:
            pts = random_cholesky(rng, d, size=n_points, scale=scale)
            spds = cholesky_compose(pts)
            copies = [pts] + [pts.copy() for _ in range(-(-working_set_bytes // pts.nbytes) - 1)]

            def sweep():
                for c in copies:
                    geo.frechet_mean(c)

            sweep()  # warm up code paths
            t_closed = _median_time(sweep, repeats) // len(copies)
            init = np.eye(d)
            t_karcher = _median_time(
                lambda: karcher_flow_mean(spds, "affine", max_iter=100, tol=1e-8, init=init),
                karcher_repeats, budget_s=karcher_budget_s)
            rows.append((d, n_points, t_closed, t_karcher))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d", "n", "t_closed_ns", "t_karcher_ns"])
            w.writerows(rows)
    return rows
