"""Riemannian operations on the Cholesky space.

Lower-triangular ``d x d`` matrices are stored packed: a length
``d(d+1)/2`` array holding the lower triangle in row-major order, i.e.
``(0,0), (1,0), (1,1), (2,0), ...``. Every function here works on packed
arrays with arbitrary leading batch axes and never materialises the dense
matrix, so each operation costs ``O(d^2)`` per point.

Points of the Cholesky space (lower triangular, positive diagonal) and
tangent vectors (any lower-triangular matrix) share the same layout. The
:class:`CholeskyPoint` and :class:`TangentLower` containers validate a
single matrix and convert to and from dense form; the functions accept
them anywhere an array is expected.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericalError

# floor for softplus outputs and reparameterised diagonals
EPS_POS = 1e-12


# ---------------------------------------------------------------------------
# packed layout


def n_entries(d: int) -> int:
    """Number of stored entries of a ``d x d`` lower-triangular matrix."""
    return d * (d + 1) // 2


@lru_cache(maxsize=None)
def dim_from_entries(p: int) -> int:
    """Matrix size ``d`` for ``p = d(d+1)/2`` packed entries."""
    d = int(round((np.sqrt(8 * p + 1) - 1) / 2))
    if d < 1 or n_entries(d) != p:
        raise ValueError(f"{p} is not a triangular number of packed entries")
    return d


@lru_cache(maxsize=None)
def _layout(d):
    rows, cols = np.tril_indices(d)
    diag = rows == cols
    diag_idx = np.flatnonzero(diag)
    for a in (rows, cols, diag, diag_idx):
        a.setflags(write=False)
    return rows, cols, diag, diag_idx


def diag_mask(d: int) -> np.ndarray:
    """Boolean mask over packed entries selecting the diagonal."""
    return _layout(d)[2]


def diag_indices(d: int) -> np.ndarray:
    """Packed positions of the diagonal entries ``(j, j)``."""
    return _layout(d)[3]


def pack(dense) -> np.ndarray:
    """Packed lower triangle of ``(..., d, d)`` matrices; the upper part is ignored."""
    dense = np.asarray(dense, dtype=float)
    d = dense.shape[-1]
    if dense.shape[-2] != d:
        raise ValueError(f"expected square matrices, got shape {dense.shape}")
    rows, cols, _, _ = _layout(d)
    return dense[..., rows, cols]


def unpack(packed) -> np.ndarray:
    """Dense ``(..., d, d)`` lower-triangular matrices from packed storage."""
    packed = np.asarray(packed, dtype=float)
    d = dim_from_entries(packed.shape[-1])
    rows, cols, _, _ = _layout(d)
    out = np.zeros(packed.shape[:-1] + (d, d))
    out[..., rows, cols] = packed
    return out


def identity(d: int) -> np.ndarray:
    """Packed identity matrix."""
    out = np.zeros(n_entries(d))
    out[diag_indices(d)] = 1.0
    return out


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class TangentLower:
    """A lower-triangular matrix in packed storage (tangent vector)."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.ndim != 1:
            raise ValueError("entries must be one-dimensional")
        dim_from_entries(e.size)
        if not np.all(np.isfinite(e)):
            raise NumericalError("non-finite entries")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return dim_from_entries(self.entries.size)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    @classmethod
    def from_dense(cls, dense):
        return cls(pack(dense))

    def to_dense(self) -> np.ndarray:
        return unpack(self.entries)


@dataclass(frozen=True)
class CholeskyPoint(TangentLower):
    """A lower-triangular matrix with strictly positive diagonal."""

    def __post_init__(self):
        super().__post_init__()
        dg = self.entries[diag_indices(self.dim)]
        if not np.all(dg > 0):
            raise ValueError(f"diagonal must be strictly positive, min is {dg.min()}")

    @classmethod
    def identity(cls, d: int):
        return cls(identity(d))


# ---------------------------------------------------------------------------
# checks


def _as_packed(*xs):
    arrs = [np.asarray(x, dtype=float) for x in xs]
    p = arrs[0].shape[-1] if arrs[0].ndim else None
    for a in arrs:
        if a.ndim == 0 or a.shape[-1] != p:
            raise ValueError(
                "dimension mismatch: " + ", ".join(str(b.shape) for b in arrs))
    d = dim_from_entries(p)
    for a in arrs:
        if not np.isfinite(a).all():
            raise NumericalError("non-finite entries in geometry input")
    return arrs, d


# ---------------------------------------------------------------------------
# operations


def strict_lower(x) -> np.ndarray:
    """Zero the diagonal, keep the strictly lower part."""
    (x,), d = _as_packed(x)
    return np.where(diag_mask(d), 0.0, x)


def diag_part(x) -> np.ndarray:
    """Diagonal entries as a ``(..., d)`` vector."""
    (x,), d = _as_packed(x)
    return x[..., diag_indices(d)]


def metric(base, u, v) -> np.ndarray:
    """Log-Cholesky inner product of tangent vectors ``u, v`` at ``base``.

    Strictly lower entries use the Frobenius product; diagonal entries are
    weighted by ``base_jj**-2``.
    """
    (base, u, v), d = _as_packed(base, u, v)
    dm = diag_mask(d)
    w = np.where(dm, 1.0 / np.where(dm, base, 1.0) ** 2, 1.0)
    return np.sum(w * (u * v), axis=-1)


def distance(l, k) -> np.ndarray:
    """Geodesic distance between two Cholesky points."""
    (l, k), d = _as_packed(l, k)
    dm = diag_mask(d)
    diff = np.where(dm, np.log(np.where(dm, l, 1.0)) - np.log(np.where(dm, k, 1.0)), l - k)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _checked_point(out, d, what):
    # exp of a finite argument can still leave the floating-point range
    dg = out[..., diag_indices(d)]
    if not (np.all(dg > 0) and np.isfinite(out).all()):
        raise NumericalError(f"{what}: result diagonal under- or overflowed")
    return out


def exp_map(x, k) -> np.ndarray:
    """Riemannian exponential at ``x`` of tangent vector ``k``.

    Strict-lower parts add; each diagonal entry becomes
    ``x_jj * exp(k_jj / x_jj)``.
    """
    (x, k), d = _as_packed(x, k)
    dm = diag_mask(d)
    xd = np.where(dm, x, 1.0)
    with np.errstate(over="ignore", under="ignore"):
        out = np.where(dm, xd * np.exp(k / xd), x + k)
    return _checked_point(out, d, "exp_map")


def log_map(k, x) -> np.ndarray:
    """Riemannian logarithm at base ``k`` of the point ``x`` (inverse of :func:`exp_map`)."""
    (k, x), d = _as_packed(k, x)
    dm = diag_mask(d)
    kd = np.where(dm, k, 1.0)
    xd = np.where(dm, x, 1.0)
    return np.where(dm, kd * np.log(xd / kd), x - k)


def exp_at_identity(u) -> np.ndarray:
    """``exp_map(I, u)``: global chart from tangent coordinates to the manifold."""
    (u,), d = _as_packed(u)
    with np.errstate(over="ignore", under="ignore"):
        out = np.where(diag_mask(d), np.exp(u), u)
    return _checked_point(out, d, "exp_at_identity")


def log_at_identity(x) -> np.ndarray:
    """``log_map(I, x)``: inverse of :func:`exp_at_identity`."""
    (x,), d = _as_packed(x)
    dm = diag_mask(d)
    return np.where(dm, np.log(np.where(dm, x, 1.0)), x)


def _stack(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim < 2 or pts.shape[0] == 0:
        raise ValueError("need a nonempty stack of points along axis 0")
    return pts, dim_from_entries(pts.shape[-1])


def _average(w, a):
    # weighted sum over axis 0 as a single matrix-vector product
    n = a.shape[0]
    return (w @ a.reshape(n, -1)).reshape(a.shape[1:])


def _finite_result(m, what):
    if not np.isfinite(m).all():
        raise NumericalError(f"{what}: non-finite result (non-finite input or non-positive diagonal)")
    return m


def frechet_mean(points) -> np.ndarray:
    """Closed-form log-Cholesky mean of ``points`` stacked along axis 0.

    Arithmetic mean of the strict-lower parts, geometric mean of the
    diagonals. A single pass over the entries, no iteration.
    """
    pts, d = _stack(points)
    di = diag_indices(d)
    w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    m = _average(w, pts)
    with np.errstate(invalid="ignore", divide="ignore"):
        m[..., di] = np.exp(_average(w, np.log(pts[..., di])))
    return _finite_result(m, "frechet_mean")


def weighted_frechet_mean(points, weights) -> np.ndarray:
    """Weighted log-Cholesky mean with one weight matrix per point.

    Parameters
    ----------
    points : ndarray, shape (N, ..., p)
        Cholesky points stacked along axis 0.
    weights : ndarray, shape (N, ..., p)
        Packed lower-triangular weights, applied entrywise. Scalar weights
        are the special case of constant weight matrices.

    Returns
    -------
    ndarray, shape (..., p)
        ``(1/N) sum W_i * strict(X_i) + exp((1/N) sum W_i * log diag(X_i))``.
    """
    pts, d = _stack(points)
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != pts.shape[0] or w.shape[-1] != pts.shape[-1]:
        raise ValueError(f"weights of shape {w.shape} for points of shape {pts.shape}")
    if not np.isfinite(w).all():
        raise NumericalError("non-finite weights")
    di = diag_indices(d)
    m = (w * pts).mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        m[..., di] = np.exp((w[..., di] * np.log(pts[..., di])).mean(axis=0))
    return _finite_result(m, "weighted_frechet_mean")


def translate(x, y) -> np.ndarray:
    """Group operation: strict-lower parts add, diagonals multiply."""
    (x, y), d = _as_packed(x, y)
    dm = diag_mask(d)
    return np.where(dm, x * y, x + y)


def group_inverse(x) -> np.ndarray:
    """Inverse under :func:`translate`."""
    (x,), d = _as_packed(x)
    dm = diag_mask(d)
    return np.where(dm, 1.0 / np.where(dm, x, 1.0), -x)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # exact at 0 and symmetric; avoids overflow for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def split_activation(x) -> np.ndarray:
    """``tanh`` on the strict-lower part, ``softplus`` on the diagonal.

    Diagonal outputs are floored at :data:`EPS_POS` so the result stays a
    valid Cholesky point when softplus underflows.
    """
    (x,), d = _as_packed(x)
    return np.where(diag_mask(d), np.maximum(softplus(x), EPS_POS), np.tanh(x))


def sigmoid_gate(x) -> np.ndarray:
    """Entrywise logistic sigmoid over the stored lower triangle."""
    (x,), _ = _as_packed(x)
    return sigmoid(x)


def one_minus(x) -> np.ndarray:
    """Entrywise complement ``1 - x`` over the stored lower triangle."""
    (x,), _ = _as_packed(x)
    return 1.0 - x
