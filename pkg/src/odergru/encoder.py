"""Lift raw multivariate time series to sequences of Cholesky points.

Pipeline per window: a small 1-D convolution stack ``h_theta`` produces
a feature matrix, an OAS shrinkage estimator turns it into an SPD
covariance, a diagonal jitter guards positive definiteness, and the
Cholesky factor is taken. Every stage has a hand-written backward pass so
the whole encoder can be trained.

Two covariance layouts are supported:

``cov_axis="time"``
    Windows of ``window`` samples; the covariance of the ``spd_dim``
    output channels is estimated over the window's time columns.
``cov_axis="channels"``
    One SPD matrix per time point. The stack uses kernel size 1 and its
    ``spd_dim * group`` outputs are reshaped to ``spd_dim x group``; the
    covariance is estimated over the ``group`` feature columns. This is
    the layout used for irregularly sampled data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import geometry as geo
from .errors import DataError, NumericalError
from .spd_oracle import cholesky_decompose


@dataclass
class TimedSequence:
    """Observations ``values[i]`` taken at ``times[i]``.

    Missing cells are ``False`` in ``mask``; their ``values`` are ignored
    (stored as NaN).
    """

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.array(self.values, dtype=float, ndmin=2)
        if self.values.shape[0] != self.times.size:
            raise DataError(f"{self.times.size} timestamps for {self.values.shape[0]} samples")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise DataError("mask shape does not match values")
        self.values = np.where(self.mask, self.values, np.nan)
        if np.any(~np.isfinite(self.values[self.mask])):
            raise DataError("observed cells must be finite")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise DataError("timestamps must be strictly increasing")
        if self.times.size and not self.mask.any(axis=1).all():
            raise DataError("every sample needs at least one observed channel")

    def __len__(self):
        return self.times.size

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureWindow:
    """A contiguous slice of a sequence, channels by time, missing cells zeroed."""

    features: np.ndarray
    mask: np.ndarray
    t_start: float
    t_end: float

    @property
    def t_center(self) -> float:
        return 0.5 * (self.t_start + self.t_end)


def window(seq: TimedSequence, length: int, stride: int) -> list[FeatureWindow]:
    """Split ``seq`` into ``floor((T - length) / stride) + 1`` contiguous windows."""
    if length < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    if len(seq) < length:
        raise DataError(f"sequence of length {len(seq)} is shorter than the window ({length})")
    vals = np.where(seq.mask, seq.values, 0.0)
    out = []
    for s in range(0, len(seq) - length + 1, stride):
        sl = slice(s, s + length)
        out.append(FeatureWindow(vals[sl].T.copy(), seq.mask[sl].T.copy(),
                                 float(seq.times[s]), float(seq.times[s + length - 1])))
    return out


@dataclass
class EncoderConfig:
    spd_dim: int = 4
    layers: int = 3
    width: int = 32
    kernel: int = 2
    pool: bool = False
    negative_slope: float = 0.01
    cov_axis: str = "time"
    group: int = 4
    window: int = 5
    stride: int = 5
    append_mask: bool = False
    shrink_min: float = 0.01
    jitter_rel: float = 1e-6
    jitter_abs: float = 1e-6
    init_scale: float = 1.0

    def __post_init__(self):
        if self.cov_axis not in ("time", "channels"):
            raise ValueError(f"cov_axis must be 'time' or 'channels', got {self.cov_axis!r}")
        if self.cov_axis == "channels":
            self.kernel, self.window, self.stride, self.pool = 1, 1, 1, False
        if self.layers < 0 or self.kernel < 1 or self.spd_dim < 1:
            raise ValueError("invalid encoder configuration")

    @property
    def out_channels(self) -> int:
        return self.spd_dim * (self.group if self.cov_axis == "channels" else 1)

    def in_channels(self, n_channels: int) -> int:
        return n_channels * (2 if self.append_mask else 1)


def init_encoder(n_channels: int, cfg: EncoderConfig, rng) -> list[np.ndarray]:
    """Conv weights ``(c_out, c_in, kernel)`` and biases, flattened as ``[W0, b0, W1, b1, ...]``."""
    c_in = cfg.in_channels(n_channels)
    if cfg.layers == 0:
        if c_in != cfg.out_channels:
            raise ValueError(f"an empty feature stack needs {cfg.out_channels} input channels, got {c_in}")
        return []
    sizes = [c_in] + [cfg.width] * (cfg.layers - 1) + [cfg.out_channels]
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        std = cfg.init_scale * np.sqrt(2.0 / (a * cfg.kernel))
        params += [rng.normal(scale=std, size=(b, a, cfg.kernel)), np.zeros(b)]
    return params


# ---------------------------------------------------------------------------
# h_theta


def _conv(x, w, b):
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    lo = length - k + 1
    if lo < 1:
        raise ValueError(f"input length {length} shorter than kernel {k}")
    patches = sliding_window_view(x, k, axis=2).transpose(0, 2, 1, 3).reshape(n * lo, c_in * k)
    y = patches @ w.reshape(c_out, -1).T + b
    return y.reshape(n, lo, c_out).transpose(0, 2, 1), patches


def _conv_backward(g, x_shape, w, patches):
    n, c_in, length = x_shape
    c_out, _, k = w.shape
    lo = length - k + 1
    gm = g.transpose(0, 2, 1).reshape(n * lo, c_out)
    gw = (gm.T @ patches).reshape(w.shape)
    gb = gm.sum(axis=0)
    gp = (gm @ w.reshape(c_out, -1)).reshape(n, lo, c_in, k)
    gx = np.zeros(x_shape)
    for j in range(k):
        gx[:, :, j:j + lo] += gp[:, :, :, j].transpose(0, 2, 1)
    return gx, gw, gb


def _pool(x):
    n, c, length = x.shape
    lo = length // 2
    pair = x[:, :, :2 * lo].reshape(n, c, lo, 2)
    arg = pair.argmax(axis=-1)
    return np.take_along_axis(pair, arg[..., None], -1)[..., 0], arg


def _pool_backward(g, x_shape, arg):
    n, c, length = x_shape
    lo = length // 2
    gp = np.zeros((n, c, lo, 2))
    np.put_along_axis(gp, arg[..., None], g[..., None], -1)
    gx = np.zeros(x_shape)
    gx[:, :, :2 * lo] = gp.reshape(n, c, 2 * lo)
    return gx


def _valid_columns(valid, cfg):
    # a feature column is valid iff every input column in its receptive field is
    for i in range(cfg.layers):
        valid = sliding_window_view(valid, cfg.kernel, axis=1).all(axis=-1)
        if cfg.pool and i < cfg.layers - 1:
            lo = valid.shape[1] // 2
            valid = valid[:, :2 * lo].reshape(valid.shape[0], lo, 2).all(axis=-1)
    return valid


def conv_stack(x, params, cfg: EncoderConfig):
    """Forward pass of ``h_theta`` on a batch ``x`` of shape ``(N, c_in, L)``.

    LeakyReLU (and optional max-pool of size 2) follow every layer except
    the last. Returns the output and a cache for :func:`conv_stack_backward`.
    """
    cache = []
    h = x
    for i in range(cfg.layers):
        w, b = params[2 * i], params[2 * i + 1]
        x_shape = h.shape
        h, patches = _conv(h, w, b)
        entry = {"x_shape": x_shape, "patches": patches}
        if i < cfg.layers - 1:
            entry["pre"] = h
            h = np.where(h > 0, h, cfg.negative_slope * h)
            if cfg.pool:
                entry["pool_shape"] = h.shape
                h, entry["arg"] = _pool(h)
        cache.append(entry)
    return h, cache


def conv_stack_backward(g, cache, params, cfg: EncoderConfig):
    grads = [None] * len(params)
    for i in reversed(range(cfg.layers)):
        entry = cache[i]
        if "pre" in entry:
            if "arg" in entry:
                g = _pool_backward(g, entry["pool_shape"], entry["arg"])
            g = np.where(entry["pre"] > 0, g, cfg.negative_slope * g)
        g, gw, gb = _conv_backward(g, entry["x_shape"], params[2 * i], entry["patches"])
        grads[2 * i], grads[2 * i + 1] = gw, gb
    return g, grads


def feature_map_h_theta(w: FeatureWindow, params, cfg: EncoderConfig) -> np.ndarray:
    """``h_theta`` applied to one window; returns the ``spd_dim x m`` feature matrix."""
    x, _ = _window_inputs([w], cfg)
    out, _ = conv_stack(x, params, cfg)
    return _features_to_matrix(out, cfg)[0]


def _window_inputs(windows, cfg):
    x = np.stack([w.features for w in windows])
    m = np.stack([w.mask for w in windows])
    if cfg.append_mask:
        x = np.concatenate([x, m.astype(float)], axis=1)
    return x, m


def _features_to_matrix(out, cfg):
    if cfg.cov_axis == "channels":
        return out[:, :, 0].reshape(out.shape[0], cfg.spd_dim, cfg.group)
    return out


# ---------------------------------------------------------------------------
# shrinkage


@dataclass
class _ShrinkCache:
    fc: np.ndarray
    w: np.ndarray
    m: np.ndarray
    center: np.ndarray
    s: np.ndarray
    mu: np.ndarray
    num: np.ndarray
    den: np.ndarray
    rho: np.ndarray
    rho_free: np.ndarray
    jitter_rel: float


def _shrink(f, valid, shrink_min, jitter_rel, jitter_abs):
    f = np.asarray(f, dtype=float)
    n, cols = f.shape[-2:]
    w = np.ones(f.shape[:-2] + (cols,)) if valid is None else np.asarray(valid, dtype=float)
    m = w.sum(axis=-1)
    mm = np.maximum(m, 1.0)
    center = (m >= 2).astype(float)
    mean = (f * w[..., None, :]).sum(axis=-1) / mm[..., None]
    fc = (f - center[..., None, None] * mean[..., None]) * w[..., None, :]
    s = fc @ np.swapaxes(fc, -1, -2) / mm[..., None, None]
    mu = np.trace(s, axis1=-2, axis2=-1) / n
    alpha = np.sum(s * s, axis=(-2, -1)) / n ** 2
    num = alpha + mu ** 2
    den = (m + 1) * (alpha - mu ** 2 / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    raw = np.where(m <= 1, 1.0, raw)
    rho = np.clip(raw, shrink_min, 1.0)
    rho_free = (m > 1) & (den > 0) & (raw > shrink_min) & (raw < 1.0)
    eye = np.eye(n)
    c = (1 - rho)[..., None, None] * s + ((rho + jitter_rel) * mu + jitter_abs)[..., None, None] * eye
    cache = _ShrinkCache(fc, w, mm, center, s, mu, num, den, rho, rho_free, jitter_rel)
    return c, cache


def _shrink_backward(gc, cache: _ShrinkCache):
    n = gc.shape[-1]
    gc = 0.5 * (gc + np.swapaxes(gc, -1, -2))
    tr_gc = np.trace(gc, axis1=-2, axis2=-1)
    s, mu, rho = cache.s, cache.mu, cache.rho
    g_rho = -np.sum(gc * s, axis=(-2, -1)) + mu * tr_gc
    g_rho = np.where(cache.rho_free, g_rho, 0.0)
    g_mu = (rho + cache.jitter_rel) * tr_gc
    den = np.where(cache.rho_free, cache.den, 1.0)
    m1 = cache.w.sum(axis=-1) + 1
    g_num = g_rho / den
    g_den = -g_rho * cache.num / den ** 2
    g_alpha = g_num + g_den * m1
    g_mu = g_mu + g_num * 2 * mu - g_den * m1 * 2 * mu / n
    eye = np.eye(n)
    gs = (1 - rho)[..., None, None] * gc + (g_alpha[..., None, None] * 2 * s / n ** 2) \
        + (g_mu / n)[..., None, None] * eye
    gs = 0.5 * (gs + np.swapaxes(gs, -1, -2))
    gfc = 2 * gs @ cache.fc / cache.m[..., None, None]
    w = cache.w[..., None, :]
    gwf = gfc * w
    gf = gwf - cache.center[..., None, None] * w * gwf.sum(axis=-1, keepdims=True) / cache.m[..., None, None]
    return gf


def shrinkage_covariance(f, valid=None, shrink_min=0.01, jitter_rel=1e-6, jitter_abs=1e-6,
                         return_rho=False):
    """OAS-shrunk covariance of the rows of ``f`` (shape ``(..., n, m)``).

    ``C = (1 - rho) S + rho * tr(S)/n * I + jitter * I`` where ``S`` is the
    sample covariance over the ``m`` columns (columns with ``valid == False``
    are ignored), ``rho`` the Oracle Approximating Shrinkage coefficient
    clipped to ``[shrink_min, 1]`` and ``jitter = jitter_rel * tr(S)/n +
    jitter_abs``. With at most one usable column ``rho`` is 1 and ``S`` is
    the uncentred second moment.
    """
    f = np.asarray(f, dtype=float)
    if not np.isfinite(f).all():
        raise NumericalError("non-finite features passed to shrinkage_covariance")
    c, cache = _shrink(f, valid, shrink_min, jitter_rel, jitter_abs)
    return (c, cache.rho) if return_rho else c


# ---------------------------------------------------------------------------
# Cholesky backward


def _phi(a):
    out = np.tril(a)
    idx = np.arange(a.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def cholesky_backward(low, g_low):
    """Gradient w.r.t. a symmetric matrix ``S = L L^T`` given the gradient w.r.t. ``L``.

    Both arguments are dense ``(..., d, d)``; the result is symmetric.
    """
    lt = np.swapaxes(low, -1, -2)
    p = _phi(lt @ np.tril(g_low))
    # L^{-T} P L^{-1}
    eye = np.broadcast_to(np.eye(low.shape[-1]), low.shape)
    linv = np.linalg.solve(low, eye)
    gs = np.swapaxes(linv, -1, -2) @ p @ linv
    return 0.5 * (gs + np.swapaxes(gs, -1, -2))


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class EncodeCache:
    x_shape: tuple
    conv: list
    shrink: _ShrinkCache
    low: np.ndarray


def encode_windows(windows: list[FeatureWindow], params, cfg: EncoderConfig, need_cache=True):
    """Encode a batch of windows to packed Cholesky points ``(N, p)``."""
    x, m = _window_inputs(windows, cfg)
    return encode_arrays(x, m, params, cfg, need_cache)


def encode_arrays(x, cell_mask, params, cfg: EncoderConfig, need_cache=True):
    out, conv_cache = conv_stack(x, params, cfg)
    feats = _features_to_matrix(out, cfg)
    if cfg.cov_axis == "time":
        valid = _valid_columns(cell_mask.all(axis=1), cfg)
    else:
        valid = None
    if not np.isfinite(feats).all():
        raise NumericalError("non-finite encoder features")
    c, sc = _shrink(feats, valid, cfg.shrink_min, cfg.jitter_rel, cfg.jitter_abs)
    xs = cholesky_decompose(c)
    if not need_cache:
        return xs, None
    return xs, EncodeCache(x.shape, conv_cache, sc, geo.unpack(xs))


def encode_backward(g_points, cache: EncodeCache, params, cfg: EncoderConfig):
    """Gradients of the encoder parameters given gradients w.r.t. the packed outputs."""
    gl = geo.unpack(g_points)
    gc = cholesky_backward(cache.low, gl)
    gf = _shrink_backward(gc, cache.shrink)
    if cfg.cov_axis == "channels":
        gout = gf.reshape(gf.shape[0], -1)[:, :, None]
    else:
        gout = gf
    _, grads = conv_stack_backward(gout, cache.conv, params, cfg)
    return grads


def encode(seq: TimedSequence, params, cfg: EncoderConfig):
    """Encode one sequence.

    Returns
    -------
    points : ndarray, shape (n_windows, p)
        Packed Cholesky factors, one per window.
    times : ndarray, shape (n_windows,)
        Window-centre timestamps, increasing.
    """
    wins = window(seq, cfg.window, cfg.stride)
    xs, _ = encode_windows(wins, params, cfg, need_cache=False)
    return xs, np.array([w.t_center for w in wins])
