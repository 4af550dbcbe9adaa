"""Acceptance battery: invariants, oracle agreement, gradients and learning.

Each check returns a :class:`CheckResult`. Geometry checks take the
exp/log pair as arguments so a deliberately broken implementation can be
run through them (see ``tests/test_verify.py``).
"""
from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import data
from . import encoder as enc
from . import geometry as geo
from . import manifold_ode as mo
from . import model as M
from . import rgru
from . import spd_oracle as so


@dataclass
class CheckResult:
    index: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return (f"[{'PASS' if self.passed else 'FAIL'}] {self.index:>2} {self.name}: "
                f"{self.detail} ({self.seconds:.1f}s)")


def _rand_points(rng, d, n, scale=0.5):
    return so.random_cholesky(rng, d, size=n, scale=scale)


def rel_err(a, b, floor=1e-8):
    """``max|a - b| / max(max|b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor)) if b.size else 0.0


# ---------------------------------------------------------------------------
# geometry


def check_round_trips(exp_map: Callable | None = None, log_map: Callable | None = None,
                      n=10_000, dims=(2, 3, 8, 32), tol=1e-10, seed=0, max_seconds=30.0):
    # looked up at call time so a patched geometry module is what gets checked
    exp_map = exp_map or geo.exp_map
    log_map = log_map or geo.log_map
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        k = _rand_points(rng, d, n)
        x = _rand_points(rng, d, n)
        v = rng.normal(scale=0.5, size=x.shape)
        worst = max(worst, float(np.max(np.abs(exp_map(k, log_map(k, x)) - x))),
                    float(np.max(np.abs(log_map(k, exp_map(k, v)) - v))))
    secs = time.perf_counter() - t0
    return worst <= tol and secs < max_seconds, (
        f"max abs error {worst:.2e} (tol {tol:g}) over {n} pairs x d in {list(dims)}; "
        f"{secs:.1f}s (< {max_seconds:g}s)")


def check_metric_axioms(n=1000, dims=(2, 3, 8), tol=1e-12, seed=1):
    rng = np.random.default_rng(seed)
    bad = []
    for d in dims:
        a, b, c = (_rand_points(rng, d, n) for _ in range(3))
        dab, dba = geo.distance(a, b), geo.distance(b, a)
        if not np.array_equal(dab, dba):
            bad.append(f"asymmetric at d={d}")
        if np.max(geo.distance(a, a)) > tol:
            bad.append(f"d(a,a) > tol at d={d}")
        if np.min(dab) < 0:
            bad.append(f"negative distance at d={d}")
        slack = float(np.max(geo.distance(a, c) - dab - geo.distance(b, c)))
        if slack > tol:
            bad.append(f"triangle slack {slack:.2e} at d={d}")
    return not bad, "; ".join(bad) or f"symmetry exact, identity and triangle within {tol:g}"


def check_karcher_oracle(exp_map: Callable | None = None, log_map: Callable | None = None,
                         n_sets=50, n_points=5, max_dim=8, tol=1e-8, seed=2):
    exp_map = exp_map or geo.exp_map
    log_map = log_map or geo.log_map
    rng = np.random.default_rng(seed)

    def norm(base, u):
        return np.sqrt(geo.metric(base, u, u))

    maps = so.ManifoldMaps(exp_map, log_map, norm)
    worst, iters = 0.0, 0
    for i in range(n_sets):
        d = 2 + i % (max_dim - 1)
        pts = _rand_points(rng, d, n_points)
        try:
            res = so.karcher_flow_mean(pts, maps, max_iter=100, tol=1e-12, full_output=True)
        except (so.KarcherError, FloatingPointError) as exc:
            return False, f"Karcher flow failed: {exc}"
        if not np.isfinite(res.mean).all():
            return False, "Karcher flow produced non-finite values"
        worst = max(worst, float(np.max(np.abs(res.mean - geo.frechet_mean(pts)))))
        iters = max(iters, res.n_iter)
    return worst <= tol, f"max abs gap {worst:.2e} (tol {tol:g}), at most {iters} iterations"


def check_group(n=1000, d=4, tol=1e-12, seed=3):
    rng = np.random.default_rng(seed)
    x, y, z = (_rand_points(rng, d, n, scale=0.3) for _ in range(3))
    eye = geo.identity(d)
    errs = {
        "identity": np.max(np.abs(geo.translate(x, eye) - x)),
        "inverse": np.max(np.abs(geo.translate(x, geo.group_inverse(x)) - eye)),
        "commutativity": np.max(np.abs(geo.translate(x, y) - geo.translate(y, x))),
        "associativity": np.max(np.abs(geo.translate(geo.translate(x, y), z)
                                       - geo.translate(x, geo.translate(y, z)))),
    }
    worst = max(errs, key=errs.get)
    return errs[worst] <= tol, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


# ---------------------------------------------------------------------------
# dynamics


def check_closure(n=10_000, dims=(2, 8, 32), chunk=100, seed=4):
    """Fuzz cell steps and ODE solves with random scales; every state must stay valid."""
    rng = np.random.default_rng(seed)
    min_diag, steps = np.inf, 0
    cfg = mo.OdeConfig(n_steps=8)
    try:
        while steps < n:
            d = dims[(steps // chunk) % len(dims)]
            p = geo.n_entries(d)
            di = geo.diag_indices(d)
            ws, xs = np.exp(rng.uniform(np.log(0.1), np.log(3.0), 2))
            raw = rgru.RgruParams(*(rng.normal(scale=ws, size=(2, p)) for _ in range(3)),
                                  *(rng.normal(scale=ws, size=p) for _ in range(3)))
            h = _rand_points(rng, d, chunk, scale=xs)
            x = _rand_points(rng, d, chunk, scale=xs)
            st = rgru.step(rgru.RgruState(h), x, raw, positive_weights=bool(rng.integers(2)))
            f = mo.VectorField.init(p, (16,), rng, out_scale=float(rng.uniform(0.1, 2.0)))
            t0 = rng.uniform(0, 1, chunk)
            h2 = mo.evolve_hidden(st.H, t0, t0 + rng.uniform(0, 2, chunk), f, cfg)
            min_diag = min(min_diag, float(st.H[:, di].min()), float(h2[:, di].min()))
            steps += chunk
    except Exception as exc:  # any exception fails the check
        return False, f"{type(exc).__name__} after {steps} steps: {exc}"
    return min_diag > 0, f"min diagonal {min_diag:.3e} over {steps} cell steps and {steps} ODE solves"


def _fd_grads(m, batch, G, eps=1e-5):
    out = {}
    for k, v in m.params.items():
        g = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            o = v[i]
            v[i] = o + eps
            a = np.sum(G * m.forward_batch(batch)[0])
            v[i] = o - eps
            b = np.sum(G * m.forward_batch(batch)[0])
            v[i] = o
            g[i] = (a - b) / (2 * eps)
        out[k] = g
    return out


def small_model_config(**kw):
    ecfg = enc.EncoderConfig(spd_dim=4, layers=2, width=6, cov_axis="channels", group=3,
                             append_mask=True)
    base = dict(n_channels=2, encoder=ecfg, ode=mo.OdeConfig(n_steps=4), field_hidden=(6,))
    base.update(kw)
    return M.ModelConfig(**base)


def _small_sequences(rng, n=2, T=3, C=2):
    seqs = []
    for _ in range(n):
        t = np.cumsum(rng.uniform(0.5, 2.0, T))
        seqs.append(enc.TimedSequence(t, rng.normal(size=(T, C))))
    return seqs


def check_gradients(seeds=range(10), tol=1e-4, adjoint_tol=1e-3, seed=5):
    worst, where = 0.0, ""
    for s in seeds:
        rng = np.random.default_rng([seed, s])
        m = M.OdeRgruModel.init(small_model_config(), s)
        for k in m.params:
            if k.startswith(("rgru.", "field.")):
                m.params[k] = m.params[k] + rng.normal(scale=0.2, size=m.params[k].shape)
        batch = M.make_batch(m.prepare(_small_sequences(rng)))
        out, _, tape = m.forward_batch(batch, need_tape=True)
        G = rng.normal(size=out.shape)
        g = m.backward(tape, G)
        for k, fd in _fd_grads(m, batch, G).items():
            r = rel_err(g[k], fd)
            if r > worst:
                worst, where = r, f"{k} (seed {s})"
    adj = 0.0
    cfg = mo.OdeConfig(n_steps=128)
    for s in range(10):
        rng = np.random.default_rng([seed, 100 + s])
        f = mo.VectorField.init(10, (16,), rng, out_scale=1.0)
        u0 = rng.normal(size=(3, 10))
        t0 = rng.uniform(0, 0.5, 3)
        t1 = t0 + rng.uniform(0, 1, 3)
        u1, tape = mo.ode_solve(f, u0, t0, t1, cfg, return_tape=True)
        G = rng.normal(size=u1.shape)
        gu, gp = mo.backward_unrolled(G, tape, f)
        ga, gpa = mo.backward_adjoint(G, u1, t0, t1, f, cfg)
        adj = max(adj, rel_err(ga, gu), *(rel_err(a, b) for a, b in zip(gpa, gp)))
    ok = worst <= tol and adj <= adjoint_tol
    return ok, (f"model vs finite differences {worst:.1e} (tol {tol:g}, worst {where}); "
                f"adjoint vs unrolled {adj:.1e} (tol {adjoint_tol:g})")


def euler_order(n_list=(4, 8, 16, 32, 64), d=3, seed=6):
    p = geo.n_entries(d)
    f = mo.VectorField.linear(-np.eye(p))
    u0 = np.random.default_rng(seed).normal(size=p)
    errs = [np.max(np.abs(mo.ode_solve(f, u0, 0.0, 1.0, mo.OdeConfig(n_steps=n)) - np.exp(-1.0) * u0))
            for n in n_list]
    return -np.polyfit(np.log(n_list), np.log(errs), 1)[0], errs


def check_order(lo=0.8, hi=1.2):
    order, _ = euler_order()
    return lo <= order <= hi, f"fitted order {order:.3f} (bounds [{lo}, {hi}])"


def check_complexity(d_list=(8, 16, 32, 64, 128), lo=0.8, hi=1.3, seed=0, max_seconds=120.0):
    t0 = time.perf_counter()
    rows = so.complexity_benchmark(d_list, seed=seed)
    d = np.array([r[0] for r in rows], float)
    tc = np.array([r[2] for r in rows], float)
    tk = np.array([r[3] for r in rows], float)
    slope = float(np.polyfit(np.log(d * (d + 1) / 2), np.log(tc), 1)[0])
    ratio = tk / tc
    mono = bool(np.all(np.diff(ratio) > 0))
    secs = time.perf_counter() - t0
    ok = lo <= slope <= hi and mono and secs < max_seconds
    return ok, (f"closed-form slope {slope:.3f} (bounds [{lo}, {hi}]); Karcher/closed ratio "
                f"{np.round(ratio).astype(int).tolist()} {'increasing' if mono else 'NOT increasing'}; "
                f"{secs:.0f}s (< {max_seconds:g}s)")


# ---------------------------------------------------------------------------
# learning


SYNTH_SEEDS = (0, 1, 2)
DROP_FRACTIONS = (0.3, 0.5, 0.7)


def synthetic_model_config(use_ode=True, n_channels=4):
    """Architecture used for the synthetic learning checks."""
    ecfg = enc.EncoderConfig(spd_dim=4, layers=2, width=16, cov_axis="channels", group=4,
                             append_mask=True)
    return M.ModelConfig(n_channels=n_channels, encoder=ecfg, ode=mo.OdeConfig(n_steps=16),
                         field_hidden=(32,), use_ode=use_ode)


def synthetic_train_config(seed, max_iter=400):
    return M.TrainConfig(lr=1e-2, l2=1e-3, batch_size=32, max_iter=max_iter, seed=seed)


def synthetic_dataset(seed, drop=0.0):
    ds = data.synth_manifold_sequences(n_per_class=100, T=20, d_channels=4, classes=2, seed=seed)
    return data.drop_observations(ds, drop, seed) if drop else ds


_RUNS: dict = {}


def synthetic_run(seed, drop=0.0, use_ode=True):
    """Train once per ``(seed, drop, use_ode)``; returns final ``(train_acc, test_acc)``."""
    key = (seed, drop, use_ode)
    if key not in _RUNS:
        t0 = time.perf_counter()
        ds = synthetic_dataset(seed, drop)
        m = M.OdeRgruModel.init(synthetic_model_config(use_ode), seed)
        res = M.train(ds, m, synthetic_train_config(seed))
        last = res.log[-1]
        _RUNS[key] = (last["train_acc"], last["test_acc"], time.perf_counter() - t0)
    return _RUNS[key][:2]


def check_learning(train_min=0.95, test_min=0.90, max_seconds=300.0):
    accs = [synthetic_run(s) for s in SYNTH_SEEDS]
    secs = sum(_RUNS[(s, 0.0, True)][2] for s in SYNTH_SEEDS)
    tr = float(np.median([a[0] for a in accs]))
    te = float(np.median([a[1] for a in accs]))
    return tr >= train_min and te >= test_min and secs < max_seconds, (
        f"median train {tr:.3f} (>= {train_min}), held-out {te:.3f} (>= {test_min}); "
        f"per seed {[(round(a, 3), round(b, 3)) for a, b in accs]}; "
        f"training {secs:.0f}s (< {max_seconds:g}s)")


def check_irregular(max_drop_pts=10.0):
    base = float(np.median([synthetic_run(s)[1] for s in SYNTH_SEEDS]))
    parts, ok = [], True
    for f in DROP_FRACTIONS:
        te = float(np.median([synthetic_run(s, f)[1] for s in SYNTH_SEEDS]))
        loss = 100 * (base - te)
        ok &= loss <= max_drop_pts
        parts.append(f"{int(f * 100)}% drop {te:.3f} ({-loss:+.0f} pts)")
    return ok, f"baseline {base:.3f}; " + ", ".join(parts) + f" (max loss {max_drop_pts:g} pts)"


def check_ablation(drop=0.5):
    with_f = float(np.median([synthetic_run(s, drop)[1] for s in SYNTH_SEEDS]))
    without = float(np.median([synthetic_run(s, drop, use_ode=False)[1] for s in SYNTH_SEEDS]))
    return without <= with_f, f"held-out median with field {with_f:.3f}, without {without:.3f}"


def check_determinism(seed=7, iters=20):
    ds = synthetic_dataset(seed).take(range(0, 200, 5))
    cfg = synthetic_model_config()
    tcfg = synthetic_train_config(seed, iters)
    with tempfile.TemporaryDirectory() as tmp:
        blobs = []
        for run in range(2):
            res = M.train(ds, M.OdeRgruModel.init(cfg, seed), tcfg)
            path = os.path.join(tmp, f"metrics{run}.csv")
            M.write_metrics_csv(res.log, path)
            with open(path, "rb") as fh:
                blobs.append(fh.read())
        same_csv = blobs[0] == blobs[1]
        M.save_checkpoint(res.model, os.path.join(tmp, "ckpt"), seed=seed)
        loaded, _ = M.load_checkpoint(os.path.join(tmp, "ckpt"))
    items = res.model.prepare(ds.sequences)
    a_out, a_traj, _ = res.model.forward_batch(M.make_batch(items))
    b_out, b_traj, _ = loaded.forward_batch(M.make_batch(items))
    same_fwd = np.array_equal(a_out, b_out) and np.array_equal(a_traj, b_traj)
    return same_csv and same_fwd, (f"metrics CSVs {'identical' if same_csv else 'DIFFER'}; "
                                   f"reloaded forward {'bit-identical' if same_fwd else 'DIFFERS'}")


CHECKS = [
    (1, "geometry round trips", check_round_trips),
    (2, "metric axioms", check_metric_axioms),
    (3, "closed-form mean vs Karcher flow", check_karcher_oracle),
    (4, "group structure of translation", check_group),
    (5, "state closure", check_closure),
    (6, "gradient correctness", check_gradients),
    (7, "Euler convergence order", check_order),
    (8, "complexity of the closed-form mean", check_complexity),
    (9, "learning on synthetic geodesics", check_learning),
    (10, "robustness to dropped cells", check_irregular),
    (11, "vector-field ablation", check_ablation),
    (12, "determinism and checkpoints", check_determinism),
]


def run_check(index) -> CheckResult:
    i, name, fn = next(c for c in CHECKS if c[0] == index)
    t = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failure of that check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(i, name, bool(ok), detail, time.perf_counter() - t)


def run_battery(indices=None, report=print) -> list[CheckResult]:
    """Run the selected checks (all by default), reporting one line each."""
    out = []
    for i, _, _ in CHECKS:
        if indices is None or i in indices:
            r = run_check(i)
            if report is not None:
                report(r.line())
            out.append(r)
    return out
