"""Datasets, CSV I/O, the missing-cell protocol, synthetic data and metrics.

CSV layout is long format, one row per time step::

    seq_id,t,ch_0,...,ch_{k-1},label[,split]

Empty fields are missing cells. For classification the label is the
sequence's class and must be constant within a sequence; for regression
tasks it is a per-step target (possibly empty).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .encoder import TimedSequence
from .errors import DataError
from .spd_oracle import cholesky_compose

SPLITS = ("train", "test")


@dataclass
class Dataset:
    """Sequences with labels or per-step targets and a train/test split.

    Attributes
    ----------
    sequences : list of TimedSequence
    labels : ndarray of int, shape (N,), or None
        Class per sequence (classification).
    targets : list of ndarray, or None
        Per-step targets ``(T_i, n_targets)`` with NaN where missing
        (regression tasks).
    split : ndarray of str, shape (N,)
        ``"train"`` or ``"test"`` per sequence.
    """

    sequences: list
    labels: np.ndarray | None = None
    targets: list | None = None
    split: np.ndarray | None = None
    seq_ids: list | None = None
    channel_names: list | None = None
    n_classes: int | None = None
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.sequences)
        if self.split is None:
            self.split = np.array(["train"] * n)
        self.split = np.asarray(self.split, dtype=object)
        if self.seq_ids is None:
            self.seq_ids = [str(i) for i in range(n)]
        if self.channel_names is None:
            c = self.sequences[0].channels if n else 0
            self.channel_names = [f"ch_{j}" for j in range(c)]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (n,):
                raise DataError(f"{self.labels.size} labels for {n} sequences")
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1 if n else 0
            if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"labels must lie in [0, {self.n_classes})")
        if self.targets is not None and len(self.targets) != n:
            raise DataError(f"{len(self.targets)} targets for {n} sequences")
        if self.split.shape != (n,) or not set(self.split) <= set(SPLITS):
            raise DataError("split must assign 'train' or 'test' to every sequence")
        if len(self.seq_ids) != n or len(set(self.seq_ids)) != n:
            raise DataError("sequence ids must be unique")
        for s in self.sequences:
            if s.channels != len(self.channel_names):
                raise DataError("all sequences must have the same channels")

    def __len__(self):
        return len(self.sequences)

    @property
    def channels(self) -> int:
        return len(self.channel_names)

    @property
    def task(self) -> str:
        return "classification" if self.labels is not None else "regression"

    def indices(self, which) -> np.ndarray:
        if which not in SPLITS and which != "all":
            raise ValueError(f"unknown split {which!r}")
        if which == "all":
            return np.arange(len(self))
        return np.flatnonzero(self.split == which)

    def take(self, idx) -> "Dataset":
        idx = [int(i) for i in idx]
        return replace(
            self,
            sequences=[self.sequences[i] for i in idx],
            labels=None if self.labels is None else self.labels[idx],
            targets=None if self.targets is None else [self.targets[i] for i in idx],
            split=self.split[idx],
            seq_ids=[self.seq_ids[i] for i in idx],
            meta=dict(self.meta),
        )

    def subset(self, which) -> "Dataset":
        return self.take(self.indices(which))

    def with_random_split(self, test_fraction, seed) -> "Dataset":
        """Assign a seeded, class-stratified train/test split."""
        rng = np.random.default_rng([seed, 2])
        split = np.array(["train"] * len(self), dtype=object)
        groups = [np.arange(len(self))] if self.labels is None else \
            [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]
        for g in groups:
            g = rng.permutation(g)
            split[g[:int(round(test_fraction * g.size))]] = "test"
        return replace(self, split=split, meta=dict(self.meta))


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column roles. ``channels=None`` takes every other column, in file order."""

    seq_id: str = "seq_id"
    time: str = "t"
    label: str = "label"
    split: str = "split"
    channels: tuple | None = None
    task: str = "classification"


def _float(s, lineno, col):
    try:
        return float(s)
    except ValueError:
        raise DataError(f"line {lineno}: column {col!r} is not a number: {s!r}") from None


def load_csv(path, schema: CsvSchema | None = None, name=None) -> Dataset:
    """Parse a long-format CSV into a :class:`Dataset`.

    Rows are grouped by sequence id (first-appearance order) and sorted by
    time within each sequence.

    Raises
    ------
    DataError
        On malformed rows (with the line number), duplicate timestamps
        within a sequence, or inconsistent labels.
    """
    schema = schema or CsvSchema()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (schema.seq_id, schema.time, schema.label):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        has_split = schema.split in header
        roles = {schema.seq_id, schema.time, schema.label, schema.split}
        chans = list(schema.channels) if schema.channels else [h for h in header if h not in roles]
        missing = [c for c in chans if c not in header]
        if missing or not chans:
            raise DataError(f"{path}: channel columns {missing or 'none'} not found")
        pos = {h: i for i, h in enumerate(header)}
        groups = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[pos[schema.seq_id]]
            t = _float(row[pos[schema.time]], lineno, schema.time)
            vals = [np.nan if row[pos[c]] == "" else _float(row[pos[c]], lineno, c) for c in chans]
            lab = row[pos[schema.label]]
            sp = row[pos[schema.split]] if has_split else "train"
            groups.setdefault(sid, []).append((t, vals, lab, sp, lineno))

    seqs, labels, targets, split = [], [], [], []
    for sid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        ts = np.array([r[0] for r in rows])
        dup = np.flatnonzero(np.diff(ts) == 0)
        if dup.size:
            raise DataError(f"sequence {sid!r}: duplicate timestamp {float(ts[dup[0]])!r}")
        try:
            seqs.append(TimedSequence(ts, np.array([r[1] for r in rows], dtype=float)))
        except DataError as exc:
            raise DataError(f"sequence {sid!r}: {exc}") from None
        if len({r[3] for r in rows}) != 1:
            raise DataError(f"sequence {sid!r}: split changes within the sequence")
        split.append(rows[0][3])
        if schema.task == "classification":
            labs = {r[2] for r in rows}
            if len(labs) != 1:
                raise DataError(f"sequence {sid!r}: label changes within the sequence")
            try:
                labels.append(int(labs.pop()))
            except ValueError:
                raise DataError(f"line {rows[0][4]}: label is not an integer") from None
        else:
            targets.append(np.array([[np.nan if r[2] == "" else _float(r[2], r[4], schema.label)]
                                     for r in rows]))
    return Dataset(seqs, labels=labels if schema.task == "classification" else None,
                   targets=None if schema.task == "classification" else targets,
                   split=np.array(split, dtype=object), seq_ids=list(groups), channel_names=chans,
                   name=name or str(path))


def save_csv(ds: Dataset, path):
    """Write ``ds`` in the layout read by :func:`load_csv` (values via ``repr``)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t", *ds.channel_names, "label", "split"])
        for i, s in enumerate(ds.sequences):
            for k in range(len(s)):
                vals = [repr(float(v)) if m else "" for v, m in zip(s.values[k], s.mask[k])]
                if ds.labels is not None:
                    lab = str(int(ds.labels[i]))
                else:
                    y = ds.targets[i][k, 0]
                    lab = "" if np.isnan(y) else repr(float(y))
                w.writerow([ds.seq_ids[i], repr(float(s.times[k])), *vals, lab, ds.split[i]])


# ---------------------------------------------------------------------------
# irregular sampling


def drop_observations(ds: Dataset, fraction, seed) -> Dataset:
    """Remove ``round(fraction * observed)`` cells per sequence at random.

    Time steps left with no observed channel are removed. Sequences with
    fewer than two surviving steps are dropped; their number is stored in
    ``meta["dropped_sequences"]`` and reported with a warning. Each
    sequence uses its own generator seeded by ``(seed, index)``.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0.0:
        out = ds.take(range(len(ds)))
        out.meta["dropped_sequences"] = 0
        return out
    keep, seqs, targets = [], [], []
    for i, s in enumerate(ds.sequences):
        rng = np.random.default_rng([seed, i])
        obs = np.flatnonzero(s.mask.ravel())
        k = int(round(fraction * obs.size))
        mask = s.mask.copy().ravel()
        mask[rng.choice(obs, size=k, replace=False)] = False
        mask = mask.reshape(s.mask.shape)
        rows = mask.any(axis=1)
        if rows.sum() < 2:
            continue
        keep.append(i)
        seqs.append(TimedSequence(s.times[rows], np.where(mask, s.values, np.nan)[rows], mask[rows]))
        if ds.targets is not None:
            targets.append(ds.targets[i][rows])
    n_dropped = len(ds) - len(keep)
    if n_dropped:
        warnings.warn(f"drop_observations: {n_dropped} sequences kept fewer than 2 time steps "
                      "and were removed", stacklevel=2)
    out = ds.take(keep)
    out.sequences = seqs
    if ds.targets is not None:
        out.targets = targets
    out.meta["dropped_sequences"] = n_dropped
    out.meta["drop_fraction"] = fraction
    return out


# ---------------------------------------------------------------------------
# synthetic data


def geodesic_point(l_a, l_b, s):
    """``exp_map(L_a, s * log_map(L_a, L_b))`` for scalar or array ``s``."""
    s = np.asarray(s, dtype=float)[..., None]
    return geo.exp_map(np.broadcast_to(l_a, s.shape[:-1] + l_a.shape),
                       s * geo.log_map(l_a, l_b))


def synth_manifold_sequences(n_per_class=100, T=20, d_channels=4, classes=2, seed=0,
                             sigma_obs=0.05, speeds=None, endpoint_scale=1.0, jitter=0.05,
                             shared_endpoints=False, test_fraction=0.25) -> Dataset:
    """Gaussian sequences whose covariance follows a class-specific SPD geodesic.

    Each class ``c`` has endpoints ``L_a, L_b`` (Cholesky factors) and a
    speed ``v_c``. At integer time ``t`` the observation is drawn from
    ``N(0, L(s) L(s)^T)`` with ``s = v_c t / T`` and ``L(s)`` the
    log-Cholesky geodesic, plus ``N(0, sigma_obs^2)`` noise per channel.
    Every sequence perturbs its class endpoints by ``jitter`` in tangent
    coordinates.

    Parameters
    ----------
    speeds : sequence of float, optional
        Per-class speeds; defaults to ``1, 0.5, 0.33, ...``.
    shared_endpoints : bool
        Use the same endpoints for every class, so only the speeds differ.

    Returns
    -------
    Dataset
        Labels ``0..classes-1``, a stratified split with ``test_fraction``
        of each class held out, and ``meta`` holding the endpoints and
        speeds.
    """
    if classes < 1 or n_per_class < 1 or T < 1 or d_channels < 1:
        raise ValueError("classes, n_per_class, T and d_channels must be positive")
    p = geo.n_entries(d_channels)
    crng = np.random.default_rng([seed, 0])
    speeds = [1.0 / (c + 1) for c in range(classes)] if speeds is None else list(speeds)
    if len(speeds) != classes:
        raise ValueError("need one speed per class")
    ends = []
    for c in range(classes):
        if shared_endpoints and ends:
            ends.append(ends[0])
            continue
        ends.append((geo.exp_at_identity(crng.normal(scale=endpoint_scale, size=p)),
                     geo.exp_at_identity(crng.normal(scale=endpoint_scale, size=p))))
    seqs, labels = [], []
    times = np.arange(T, dtype=float)
    for c in range(classes):
        for j in range(n_per_class):
            rng = np.random.default_rng([seed, 1, c, j])
            l_a = geo.exp_map(ends[c][0], rng.normal(scale=jitter, size=p))
            l_b = geo.exp_map(ends[c][1], rng.normal(scale=jitter, size=p))
            low = geo.unpack(geodesic_point(l_a, l_b, speeds[c] * times / T))
            x = np.einsum("tij,tj->ti", low, rng.normal(size=(T, d_channels)))
            x = x + sigma_obs * rng.normal(size=x.shape)
            seqs.append(TimedSequence(times.copy(), x))
            labels.append(c)
    ds = Dataset(seqs, labels=np.array(labels), n_classes=classes, name="synthetic",
                 seq_ids=[f"s{i:05d}" for i in range(len(seqs))],
                 meta={"endpoints": [(a.tolist(), b.tolist()) for a, b in ends],
                       "speeds": speeds, "T": T})
    return ds.with_random_split(test_fraction, seed)


def generating_covariance(ds: Dataset, label, t):
    """Covariance of class ``label`` at time ``t`` in a synthetic dataset (jitter-free)."""
    a, b = (np.array(e) for e in ds.meta["endpoints"][label])
    s = ds.meta["speeds"][label] * t / ds.meta["T"]
    return cholesky_compose(geodesic_point(a, b, s))


# ---------------------------------------------------------------------------
# metrics


def _confusion(pred, target, labels):
    idx = {c: i for i, c in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)))
    for t, p in zip(target, pred):
        cm[idx[t], idx[p]] += 1
    return cm


def metrics(pred, target, task, mask=None, n_classes=None) -> dict:
    """Standard metrics.

    Classification returns ``acc``, ``kappa`` (Cohen) and ``macro_f1``
    (over the classes present in either input). Regression returns
    ``mse``, ``mape`` (a fraction, denominators floored at machine
    epsilon) and ``r2``, all restricted to ``mask`` when given.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.size == 0 or target.size == 0:
        raise ValueError("metrics of empty inputs")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if task == "classification":
        pred, target = pred.astype(int).ravel(), target.astype(int).ravel()
        labels = np.union1d(pred, target)
        cm = _confusion(pred, target, labels)
        n = cm.sum()
        po = np.trace(cm) / n
        pe = float(cm.sum(0) @ cm.sum(1)) / n ** 2
        kappa = 1.0 if pe == 1.0 else (po - pe) / (1.0 - pe)
        tp = np.diag(cm)
        denom = cm.sum(0) + cm.sum(1)
        f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
        return {"acc": float(po), "kappa": float(kappa), "macro_f1": float(f1.mean())}
    if task != "regression":
        raise ValueError(f"unknown task {task!r}")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("mask selects no entries")
    p, y = pred[mask].astype(float), target[mask].astype(float)
    err = p - y
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(err ** 2))
    r2 = (1.0 if ss_res == 0 else 0.0) if ss_tot == 0 else 1.0 - ss_res / ss_tot
    mape = float(np.mean(np.abs(err) / np.maximum(np.abs(y), np.finfo(float).eps)))
    return {"mse": float(np.mean(err ** 2)), "mape": mape, "r2": r2}
