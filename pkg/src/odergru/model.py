"""The ODE-RGRU sequence model, its gradients and its training loop.

A forward pass encodes every window of a sequence to a Cholesky point
``X_i``, starts from ``H_0 = I`` and alternates

* an ODE solve carrying ``H`` from the previous window time to the
  current one, in the chart ``log_map(I, .)``, and
* one RGRU step consuming ``X_i``.

A task head reads ``log_map(I, H)``: the final state for classification
and forecasting, every state for imputation.

Sequences in a batch are padded to a common number of steps. Padded steps
leave ``H`` untouched and receive no gradient, so a batch gives the same
loss and gradients as averaging independent per-sequence passes. Gradients
are computed by hand-written reverse passes of each stage chained in
:meth:`OdeRgruModel.backward`.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import geometry as geo
from . import manifold_ode as mo
from . import rgru
from ._version import __version__
from .errors import DataError, NumericalError

TASKS = ("classification", "forecasting", "imputation")
CHECKPOINT_FORMAT = 1


class DivergenceError(NumericalError):
    def __init__(self, iteration, value):
        self.iteration = iteration
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")


class CheckpointError(DataError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of an :class:`OdeRgruModel`.

    The hidden dimension is ``encoder.spd_dim``. ``n_targets`` is the
    number of regression outputs per step (forecasting, imputation) and
    ``horizon`` the number of forecast steps.
    """

    n_channels: int
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    ode: mo.OdeConfig = field(default_factory=mo.OdeConfig)
    task: str = "classification"
    n_classes: int = 2
    n_targets: int = 1
    horizon: int = 1
    field_hidden: tuple = (32,)
    field_out_scale: float = 0.1
    use_ode: bool = True
    positive_weights: bool = True
    candidate: str = "softplus"
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.candidate not in rgru.CANDIDATE_ACTIVATIONS:
            raise ValueError(f"unknown candidate activation {self.candidate!r}")
        if self.n_channels < 1 or self.n_classes < 2 or self.n_targets < 1 or self.horizon < 1:
            raise ValueError("n_channels, n_targets and horizon must be >= 1 and n_classes >= 2")
        object.__setattr__(self, "field_hidden", tuple(int(h) for h in self.field_hidden))

    @property
    def hidden_dim(self) -> int:
        return self.encoder.spd_dim

    @property
    def n_outputs(self) -> int:
        if self.task == "classification":
            return self.n_classes
        if self.task == "forecasting":
            return self.horizon * self.n_targets
        return self.n_targets

    def to_dict(self) -> dict:
        out = asdict(self)
        out["field_hidden"] = list(self.field_hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict):
        d = dict(d)
        d["encoder"] = enc.EncoderConfig(**d.get("encoder", {}))
        d["ode"] = mo.OdeConfig(**d.get("ode", {}))
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    l2: float = 1e-3
    batch_size: int = 32
    max_iter: int = 400
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.l2 < 0:
            raise ValueError("lr and l2 must be non-negative")
        if self.batch_size < 1 or self.max_iter < 0:
            raise ValueError("batch_size must be >= 1 and max_iter >= 0")


# ---------------------------------------------------------------------------
# inputs


@dataclass
class SeqInputs:
    """Encoder-ready arrays for one sequence."""

    x: np.ndarray
    mask: np.ndarray
    tau: np.ndarray
    target: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    @property
    def n_steps(self):
        return self.tau.size


def prepare_sequence(seq: enc.TimedSequence, cfg: ModelConfig, target=None) -> SeqInputs:
    """Window a sequence and normalise its window times."""
    wins = enc.window(seq, cfg.encoder.window, cfg.encoder.stride)
    x, m = enc._window_inputs(wins, cfg.encoder)
    tau = mo.normalize_times([w.t_center for w in wins], cfg.ode)
    out = SeqInputs(x, m, tau)
    if target is not None and cfg.task != "classification":
        t = np.asarray(target, dtype=float).reshape(-1, cfg.n_targets)
        want = cfg.horizon if cfg.task == "forecasting" else len(wins)
        if t.shape[0] != want:
            raise DataError(f"target has {t.shape[0]} rows, expected {want}")
        out.target_mask = np.isfinite(t)
        out.target = np.where(out.target_mask, t, 0.0)
    return out


@dataclass
class Batch:
    x: np.ndarray
    mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    valid: np.ndarray
    tau: np.ndarray

    @property
    def size(self):
        return self.valid.shape[0]


def make_batch(items: list[SeqInputs]) -> Batch:
    if not items:
        raise DataError("empty batch")
    lengths = np.array([it.n_steps for it in items])
    t_max = int(lengths.max())
    valid = np.arange(t_max)[None, :] < lengths[:, None]
    rows, cols = np.nonzero(valid)
    tau = np.zeros((len(items), t_max))
    for b, it in enumerate(items):
        tau[b, :it.n_steps] = it.tau
        tau[b, it.n_steps:] = it.tau[-1]
    return Batch(np.concatenate([it.x for it in items]), np.concatenate([it.mask for it in items]),
                 rows, cols, valid, tau)


# ---------------------------------------------------------------------------
# model


@dataclass
class Tape:
    batch: Batch
    enc_cache: object
    h_prev: list
    h_mid: list
    u_end: list
    ode_tapes: list
    cells: list
    traj: np.ndarray
    z_head: np.ndarray


class OdeRgruModel:
    """Parameters plus forward and backward passes.

    ``params`` maps names to raw arrays in a fixed order: encoder
    (``encoder.*``), cell (``rgru.*``), vector field (``field.*``) and head
    (``head.w``, ``head.b``). The absolute-value reparameterisation of the
    cell is applied on every forward pass; raw storage is never clipped.
    """

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = dict(params)
        expected = self.param_shapes(cfg)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the architecture")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    # -- construction -------------------------------------------------------

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict:
        rng = np.random.default_rng(0)
        return {k: v.shape for k, v in OdeRgruModel._init_params(cfg, rng).items()}

    @staticmethod
    def _init_params(cfg, rng):
        d = cfg.hidden_dim
        p = geo.n_entries(d)
        out = {}
        for i, a in enumerate(enc.init_encoder(cfg.n_channels, cfg.encoder, rng)):
            out[f"encoder.{'wb'[i % 2]}{i // 2}"] = a
        for k, v in rgru.init_params(d, rng).items():
            out[f"rgru.{k}"] = v
        vf = mo.VectorField.init(p, cfg.field_hidden, rng, cfg.field_out_scale)
        for i, a in enumerate(vf.params):
            out[f"field.{'wb'[i % 2]}{i // 2}"] = a
        lim = math.sqrt(6.0 / (p + cfg.n_outputs))
        out["head.w"] = rng.uniform(-lim, lim, size=(cfg.n_outputs, p))
        out["head.b"] = np.zeros(cfg.n_outputs)
        return out

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0):
        return cls(cfg, cls._init_params(cfg, np.random.default_rng(seed)))

    def copy(self):
        return OdeRgruModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    # -- parameter views ----------------------------------------------------

    def _group(self, prefix):
        return [v for k, v in self.params.items() if k.startswith(prefix + ".")]

    @property
    def encoder_params(self):
        return self._group("encoder")

    @property
    def rgru_params(self) -> rgru.RgruParams:
        return rgru.RgruParams(**{k[5:]: v for k, v in self.params.items() if k.startswith("rgru.")})

    @property
    def field(self) -> mo.VectorField:
        return mo.VectorField(self._group("field"))

    def effective_rgru(self) -> rgru.RgruParams:
        return rgru.reparameterize(self.rgru_params, self.cfg.positive_weights)

    # -- forward ------------------------------------------------------------

    def forward_batch(self, batch: Batch, need_tape=False):
        """Run a padded batch. Returns ``(outputs, trajectory, tape)``.

        ``trajectory`` has shape ``(B, T_max, p)``; rows are held constant
        past their last step.
        """
        cfg = self.cfg
        d = cfg.hidden_dim
        p = geo.n_entries(d)
        dm = geo.diag_mask(d)
        grad_enc = need_tape and not cfg.freeze_encoder
        xs, enc_cache = enc.encode_arrays(batch.x, batch.mask, self.encoder_params, cfg.encoder,
                                          need_cache=grad_enc)
        b_size, t_max = batch.valid.shape
        X = np.tile(geo.identity(d), (b_size, t_max, 1))
        X[batch.rows, batch.cols] = xs
        eff = self.effective_rgru()
        f = self.field
        unrolled = cfg.ode.backward == "unrolled"
        H = np.tile(geo.identity(d), (b_size, 1))
        traj = np.empty((b_size, t_max, p))
        tape = Tape(batch, enc_cache, [], [], [], [], [], traj, None) if need_tape else None
        for i in range(t_max):
            v = batch.valid[:, i:i + 1]
            if cfg.use_ode:
                u0 = geo.log_at_identity(H)
                res = mo.ode_solve(f, u0, batch.tau[:, max(i - 1, 0)], batch.tau[:, i], cfg.ode,
                                   return_tape=need_tape and unrolled)
                u1, ode_tape = res if need_tape and unrolled else (res, None)
                h_mid = np.where(dm, np.exp(np.where(dm, u1, 0.0)), u1)
            else:
                u1, ode_tape, h_mid = None, None, H
            h_new, cache = rgru.cell_forward(h_mid, X[:, i], eff, cfg.candidate)
            if need_tape:
                tape.h_prev.append(H)
                tape.h_mid.append(h_mid)
                tape.u_end.append(u1)
                tape.ode_tapes.append(ode_tape)
                tape.cells.append(cache)
            H = np.where(v, h_new, H)
            traj[:, i] = H
        out, z = self._head(traj)
        if need_tape:
            tape.z_head = z
        return out, traj, tape

    def _head(self, traj):
        cfg = self.cfg
        w, b = self.params["head.w"], self.params["head.b"]
        if cfg.task == "imputation":
            z = geo.log_at_identity(traj)
            return z @ w.T + b, z
        z = geo.log_at_identity(traj[:, -1])
        out = z @ w.T + b
        if cfg.task == "forecasting":
            out = out.reshape(-1, cfg.horizon, cfg.n_targets)
        return out, z

    # -- backward -----------------------------------------------------------

    def backward(self, tape: Tape, g_out) -> dict:
        """Gradients of ``sum(g_out * outputs)`` w.r.t. every raw parameter."""
        if tape is None:
            raise ValueError("backward needs the tape from forward_batch(..., need_tape=True)")
        cfg = self.cfg
        d = cfg.hidden_dim
        dm = geo.diag_mask(d)
        batch = tape.batch
        b_size, t_max = batch.valid.shape
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        g_out = np.asarray(g_out, dtype=float)
        w = self.params["head.w"]
        z = tape.z_head
        g2 = g_out.reshape(-1, w.shape[0])
        grads["head.w"] = g2.T @ z.reshape(-1, z.shape[-1])
        grads["head.b"] = g2.sum(axis=0)
        g_z = (g_out.reshape(z.shape[:-1] + (w.shape[0],))) @ w
        if cfg.task == "imputation":
            g_traj = g_z * np.where(dm, 1.0 / np.where(dm, tape.traj, 1.0), 1.0)
        else:
            g_traj = np.zeros_like(tape.traj)
            g_traj[:, -1] = g_z * np.where(dm, 1.0 / np.where(dm, tape.traj[:, -1], 1.0), 1.0)

        f = self.field
        g_field = [np.zeros_like(a) for a in f.params]
        g_cell = {k: 0.0 for k, _ in self.rgru_params.items()}
        g_x = np.zeros_like(tape.traj)
        g = np.zeros((b_size, tape.traj.shape[-1]))
        for i in reversed(range(t_max)):
            g = g + g_traj[:, i]
            v = batch.valid[:, i:i + 1]
            gx, g_mid, gp = rgru.cell_backward(g * v, tape.cells[i])
            g_x[:, i] = gx
            for k in g_cell:
                g_cell[k] = g_cell[k] + gp[k]
            if cfg.use_ode:
                g_u1 = g_mid * np.where(dm, tape.h_mid[i], 1.0)
                t0, t1 = batch.tau[:, max(i - 1, 0)], batch.tau[:, i]
                if cfg.ode.backward == "unrolled":
                    g_u0, gth = mo.backward_unrolled(g_u1, tape.ode_tapes[i], f)
                else:
                    g_u0, gth = mo.backward_adjoint(g_u1, tape.u_end[i], t0, t1, f, cfg.ode)
                for acc, gi in zip(g_field, gth):
                    acc += gi
                h_prev = tape.h_prev[i]
                g_prev = g_u0 * np.where(dm, 1.0 / np.where(dm, h_prev, 1.0), 1.0)
            else:
                g_prev = g_mid
            g = np.where(v, g_prev, g)

        raw = rgru.reparameterize_backward(g_cell, self.rgru_params, cfg.positive_weights)
        for k, gk in raw.items():
            grads[f"rgru.{k}"] = np.asarray(gk, dtype=float)
        for k, gk in zip([k for k in self.params if k.startswith("field.")], g_field):
            grads[k] = gk
        if not cfg.freeze_encoder and self.encoder_params:
            g_enc = enc.encode_backward(g_x[batch.rows, batch.cols], tape.enc_cache,
                                        self.encoder_params, cfg.encoder)
            for k, gk in zip([k for k in self.params if k.startswith("encoder.")], g_enc):
                grads[k] = gk
        return grads

    # -- convenience --------------------------------------------------------

    def prepare(self, seqs, targets=None) -> list[SeqInputs]:
        if targets is None:
            targets = [None] * len(seqs)
        return [prepare_sequence(s, self.cfg, t) for s, t in zip(seqs, targets)]

    def predict(self, items: list[SeqInputs], batch_size=64):
        """Task outputs for prepared sequences, batch by batch (no tape).

        Imputation returns a list of ``(n_steps, n_targets)`` arrays, the
        other tasks one stacked array.
        """
        outs = []
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            out, _, _ = self.forward_batch(make_batch(chunk))
            if self.cfg.task == "imputation":
                outs += [o[:it.n_steps] for o, it in zip(out, chunk)]
            else:
                outs.append(out)
        return outs if self.cfg.task == "imputation" else np.concatenate(outs)


def forward(seq: enc.TimedSequence, model: OdeRgruModel):
    """Hidden trajectory ``(T, p)`` and task output for a single sequence."""
    out, traj, _ = model.forward_batch(make_batch(model.prepare([seq])))
    return traj[0], out[0]


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} outputs for {labels.shape[0]} labels")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    n = labels.size
    value = float(np.mean(lse - logits[np.arange(n), labels]))
    g = np.exp(logits - lse[:, None])
    g[np.arange(n), labels] -= 1.0
    return value, g / n


def masked_mse(pred, target, mask=None):
    """Mean squared error over observed entries and its gradient."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask selects no entries")
    r = np.where(mask, pred - target, 0.0)
    return float(np.sum(r * r) / count), 2.0 * r / count


def l2_penalty(params: dict, coef: float):
    value = coef * sum(float(np.sum(v * v)) for v in params.values())
    return value, {k: 2.0 * coef * v for k, v in params.items()}


def loss(output, target, task, mask=None, params=None, l2=0.0):
    """Task loss plus ``l2 * sum(raw**2)`` over ``params``."""
    if task == "classification":
        value, _ = cross_entropy(output, target)
    else:
        value, _ = masked_mse(output, target, mask)
    if params is not None:
        value += l2_penalty(params, l2)[0]
    return value


def _batch_targets(items, idx, labels, task):
    if task == "classification":
        return labels[idx], None
    t_max = max(items[i].target.shape[0] for i in idx)
    n_t = items[idx[0]].target.shape[1]
    tgt = np.zeros((len(idx), t_max, n_t))
    msk = np.zeros((len(idx), t_max, n_t), bool)
    for b, i in enumerate(idx):
        k = items[i].target.shape[0]
        tgt[b, :k] = items[i].target
        msk[b, :k] = items[i].target_mask
    return tgt, msk


def data_loss_and_grad(model, out, items, idx, labels):
    task = model.cfg.task
    tgt, msk = _batch_targets(items, idx, labels, task)
    if task == "classification":
        return cross_entropy(out, tgt)
    return masked_mse(out, tgt, msk)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: OdeRgruModel
    log: list


def _dataset_items(model, ds, which):
    idx = ds.indices(which)
    seqs = [ds.sequences[i] for i in idx]
    targets = None if ds.targets is None else [ds.targets[i] for i in idx]
    labels = None if ds.labels is None else np.asarray(ds.labels)[idx]
    return model.prepare(seqs, targets), labels


def evaluate(model: OdeRgruModel, ds, which="test", items=None, labels=None) -> dict:
    """Forward-only metrics on one split of ``ds``."""
    from .data import metrics

    if items is None:
        items, labels = _dataset_items(model, ds, which)
    if not items:
        raise DataError(f"split {which!r} is empty")
    out = model.predict(items)
    if model.cfg.task == "classification":
        return metrics(np.argmax(out, axis=1), labels, "classification",
                       n_classes=model.cfg.n_classes)
    tgt = [it.target for it in items]
    msk = [it.target_mask for it in items]
    pred = out if isinstance(out, list) else list(out)
    return metrics(np.concatenate([np.reshape(p, t.shape) for p, t in zip(pred, tgt)]),
                   np.concatenate(tgt), "regression", mask=np.concatenate(msk))


def train(ds, model: OdeRgruModel, cfg: TrainConfig, eval_splits=("train", "test"),
          progress=None) -> TrainResult:
    """Adam on the raw parameters with a seed-determined batch order.

    Every iteration appends a row with the loss terms and gradient norm to
    the log; evaluation metrics are added every ``cfg.eval_every``
    iterations and after the last one.

    Raises
    ------
    DivergenceError
        If the loss becomes non-finite.
    """
    model = model.copy()
    items, labels = _dataset_items(model, ds, "train")
    if not items:
        raise DataError("training split is empty")
    eval_sets = {}
    for s in eval_splits:
        if len(ds.indices(s)):
            eval_sets[s] = (items, labels) if s == "train" else _dataset_items(model, ds, s)
    rng = np.random.default_rng([cfg.seed, 1])
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    order, pos, epoch = np.empty(0, int), 0, 0
    log = []
    for it in range(1, cfg.max_iter + 1):
        if pos >= order.size:
            order, pos, epoch = rng.permutation(len(items)), 0, epoch + 1
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        out, _, tape = model.forward_batch(make_batch([items[i] for i in idx]), need_tape=True)
        data_loss, g_out = data_loss_and_grad(model, out, items, idx, labels)
        penalty, g_pen = l2_penalty(model.params, cfg.l2)
        total = data_loss + penalty
        if not math.isfinite(total):
            raise DivergenceError(it, total)
        grads = model.backward(tape, g_out)
        for k in grads:
            grads[k] = grads[k] + g_pen[k]
            if model.cfg.freeze_encoder and k.startswith("encoder."):
                grads[k] = np.zeros_like(grads[k])
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        b1t = 1.0 - cfg.beta1 ** it
        b2t = 1.0 - cfg.beta2 ** it
        for k, g in grads.items():
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
            v2[k] = cfg.beta2 * v2[k] + (1.0 - cfg.beta2) * g * g
            model.params[k] = model.params[k] - cfg.lr * (m[k] / b1t) / (np.sqrt(v2[k] / b2t) + cfg.adam_eps)
        row = {"iteration": it, "epoch": epoch, "loss": total, "data_loss": data_loss,
               "penalty": penalty, "grad_norm": gnorm}
        if (cfg.eval_every and it % cfg.eval_every == 0) or it == cfg.max_iter:
            for s, (its, lab) in eval_sets.items():
                for name, val in evaluate(model, None, s, its, lab).items():
                    row[f"{s}_{name}"] = val
        log.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(model, log)


METRIC_BASE_COLUMNS = ["iteration", "epoch", "loss", "data_loss", "penalty", "grad_norm"]


def write_metrics_csv(log, path):
    """Write the training log; values use ``repr`` so reruns compare byte for byte."""
    cols = list(METRIC_BASE_COLUMNS)
    for row in log:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in log:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float)
                        else row[c] for c in cols])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: OdeRgruModel, directory, seed=None, extra=None):
    """Write ``manifest.json`` and ``params.bin`` (little-endian float64) to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "software_version": __version__,
        "seed": seed,
        "architecture": model.cfg.to_dict(),
        "dtype": "<f8",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "blob": "params.bin",
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    (directory / "params.bin").write_bytes(blob)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory, check_version=True) -> tuple[OdeRgruModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, manifest)``.

    Raises
    ------
    CheckpointError
        On an unknown format version, a blob that does not match the
        manifest, or (with ``check_version``) a checkpoint written by a
        different software version.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        blob = (directory / manifest.get("blob", "params.bin")).read_bytes()
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint in {directory}: {exc}") from None
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    if check_version and manifest.get("software_version") != __version__:
        raise CheckpointError(f"checkpoint written by version {manifest.get('software_version')!r}, "
                              f"this is {__version__}")
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("parameter blob does not match the manifest")
    cfg = ModelConfig.from_dict(manifest["architecture"])
    flat = np.frombuffer(blob, dtype="<f8")
    params, pos = {}, 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"], dtype=int))
        params[entry["name"]] = flat[pos:pos + n].reshape(entry["shape"]).astype(float)
        pos += n
    if pos != flat.size:
        raise CheckpointError("parameter blob size does not match the declared shapes")
    try:
        return OdeRgruModel(cfg, params), manifest
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
