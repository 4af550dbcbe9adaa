"""Command-line entry point: ``odergru train|eval|bench|verify|corrupt``.

Configs are JSON documents validated against ``config_schema.json`` before
any work starts. Exit codes: 0 success, 1 usage or config error, 2 data
error, 3 numerical failure (including a failed verification).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
from threadpoolctl import threadpool_limits

from . import data
from . import encoder as enc
from . import manifold_ode as mo
from . import model as M
from ._version import __version__
from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENV_SEED, ENV_THREADS = "ODERGRU_SEED", "ODERGRU_THREADS"


def load_schema() -> dict:
    return json.loads(resources.files("odergru").joinpath("config_schema.json").read_text("utf-8"))


def _path_of(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(doc) -> dict:
    """Raise :class:`ConfigError` naming the offending field if ``doc`` is invalid."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        e = errors[0]
        if e.validator == "required":
            missing = e.message.split("'")[1] if "'" in e.message else e.message
            where = _path_of(e)
            field = missing if where == "<root>" else f"{where}/{missing}"
            raise ConfigError(f"config field {field!r} is required")
        if e.validator == "oneOf" and _path_of(e) == "data":
            raise ConfigError("config field 'data' needs exactly one of 'synth' or 'csv'")
        raise ConfigError(f"config field {_path_of(e)!r}: {e.message}")
    return doc


def read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from None
    return validate_config(doc)


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _env_int(name):
    v = os.environ.get(name)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {v!r}") from None


def resolve_seed(args, doc=None) -> int:
    """Flag, then environment, then config, then 0."""
    for v in (args.seed, _env_int(ENV_SEED), (doc or {}).get("seed")):
        if v is not None:
            if not 0 <= v < 2 ** 64:
                raise ConfigError(f"seed must be an unsigned 64-bit integer, got {v}")
            return int(v)
    return 0


def resolve_threads(args) -> int:
    for v in (args.threads, _env_int(ENV_THREADS)):
        if v is not None:
            if v < 1:
                raise ConfigError(f"thread count must be positive, got {v}")
            return v
    return 1


def resolve_out(args, doc=None) -> Path:
    out = args.out or (doc or {}).get("output_dir")
    if not out:
        raise ConfigError("no output directory: pass --out or set 'output_dir' in the config")
    return Path(out)


# ---------------------------------------------------------------------------
# building blocks


def build_dataset(doc, seed) -> data.Dataset:
    source = doc["data"]
    if "synth" in source:
        ds = data.synth_manifold_sequences(seed=seed, **source["synth"])
    else:
        c = dict(source["csv"])
        path = Path(c.pop("path"))
        test_fraction = c.pop("test_fraction", None)
        if "channels" in c:
            c["channels"] = tuple(c["channels"])
        ds = data.load_csv(path, data.CsvSchema(**c), name=path.stem)
        if test_fraction is not None:
            ds = ds.with_random_split(test_fraction, seed)
    frac = source.get("drop_fraction", 0.0)
    return data.drop_observations(ds, frac, seed) if frac else ds


def build_model_config(doc, ds: data.Dataset) -> M.ModelConfig:
    m = dict(doc.get("model", {}))
    ecfg = dict(m.pop("encoder", {}))
    hidden = m.pop("hidden_dim", None)
    if hidden is not None:
        if ecfg.setdefault("spd_dim", hidden) != hidden:
            raise ConfigError(f"model/hidden_dim {hidden} disagrees with "
                              f"model/encoder/spd_dim {ecfg['spd_dim']}")
    ode = mo.OdeConfig(**m.pop("ode", {}))
    if "field_hidden" in m:
        m["field_hidden"] = tuple(m["field_hidden"])
    task = m.setdefault("task", "classification" if ds.task == "classification" else "imputation")
    if (task == "classification") != (ds.task == "classification"):
        raise ConfigError(f"model/task {task!r} does not fit a {ds.task} dataset")
    if task == "classification":
        m["n_classes"] = ds.n_classes
    try:
        return M.ModelConfig(n_channels=ds.channels, encoder=enc.EncoderConfig(**ecfg), ode=ode, **m)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def build_train_config(doc, seed) -> M.TrainConfig:
    try:
        return M.TrainConfig(seed=seed, **doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_table(rows, header) -> str:
    """Left-aligned text columns, right-aligned numbers."""
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    numeric = [all(isinstance(r[i], (int, float)) for r in rows) for i in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if numeric[i] and k else c.ljust(w)
                               for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    doc = read_config(args.config)
    seed = resolve_seed(args, doc)
    out = resolve_out(args, doc)
    ds = build_dataset(doc, seed)
    cfg = build_model_config(doc, ds)
    tcfg = build_train_config(doc, seed)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = M.train(ds, M.OdeRgruModel.init(cfg, seed), tcfg)
    secs = time.perf_counter() - t0
    h = config_hash(doc)
    M.write_metrics_csv(res.log, out / "metrics.csv")
    M.save_checkpoint(res.model, out / "checkpoint", seed=seed, extra={"config_sha256": h})
    _write_json(out / "config.json", doc)
    _write_json(out / "run_manifest.json", {
        "command": "train",
        "config_sha256": h,
        "seed": seed,
        "software_version": __version__,
        "threads": resolve_threads(args),
        "dataset": ds.name,
        "n_sequences": len(ds),
        "dropped_sequences": ds.meta.get("dropped_sequences", 0),
        "iterations": tcfg.max_iter,
    })
    last = res.log[-1] if res.log else {}
    summary = [(k, last[k]) for k in last if k.startswith(("train_", "test_"))]
    print(format_table([("loss", last.get("loss", float("nan")))] + summary, ["metric", "value"]))
    print(f"trained {tcfg.max_iter} iterations in {secs:.1f}s; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = read_config(args.config)
    seed = resolve_seed(args, doc)
    out = resolve_out(args, doc)
    model, manifest = M.load_checkpoint(args.checkpoint)
    ds = build_dataset(doc, seed)
    if args.drop:
        ds = data.drop_observations(ds, args.drop, seed)
    if ds.channels != model.cfg.n_channels:
        raise DataError(f"dataset has {ds.channels} channels, checkpoint expects "
                        f"{model.cfg.n_channels}")
    metrics = M.evaluate(model, ds, args.split)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "metric", "value"])
        for k, v in metrics.items():
            w.writerow([args.split, k, repr(float(v))])
    print(format_table([(args.split, k, float(v)) for k, v in metrics.items()],
                       ["split", "metric", "value"]))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .spd_oracle import complexity_benchmark

    doc = read_config(args.config) if args.config else {}
    b = dict(doc.get("bench", {}))
    out = resolve_out(args, doc)
    out.mkdir(parents=True, exist_ok=True)
    d_list = b.pop("d_list", [8, 16, 32, 64, 128])
    rows = complexity_benchmark(d_list, seed=resolve_seed(args, doc), path=out / "bench.csv", **b)
    print(format_table([(d, n, tc / 1e3, tk / 1e3, tk / tc) for d, n, tc, tk in rows],
                       ["d", "n", "closed_us", "karcher_us", "ratio"]))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    only = None
    if args.only:
        try:
            only = {int(x) for x in args.only.split(",")}
        except ValueError:
            raise ConfigError(f"--only expects comma-separated check numbers, got {args.only!r}") from None
        unknown = only - {c[0] for c in verify.CHECKS}
        if unknown:
            raise ConfigError(f"unknown check numbers {sorted(unknown)}")
    results = verify.run_battery(only, report=lambda line: print(line, flush=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "verify.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "name", "passed", "seconds", "detail"])
            for r in results:
                w.writerow([r.index, r.name, r.passed, f"{r.seconds:.3f}", r.detail])
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"first failing check: {failed[0].index} {failed[0].name}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_corrupt(args) -> int:
    doc = read_config(args.config)
    seed = resolve_seed(args, doc)
    out = resolve_out(args, doc)
    ds = build_dataset(doc, seed)
    if args.fraction:
        ds = data.drop_observations(ds, args.fraction, seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    data.save_csv(ds, path)
    print(f"wrote {len(ds)} sequences to {path} "
          f"({ds.meta.get('dropped_sequences', 0)} dropped for having < 2 steps)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fraction(s):
    v = float(s)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1), got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="odergru", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help=f"random seed (env {ENV_SEED}; default from config, else 0)")
    common.add_argument("--out", help="output directory; nothing is written elsewhere")
    common.add_argument("--threads", type=int, help=f"BLAS thread cap (env {ENV_THREADS}; default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="train a model from a config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    s.add_argument("--config", required=True, help="config whose data section names the dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--drop", type=_fraction, default=0.0,
                   help="drop this fraction of observed cells before evaluating")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="closed-form mean vs Karcher flow timings")
    s.add_argument("--config")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("verify", parents=[common], help="run the acceptance battery")
    s.add_argument("--only", help="comma-separated check numbers")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("corrupt", parents=[common], help="write a dataset with cells dropped")
    s.add_argument("--config", required=True)
    s.add_argument("--fraction", type=_fraction, default=0.0)
    s.set_defaults(func=cmd_corrupt)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=resolve_threads(args)):
            return args.func(args)
    except ConfigError as exc:
        print(f"odergru: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"odergru: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"odergru: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
