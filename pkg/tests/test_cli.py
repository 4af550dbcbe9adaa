import json
import os
import subprocess
import sys

import pytest

from odergru import cli, verify
from odergru import model as M


def tiny_config(**over):
    doc = {
        "seed": 3,
        "data": {"synth": {"n_per_class": 6, "T": 6, "d_channels": 2}},
        "model": {"hidden_dim": 3, "field_hidden": [4],
                  "encoder": {"layers": 1, "width": 4, "cov_axis": "channels", "group": 2},
                  "ode": {"n_steps": 4}},
        "train": {"lr": 0.01, "max_iter": 4, "batch_size": 4, "eval_every": 2},
    }
    doc.update(over)
    return doc


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.ENV_SEED, raising=False)
    monkeypatch.delenv(cli.ENV_THREADS, raising=False)
    return tmp_path


def put(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


def train(workdir, out="run", doc=None, extra=()):
    cfg = put(workdir / "cfg.json", doc or tiny_config())
    return cli.main(["train", "--config", cfg, "--out", str(workdir / out), *extra])


# ---------------------------------------------------------------------------
# config handling


def test_schema_accepts_example_configs():
    root = os.path.join(os.path.dirname(__file__), "..", "docs", "configs")
    names = sorted(n for n in os.listdir(root) if n.endswith(".json"))
    assert names
    for n in names:
        with open(os.path.join(root, n), encoding="utf-8") as fh:
            cli.validate_config(json.load(fh))


def test_published_schema_matches_package_copy():
    path = os.path.join(os.path.dirname(__file__), "..", "docs", "config_schema.json")
    with open(path, encoding="utf-8") as fh:
        assert json.load(fh) == cli.load_schema()


def test_missing_dataset_path_names_field():
    with pytest.raises(cli.ConfigError, match="'data/csv/path' is required"):
        cli.validate_config({"data": {"csv": {"time": "t"}}})


@pytest.mark.parametrize("doc,pattern", [
    ({}, "'data' is required"),
    ({"data": {}}, "exactly one of"),
    ({"data": {"synth": {}, "csv": {"path": "x"}}}, "exactly one of"),
    ({"data": {"synth": {"T": 1}}}, "data/synth/T"),
    ({"data": {"synth": {}}, "train": {"lr": "fast"}}, "train/lr"),
    ({"data": {"synth": {}}, "colour": "red"}, "<root>"),
])
def test_schema_errors(doc, pattern):
    with pytest.raises(cli.ConfigError, match=pattern):
        cli.validate_config(doc)


def test_config_hash_ignores_key_order():
    assert cli.config_hash({"a": 1, "b": [1, 2]}) == cli.config_hash({"b": [1, 2], "a": 1})
    assert cli.config_hash({"a": 1}) != cli.config_hash({"a": 2})


def test_hidden_dim_conflict():
    doc = tiny_config()
    doc["model"]["encoder"]["spd_dim"] = 5
    ds = cli.build_dataset(doc, 0)
    with pytest.raises(cli.ConfigError, match="disagrees"):
        cli.build_model_config(doc, ds)


def test_seed_and_thread_resolution(monkeypatch):
    args = cli.build_parser().parse_args(["train", "--config", "x"])
    monkeypatch.delenv(cli.ENV_SEED, raising=False)
    monkeypatch.delenv(cli.ENV_THREADS, raising=False)
    assert cli.resolve_seed(args) == 0
    assert cli.resolve_seed(args, {"seed": 7}) == 7
    monkeypatch.setenv(cli.ENV_SEED, "11")
    assert cli.resolve_seed(args, {"seed": 7}) == 11
    args.seed = 5
    assert cli.resolve_seed(args, {"seed": 7}) == 5
    assert cli.resolve_threads(args) == 1
    monkeypatch.setenv(cli.ENV_THREADS, "2")
    assert cli.resolve_threads(args) == 2
    monkeypatch.setenv(cli.ENV_THREADS, "many")
    with pytest.raises(cli.ConfigError, match=cli.ENV_THREADS):
        cli.resolve_threads(args)


def test_format_table_alignment():
    text = cli.format_table([("acc", 1.0), ("kappa", 0.25)], ["metric", "value"])
    lines = text.splitlines()
    assert lines[0].startswith("metric") and set(lines[1]) <= {"-", " "}
    assert lines[2].endswith("1") and lines[3].endswith("0.25")


# ---------------------------------------------------------------------------
# train


def test_train_outputs(workdir):
    assert train(workdir) == 0
    out = workdir / "run"
    assert {p.name for p in out.iterdir()} == {"metrics.csv", "checkpoint", "config.json",
                                              "run_manifest.json"}
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["seed"] == 3 and man["software_version"] == cli.__version__
    assert man["config_sha256"] == cli.config_hash(tiny_config())
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 5 and rows[0].startswith(",".join(M.METRIC_BASE_COLUMNS))
    model, ck = M.load_checkpoint(out / "checkpoint")
    assert ck["config_sha256"] == man["config_sha256"] and model.cfg.hidden_dim == 3


def test_train_is_byte_deterministic(workdir):
    assert train(workdir, "a") == 0 and train(workdir, "b") == 0
    assert (workdir / "a/metrics.csv").read_bytes() == (workdir / "b/metrics.csv").read_bytes()
    assert (workdir / "a/checkpoint/params.bin").read_bytes() == \
        (workdir / "b/checkpoint/params.bin").read_bytes()


def test_seed_flag_and_env_override(workdir, monkeypatch):
    assert train(workdir, "a", extra=["--seed", "8"]) == 0
    monkeypatch.setenv(cli.ENV_SEED, "8")
    assert train(workdir, "b") == 0
    assert json.loads((workdir / "a/run_manifest.json").read_text())["seed"] == 8
    assert (workdir / "a/metrics.csv").read_bytes() == (workdir / "b/metrics.csv").read_bytes()
    assert train(workdir, "c", extra=["--seed", "9"]) == 0
    assert (workdir / "a/metrics.csv").read_bytes() != (workdir / "c/metrics.csv").read_bytes()


def test_output_dir_from_config(workdir):
    cfg = put(workdir / "cfg.json", tiny_config(output_dir=str(workdir / "from_cfg")))
    assert cli.main(["train", "--config", cfg]) == 0
    assert (workdir / "from_cfg" / "metrics.csv").exists()


def test_no_writes_outside_out(workdir):
    put(workdir / "cfg.json", tiny_config())
    before = tree(workdir)
    assert cli.main(["train", "--config", "cfg.json", "--out", "o/run"]) == 0
    assert cli.main(["eval", "--config", "cfg.json", "--checkpoint", "o/run/checkpoint",
                     "--out", "o/ev"]) == 0
    assert cli.main(["corrupt", "--config", "cfg.json", "--fraction", "0.3", "--out", "o/cor"]) == 0
    new = set(tree(workdir)) - set(before)
    assert new and all(p == "o" or p.startswith("o/") for p in new)


def test_exit_codes(workdir, capsys):
    assert cli.main(["train", "--config", put(workdir / "bad.json", {"data": {}}), "--out", "x"]) == 1
    assert "config error" in capsys.readouterr().err
    assert not (workdir / "x").exists()

    doc = tiny_config(data={"csv": {"path": str(workdir / "missing.csv")}})
    assert train(workdir, "y", doc) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "missing.csv" in err
    assert not (workdir / "y").exists()

    assert cli.main(["train", "--config", str(workdir / "absent.json"), "--out", "z"]) == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--out", "z"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["eval", "--config", "c", "--checkpoint", "k", "--drop", "1.5"])
    assert info.value.code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workdir, capsys):
    doc = tiny_config()
    doc["train"]["lr"] = 1e300
    doc["train"]["max_iter"] = 20
    assert train(workdir, doc=doc) == 3
    assert "numerical failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval, corrupt, bench, verify


def test_eval_fresh_checkpoint(workdir, capsys):
    assert train(workdir) == 0
    params = (workdir / "run/checkpoint/params.bin").read_bytes()
    capsys.readouterr()
    assert cli.main(["eval", "--config", "cfg.json", "--checkpoint", "run/checkpoint",
                     "--out", "ev"]) == 0
    printed = capsys.readouterr().out
    rows = (workdir / "ev/eval.csv").read_text().splitlines()
    assert rows[0] == "split,metric,value"
    assert [r.split(",")[1] for r in rows[1:]] == ["acc", "kappa", "macro_f1"]
    assert "macro_f1" in printed
    # evaluation never touches the parameters
    assert (workdir / "run/checkpoint/params.bin").read_bytes() == params
    # the final logged test accuracy is what eval reports
    last = (workdir / "run/metrics.csv").read_text().splitlines()
    header, final = last[0].split(","), last[-1].split(",")
    assert float(final[header.index("test_acc")]) == float(rows[1].split(",")[2])


def test_eval_drop_passthrough(workdir):
    assert train(workdir) == 0
    for name, extra in (("plain", []), ("d1", ["--drop", "0.5"]), ("d2", ["--drop", "0.5"])):
        assert cli.main(["eval", "--config", "cfg.json", "--checkpoint", "run/checkpoint",
                         "--split", "all", "--out", name, *extra]) == 0
    plain, d1, d2 = ((workdir / n / "eval.csv").read_text() for n in ("plain", "d1", "d2"))
    assert d1 == d2
    corrupt = tiny_config()
    corrupt["data"]["drop_fraction"] = 0.5
    put(workdir / "cc.json", corrupt)
    assert cli.main(["eval", "--config", "cc.json", "--checkpoint", "run/checkpoint",
                     "--split", "all", "--out", "d3"]) == 0
    assert (workdir / "d3/eval.csv").read_text() == d1


def test_eval_empty_test_split(workdir, capsys):
    assert train(workdir) == 0
    doc = tiny_config()
    doc["data"]["synth"]["test_fraction"] = 0.0
    put(workdir / "no_test.json", doc)
    assert cli.main(["eval", "--config", "no_test.json", "--checkpoint", "run/checkpoint",
                     "--out", "ev"]) == 2
    assert "empty" in capsys.readouterr().err
    assert not (workdir / "ev").exists()


def test_eval_version_mismatch(workdir, capsys):
    assert train(workdir) == 0
    man_path = workdir / "run/checkpoint/manifest.json"
    man = json.loads(man_path.read_text())
    man["software_version"] = "0.0.0"
    man_path.write_text(json.dumps(man))
    assert cli.main(["eval", "--config", "cfg.json", "--checkpoint", "run/checkpoint",
                     "--out", "ev"]) == 2
    assert "version" in capsys.readouterr().err


def test_eval_channel_mismatch(workdir):
    assert train(workdir) == 0
    doc = tiny_config()
    doc["data"]["synth"]["d_channels"] = 3
    put(workdir / "wide.json", doc)
    assert cli.main(["eval", "--config", "wide.json", "--checkpoint", "run/checkpoint",
                     "--out", "ev"]) == 2


def test_corrupt_writes_loadable_csv(workdir):
    put(workdir / "cfg.json", tiny_config())
    assert cli.main(["corrupt", "--config", "cfg.json", "--fraction", "0.5", "--out", "c1"]) == 0
    assert cli.main(["corrupt", "--config", "cfg.json", "--fraction", "0.5", "--out", "c2"]) == 0
    a = (workdir / "c1/dataset.csv").read_bytes()
    assert a == (workdir / "c2/dataset.csv").read_bytes()
    from odergru.data import load_csv
    ds = load_csv(workdir / "c1/dataset.csv")
    observed = sum(int(s.mask.sum()) for s in ds.sequences)
    assert observed == pytest.approx(0.5 * 12 * 6 * 2, abs=12)
    # the corrupted file trains through the csv data source
    doc = tiny_config(data={"csv": {"path": str(workdir / "c1/dataset.csv")}})
    assert train(workdir, "from_csv", doc) == 0


def test_bench(workdir):
    put(workdir / "b.json", {"data": {"synth": {}},
                             "bench": {"d_list": [2, 4], "n_points": 8, "repeats": 2,
                                       "karcher_repeats": 1}})
    assert cli.main(["bench", "--config", "b.json", "--out", "bench"]) == 0
    rows = (workdir / "bench/bench.csv").read_text().splitlines()
    assert rows[0] == "d,n,t_closed_ns,t_karcher_ns"
    assert [r.split(",")[0] for r in rows[1:]] == ["2", "4"]


def test_verify_subset(workdir, capsys):
    assert cli.main(["verify", "--only", "2,4", "--out", "v"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]  2" in out and "[PASS]  4" in out and "2/2 checks passed" in out
    rows = (workdir / "v/verify.csv").read_text().splitlines()
    assert len(rows) == 3
    assert cli.main(["verify", "--only", "2,99"]) == 1
    assert cli.main(["verify", "--only", "two"]) == 1


def test_verify_failure_names_first_failing_check(workdir, capsys, monkeypatch):
    checks = list(verify.CHECKS)
    checks[1] = (2, "metric axioms", lambda: (False, "forced"))
    monkeypatch.setattr(verify, "CHECKS", checks)
    assert cli.main(["verify", "--only", "2,4"]) == 3
    captured = capsys.readouterr()
    assert "[FAIL]  2" in captured.out
    assert "first failing check: 2 metric axioms" in captured.err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "odergru", "--version"], capture_output=True,
                         text=True, check=True)
    assert res.stdout.strip() == f"odergru {cli.__version__}"
