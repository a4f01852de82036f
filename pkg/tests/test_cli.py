import csv
import io
import json

import numpy as np
import pytest
import yaml

from b2opt import cli
from b2opt import config as C
from b2opt.model import ModelConfig, init_model, save_model


def _write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def _run(tmp_path, command, cfg, out="out", seed=0, threads=1):
    path = _write(tmp_path, f"{out}.yaml", cfg)
    code = cli.main([command, "--config", path, "--seed", str(seed), "--out", str(tmp_path / out), "--threads", str(threads)])
    return code, tmp_path / out


def _checkpoint(tmp_path, n, d, t, ws=True, name="m.ckpt"):
    path = tmp_path / name
    save_model(init_model(ModelConfig(n=n, d=d, t=t, weight_sharing=ws), np.random.default_rng(0)), path)
    return str(path)


def test_defaults_validate():
    cfg = C.validate({})
    assert cfg["train"]["lr"] == 0.01 and cfg["run"]["n"] == 100


def test_unknown_keys_all_reported():
    with pytest.raises(C.ConfigSchemaError) as info:
        C.validate({"task": {"dims": 3}, "bogus": {}, "run": {"n": "ten"}})
    text = str(info.value)
    assert "task.dims" in text and "bogus" in text and "run.n" in text


def test_invalid_lr_rejected_before_work(tmp_path, capsys):
    code, out = _run(tmp_path, "train", {"train": {"lr": 0.0}})
    assert code == 2 and not out.exists()
    assert "train.lr" in capsys.readouterr().err


def test_train_writes_checkpoint_loss_and_manifest(tmp_path):
    cfg = {"task": {"d": 3}, "run": {"n": 6}, "train": {"t": 2, "epochs": 3, "batch": 2}}
    code, out = _run(tmp_path, "train", cfg)
    assert code == 0
    assert (out / "model.ckpt").exists()
    loss = _rows(out / "loss.csv")
    assert [r["epoch"] for r in loss] == ["1", "2", "3"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_hash"] == C.config_hash(C.validate(cfg)) and man["seeds"] == [0]
    code, again = _run(tmp_path, "train", cfg, out="again")
    assert (out / "loss.csv").read_bytes() == (again / "loss.csv").read_bytes()
    assert (out / "model.ckpt").read_bytes() == (again / "model.ckpt").read_bytes()


def test_optimize_budgets(tmp_path):
    ck = _checkpoint(tmp_path, 100, 10, 30)
    code, out = _run(tmp_path, "optimize", {"algo": {"name": "b2opt", "checkpoint": ck}, "run": {"seeds": 2}})
    assert code == 0
    summary = _rows(out / "summary.csv")
    assert summary[0]["evals_per_run"] == "3100"
    runs = _rows(out / "runs.csv")
    assert len(runs) == 2 * 31
    code, out = _run(tmp_path, "optimize", {"algo": {"name": "de"}, "run": {"seeds": 1}}, out="de")
    assert _rows(out / "summary.csv")[0]["evals_per_run"] == "10100"


def test_optimize_dimension_mismatch_is_an_error(tmp_path, capsys):
    ck = _checkpoint(tmp_path, 10, 5, 2)
    code, _ = _run(tmp_path, "optimize", {"algo": {"name": "b2opt", "checkpoint": ck}, "run": {"n": 10}})
    assert code == 1 and "d=5" in capsys.readouterr().err


def test_summary_matches_per_seed_rows(tmp_path):
    cfg = {"algo": {"name": "es"}, "run": {"n": 10, "steps": 5, "seeds": 4}, "task": {"function": "F7", "d": 3}}
    code, out = _run(tmp_path, "optimize", cfg)
    runs = _rows(out / "runs.csv")
    finals = {}
    for r in runs:
        finals[r["seed"]] = min(finals.get(r["seed"], np.inf), float(r["best"]))
    v = np.array(list(finals.values()))
    s = _rows(out / "summary.csv")[0]
    assert float(s["mean"]) == float(v.mean()) and float(s["std"]) == float(v.std())


def test_bench_grid_with_absent_checkpoint(tmp_path):
    cfg = {"run": {"n": 8, "steps": 2, "seeds": 2}, "task": {"d": 10},
           "bench": {"checkpoints": {"b2opt": str(tmp_path / "missing_{d}.ckpt")}}}
    code, out = _run(tmp_path, "bench", cfg)
    assert code == 0
    rows = _rows(out / "bench.csv")
    assert len(rows) == 24
    assert {r["status"] for r in rows if r["algo"] == "b2opt"} == {"absent"}
    assert {r["status"] for r in rows if r["algo"] != "b2opt"} == {"ok"}


def test_bench_uses_labelled_checkpoints(tmp_path):
    ck = _checkpoint(tmp_path, 8, 4, 2)
    cfg = {"run": {"n": 8, "steps": 1, "seeds": 1},
           "bench": {"algos": ["small", "de"], "functions": ["F4"], "dims": [4], "checkpoints": {"small": ck}}}
    code, out = _run(tmp_path, "bench", cfg)
    rows = _rows(out / "bench.csv")
    assert [(r["algo"], r["status"], r["evals_per_run"]) for r in rows] == [("small", "ok", "24"), ("de", "ok", "16")]


def test_arm_rows(tmp_path):
    cfg = {"run": {"n": 6, "steps": 1}, "arm": {"targets": 3, "algos": ["de"]}}
    code, out = _run(tmp_path, "arm", cfg)
    rows = _rows(out / "arm.csv")
    assert len(rows) == 6
    assert [(r["mode"], r["r"]) for r in rows] == [(m, str(r)) for m in ("SC", "CC") for r in (100, 300, 1000)]


def test_ablate_cells(tmp_path):
    cfg = {"task": {"d": 3}, "run": {"n": 6, "seeds": 1}, "train": {"t": 1, "epochs": 1, "batch": 1}}
    code, out = _run(tmp_path, "ablate", cfg)
    assert code == 0
    rows = _rows(out / "ablate.csv")
    assert len(rows) == 30
    assert {r["algo"] for r in rows} == set(C.ABLATIONS)


def test_export_viz_shapes_and_determinism(tmp_path):
    ck = _checkpoint(tmp_path, 7, 4, 3, ws=False)
    cfg = {"algo": {"checkpoint": ck}, "task": {"function": "F9", "d": 4}}
    code, out = _run(tmp_path, "export-viz", cfg)
    attn = _rows(out / "attention.csv")
    assert len(attn) == 3 * 7 and len(attn[0]) == 2 + 7
    pops = _rows(out / "populations.csv")
    assert len(pops) == 4 * 7
    assert len(_rows(out / "mutation.csv")) == 3 * 2 * 7
    code, again = _run(tmp_path, "export-viz", cfg, out="again")
    for name in ("attention.csv", "populations.csv", "mutation.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_threads_do_not_change_results(tmp_path):
    cfg = {"algo": {"name": "de"}, "run": {"n": 8, "steps": 3, "seeds": 5}, "task": {"d": 3}}
    _, one = _run(tmp_path, "optimize", cfg, out="one")
    _, many = _run(tmp_path, "optimize", cfg, out="many", threads=3)
    assert (one / "runs.csv").read_bytes() == (many / "runs.csv").read_bytes()
    _, other = _run(tmp_path, "optimize", cfg, out="other", seed=1)
    assert (one / "runs.csv").read_bytes() != (other / "runs.csv").read_bytes()


def test_csv_is_crlf_rfc4180(tmp_path):
    cfg = {"algo": {"name": "random"}, "run": {"n": 5, "steps": 1, "seeds": 1}, "task": {"d": 2}}
    _, out = _run(tmp_path, "optimize", cfg)
    raw = (out / "runs.csv").read_bytes()
    assert raw.endswith(b"\r\n") and b"\n" not in raw.replace(b"\r\n", b"")


def test_seed_splitting_is_fixed():
    assert cli.split_seeds(7, 3) == cli.split_seeds(7, 5)[:3]
    assert len(set(cli.split_seeds(7, 100))) == 100
