"""Command-line front end: train, optimize, bench, arm, ablate, export-viz.

Every command writes plain CSV data files plus a ``manifest.json`` sidecar.
Data files depend only on the config and the master seed; timestamps and
wall times live in the manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import baselines as B
from . import config as C
from .model import (
    Ablation,
    CheckpointError,
    ConfigError,
    ModelConfig,
    b2opt_run,
    evaluate_population,
    init_model,
    load_model,
    save_model,
)
from .objectives import (
    Bounds,
    EvalCounter,
    arm_instance,
    init_population,
    sample_arm_targets,
    sample_instance,
)
from .records import RunRecord, StatSummary
from .training import TrainConfig, loss_csv, train

CSV_FORMAT_VERSION = 1
RUN_FIELDS = ["algo", "task", "d", "seed", "step", "evals", "best", "mean"]
SUMMARY_FIELDS = ["algo", "task", "d", "status", "runs", "mean", "std", "mean_std", "evals_per_run"]


# ---------------------------------------------------------------------------
# plumbing


def split_seeds(master: int, count: int) -> list[int]:
    """Fixed expansion of a master seed into per-run seeds."""
    ss = np.random.SeedSequence(master)
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)]


def run_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Separate streams for the task instance and for the algorithm."""
    task_ss, algo_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(task_ss), np.random.default_rng(algo_ss)


def _num(x) -> str:
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class Manifest:
    def __init__(self, command: str, cfg: dict, master: int):
        self.data = {
            "command": command,
            "format_version": CSV_FORMAT_VERSION,
            "code_version": _code_version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config_hash": C.config_hash(cfg),
            "config": cfg,
            "master_seed": master,
            "seeds": [],
            "files": [],
            "started": datetime.now(timezone.utc).isoformat(),
            "wall_times": {},
        }
        self._t0 = time.perf_counter()

    def finish(self, out: Path) -> None:
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["wall_time"] = time.perf_counter() - self._t0
        (out / "manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def parallel_map(fn, items, threads: int) -> list:
    """Ordered map; results come back in input order whatever the finish order."""
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# running one algorithm on one task


def make_task(cfg: dict, function_id: str, d: int, rng):
    inst = sample_instance(function_id, d, rng)
    t = cfg["task"]
    if t["lower"] is not None:
        inst = dataclasses.replace(inst, bounds=Bounds.box(float(t["lower"]), float(t["upper"]), d))
    return inst


def run_algo(algo: str, inst, seed: int, cfg: dict, rng, model=None, task: str = "") -> RunRecord:
    a, r = cfg["algo"], cfg["run"]
    n, steps = r["n"], r["steps"]
    counter = EvalCounter()
    if model is not None:
        model.check_compatible(n, inst.d)
        pop = evaluate_population(init_population(inst.bounds, n, rng), inst, counter)
        return b2opt_run(model, pop, inst, counter, seed, task)[0]
    if algo == "de":
        return B.run_de(inst, B.DEConfig(n, a["de_F"], a["de_cr"], steps), counter, rng, seed, task)[0]
    if algo == "es":
        es = B.ESConfig(n, a["es_mu_ratio"], a["es_sigma"], a["es_self_adaptive"], steps)
        return B.run_es(inst, es, counter, rng, seed, task)[0]
    if algo == "ga":
        return B.run_ga(inst, n, steps, B.GAOperatorsConfig(a["ga_cr"], a["ga_mr"]), counter, rng, seed, task)[0]
    if algo == "random":
        return B.run_random(inst, n, steps, counter, rng, seed, task)[0]
    raise C.ConfigSchemaError([f"algorithm {algo!r} needs a checkpoint"])


def final_value(rec: RunRecord, budget: int | None) -> float:
    return rec.final_best if budget is None else rec.best_at_budget(budget)


def run_rows(rec: RunRecord, d: int) -> list[list]:
    return [
        [rec.algo, rec.task, d, rec.seed, step, e, _num(b), _num(m)]
        for step, (b, m, e) in enumerate(zip(rec.best, rec.mean, rec.evals))
    ]


def summary_row(label: str, task: str, d: int, records: list[RunRecord] | None, budget=None) -> list:
    if not records:
        return [label, task, d, "absent", 0, "", "", "", ""]
    s = StatSummary.of(label, task, [final_value(r, budget) for r in records])
    evals = budget if budget is not None else records[0].eval_count
    return [label, task, d, "ok", s.runs, _num(s.mean), _num(s.std), s.text, evals]


def _load_checkpoint(path: str | None):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        return None
    return load_model(p)


def evaluate_grid(cfg: dict, label: str, function_id: str, d: int, seeds, threads: int, model=None):
    def one(seed):
        task_rng, algo_rng = run_rngs(seed)
        inst = make_task(cfg, function_id, d, task_rng)
        return run_algo(label, inst, seed, cfg, algo_rng, model, function_id)

    return parallel_map(one, seeds, threads)


# ---------------------------------------------------------------------------
# commands


def model_config(cfg: dict, ablation: Ablation = Ablation()) -> ModelConfig:
    tr = cfg["train"]
    return ModelConfig(
        n=cfg["run"]["n"], d=cfg["task"]["d"], t=tr["t"], weight_sharing=tr["weight_sharing"],
        d_k=tr["d_k"], hidden=tr["hidden"], ablation=ablation,
    )


def train_config(cfg: dict, seed: int) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(
        lr=float(tr["lr"]), decay=float(tr["decay"]), decay_every=tr["decay_every"], epochs=tr["epochs"],
        batch=tr["batch"], clip_norm=float(tr["clip_norm"]), functions=tuple(tr["functions"]), seed=seed,
        n_shifts=tr["n_shifts"], arm_mode=tr["arm_mode"], arm_r_max=float(tr["arm_r_max"]), arm_pool=tr["arm_pool"],
    )


def _train_model(cfg: dict, master: int, ablation: Ablation = Ablation()):
    init_ss, train_ss = np.random.SeedSequence(master).spawn(2)
    mcfg = model_config(cfg, ablation)
    if cfg["train"]["functions"] == ["ARM"]:
        # the arm's dimension is fixed by its mode, not by task.d
        mcfg = dataclasses.replace(mcfg, d=200 if cfg["train"]["arm_mode"] == "CC" else 100, hidden=cfg["train"]["hidden"])
    model = init_model(mcfg, np.random.default_rng(init_ss))
    return train(model, train_config(cfg, master), np.random.default_rng(train_ss))


def cmd_train(cfg: dict, master: int, out: Path, threads: int) -> None:
    man = Manifest("train", cfg, master)
    model, records = _train_model(cfg, master)
    save_model(model, out / "model.ckpt")
    (out / "loss.csv").write_bytes(loss_csv(records).encode())
    man.data["seeds"] = [master]
    man.data["files"] = ["model.ckpt", "loss.csv"]
    man.finish(out)


def cmd_optimize(cfg: dict, master: int, out: Path, threads: int) -> None:
    man = Manifest("optimize", cfg, master)
    algo, fid, d = cfg["algo"]["name"], cfg["task"]["function"], cfg["task"]["d"]
    model = None
    if algo == "b2opt":
        path = cfg["algo"]["checkpoint"]
        model = _load_checkpoint(path)
        if model is None:
            raise CheckpointError(f"checkpoint {path!r} not found")
        model.check_compatible(cfg["run"]["n"], d)
    seeds = split_seeds(master, cfg["run"]["seeds"])
    records = evaluate_grid(cfg, algo, fid, d, seeds, threads, model)
    write_csv(out / "runs.csv", RUN_FIELDS, [row for rec in records for row in run_rows(rec, d)])
    write_csv(out / "summary.csv", SUMMARY_FIELDS, [summary_row(algo, fid, d, records, cfg["run"]["budget"])])
    man.data["seeds"] = seeds
    man.data["files"] = ["runs.csv", "summary.csv"]
    man.data["wall_times"] = {str(r.seed): r.wall_time for r in records}
    man.finish(out)


def cmd_bench(cfg: dict, master: int, out: Path, threads: int) -> None:
    man = Manifest("bench", cfg, master)
    b = cfg["bench"]
    seeds = split_seeds(master, cfg["run"]["seeds"])
    rows, runs, absent = [], [], []
    for label in b["algos"]:
        for d in b["dims"]:
            model = None
            if label == "b2opt" or label in b["checkpoints"]:
                path = b["checkpoints"].get(label)
                model = _load_checkpoint(path.format(d=d) if path else None)
                if model is None:
                    for fid in b["functions"]:
                        rows.append(summary_row(label, fid, d, None))
                        absent.append(f"{label}/{fid}/d={d}")
                    continue
            for fid in b["functions"]:
                recs = evaluate_grid(cfg, label, fid, d, seeds, threads, model)
                for rec in recs:
                    rec.algo = label
                rows.append(summary_row(label, fid, d, recs, cfg["run"]["budget"]))
                runs.extend(row for rec in recs for row in run_rows(rec, d))
    write_csv(out / "bench.csv", SUMMARY_FIELDS, rows)
    write_csv(out / "runs.csv", RUN_FIELDS, runs)
    man.data.update(seeds=seeds, files=["bench.csv", "runs.csv"], absent_cells=absent)
    man.finish(out)


ARM_FIELDS = ["algo", "mode", "r", "status", "targets", "mean", "std", "mean_std", "evals_per_run"]


def arm_targets(master: int, mode_index: int, r: float, count: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([master, mode_index, int(round(r * 1000))]))
    return sample_arm_targets(r, count, rng)


def cmd_arm(cfg: dict, master: int, out: Path, threads: int) -> None:
    man = Manifest("arm", cfg, master)
    a = cfg["arm"]
    rows, runs = [], []
    seeds = split_seeds(master, a["targets"])
    for mi, mode in enumerate(a["modes"]):
        for r in a["radii"]:
            targets = arm_targets(master, mi, float(r), a["targets"])
            for label in a["algos"]:
                model = None
                if label == "b2opt":
                    model = _load_checkpoint(a["checkpoints"].get(mode))
                    if model is None:
                        rows.append([label, mode, r, "absent", 0, "", "", "", ""])
                        continue

                def one(k, label=label, model=model):
                    _, algo_rng = run_rngs(seeds[k])
                    return run_algo(label, arm_instance(targets[k], mode), seeds[k], cfg, algo_rng, model, f"ARM-{mode}-{r}")

                recs = parallel_map(one, range(len(targets)), threads)
                s = StatSummary.of(label, mode, [rec.final_best for rec in recs])
                rows.append([label, mode, r, "ok", s.runs, _num(s.mean), _num(s.std), s.text, recs[0].eval_count])
                runs.extend(row for rec in recs for row in run_rows(rec, 200 if mode == "CC" else 100))
    write_csv(out / "arm.csv", ARM_FIELDS, rows)
    write_csv(out / "runs.csv", RUN_FIELDS, runs)
    man.data.update(seeds=seeds, files=["arm.csv", "runs.csv"])
    man.finish(out)


def cmd_ablate(cfg: dict, master: int, out: Path, threads: int) -> None:
    man = Manifest("ablate", cfg, master)
    seeds = split_seeds(master, cfg["run"]["seeds"])
    d = cfg["task"]["d"]
    rows, files = [], ["ablate.csv"]
    for variant in cfg["ablate"]["variants"]:
        model, records = _train_model(cfg, master, Ablation.variant(variant))
        save_model(model, out / f"{variant}.ckpt")
        (out / f"loss_{variant}.csv").write_bytes(loss_csv(records).encode())
        files += [f"{variant}.ckpt", f"loss_{variant}.csv"]
        for fid in cfg["ablate"]["functions"]:
            recs = evaluate_grid(cfg, "b2opt", fid, d, seeds, threads, model)
            rows.append(summary_row(variant, fid, d, recs, cfg["run"]["budget"]))
    write_csv(out / "ablate.csv", SUMMARY_FIELDS, rows)
    man.data.update(seeds=seeds, files=files)
    man.finish(out)


def cmd_export_viz(cfg: dict, master: int, out: Path, threads: int) -> None:
    man = Manifest("export-viz", cfg, master)
    path = cfg["algo"]["checkpoint"]
    model = _load_checkpoint(path)
    if model is None:
        raise CheckpointError(f"checkpoint {path!r} not found")
    fid, d = cfg["task"]["function"], cfg["task"]["d"]
    seed = split_seeds(master, 1)[0]
    task_rng, algo_rng = run_rngs(seed)
    inst = make_task(cfg, fid, d, task_rng)
    model.check_compatible(model.n, d)
    counter = EvalCounter()
    pop = evaluate_population(init_population(inst.bounds, model.n, algo_rng), inst, counter)
    trace: list[dict] = []
    rec, _ = b2opt_run(model, pop, inst, counter, seed, fid, trace)

    coords = [f"x{j}" for j in range(d)]
    attn = []
    for i, step in enumerate(trace):
        if step["attention"] is not None:
            for r, row in enumerate(step["attention"]):
                attn.append([i, r] + [_num(v) for v in row])
    write_csv(out / "attention.csv", ["block", "row"] + [f"c{j}" for j in range(model.n)], attn)

    snaps = [trace[0]["input"]] + [s["output"] for s in trace] if trace else [np.asarray(pop.X)]
    write_csv(out / "populations.csv", ["snapshot", "row"] + coords,
              [[k, r] + [_num(v) for v in row] for k, X in enumerate(snaps) for r, row in enumerate(X)])
    fm = [[i, stage, r] + [_num(v) for v in row]
          for i, s in enumerate(trace) for stage, key in (("before", "crossover"), ("after", "mutation"))
          for r, row in enumerate(s[key])]
    write_csv(out / "mutation.csv", ["block", "stage", "row"] + coords, fm)
    man.data.update(seeds=[seed], files=["attention.csv", "populations.csv", "mutation.csv"])
    man.finish(out)


COMMANDS = {
    "train": cmd_train,
    "optimize": cmd_optimize,
    "bench": cmd_bench,
    "arm": cmd_arm,
    "ablate": cmd_ablate,
    "export-viz": cmd_export_viz,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (see docs/config.md)")
    common.add_argument("--seed", type=_u64, default=0, help="master seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
    parser = argparse.ArgumentParser(prog="b2opt", description="Learned population-based black-box optimizer.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config) if args.config else C.validate({})
    except C.ConfigSchemaError as exc:
        print(exc, file=sys.stderr)
        return 2
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](cfg, args.seed, out, args.threads)
    except (ConfigError, CheckpointError, C.ConfigSchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
