"""Experiment configuration: YAML sections validated against a fixed schema.

The schema (every key, its type and default) is documented in docs/config.md.
Unknown keys anywhere are rejected, and every problem found is reported at
once before any work starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .objectives import ALL_FUNCTIONS, TEST_FUNCTIONS


class ConfigSchemaError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


ALGOS = ("b2opt", "de", "es", "ga", "random")
ABLATIONS = ("full", "not_sac", "not_fm", "not_rc", "not_rssm")

# section -> key -> (allowed types, default)
_NUM = (int, float)
SCHEMA: dict[str, dict[str, tuple]] = {
    "task": {
        "function": ((str,), "F4"),
        "d": ((int,), 10),
        "lower": (_NUM + (type(None),), None),
        "upper": (_NUM + (type(None),), None),
    },
    "algo": {
        "name": ((str,), "de"),
        "checkpoint": ((str, type(None)), None),
        "de_F": (_NUM, 0.5),
        "de_cr": (_NUM, 0.5),
        "es_mu_ratio": (_NUM, 0.5),
        "es_sigma": (_NUM, 0.1),
        "es_self_adaptive": ((bool,), True),
        "ga_cr": (_NUM, 0.5),
        "ga_mr": (_NUM, 0.1),
    },
    "run": {
        "n": ((int,), 100),
        "steps": ((int,), 100),
        "seeds": ((int,), 10),
        "budget": ((int, type(None)), None),
    },
    "train": {
        "t": ((int,), 3),
        "weight_sharing": ((bool,), True),
        "d_k": ((int,), 16),
        "hidden": ((int, type(None)), None),
        "lr": (_NUM, 0.01),
        "decay": (_NUM, 0.9),
        "decay_every": ((int,), 100),
        "epochs": ((int,), 1000),
        "batch": ((int,), 16),
        "clip_norm": (_NUM, 10.0),
        "functions": ((list,), ["F1", "F2", "F3"]),
        "n_shifts": ((int, type(None)), None),
        "arm_mode": ((str,), "SC"),
        "arm_r_max": (_NUM, 1000.0),
        "arm_pool": ((int,), 600),
    },
    "bench": {
        "algos": ((list,), ["b2opt", "de", "es", "random"]),
        "functions": ((list,), list(TEST_FUNCTIONS)),
        "dims": ((list,), [10]),
        # algo label -> checkpoint path; "{d}" is replaced by the dimension
        "checkpoints": ((dict,), {}),
    },
    "arm": {
        "modes": ((list,), ["SC", "CC"]),
        "radii": ((list,), [100, 300, 1000]),
        "targets": ((int,), 128),
        "algos": ((list,), ["b2opt", "de"]),
        # arm mode -> checkpoint path
        "checkpoints": ((dict,), {}),
    },
    "ablate": {
        "variants": ((list,), list(ABLATIONS)),
        "functions": ((list,), list(TEST_FUNCTIONS)),
    },
}


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _type_ok(value, types) -> bool:
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def validate(raw: dict | None) -> dict:
    """Merge ``raw`` over the defaults, raising ConfigSchemaError on any problem."""
    raw = raw or {}
    problems = []
    if not isinstance(raw, dict):
        raise ConfigSchemaError(["top level must be a mapping of sections"])
    cfg = defaults()
    for sec, body in raw.items():
        if sec not in SCHEMA:
            problems.append(f"unknown section '{sec}'")
            continue
        if body is None:
            continue
        if not isinstance(body, dict):
            problems.append(f"section '{sec}' must be a mapping")
            continue
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                problems.append(f"unknown key '{sec}.{key}'")
            elif not _type_ok(value, SCHEMA[sec][key][0]):
                problems.append(f"'{sec}.{key}' has the wrong type ({type(value).__name__})")
            else:
                cfg[sec][key] = value
    problems += _semantic_problems(cfg)
    if problems:
        raise ConfigSchemaError(problems)
    return cfg


def _semantic_problems(cfg: dict) -> list[str]:
    out = []
    t, a, r, tr = cfg["task"], cfg["algo"], cfg["run"], cfg["train"]
    if t["function"] not in ALL_FUNCTIONS:
        out.append(f"'task.function' must be one of {', '.join(ALL_FUNCTIONS)}")
    if t["d"] < 2:
        out.append("'task.d' must be >= 2")
    if (t["lower"] is None) != (t["upper"] is None):
        out.append("'task.lower' and 'task.upper' must be given together")
    elif t["lower"] is not None and not t["lower"] < t["upper"]:
        out.append("'task.lower' must be below 'task.upper'")
    if a["name"] not in ALGOS:
        out.append(f"'algo.name' must be one of {', '.join(ALGOS)}")
    if r["n"] < 4:
        out.append("'run.n' must be >= 4")
    if r["steps"] < 0 or r["seeds"] < 1:
        out.append("'run.steps' must be >= 0 and 'run.seeds' >= 1")
    if not tr["lr"] > 0:
        out.append("'train.lr' must be > 0")
    if tr["batch"] < 1:
        out.append("'train.batch' must be >= 1")
    if not tr["clip_norm"] > 0:
        out.append("'train.clip_norm' must be > 0")
    if tr["epochs"] < 0 or tr["t"] < 0:
        out.append("'train.epochs' and 'train.t' must be >= 0")
    bad = [f for f in tr["functions"] if f not in ALL_FUNCTIONS + ("ARM",)]
    if bad or not tr["functions"]:
        out.append(f"'train.functions' has unknown entries {bad}")
    if tr["arm_mode"] not in ("SC", "CC"):
        out.append("'train.arm_mode' must be SC or CC")
    bad = [x for x in cfg["bench"]["algos"] if x not in ALGOS and x not in cfg["bench"]["checkpoints"]]
    if bad:
        out.append(f"'bench.algos' has unknown entries {bad}")
    bad = [x for x in cfg["bench"]["functions"] + cfg["ablate"]["functions"] if x not in ALL_FUNCTIONS]
    if bad:
        out.append(f"unknown functions {bad}")
    bad = [x for x in cfg["arm"]["modes"] if x not in ("SC", "CC")]
    if bad:
        out.append(f"'arm.modes' has unknown entries {bad}")
    bad = [x for x in cfg["arm"]["algos"] if x not in ("b2opt", "de", "es", "random")]
    if bad:
        out.append(f"'arm.algos' has unknown entries {bad}")
    bad = [x for x in cfg["ablate"]["variants"] if x not in ABLATIONS]
    if bad:
        out.append(f"'ablate.variants' has unknown entries {bad}")
    if len(set(cfg["ablate"]["variants"])) != len(cfg["ablate"]["variants"]):
        out.append("'ablate.variants' lists a variant twice")
    return out


def load(path) -> dict:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except OSError as exc:
        raise ConfigSchemaError([f"cannot read {p}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigSchemaError([f"{p} is not valid YAML: {exc}"]) from exc
    return validate(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
