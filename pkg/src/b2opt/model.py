"""Learned crossover, mutation and selection blocks, stacked into an optimizer.

Populations are kept sorted by non-descending fitness. One block maps a
population X to

    Xc = tile(W1c) * (A X) + tile(W2c) * (AF X),   AF = softmax(F WQ (F WK)^T / sqrt(dk))
    Xm = relu(Xc W1F + b1) W2F + b2
    C  = clip(tile(W1s) * X + tile(W2s) * Xc + tile(W3s) * Xm)
    X' = sort(pairwise-min(X, C))

where F is the min-max normalised fitness column. Sort permutations and the
selection mask are constants to the tape; values move with their gradients.
All arrays may carry a leading batch axis of independent populations.
"""

from __future__ import annotations

import json
import math
import struct
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ad
from .ad import Parameter, Tape
from .objectives import EvalCounter, ObjectiveInstance, evaluate
from .records import RunRecord

FORMAT_VERSION = 1
MAGIC = b"B2OPTCK\x00"


class PopulationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class Population:
    X: object  # ndarray or ad.Node, shape (..., n, d)
    fitness: object  # shape (..., n)
    sorted: bool = False

    @property
    def n(self) -> int:
        return ad.value_of(self.X).shape[-2]

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        return ad.value_of(self.X), ad.value_of(self.fitness)


@dataclass(frozen=True)
class Ablation:
    disable_sac: bool = False
    disable_fm: bool = False
    disable_rc: bool = False
    disable_rssm: bool = False

    @classmethod
    def variant(cls, name: str) -> "Ablation":
        """``full``, ``not_sac``, ``not_fm``, ``not_rc`` or ``not_rssm``."""
        if name == "full":
            return cls()
        key = "disable_" + name.removeprefix("not_")
        if not name.startswith("not_") or key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown ablation variant {name!r}")
        return cls(**{key: True})

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass
class SACParams:
    A: Parameter
    WQ: Parameter
    WK: Parameter
    W1c: Parameter
    W2c: Parameter

    @property
    def d_k(self) -> int:
        return self.WQ.shape[1]


@dataclass
class FMParams:
    W1F: Parameter
    b1: Parameter
    W2F: Parameter
    b2: Parameter


@dataclass
class RSSMParams:
    W1s: Parameter
    W2s: Parameter
    W3s: Parameter


@dataclass
class OBParams:
    sac: SACParams
    fm: FMParams
    rssm: RSSMParams

    def parameters(self) -> list[Parameter]:
        out = []
        for part in (self.sac, self.fm, self.rssm):
            out.extend(getattr(part, f.name) for f in fields(part))
        return out


@dataclass
class ModelConfig:
    n: int
    d: int
    t: int = 3
    weight_sharing: bool = True
    d_k: int = 16
    hidden: int | None = None  # FM width, defaults to 2d
    ablation: Ablation = field(default_factory=Ablation)
    noise: float = 0.01
    attn_scale: float = 1.0

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = 2 * self.d
        if self.n < 2 or self.d < 1 or self.t < 0 or self.d_k < 1 or self.hidden < 1:
            raise ConfigError(f"invalid model dimensions {self}")


@dataclass
class B2OptModel:
    n: int
    d: int
    t: int
    d_k: int
    h: int
    weight_sharing: bool
    blocks: list[OBParams]
    ablation: Ablation = field(default_factory=Ablation)

    def block(self, i: int) -> OBParams:
        return self.blocks[0] if self.weight_sharing else self.blocks[i]

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def check_compatible(self, n: int, d: int) -> None:
        if self.d != d:
            raise ConfigError(f"checkpoint has d={self.d} but the task has d={d}")
        if self.n != n:
            raise ConfigError(f"checkpoint has n={self.n} but the run uses n={n}")


# ---------------------------------------------------------------------------
# population plumbing


def _bind(p: Parameter, tape: Tape | None):
    return tape.param(p) if tape is not None else p.value


def sort_population(pop: Population) -> tuple[Population, np.ndarray]:
    """Stable sort by fitness; returns the sorted population and the permutation used."""
    f = ad.value_of(pop.fitness)
    bad = np.argwhere(np.isnan(f))
    if bad.size:
        raise PopulationError(f"NaN fitness at row {tuple(int(i) for i in bad[0])}")
    perm = np.argsort(f, axis=-1, kind="stable")
    X = ad.permute(pop.X, perm, axis=-2)
    F = ad.permute(pop.fitness, perm, axis=-1)
    return Population(X, F, sorted=True), perm


def evaluate_population(X, objective: ObjectiveInstance, counter: EvalCounter | None) -> Population:
    """Evaluate and sort an initial population."""
    fit = evaluate(objective, X, counter)
    return sort_population(Population(X, fit))[0]


def normalize_fitness(fitness):
    """Min-max map each population's fitness to [0, 1]; constant vectors map to zeros."""
    f = ad.value_of(fitness)
    if f.shape[-1] < 2:
        raise PopulationError("normalisation needs at least two individuals")
    if not np.all(np.isfinite(f)):
        raise PopulationError("non-finite fitness cannot be normalised")
    lo = ad.min_last(fitness)
    hi = ad.max_last(fitness)
    span = ad.sub(hi, lo)
    flat = (ad.value_of(span) == 0).astype(np.float64)
    safe = ad.add(span, flat)  # numerator is exactly 0 wherever span is
    return ad.div(ad.sub(fitness, ad.reshape(lo, f.shape[:-1] + (1,))), ad.reshape(safe, f.shape[:-1] + (1,)))


# ---------------------------------------------------------------------------
# block components


def fitness_attention(fitness, params: SACParams, tape: Tape | None = None):
    f = ad.value_of(fitness)
    F = ad.reshape(normalize_fitness(fitness), f.shape + (1,))
    q = ad.matmul(F, _bind(params.WQ, tape))
    k = ad.matmul(F, _bind(params.WK, tape))
    scores = ad.div(ad.matmul(q, ad.transpose(k)), math.sqrt(params.d_k))
    return ad.softmax_rows(scores)


def sac_forward(pop: Population, params: SACParams, tape: Tape | None = None):
    """Self-attention crossover of a sorted population."""
    if not pop.sorted:
        raise PopulationError("crossover expects a fitness-sorted population")
    n, d = ad.value_of(pop.X).shape[-2:]
    A = _bind(params.A, tape)
    if params.A.shape != (n, n):
        raise ad.DimensionError(f"A has shape {params.A.shape}, population has n={n}")
    AF = fitness_attention(pop.fitness, params, tape)
    w1 = ad.tile(_bind(params.W1c, tape), d)
    w2 = ad.tile(_bind(params.W2c, tape), d)
    return ad.add(ad.mul(w1, ad.matmul(A, pop.X)), ad.mul(w2, ad.matmul(AF, pop.X)))


def effective_attention(pop: Population, params: SACParams) -> np.ndarray:
    """The n x n matrix M with Xc = M X, i.e. diag(W1c) A + diag(W2c) AF."""
    AF = ad.value_of(fitness_attention(pop.fitness, params))
    return params.W1c.value * params.A.value + params.W2c.value * AF


def fm_forward(Xc, params: FMParams, tape: Tape | None = None):
    """Two-layer feed-forward mutation applied to every individual."""
    hidden = ad.relu(ad.add(ad.matmul(Xc, _bind(params.W1F, tape)), _bind(params.b1, tape)))
    return ad.add(ad.matmul(hidden, _bind(params.W2F, tape)), _bind(params.b2, tape))


def selection_mask(F_X, F_Xp) -> np.ndarray:
    """1 where the incumbent row is strictly better (keep X), 0 otherwise (take X')."""
    return (ad.value_of(F_Xp) - ad.value_of(F_X) > 0).astype(np.float64)


def sm_select(X, F_X, Xp, F_Xp):
    """Pairwise keep-the-better selection; ties take the candidate row.

    Returns the selected population and the 0/1 mask (1 = kept X).
    """
    xs, xps = ad.value_of(X).shape, ad.value_of(Xp).shape
    if xs != xps or ad.value_of(F_X).shape != ad.value_of(F_Xp).shape or ad.value_of(F_X).shape != xs[:-1]:
        raise ad.DimensionError(f"selection needs matching populations, got {xs} and {xps}")
    mask = selection_mask(F_X, F_Xp)
    keep = np.repeat(mask[..., None], xs[-1], axis=-1)
    out = ad.add(ad.mul(keep, X), ad.mul(1.0 - keep, Xp))
    return out, mask


def rssm_forward(
    pop: Population,
    Xc,
    Xm,
    params: RSSMParams,
    objective: ObjectiveInstance,
    counter: EvalCounter | None,
    tape: Tape | None = None,
    ablation: Ablation = Ablation(),
) -> Population:
    """Residual mix of X, Xc, Xm, clipped, evaluated once, pairwise-selected and sorted."""
    d = ad.value_of(pop.X).shape[-1]
    parts = [
        ad.mul(ad.tile(_bind(params.W2s, tape), d), Xc),
        ad.mul(ad.tile(_bind(params.W3s, tape), d), Xm),
    ]
    if not ablation.disable_rc:
        parts.insert(0, ad.mul(ad.tile(_bind(params.W1s, tape), d), pop.X))
    cand = parts[0]
    for part in parts[1:]:
        cand = ad.add(cand, part)
    cand = ad.clip(cand, objective.bounds.lower, objective.bounds.upper)
    f_cand = evaluate(objective, cand, counter)
    if ablation.disable_rssm:
        return sort_population(Population(cand, f_cand))[0]
    X_new, mask = sm_select(pop.X, pop.fitness, cand, f_cand)
    f_new = ad.add(ad.mul(mask, pop.fitness), ad.mul(1.0 - mask, f_cand))
    return sort_population(Population(X_new, f_new))[0]


def ob_forward(
    pop: Population,
    block: OBParams,
    objective: ObjectiveInstance,
    counter: EvalCounter | None,
    ablation: Ablation = Ablation(),
    tape: Tape | None = None,
    trace: list | None = None,
) -> Population:
    """One block: crossover, mutation, residual selection."""
    Xc = pop.X if ablation.disable_sac else sac_forward(pop, block.sac, tape)
    Xm = Xc if ablation.disable_fm else fm_forward(Xc, block.fm, tape)
    out = rssm_forward(pop, Xc, Xm, block.rssm, objective, counter, tape, ablation)
    if trace is not None:
        trace.append(
            {
                "input": ad.value_of(pop.X),
                "crossover": ad.value_of(Xc),
                "mutation": ad.value_of(Xm),
                "attention": None if ablation.disable_sac else effective_attention(pop, block.sac),
                "output": ad.value_of(out.X),
            }
        )
    return out


def run_blocks(model: B2OptModel, pop: Population, objective, counter, tape=None, trace=None, on_block=None):
    for i in range(model.t):
        pop = ob_forward(pop, model.block(i), objective, counter, model.ablation, tape, trace)
        if on_block is not None:
            on_block(pop)
    return pop


def b2opt_run(
    model: B2OptModel,
    pop0: Population,
    objective: ObjectiveInstance,
    counter: EvalCounter,
    seed: int = 0,
    task: str = "",
    trace: list | None = None,
) -> tuple[RunRecord, Population]:
    """Apply all t blocks to an evaluated, sorted population (inference only)."""
    if not pop0.sorted:
        raise PopulationError("the initial population must be evaluated and sorted")
    model.check_compatible(pop0.n, ad.value_of(pop0.X).shape[-1])
    rec = RunRecord("b2opt", task or objective.function_id, seed)
    start = time.perf_counter()
    rec.log(ad.value_of(pop0.fitness), counter.count)
    out = run_blocks(
        model, pop0, objective, counter, trace=trace,
        on_block=lambda p: rec.log(ad.value_of(p.fitness), counter.count),
    )
    rec.wall_time = time.perf_counter() - start
    return rec, out


# ---------------------------------------------------------------------------
# construction and checkpoints


def _new_block(prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> OBParams:
    n, d, h, dk, eps = cfg.n, cfg.d, cfg.hidden, cfg.d_k, cfg.noise

    def noise(*shape, scale=eps):
        return rng.uniform(-scale, scale, size=shape)

    def P(name, value):
        return Parameter(f"{prefix}.{name}", value)

    sac = SACParams(
        A=P("sac.A", np.eye(n) + noise(n, n)),
        WQ=P("sac.WQ", noise(1, dk, scale=cfg.attn_scale)),
        WK=P("sac.WK", noise(1, dk, scale=cfg.attn_scale)),
        W1c=P("sac.W1c", 1.0 + noise(n, 1)),
        W2c=P("sac.W2c", noise(n, 1)),
    )
    fm = FMParams(
        W1F=P("fm.W1F", noise(d, h)),
        b1=P("fm.b1", noise(h)),
        W2F=P("fm.W2F", noise(h, d)),
        b2=P("fm.b2", noise(d)),
    )
    rssm = RSSMParams(
        W1s=P("rssm.W1s", 1.0 + noise(n, 1)),
        W2s=P("rssm.W2s", noise(n, 1)),
        W3s=P("rssm.W3s", noise(n, 1)),
    )
    return OBParams(sac, fm, rssm)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> B2OptModel:
    """Near-identity initialisation: A ~ I, W1c ~ W1s ~ 1, everything else small."""
    count = 1 if cfg.weight_sharing else cfg.t
    blocks = [_new_block(f"b{i}", cfg, rng) for i in range(count)]
    return B2OptModel(cfg.n, cfg.d, cfg.t, cfg.d_k, cfg.hidden, cfg.weight_sharing, blocks, cfg.ablation)


def identity_block(n: int, d: int, d_k: int = 1, h: int | None = None, prefix: str = "b0") -> OBParams:
    """The block that maps any feasible sorted population to itself."""
    h = 2 * d if h is None else h

    def P(name, value):
        return Parameter(f"{prefix}.{name}", value)

    return OBParams(
        SACParams(P("sac.A", np.eye(n)), P("sac.WQ", np.zeros((1, d_k))), P("sac.WK", np.zeros((1, d_k))),
                  P("sac.W1c", np.ones((n, 1))), P("sac.W2c", np.zeros((n, 1)))),
        FMParams(P("fm.W1F", np.zeros((d, h))), P("fm.b1", np.zeros(h)), P("fm.W2F", np.zeros((h, d))),
                 P("fm.b2", np.zeros(d))),
        RSSMParams(P("rssm.W1s", np.ones((n, 1))), P("rssm.W2s", np.zeros((n, 1))), P("rssm.W3s", np.zeros((n, 1)))),
    )


def _header(model: B2OptModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "t": model.t,
        "n": model.n,
        "d": model.d,
        "d_k": model.d_k,
        "h": model.h,
        "weight_sharing": model.weight_sharing,
        "ablation": {k: getattr(model.ablation, k) for k in (f.name for f in fields(Ablation))},
        "tensors": [{"name": p.name, "shape": list(p.shape)} for p in model.parameters()],
    }


def save_model(model: B2OptModel, path) -> None:
    """Write a checkpoint; the byte layout is described in docs/checkpoint.md."""
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(p.value.astype("<f8").tobytes() for p in model.parameters())
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)


def load_model(path) -> B2OptModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    try:
        specs = header["tensors"]
        sizes = [int(np.prod(s["shape"])) for s in specs]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header in {path} lacks tensor descriptions") from exc
    body = start + hlen
    expected = body + 8 * sum(sizes) + 4
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint {path} has {len(blob)} bytes, header implies {expected}")
    payload = blob[body : expected - 4]
    (crc,) = struct.unpack("<I", blob[expected - 4 :])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"checkpoint {path} failed its checksum")

    try:
        cfg = ModelConfig(
            n=header["n"], d=header["d"], t=header["t"], weight_sharing=header["weight_sharing"],
            d_k=header["d_k"], hidden=header["h"], ablation=Ablation(**header["ablation"]),
        )
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint header in {path} is incomplete: {exc}") from exc
    model = init_model(cfg, np.random.default_rng(0))
    params = model.parameters()
    if [p.name for p in params] != [s["name"] for s in specs]:
        raise CheckpointError(f"checkpoint {path} tensor list does not match its header")
    offset = 0
    for p, spec, size in zip(params, specs, sizes):
        if list(p.shape) != spec["shape"]:
            raise CheckpointError(f"tensor {p.name} has shape {spec['shape']}, expected {list(p.shape)}")
        p.value = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(p.shape)
        p.grad = np.zeros_like(p.value)
        offset += 8 * size
    return model
