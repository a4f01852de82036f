"""Training on cheap shifted surrogates: improvement loss, Adam, clipping, LR decay."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import Parameter, Tape
from .model import B2OptModel, evaluate_population, run_blocks
from .objectives import (
    ALL_FUNCTIONS,
    EvalCounter,
    ObjectiveInstance,
    arm_instance,
    init_population,
    sample_arm_targets,
    sample_instance,
    stack_instances,
)

DENOM_EPS = 1e-8


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, function_id: str, seed: int, reason: str):
        super().__init__(f"training diverged at epoch {epoch} on {function_id} (seed {seed}): {reason}")
        self.epoch = epoch
        self.function_id = function_id
        self.seed = seed


@dataclass
class TrainConfig:
    lr: float = 0.01
    decay: float = 0.9
    decay_every: int = 100
    epochs: int = 1000
    batch: int = 16
    clip_norm: float = 10.0
    functions: tuple[str, ...] = ("F1", "F2", "F3")
    seed: int = 0
    # distinct shifted instances per function for the whole run; None = fresh every epoch
    n_shifts: int | None = None
    arm_mode: str = "SC"
    arm_r_max: float = 1000.0
    arm_pool: int = 600

    def __post_init__(self):
        self.functions = tuple(self.functions)
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if self.batch < 1:
            problems.append(f"batch must be >= 1 (got {self.batch})")
        if not self.clip_norm > 0:
            problems.append(f"clip_norm must be > 0 (got {self.clip_norm})")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.decay_every < 1 or not 0 < self.decay <= 1:
            problems.append("decay must lie in (0, 1] and decay_every be >= 1")
        if self.n_shifts is not None and self.n_shifts < 1:
            problems.append("n_shifts must be >= 1")
        unknown = [f for f in self.functions if f not in ALL_FUNCTIONS + ("ARM",)]
        if unknown or not self.functions:
            problems.append(f"unknown training functions {unknown}")
        if problems:
            raise ValueError("; ".join(problems))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used in (1-based) ``epoch``."""
        return self.lr * self.decay ** ((epoch - 1) // self.decay_every)


@dataclass
class LossRecord:
    epoch: int
    l_i: dict[str, float]  # mean improvement per function
    l_omega: float  # the minimised objective, averaged over functions
    grad_norm_pre: float
    grad_norm_post: float
    lr: float


LOSS_CSV_FIELDS = ["epoch", "function_id", "l_i_mean", "l_omega", "grad_norm_pre", "grad_norm_post", "lr"]


def loss_csv(records: list[LossRecord]) -> str:
    """One row per epoch; per-function improvements follow the fixed columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    funcs = list(records[0].l_i) if records else []
    w.writerow(LOSS_CSV_FIELDS + [f"l_i[{f}]" for f in funcs])
    for r in records:
        w.writerow(
            [r.epoch, ";".join(funcs), repr(float(np.mean(list(r.l_i.values())))), repr(r.l_omega),
             repr(r.grad_norm_pre), repr(r.grad_norm_post), repr(r.lr)]
            + [repr(r.l_i[f]) for f in funcs]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------


def improvement_loss(fitness_in, fitness_out):
    """Normalised mean-fitness gain of the output population over the input.

    Works per population; leading axes are batch axes. Differentiable in
    ``fitness_out`` (the input fitness is data).
    """
    f_in = ad.value_of(fitness_in)
    if not (np.all(np.isfinite(f_in)) and np.all(np.isfinite(ad.value_of(fitness_out)))):
        raise FloatingPointError("non-finite fitness in improvement loss")
    mean_in = f_in.mean(axis=-1)
    denom = np.maximum(np.abs(mean_in), DENOM_EPS)
    return ad.div(ad.sub(mean_in, ad.mean_last(fitness_out)), denom)


def batch_loss(model: B2OptModel, X0, instance: ObjectiveInstance, counter: EvalCounter | None, tape: Tape | None = None):
    """Negated mean improvement over a minibatch ``X0`` of shape ``(K, n, d)``."""
    pop0 = evaluate_population(X0, instance, counter)
    out = run_blocks(model, pop0, instance, counter, tape=tape)
    l_i = improvement_loss(pop0.fitness, out.fitness)
    return ad.neg(ad.mean(l_i)), l_i


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], grads: list[np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ad.DimensionError(f"gradient {g.shape} does not match parameter {p.name} {p.value.shape}")
        m = state.m.get(p.name, np.zeros_like(g))
        v = state.v.get(p.name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
        post = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        return grads, norm, post
    return grads, norm, norm


class _InstanceSource:
    """Draws K training instances per function per epoch."""

    def __init__(self, cfg: TrainConfig, d: int, rng: np.random.Generator):
        self.cfg, self.d, self.rng = cfg, d, rng
        self.targets = None
        if "ARM" in cfg.functions:
            self.targets = sample_arm_targets(cfg.arm_r_max, cfg.arm_pool, rng)
        self.pools = {}
        if cfg.n_shifts is not None:
            for f in cfg.functions:
                if f != "ARM":
                    self.pools[f] = [sample_instance(f, d, rng) for _ in range(cfg.n_shifts)]

    def draw(self, function_id: str, k: int) -> ObjectiveInstance:
        if function_id == "ARM":
            # the training subset of the target pool is re-drawn every epoch
            idx = self.rng.integers(0, len(self.targets), size=k)
            return stack_instances([arm_instance(self.targets[i], self.cfg.arm_mode) for i in idx])
        if function_id in self.pools:
            pool = self.pools[function_id]
            return stack_instances([pool[i] for i in self.rng.integers(0, len(pool), size=k)])
        return stack_instances([sample_instance(function_id, self.d, self.rng) for _ in range(k)])


def train(model: B2OptModel, cfg: TrainConfig, rng: np.random.Generator | None = None, on_epoch=None):
    """Fit ``model`` in place; returns ``(model, [LossRecord, ...])``.

    Each epoch draws fresh populations and fresh shifted instances for every
    training function, averages the per-function minibatch objectives, and
    takes one clipped Adam step on that average.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = model.parameters()
    state = AdamState()
    source = _InstanceSource(cfg, model.d, rng)
    records: list[LossRecord] = []
    m = len(cfg.functions)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        model.zero_grad()
        objective = 0.0
        l_i = {}
        for f in cfg.functions:
            inst = source.draw(f, cfg.batch)
            X0 = init_population(inst.bounds, model.n, rng, (cfg.batch,))
            tape = Tape()
            try:
                loss, li = batch_loss(model, X0, inst, None, tape)
                scaled = ad.div(loss, float(m))
                tape.backward(scaled)
            except (FloatingPointError, ad.NonFiniteError) as exc:
                raise TrainingError(epoch, f, cfg.seed, str(exc)) from exc
            finally:
                tape.release()
            value = float(ad.value_of(loss))
            if not math.isfinite(value):
                raise TrainingError(epoch, f, cfg.seed, "non-finite loss")
            objective += value / m
            l_i[f] = float(np.mean(ad.value_of(li)))
        grads, pre, post = clip_gradients([p.grad for p in params], cfg.clip_norm)
        if not math.isfinite(pre):
            raise TrainingError(epoch, ",".join(cfg.functions), cfg.seed, "non-finite gradient")
        adam_step(params, grads, state, lr)
        rec = LossRecord(epoch, l_i, objective, pre, post, lr)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return model, records


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")
