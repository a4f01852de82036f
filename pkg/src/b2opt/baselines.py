"""Classical comparators: DE/rand/1/bin, (mu, lambda)-ES, GA operators, random search.

All of them work on plain arrays, charge every evaluation to the caller's
counter, and keep their populations inside the box bounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import Population
from .objectives import Bounds, EvalCounter, ObjectiveInstance, evaluate, init_population
from .records import RunRecord


class BaselineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DEConfig:
    n: int = 100
    F_scale: float = 0.5
    cr: float = 0.5
    max_gen: int = 100

    def __post_init__(self):
        if not 0 <= self.cr <= 1 or self.F_scale < 0:
            raise BaselineConfigError(f"DE needs 0 <= cr <= 1 and F >= 0, got cr={self.cr}, F={self.F_scale}")
        if self.n < 4:
            raise BaselineConfigError(f"DE/rand/1 needs n >= 4, got {self.n}")


@dataclass(frozen=True)
class ESConfig:
    lam: int = 100
    mu_ratio: float = 0.5
    sigma: float = 0.1  # initial step, as a fraction of each coordinate's range
    self_adaptive: bool = True
    max_gen: int = 100

    @property
    def mu(self) -> int:
        return max(1, int(round(self.mu_ratio * self.lam)))

    def __post_init__(self):
        if self.lam < 1 or not 1 <= self.mu <= self.lam or self.sigma < 0:
            raise BaselineConfigError(f"ES needs 1 <= mu <= lambda and sigma >= 0 ({self})")


@dataclass(frozen=True)
class GAOperatorsConfig:
    cr: float = 0.5
    mr: float = 0.1
    eta: float = 20.0

    def __post_init__(self):
        if not (0 <= self.cr <= 1 and 0 <= self.mr <= 1) or self.eta <= 0:
            raise BaselineConfigError(f"GA probabilities must lie in [0, 1] and eta > 0 ({self})")


@dataclass
class ESPopulation(Population):
    sigma: np.ndarray | None = None  # per-individual relative step


def _clip(X, bounds: Bounds):
    return np.clip(X, bounds.lower, bounds.upper)


def _distinct_others(n: int, i: int, k: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.choice(n - 1, size=k, replace=False)
    return r + (r >= i)


# ---------------------------------------------------------------------------
# differential evolution


def de_step(pop: Population, cfg: DEConfig, objective: ObjectiveInstance, counter: EvalCounter, rng) -> Population:
    X, f = pop.values()
    n, d = X.shape
    if n < 4:
        raise BaselineConfigError(f"DE/rand/1 needs n >= 4, got {n}")
    r = np.array([_distinct_others(n, i, 3, rng) for i in range(n)])
    mutant = X[r[:, 0]] + cfg.F_scale * (X[r[:, 1]] - X[r[:, 2]])
    cross = rng.random((n, d)) < cfg.cr
    cross[np.arange(n), rng.integers(0, d, size=n)] = True
    trial = _clip(np.where(cross, mutant, X), objective.bounds)
    f_trial = evaluate(objective, trial, counter)
    accept = f_trial <= f
    return Population(np.where(accept[:, None], trial, X), np.where(accept, f_trial, f))


def run_de(objective, cfg: DEConfig, counter: EvalCounter, rng, seed: int = 0, task: str = ""):
    start = time.perf_counter()
    rec = RunRecord("de", task or objective.function_id, seed)
    X = init_population(objective.bounds, cfg.n, rng)
    pop = Population(X, evaluate(objective, X, counter))
    rec.log(pop.fitness, counter.count)
    for _ in range(cfg.max_gen):
        pop = de_step(pop, cfg, objective, counter, rng)
        rec.log(pop.fitness, counter.count)
    rec.wall_time = time.perf_counter() - start
    return rec, pop


# ---------------------------------------------------------------------------
# (mu, lambda) evolution strategy


def es_step(pop: ESPopulation, cfg: ESConfig, objective: ObjectiveInstance, counter: EvalCounter, rng) -> ESPopulation:
    """lambda offspring from the mu best; comma selection keeps the best mu offspring.

    Parents are allotted offspring round-robin so every one of the mu best
    reproduces. With ``self_adaptive`` each offspring mutates its inherited
    step by a log-normal factor before moving.
    """
    X, f = pop.values()
    d = X.shape[1]
    mu, lam = cfg.mu, cfg.lam
    order = np.argsort(f, kind="stable")[:mu]
    sigma = pop.sigma if pop.sigma is not None else np.full(X.shape[0], cfg.sigma)
    parents = order[np.arange(lam) % mu]
    s = sigma[parents]
    if cfg.self_adaptive:
        s = s * np.exp(rng.standard_normal(lam) / np.sqrt(d))
    span = objective.bounds.upper - objective.bounds.lower
    kids = _clip(X[parents] + s[:, None] * span * rng.standard_normal((lam, d)), objective.bounds)
    f_kids = evaluate(objective, kids, counter)
    keep = np.argsort(f_kids, kind="stable")[:mu]
    return ESPopulation(kids[keep], f_kids[keep], True, s[keep])


def run_es(objective, cfg: ESConfig, counter: EvalCounter, rng, seed: int = 0, task: str = ""):
    start = time.perf_counter()
    rec = RunRecord("es", task or objective.function_id, seed)
    X = init_population(objective.bounds, cfg.lam, rng)
    pop = ESPopulation(X, evaluate(objective, X, counter), False, np.full(cfg.lam, cfg.sigma))
    rec.log(pop.fitness, counter.count)
    best = float(np.min(pop.fitness))
    for _ in range(cfg.max_gen):
        pop = es_step(pop, cfg, objective, counter, rng)
        # comma selection may lose the best; the record tracks best-so-far
        best = min(best, float(np.min(pop.fitness)))
        rec.log(pop.fitness, counter.count)
        rec.best[-1] = best
    rec.wall_time = time.perf_counter() - start
    return rec, pop


# ---------------------------------------------------------------------------
# GA operators


def uniform_crossover(X: np.ndarray, cr: float, rng) -> np.ndarray:
    """Random disjoint pairs; each coordinate comes from the partner with probability cr."""
    n, d = X.shape
    perm = rng.permutation(n)
    donor = np.arange(n)
    a, b = perm[0 : n - 1 : 2], perm[1:n:2]
    donor[a], donor[b] = b, a
    take = rng.random((n, d)) < cr
    return np.where(take, X[donor], X)


def random_reset_mutation(X: np.ndarray, mr: float, bounds: Bounds, rng) -> np.ndarray:
    n, d = X.shape
    hit = rng.random((n, d)) < mr
    fresh = bounds.lower + (bounds.upper - bounds.lower) * rng.random((n, d))
    return np.where(hit, fresh, X)


def binary_tournament(fitness: np.ndarray, k: int, rng) -> np.ndarray:
    """Indices of ``k`` winners; each bout pits two distinct random entrants, lower fitness wins."""
    fitness = np.asarray(fitness)
    m = fitness.shape[0]
    a = rng.integers(0, m, size=k)
    b = (a + rng.integers(1, m, size=k)) % m if m > 1 else a
    return np.where(fitness[b] < fitness[a], b, a)


def ga_operators(pop: Population, cfg: GAOperatorsConfig, objective: ObjectiveInstance, counter: EvalCounter, rng) -> Population:
    """Uniform crossover, random-reset mutation, then binary tournament over parents and offspring."""
    X, f = pop.values()
    kids = random_reset_mutation(uniform_crossover(X, cfg.cr, rng), cfg.mr, objective.bounds, rng)
    f_kids = evaluate(objective, kids, counter)
    union_X = np.concatenate([X, kids])
    union_f = np.concatenate([f, f_kids])
    win = binary_tournament(union_f, X.shape[0], rng)
    return Population(union_X[win], union_f[win])


def polynomial_mutation(X: np.ndarray, eta: float, mr: float, bounds: Bounds, rng) -> np.ndarray:
    """Bounded polynomial mutation, applied per coordinate with probability ``mr``."""
    X = np.asarray(X, dtype=np.float64)
    lo, hi = bounds.lower, bounds.upper
    span = hi - lo
    hit = rng.random(X.shape) < mr
    u = rng.random(X.shape)
    d1 = (X - lo) / span
    d2 = (hi - X) / span
    power = 1.0 / (eta + 1.0)
    with np.errstate(invalid="ignore"):
        low = np.power(2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0), power) - 1.0
        high = 1.0 - np.power(2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0), power)
    delta = np.where(u < 0.5, low, high)
    return np.clip(np.where(hit, X + delta * span, X), lo, hi)


def run_ga(objective, n: int, max_gen: int, cfg: GAOperatorsConfig, counter: EvalCounter, rng, seed: int = 0, task: str = ""):
    start = time.perf_counter()
    rec = RunRecord("ga", task or objective.function_id, seed)
    X = init_population(objective.bounds, n, rng)
    pop = Population(X, evaluate(objective, X, counter))
    rec.log(pop.fitness, counter.count)
    for _ in range(max_gen):
        pop = ga_operators(pop, cfg, objective, counter, rng)
        rec.log(pop.fitness, counter.count)
    rec.wall_time = time.perf_counter() - start
    return rec, pop


# ---------------------------------------------------------------------------
# random search


def random_search(bounds: Bounds, budget: int, objective: ObjectiveInstance, counter: EvalCounter, rng):
    """Returns ``(best_x, best_f, curve)``; ``curve[k]`` is the best of the first k+1 samples."""
    if budget < 1:
        raise BaselineConfigError("random search needs a budget of at least 1")
    X = bounds.lower + (bounds.upper - bounds.lower) * rng.random((budget, bounds.d))
    f = evaluate(objective, X, counter)
    curve = np.minimum.accumulate(f)
    i = int(np.argmin(f))
    return X[i], float(f[i]), curve


def run_random(objective, n: int, steps: int, counter: EvalCounter, rng, seed: int = 0, task: str = ""):
    """Random search logged in chunks of ``n`` samples (the same step grid as DE)."""
    start = time.perf_counter()
    rec = RunRecord("random", task or objective.function_id, seed)
    base = counter.count
    bounds = objective.bounds
    X = bounds.lower + (bounds.upper - bounds.lower) * rng.random(((steps + 1) * n, bounds.d))
    f = evaluate(objective, X, counter)
    curve = np.minimum.accumulate(f)
    for s in range(steps + 1):
        rec.best.append(float(curve[(s + 1) * n - 1]))
        rec.mean.append(float(f[s * n : (s + 1) * n].mean()))
        rec.evals.append(base + (s + 1) * n)
    rec.wall_time = time.perf_counter() - start
    return rec, None
