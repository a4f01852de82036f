"""Run records and mean(std) summaries shared by the model, baselines and CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RunRecord:
    algo: str
    task: str
    seed: int
    best: list[float] = field(default_factory=list)  # best fitness after each step, index 0 = initial
    mean: list[float] = field(default_factory=list)
    evals: list[int] = field(default_factory=list)  # cumulative evaluations after each step
    wall_time: float = 0.0

    def log(self, fitness: np.ndarray, evals: int) -> None:
        self.best.append(float(np.min(fitness)))
        self.mean.append(float(np.mean(fitness)))
        self.evals.append(int(evals))

    @property
    def final_best(self) -> float:
        return min(self.best)

    @property
    def eval_count(self) -> int:
        return self.evals[-1] if self.evals else 0

    @property
    def steps(self) -> int:
        return len(self.best) - 1

    def best_at_budget(self, budget: int) -> float:
        """Best fitness seen using at most ``budget`` evaluations."""
        within = [b for b, e in zip(self.best, self.evals) if e <= budget]
        if not within:
            raise ValueError(f"budget {budget} is below the initial population cost {self.evals[0]}")
        return min(within)


def fmt_sig(x: float, digits: int = 3) -> str:
    if not np.isfinite(x):
        return str(x)
    if x == 0:
        return "0"
    mag = abs(x)
    if mag >= 1e4 or mag < 1e-3:
        mantissa, exp = f"{x:.{digits - 1}e}".split("e")
        return f"{mantissa}e{int(exp)}"
    return f"{x:.{digits}g}"


@dataclass(frozen=True)
class StatSummary:
    algo: str
    task: str
    mean: float
    std: float
    runs: int

    @classmethod
    def of(cls, algo: str, task: str, values) -> "StatSummary":
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            raise ValueError("a summary needs at least one completed run")
        return cls(algo, task, float(v.mean()), float(v.std()), int(v.size))

    @property
    def text(self) -> str:
        return f"{fmt_sig(self.mean)}({fmt_sig(self.std)})"
