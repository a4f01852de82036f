"""Shifted benchmark functions, the planar arm task, and metered evaluation.

F1-F3 are the cheap differentiable training surrogates, F4-F9 the test
suite. Every function is written once with :mod:`b2opt.ad` ops, so the same
code evaluates plain arrays and records onto a tape during training.
Sums run left to right over the coordinate index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ad

TRAIN_FUNCTIONS = ("F1", "F2", "F3")
TEST_FUNCTIONS = ("F4", "F5", "F6", "F7", "F8", "F9")
ALL_FUNCTIONS = TRAIN_FUNCTIONS + TEST_FUNCTIONS

# function id -> (x range, shift range)
RANGES: dict[str, tuple[tuple[float, float], tuple[float, float]]] = {
    "F1": ((-10.0, 10.0), (-10.0, 10.0)),
    "F2": ((-10.0, 10.0), (-10.0, 10.0)),
    "F3": ((-10.0, 10.0), (-10.0, 10.0)),
    "F4": ((-100.0, 100.0), (-50.0, 50.0)),
    "F5": ((-100.0, 100.0), (-50.0, 50.0)),
    "F6": ((-100.0, 100.0), (-50.0, 50.0)),
    "F7": ((-5.0, 5.0), (-2.5, 2.5)),
    "F8": ((-600.0, 600.0), (-300.0, 300.0)),
    "F9": ((-32.0, 32.0), (-16.0, 16.0)),
}
F1_WEIGHT_RANGE = (-10.0, 10.0)

ARM_SEGMENTS = 100
ARM_LENGTH_RANGE = (0.0, 10.0)
ARM_FIXED_LENGTH = 10.0
ARM_MODES = ("SC", "CC")

TWO_PI = 2.0 * math.pi


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ObjectiveError(f"bounds must be matching vectors, got {lo.shape} and {hi.shape}")
        if not np.all(lo < hi):
            raise ObjectiveError("every lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lo: float, hi: float, d: int) -> "Bounds":
        return cls(np.full(d, lo), np.full(d, hi))

    @property
    def d(self) -> int:
        return self.lower.shape[0]


@dataclass
class EvalCounter:
    """Counts scalar objective evaluations (one per population row)."""

    count: int = 0

    def charge(self, rows: int) -> None:
        self.count += int(rows)


@dataclass(frozen=True, eq=False)
class ObjectiveInstance:
    """One shifted benchmark function (or one arm target).

    ``shift``, ``weights`` and ``target`` may carry leading batch axes,
    e.g. shape ``(K, 1, d)``, so K populations can each see their own
    instance in a single evaluation call (see :func:`stack_instances`).
    """

    function_id: str
    d: int
    bounds: Bounds
    shift: np.ndarray | None = None
    weights: np.ndarray | None = None
    target: np.ndarray | None = None
    arm_mode: str | None = None
    scale: float = 1.0

    @property
    def differentiable(self) -> bool:
        return self.function_id in TRAIN_FUNCTIONS or self.function_id == "ARM"

    @property
    def batch_shape(self) -> tuple[int, ...]:
        ref = self.target if self.function_id == "ARM" else self.shift
        return ref.shape[:-2] if ref is not None and ref.ndim > 1 else ()

    def scaled(self, factor: float) -> "ObjectiveInstance":
        return ObjectiveInstance(
            self.function_id, self.d, self.bounds, self.shift, self.weights, self.target, self.arm_mode,
            self.scale * factor,
        )


@dataclass(frozen=True, eq=False)
class ArmTask:
    target: tuple[float, float]
    mode: str = "SC"
    n_segments: int = ARM_SEGMENTS

    def instance(self) -> ObjectiveInstance:
        return arm_instance(np.asarray(self.target), self.mode, self.n_segments)


# ---------------------------------------------------------------------------
# function bodies; z = x - b


def _f1(z, w):
    return ad.sum_last(ad.abs_(ad.mul(w, ad.sin(z))))


def _f2(z):
    return ad.sum_last(ad.abs_(z))


def _f3(z):
    pair = ad.add(ad.slice_cols(z, None, -1), ad.slice_cols(z, 1, None))
    return ad.add(ad.sum_last(ad.abs_(pair)), ad.sum_last(ad.abs_(z)))


def _f4(z):
    return ad.sum_last(ad.square(z))


def _f5(z):
    return ad.max_last(ad.abs_(z))


def _f6(z):
    a = ad.slice_cols(z, None, -1)
    b = ad.slice_cols(z, 1, None)
    valley = ad.mul(100.0, ad.square(ad.sub(ad.square(a), b)))
    return ad.sum_last(ad.add(valley, ad.square(ad.sub(a, 1.0))))


def _f7(z):
    ripple = ad.mul(10.0, ad.cos(ad.mul(TWO_PI, z)))
    return ad.sum_last(ad.add(ad.sub(ad.square(z), ripple), 10.0))


def _f8(z):
    d = ad.value_of(z).shape[-1]
    root = np.sqrt(np.arange(1, d + 1, dtype=np.float64))
    bowl = ad.sum_last(ad.div(ad.square(z), 4000.0))
    return ad.add(ad.sub(bowl, ad.prod_last(ad.cos(ad.div(z, root)))), 1.0)


def _f9(z):
    rms = ad.sqrt(ad.mean_last(ad.square(z)))
    first = ad.mul(-20.0, ad.exp(ad.mul(-0.2, rms)))
    second = ad.exp(ad.mean_last(ad.cos(ad.mul(TWO_PI, z))))
    return ad.add(ad.add(ad.sub(first, second), 20.0), math.e)


_BODIES = {"F2": _f2, "F3": _f3, "F4": _f4, "F5": _f5, "F6": _f6, "F7": _f7, "F8": _f8, "F9": _f9}


def _arm(X, target, mode: str):
    v = ad.value_of(X)
    if mode == "SC":
        n = v.shape[-1]
        lengths = ARM_FIXED_LENGTH
        angles = X
    else:
        n = v.shape[-1] // 2
        lengths = ad.slice_cols(X, None, n)
        angles = ad.slice_cols(X, n, None)
    tip_x = ad.sum_last(ad.mul(ad.cos(angles), lengths))
    tip_y = ad.sum_last(ad.mul(ad.sin(angles), lengths))
    dx = ad.sub(tip_x, target[..., 0])
    dy = ad.sub(tip_y, target[..., 1])
    return ad.sqrt(ad.add(ad.square(dx), ad.square(dy)))


# ---------------------------------------------------------------------------
# public API


def evaluate(instance: ObjectiveInstance, X, counter: EvalCounter | None = None):
    """Fitness of every row of ``X`` (shape ``(..., n, d)``); returns ``(..., n)``.

    Passing a tape node returns a node, differentiable with respect to ``X``.
    The counter is charged one evaluation per row.
    """
    shape = ad.value_of(X).shape
    if len(shape) < 2:
        raise ObjectiveError(f"population must be at least 2-D, got shape {shape}")
    if shape[-1] != instance.d:
        raise ObjectiveError(f"{instance.function_id} expects d={instance.d}, population has {shape[-1]} columns")
    fid = instance.function_id
    if fid == "ARM":
        fx = _arm(X, instance.target, instance.arm_mode)
    elif fid == "F1":
        fx = _f1(ad.sub(X, instance.shift), instance.weights)
    elif fid in _BODIES:
        fx = _BODIES[fid](ad.sub(X, instance.shift))
    else:
        raise ObjectiveError(f"unknown function id {fid!r}")
    if instance.scale != 1.0:
        fx = ad.mul(fx, instance.scale)
    if counter is not None:
        counter.charge(math.prod(shape[:-1]))
    return fx


def make_instance(function_id: str, d: int, shift=None, weights=None) -> ObjectiveInstance:
    if function_id not in RANGES:
        raise ObjectiveError(f"unknown function id {function_id!r}")
    if d < 2:
        raise ObjectiveError("dimension must be at least 2")
    (lo, hi), _ = RANGES[function_id]
    shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=np.float64)
    if function_id == "F1" and weights is None:
        weights = np.ones(d)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    return ObjectiveInstance(function_id, d, Bounds.box(lo, hi, d), shift, weights)


def sample_instance(function_id: str, d: int, rng: np.random.Generator) -> ObjectiveInstance:
    """Random shift drawn uniformly from the function's table range."""
    if function_id not in RANGES:
        raise ObjectiveError(f"unknown function id {function_id!r}")
    _, (blo, bhi) = RANGES[function_id]
    shift = rng.uniform(blo, bhi, size=d)
    weights = rng.uniform(*F1_WEIGHT_RANGE, size=d) if function_id == "F1" else None
    return make_instance(function_id, d, shift, weights)


def sample_training_instance(function_id: str, d: int, rng: np.random.Generator) -> ObjectiveInstance:
    if function_id not in TRAIN_FUNCTIONS:
        raise ObjectiveError(f"{function_id!r} is not a training function {TRAIN_FUNCTIONS}")
    return sample_instance(function_id, d, rng)


def sample_test_instance(function_id: str, d: int, rng: np.random.Generator) -> ObjectiveInstance:
    if function_id not in TEST_FUNCTIONS:
        raise ObjectiveError(f"{function_id!r} is not a test function {TEST_FUNCTIONS}")
    return sample_instance(function_id, d, rng)


def arm_bounds(mode: str, n_segments: int = ARM_SEGMENTS) -> Bounds:
    if mode not in ARM_MODES:
        raise ObjectiveError(f"arm mode must be one of {ARM_MODES}, got {mode!r}")
    angles_lo, angles_hi = np.full(n_segments, -math.pi), np.full(n_segments, math.pi)
    if mode == "SC":
        return Bounds(angles_lo, angles_hi)
    lo, hi = ARM_LENGTH_RANGE
    return Bounds(
        np.concatenate([np.full(n_segments, lo), angles_lo]),
        np.concatenate([np.full(n_segments, hi), angles_hi]),
    )


def arm_instance(target, mode: str = "SC", n_segments: int = ARM_SEGMENTS) -> ObjectiveInstance:
    """Arm task as an objective; SC optimises angles only, CC lengths then angles."""
    bounds = arm_bounds(mode, n_segments)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[-1] != 2:
        raise ObjectiveError(f"arm target must be 2-D, got shape {target.shape}")
    return ObjectiveInstance("ARM", bounds.d, bounds, target=target, arm_mode=mode)


def arm_distance(lengths, angles, target) -> float:
    """Distance from the arm tip to ``target``."""
    lengths = np.asarray(lengths, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if lengths.shape != angles.shape or lengths.ndim != 1:
        raise ObjectiveError(f"lengths {lengths.shape} and angles {angles.shape} must be equal-length vectors")
    x = np.concatenate([lengths, angles])[None, :]
    return float(_arm(x, np.asarray(target, dtype=np.float64), "CC")[0])


def sample_arm_targets(r_max: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points uniform over the disk of radius ``r_max``; shape ``(count, 2)``."""
    if r_max <= 0:
        raise ObjectiveError("r_max must be positive")
    radius = r_max * np.sqrt(rng.random(count))
    angle = rng.uniform(-math.pi, math.pi, size=count)
    pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
    # cos/sin rounding can push |p| a hair past r_max
    norm = np.hypot(pts[:, 0], pts[:, 1])
    over = norm > r_max
    pts[over] *= (r_max / norm[over])[:, None]
    return pts


def stack_instances(instances: list[ObjectiveInstance]) -> ObjectiveInstance:
    """Batch K instances of one function into a single instance with ``(K, 1, ...)`` parameters."""
    if not instances:
        raise ObjectiveError("no instances to stack")
    first = instances[0]
    for inst in instances[1:]:
        if (inst.function_id, inst.d, inst.arm_mode) != (first.function_id, first.d, first.arm_mode):
            raise ObjectiveError("stacked instances must share function, dimension and mode")

    def stack(attr):
        vals = [getattr(i, attr) for i in instances]
        if vals[0] is None:
            return None
        return np.stack(vals)[:, None, :]

    return ObjectiveInstance(
        first.function_id, first.d, first.bounds, stack("shift"), stack("weights"), stack("target"),
        first.arm_mode, first.scale,
    )


def init_population(bounds: Bounds, n: int, rng: np.random.Generator, batch: tuple[int, ...] = ()) -> np.ndarray:
    """Uniform random population of shape ``batch + (n, d)`` inside ``bounds``."""
    if n < 2:
        raise ObjectiveError("population size must be at least 2")
    u = rng.random(tuple(batch) + (n, bounds.d))
    return bounds.lower + (bounds.upper - bounds.lower) * u
