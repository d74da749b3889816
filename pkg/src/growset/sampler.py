"""Gain-weighted training subsets.

Static sampling draws a fixed number of records without replacement with
probability proportional to gain. Dynamic sampling alternates per epoch
between a diversity phase (weights ``G``, ``floor(sum G)`` records) and a
generalization phase (weights ``max(0.1, 1 - G)``, ``floor(sum G')``
records); with gains in [0, 1] two consecutive epochs cost between 50% and
55% of two full-data epochs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np

from .core import seeded_rng
from .errors import MalformedLine, OutOfRange, TargetTooLarge

STATIC = "static"
DIVERSITY = "diversity"
GENERALIZATION = "generalization"
GENERALIZATION_FLOOR = 0.1
# absorbs float summation error before flooring (e.g. 100 x 0.1)
_FLOOR_SLACK = 1e-9


def _weights(gains: Sequence[float]) -> np.ndarray:
    w = np.asarray(gains, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("gains must be one-dimensional")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    return w


def weighted_sample(weights: Sequence[float], target: int, rng: np.random.Generator) -> List[int]:
    """Successive proportional draws without replacement via exponential keys.

    Each item gets key ``E_i / w_i`` with ``E_i ~ Exp(1)``; the ``target``
    smallest keys form the sample, in draw order. Zero weights never win.
    """
    w = _weights(weights)
    if target < 0:
        raise ValueError("target must be >= 0")
    positive = int(np.count_nonzero(w > 0))
    if target > positive:
        raise TargetTooLarge(f"target {target} exceeds {positive} records with positive weight")
    e = rng.standard_exponential(w.shape[0])
    with np.errstate(divide="ignore"):
        keys = np.where(w > 0, e / np.where(w > 0, w, 1.0), np.inf)
    order = np.lexsort((np.arange(w.shape[0]), keys))
    return [int(i) for i in order[:target]]


def static_sample(gains: Sequence[float], target: int, rng: np.random.Generator) -> List[int]:
    return weighted_sample(gains, target, rng)


def generalization_weights(gains: Sequence[float]) -> np.ndarray:
    return np.maximum(GENERALIZATION_FLOOR, 1.0 - _weights(gains))


def phase_count(weights: np.ndarray) -> int:
    return int(math.floor(math.fsum(weights.tolist()) + _FLOOR_SLACK))


def phase_of(epoch: int) -> str:
    """First epoch (index 0) is diversity, then alternate."""
    return DIVERSITY if epoch % 2 == 0 else GENERALIZATION


@dataclass
class EpochEntry:
    epoch: int
    phase: str
    ordinals: List[int]


@dataclass
class SamplePlan:
    seed: int
    epochs: List[EpochEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def phases(self) -> List[str]:
        return [e.phase for e in self.epochs]


def dynamic_plan(gains: Sequence[float], epochs: int, seed: int) -> SamplePlan:
    """Re-draw every epoch from its own seeded stream."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    g = _weights(gains)
    g_prime = generalization_weights(g)
    plan = SamplePlan(seed=seed)
    for epoch in range(epochs):
        phase = phase_of(epoch)
        w = g if phase == DIVERSITY else g_prime
        rng = seeded_rng(seed, f"sampler/epoch/{epoch}")
        plan.epochs.append(EpochEntry(epoch, phase, weighted_sample(w, phase_count(w), rng)))
    return plan


def static_plan(gains: Sequence[float], target: int, seed: int) -> SamplePlan:
    picked = static_sample(gains, target, seeded_rng(seed, "sampler/static"))
    return SamplePlan(seed=seed, epochs=[EpochEntry(0, STATIC, picked)])


def epoch_schedule(plan: SamplePlan, epoch: int) -> List[int]:
    """The epoch's selection in training order (shuffled by the plan's seed)."""
    if not 0 <= epoch < len(plan.epochs):
        raise OutOfRange(f"epoch {epoch} outside plan of {len(plan.epochs)} epochs")
    ords = np.array(plan.epochs[epoch].ordinals, dtype=np.int64)
    seeded_rng(plan.seed, f"schedule/{epoch}").shuffle(ords)
    return ords.tolist()


def cost_fraction(plan: SamplePlan, n: int) -> float:
    """Selected records over the full-data cost of the same number of epochs."""
    if n == 0 or not plan.epochs:
        return 0.0
    return sum(len(e.ordinals) for e in plan.epochs) / (n * len(plan.epochs))


def write_plan(plan: SamplePlan, fh, shuffled: bool = True) -> None:
    for e in plan.epochs:
        ords = epoch_schedule(plan, e.epoch) if shuffled else e.ordinals
        fh.write(json.dumps({"epoch": e.epoch, "phase": e.phase, "ordinals": ords},
                            separators=(", ", ": ")) + "\n")


def read_plan(lines: Iterable[str], seed: int = 0) -> SamplePlan:
    plan = SamplePlan(seed=seed)
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = EpochEntry(int(obj["epoch"]), str(obj["phase"]), [int(o) for o in obj["ordinals"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(n, str(exc)) from None
        if entry.phase not in (STATIC, DIVERSITY, GENERALIZATION):
            raise MalformedLine(n, f"unknown phase {entry.phase!r}")
        if len(set(entry.ordinals)) != len(entry.ordinals):
            raise MalformedLine(n, "duplicate ordinal within epoch")
        plan.epochs.append(entry)
    return plan
