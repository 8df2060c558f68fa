"""Split a global batch across workers by pairing the smallest and largest samples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class SamplerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SampleLoad:
    sample_index: int
    feature_number: int

    def __post_init__(self):
        if self.feature_number < 1:
            raise ValueError("feature_number must be at least 1")


@dataclass(frozen=True)
class Assignment:
    workers: list[list[int]]
    loads: list[int]


def balance_assign(loads: Sequence[SampleLoad], workers: int) -> Assignment:
    """Round-robin over workers; each turn takes the smallest and the largest remaining sample.

    Samples are sorted ascending by feature number with ties broken by
    original position. A lone final sample goes to the worker whose turn it is.
    """
    if workers <= 0:
        raise SamplerConfigError(f"need at least one worker, got {workers}")
    if not loads:
        raise ValueError("no samples to assign")
    order = sorted(range(len(loads)), key=lambda k: (loads[k].feature_number, k))
    assigned: list[list[int]] = [[] for _ in range(workers)]
    totals = [0] * workers
    front, back = 0, len(order) - 1
    turn = 0
    while front <= back:
        picks = [order[front]] if front == back else [order[front], order[back]]
        front += 1
        back -= 1
        for k in picks:
            assigned[turn].append(loads[k].sample_index)
            totals[turn] += loads[k].feature_number
        turn = (turn + 1) % workers
    return Assignment(assigned, totals)


def contiguous_assign(loads: Sequence[SampleLoad], workers: int) -> Assignment:
    """The default sampler: consecutive chunks of the batch in arrival order."""
    if workers <= 0:
        raise SamplerConfigError(f"need at least one worker, got {workers}")
    chunks = np.array_split(np.arange(len(loads)), workers)
    assigned = [[loads[k].sample_index for k in chunk] for chunk in chunks]
    totals = [sum(loads[k].feature_number for k in chunk) for chunk in chunks]
    return Assignment(assigned, totals)


def coefficient_of_variance(per_worker_loads: Sequence[float]) -> float:
    """Population standard deviation over the mean."""
    x = np.asarray(per_worker_loads, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no worker loads")
    mean = x.mean()
    if mean == 0:
        raise ZeroDivisionError("coefficient of variance undefined for zero mean load")
    return float(x.std() / mean)
