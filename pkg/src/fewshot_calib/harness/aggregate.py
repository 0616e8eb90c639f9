"""Episode-level statistics: mean with a normal-approximation 95% interval."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from ..errors import AggregationError

Z95 = 1.96


@dataclass(frozen=True)
class Aggregate:
    mean: float
    ci95: float
    n: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "ci95": self.ci95, "n": self.n}

    @property
    def excludes_zero(self) -> bool:
        return abs(self.mean) > self.ci95


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean and ``1.96 * sd / sqrt(n)`` with the n-1 sample standard deviation."""
    xs = [float(v) for v in values]
    n = len(xs)
    if n < 2:
        raise AggregationError(f"need at least 2 values to aggregate, got {n}")
    if not all(math.isfinite(x) for x in xs):
        raise AggregationError("cannot aggregate non-finite values")
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
    return Aggregate(mean, Z95 * math.sqrt(var) / math.sqrt(n), n)


def paired(before: Sequence[float], after: Sequence[float]) -> Aggregate:
    """Aggregate of ``after - before`` over matched episodes."""
    if len(before) != len(after):
        raise AggregationError(f"paired lists differ in length: {len(before)} vs {len(after)}")
    return aggregate([b - a for a, b in zip(before, after)])
