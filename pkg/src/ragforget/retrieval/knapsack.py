"""Per-category retention allocation as a multiple-choice knapsack."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import reduce
from pathlib import Path

import numpy as np

from ..exceptions import GridMismatch


@dataclass(frozen=True, eq=False)
class PerfMatrix:
    """Hit rate observed when category ``c`` keeps ``grid[g]`` percent of its rows.

    ``values[c_index, g]`` is in [0, 1].
    """

    grid: tuple
    categories: tuple
    values: np.ndarray

    def __post_init__(self):
        grid = tuple(int(p) for p in self.grid)
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.categories), len(grid)):
            raise ValueError(f"values shape {values.shape} does not match "
                             f"{len(self.categories)} categories x {len(grid)} grid points")
        if not np.isfinite(values).all() or values.min(initial=0) < 0 or values.max(initial=0) > 1:
            raise ValueError("perf matrix values must be finite and within [0, 1]")
        if len(set(grid)) != len(grid):
            raise ValueError("duplicate grid points")
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "values", values)

    def value(self, category, pct):
        return float(self.values[self.categories.index(category), self.grid.index(int(pct))])

    def restrict(self, categories):
        keep = [c for c in self.categories if c in set(categories)]
        rows = [self.categories.index(c) for c in keep]
        return PerfMatrix(self.grid, tuple(keep), self.values[rows])

    def to_json(self):
        return {"grid": list(self.grid), "categories": list(self.categories),
                "values": self.values.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["grid"]), tuple(obj["categories"]), np.asarray(obj["values"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class KnapsackResult:
    allocation: dict
    objective: float
    total: int
    exact: bool

    def as_tuple(self, categories):
        return tuple(self.allocation[c] for c in categories)


def solve_knapsack(m, k_prime, grid=None):
    """Maximise ``sum_c M[c][x_c]`` subject to ``sum_c x_c == k_prime``.

    Dynamic program over categories in matrix order:
    ``DP[i][j] = max_x DP[i-1][j-x] + M[i][x]`` with ``x`` drawn from the grid.
    If no allocation hits ``k_prime`` exactly, the best allocation of the
    largest reachable total below it is returned with ``exact=False``. Among
    equal objectives the lexicographically smallest allocation wins.
    """
    grid = tuple(int(p) for p in (m.grid if grid is None else grid))
    if not grid:
        raise GridMismatch("empty grid")
    missing = [p for p in grid if p not in m.grid]
    if missing:
        raise GridMismatch(f"grid points {missing} absent from the perf matrix")
    step = reduce(math.gcd, grid) or 1
    if k_prime < 0 or k_prime % step:
        raise GridMismatch(f"k_prime={k_prime} is not on the {step}-point lattice")
    units = k_prime // step
    cols = [m.grid.index(p) for p in grid]
    n = len(m.categories)
    if n == 0:
        return KnapsackResult({}, 0.0, 0, k_prime == 0)

    # best[j] = (objective, allocation prefix) of the first i categories summing to j*step
    best = [None] * (units + 1)
    best[0] = (0.0, ())
    for i in range(n):
        row = m.values[i]
        nxt = [None] * (units + 1)
        for j in range(units + 1):
            cand = None
            for p, col in zip(grid, cols):
                w = p // step
                if w > j or best[j - w] is None:
                    continue
                val = best[j - w][0] + float(row[col])
                alloc = best[j - w][1] + (p,)
                if cand is None or val > cand[0] or (val == cand[0] and alloc < cand[1]):
                    cand = (val, alloc)
            nxt[j] = cand
        best = nxt
    exact = best[units] is not None
    j = units
    while best[j] is None:
        j -= 1
        if j < 0:
            raise GridMismatch("no allocation fits within k_prime")
    value, alloc = best[j]
    return KnapsackResult(dict(zip(m.categories, alloc)), value, j * step, exact)
