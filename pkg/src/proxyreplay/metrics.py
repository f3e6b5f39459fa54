"""Accuracy-matrix metrics: average accuracy A_i, averaged anytime accuracy,
and average forgetting F_i."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import DomainError


@dataclass
class AccuracyMatrix:
    """Lower-triangular a[i, j] (1-based), accuracy on task j after training
    through task i."""

    cells: dict[tuple[int, int], float] = field(default_factory=dict)

    def set(self, i: int, j: int, acc: float) -> None:
        if j > i or j < 1:
            raise DomainError(f"a[{i},{j}] is outside the lower triangle")
        self.cells[(i, j)] = float(acc)

    def __getitem__(self, key: tuple[int, int]) -> float:
        try:
            return self.cells[key]
        except KeyError:
            raise DomainError(f"a{key} has not been evaluated") from None

    @property
    def num_tasks(self) -> int:
        return max((i for i, _ in self.cells), default=0)

    def row(self, i: int) -> list[float]:
        return [self[i, j] for j in range(1, i + 1)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "a"])
            for (i, j) in sorted(self.cells):
                w.writerow([i, j, repr(self.cells[(i, j)])])

    @classmethod
    def read_csv(cls, path) -> "AccuracyMatrix":
        m = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                m.set(int(rec["i"]), int(rec["j"]), float(rec["a"]))
        return m


def metric_A(a: AccuracyMatrix, i: int) -> float:
    return sum(a.row(i)) / i


def metric_AAA(a: AccuracyMatrix, T: int | None = None) -> float:
    T = a.num_tasks if T is None else T
    if T < 1:
        raise DomainError("no evaluated tasks")
    return sum(metric_A(a, t) for t in range(1, T + 1)) / T


def forgetting(a: AccuracyMatrix, k: int, j: int) -> float:
    """f_{k,j}: best earlier accuracy on task j minus the current one."""
    if not (1 <= j < k):
        raise DomainError(f"f[{k},{j}] needs 1 <= j < k")
    return max(a[l, j] for l in range(j, k)) - a[k, j]


def metric_F(a: AccuracyMatrix, i: int) -> float:
    if i < 2:
        raise DomainError("forgetting is undefined after the first task")
    return sum(forgetting(a, i, j) for j in range(1, i)) / (i - 1)
