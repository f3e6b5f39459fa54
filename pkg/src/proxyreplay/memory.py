"""Fixed-capacity replay memory with reservoir updates."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .datastream import LabeledSample


@dataclass
class BufferEntry:
    """A stored sample together with the logits and embedding it produced
    when it was first trained on."""

    sample: LabeledSample
    stored_logits: np.ndarray
    stored_embedding: np.ndarray

    @property
    def stored_num_classes(self) -> int:
        return len(self.stored_logits)

    @property
    def label(self) -> int:
        return self.sample.label


class MemoryBuffer:
    def __init__(self, capacity: int, rng: np.random.Generator | None = None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.entries: list[Any] = []
        self.seen_count = 0
        self.rng = rng if rng is not None else np.random.default_rng()

    def __len__(self) -> int:
        return len(self.entries)

    def reservoir_update(self, batch: Sequence[Any]) -> "MemoryBuffer":
        """Offer ``batch`` to the buffer, one item at a time (Algorithm R).

        Once full, the item with running index n (1-based) replaces slot r
        for r ~ U[0, n) whenever r < capacity.
        """
        batch = list(batch)
        if not batch:
            return self
        free = max(0, min(self.capacity - len(self.entries), len(batch)))
        self.entries.extend(batch[:free])
        self.seen_count += free
        rest = batch[free:]
        if rest:
            if self.capacity == 0:
                self.seen_count += len(rest)
                return self
            ns = self.seen_count + 1 + np.arange(len(rest))
            slots = self.rng.integers(0, ns)
            for item, r in zip(rest, slots):
                if r < self.capacity:
                    self.entries[r] = item
            self.seen_count += len(rest)
        return self

    def random_retrieval(self, m: int) -> list[Any]:
        """Up to ``m`` distinct entries, uniformly without replacement."""
        if m < 0:
            raise ValueError("m must be >= 0")
        k = min(m, len(self.entries))
        if k == 0:
            return []
        idx = self.rng.choice(len(self.entries), size=k, replace=False)
        return [self.entries[i] for i in idx]

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "stored_num_classes"])
            for i, e in enumerate(self.entries):
                writer.writerow([i, e.label, e.stored_num_classes])


def reservoir_update(buf: MemoryBuffer, batch: Sequence[Any]) -> MemoryBuffer:
    return buf.reservoir_update(batch)


def random_retrieval(buf: MemoryBuffer, m: int) -> list[Any]:
    return buf.random_retrieval(m)
