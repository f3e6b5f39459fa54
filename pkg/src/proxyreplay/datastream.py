"""Synthetic class-incremental task streams.

Each class is an isotropic Gaussian cluster in R^d. Classes are shuffled,
split into disjoint tasks, and served once, in order, as mini-batches.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError

TEST_FRACTION = 0.2


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class StreamConfig:
    num_tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 500
    dim: int = 32
    mean_scale: float = 3.0
    noise_scale: float = 0.6
    batch_size: int = 10
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_tasks", "classes_per_task", "samples_per_class", "dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stream.{name} must be a positive integer, got {getattr(self, name)}", name)
        if self.mean_scale < 0 or self.noise_scale < 0:
            raise ConfigError(
                "stream.mean_scale and stream.noise_scale must be non-negative",
                "mean_scale" if self.mean_scale < 0 else "noise_scale",
            )

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task

    @property
    def test_per_class(self) -> int:
        # test samples make up TEST_FRACTION of everything generated for a class
        return max(1, int(round(self.samples_per_class * TEST_FRACTION / (1 - TEST_FRACTION))))


@dataclass
class Task:
    index: int
    classes: tuple[int, ...]
    features: np.ndarray
    labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray

    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(f, int(y)) for f, y in zip(self.features, self.labels)]


@dataclass
class Batch:
    samples: list[LabeledSample]
    task: int
    # True when this batch is the last one of its task
    task_end: bool

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TaskStream:
    tasks: list[Task]
    seed: int
    task_cursor: int = 0
    offset: int = 0
    classes_seen: list[int] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return sum(len(t.classes) for t in self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].features.shape[1]

    def exhausted(self) -> bool:
        return self.task_cursor >= len(self.tasks)

    def next_batch(self, size: int) -> Batch | None:
        """Serve up to ``size`` unseen samples of the current task.

        Batches never straddle a task boundary; ``None`` marks the end of
        the stream.
        """
        if size < 1:
            raise ValueError("batch size must be >= 1")
        if self.exhausted():
            return None
        task = self.tasks[self.task_cursor]
        if self.offset == 0:
            self.classes_seen.extend(c for c in task.classes if c not in self.classes_seen)
        stop = min(self.offset + size, len(task.labels))
        samples = [
            LabeledSample(task.features[i], int(task.labels[i])) for i in range(self.offset, stop)
        ]
        batch = Batch(samples, task.index, task_end=stop == len(task.labels))
        if batch.task_end:
            self.task_cursor += 1
            self.offset = 0
        else:
            self.offset = stop
        return batch

    def batches(self, size: int) -> Iterator[Batch]:
        while (batch := self.next_batch(size)) is not None:
            yield batch

    def reset(self) -> None:
        self.task_cursor = 0
        self.offset = 0
        self.classes_seen = []


def _draw(rng: np.random.Generator, mean: np.ndarray, n: int, noise: float) -> np.ndarray:
    return mean + noise * rng.standard_normal((n, mean.shape[0]))


def make_task_stream(cfg: StreamConfig) -> TaskStream:
    cfg.validate()
    train_ss, test_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(train_ss)
    test_rng = np.random.default_rng(test_ss)

    means = rng.uniform(-cfg.mean_scale, cfg.mean_scale, size=(cfg.num_classes, cfg.dim))
    order = rng.permutation(cfg.num_classes)

    tasks = []
    for t in range(cfg.num_tasks):
        classes = tuple(int(c) for c in order[t * cfg.classes_per_task:(t + 1) * cfg.classes_per_task])
        feats = np.concatenate([_draw(rng, means[c], cfg.samples_per_class, cfg.noise_scale) for c in classes])
        labels = np.repeat(np.array(classes), cfg.samples_per_class)
        perm = rng.permutation(len(labels))
        test_feats = np.concatenate(
            [_draw(test_rng, means[c], cfg.test_per_class, cfg.noise_scale) for c in classes]
        )
        test_labels = np.repeat(np.array(classes), cfg.test_per_class)
        tasks.append(Task(t, classes, feats[perm], labels[perm], test_feats, test_labels))
    return TaskStream(tasks, cfg.seed)


def next_batch(stream: TaskStream, size: int) -> Batch | None:
    return stream.next_batch(size)


def export_csv(stream: TaskStream, path) -> None:
    """Write every generated sample as ``f0..f{d-1},label,task,split``."""
    d = stream.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)] + ["label", "task", "split"])
        for task in stream.tasks:
            for split, feats, labels in (
                ("train", task.features, task.labels),
                ("test", task.test_features, task.test_labels),
            ):
                for f, y in zip(feats, labels):
                    writer.writerow([repr(float(v)) for v in f] + [int(y), task.index, split])


def stack(samples: Iterable[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    if not samples:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.stack([s.features for s in samples]), np.array([s.label for s in samples], dtype=int)
