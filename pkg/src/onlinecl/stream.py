"""Deterministic class-incremental data streams delivered as online mini-batches.

Tasks are contiguous class ranges in ascending order. Each call to
``next_minibatch`` emits half a training batch of current-task examples;
the other half is filled from replay memory by the training strategy.
Task-boundary flags ride on the mini-batch for the evaluator's bookkeeping
only and are never handed to the learner.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid stream configuration."""


class DatasetParseError(ValueError):
    """Malformed dataset file; message names the offending line."""


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    train_examples: int
    val_examples: int
    test_examples: int


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int
    classes_per_task: int
    input_dim: int
    batch_size: int = 32
    seed: int = 0
    source: str = "synthetic_gaussian"      # or "file_backed"
    train_per_class: int = 200
    test_per_class: int = 50
    val_fraction: float = 0.05

    @property
    def total_classes(self) -> int:
        return self.n_tasks * self.classes_per_task

    def validate(self):
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ConfigError("n_tasks and classes_per_task must be >= 1")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.source not in ("synthetic_gaussian", "file_backed"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.train_per_class < 1:
            raise ConfigError("train_per_class must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class Minibatch:
    """Half-batch of current-task examples plus evaluator-only metadata."""

    features: np.ndarray        # (m, input_dim) float32
    labels: np.ndarray          # (m,) int
    task_id: int
    task_start: bool            # first batch of a task; for the evaluator, not the learner
    index: int                  # global mini-batch ordinal


@dataclass
class _TaskData:
    spec: TaskSpec
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


class Stream:
    """Single-consumer iterator over a fixed, precomputed batch schedule.

    Each training example appears in exactly one emitted mini-batch
    (single-epoch online regime). Reset rewinds to the same schedule.
    """

    def __init__(self, config: StreamConfig, tasks: list[_TaskData]):
        self.config = config
        self._tasks = tasks
        half = config.batch_size // 2
        self._schedule: list[Minibatch] = []
        index = 0
        for task in tasks:
            n = len(task.train_y)
            for start in range(0, n, half):
                stop = min(start + half, n)
                self._schedule.append(Minibatch(
                    features=task.train_x[start:stop],
                    labels=task.train_y[start:stop],
                    task_id=task.spec.task_id,
                    task_start=start == 0,
                    index=index,
                ))
                index += 1
        self._cursor = 0

    @property
    def tasks(self) -> list[TaskSpec]:
        return [t.spec for t in self._tasks]

    @property
    def n_batches(self) -> int:
        return len(self._schedule)

    def next_minibatch(self) -> Optional[Minibatch]:
        """Next half-batch of current-task examples, or None at end of stream."""
        if self._cursor >= len(self._schedule):
            return None
        batch = self._schedule[self._cursor]
        self._cursor += 1
        return batch

    def reset(self):
        self._cursor = 0

    def __iter__(self):
        while (batch := self.next_minibatch()) is not None:
            yield batch

    def val_sets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(t.val_x, t.val_y) for t in self._tasks]

    def test_sets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(t.test_x, t.test_y) for t in self._tasks]

    def task_class_ids(self) -> list[tuple[int, ...]]:
        return [t.spec.class_ids for t in self._tasks]


def _assemble_tasks(config: StreamConfig, per_class: dict[int, tuple], rng: np.random.Generator):
    """Group per-class splits into tasks and shuffle each task's train pool."""
    tasks = []
    for task_id in range(config.n_tasks):
        class_ids = tuple(range(task_id * config.classes_per_task,
                                (task_id + 1) * config.classes_per_task))
        tr_x, tr_y, va_x, va_y, te_x, te_y = [], [], [], [], [], []
        for c in class_ids:
            ctr_x, ctr_y, cva_x, cva_y, cte_x, cte_y = per_class[c]
            tr_x.append(ctr_x); tr_y.append(ctr_y)
            va_x.append(cva_x); va_y.append(cva_y)
            te_x.append(cte_x); te_y.append(cte_y)
        train_x = np.concatenate(tr_x); train_y = np.concatenate(tr_y)
        order = rng.permutation(len(train_y))
        spec = TaskSpec(
            task_id=task_id,
            class_ids=class_ids,
            train_examples=len(train_y),
            val_examples=sum(len(v) for v in va_y),
            test_examples=sum(len(v) for v in te_y),
        )
        tasks.append(_TaskData(
            spec=spec,
            train_x=train_x[order],
            train_y=train_y[order],
            val_x=np.concatenate(va_x),
            val_y=np.concatenate(va_y),
            test_x=np.concatenate(te_x),
            test_y=np.concatenate(te_y),
        ))
    return tasks


def _split_pool(x: np.ndarray, y: np.ndarray, val_fraction: float, rng: np.random.Generator):
    """Seeded holdout of ~val_fraction of a class's train pool."""
    n = len(y)
    n_val = int(round(val_fraction * n))
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return x[train_idx], y[train_idx], x[val_idx], y[val_idx]


def generate_synthetic_stream(config: StreamConfig) -> Stream:
    """Seeded Gaussian-blob stream: one unit-variance blob per class.

    Class means are uniform in [-3, 3]^d. Identical config yields
    bit-identical examples.
    """
    config.validate()
    if config.source != "synthetic_gaussian":
        raise ConfigError(f"generate_synthetic_stream needs source synthetic_gaussian, got {config.source!r}")
    rng = np.random.default_rng(config.seed)
    n_classes = config.total_classes
    means = rng.uniform(-3.0, 3.0, (n_classes, config.input_dim))
    per_class = {}
    for c in range(n_classes):
        n_total = config.train_per_class + config.test_per_class
        samples = (means[c] + rng.standard_normal((n_total, config.input_dim))).astype(np.float32)
        labels = np.full(n_total, c, dtype=np.int64)
        pool_x, pool_y = samples[:config.train_per_class], labels[:config.train_per_class]
        test_x, test_y = samples[config.train_per_class:], labels[config.train_per_class:]
        tr_x, tr_y, va_x, va_y = _split_pool(pool_x, pool_y, config.val_fraction, rng)
        per_class[c] = (tr_x, tr_y, va_x, va_y, test_x, test_y)
    tasks = _assemble_tasks(config, per_class, rng)
    return Stream(config, tasks)


def _parse_csv(path, config: StreamConfig):
    """Rows of `label,f0,...,f{d-1}` grouped by class; errors name the line."""
    by_class: dict[int, list[np.ndarray]] = {c: [] for c in range(config.total_classes)}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("label"):
            raise DatasetParseError(f"{path}:1: expected header starting with 'label', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != config.input_dim + 1:
                raise DatasetParseError(
                    f"{path}:{lineno}: expected {config.input_dim + 1} fields, got {len(fields)}")
            try:
                label = int(fields[0])
                feats = np.array([float(v) for v in fields[1:]], dtype=np.float32)
            except ValueError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= label < config.total_classes:
                raise DatasetParseError(
                    f"{path}:{lineno}: label {label} out of range for {config.total_classes} classes")
            by_class[label].append(np.concatenate([[label], feats]).astype(np.float32))
    return by_class


def load_file_stream(path, config: StreamConfig, test_path=None) -> Stream:
    """Stream from a CSV dataset, partitioned into tasks by ascending class id.

    A seeded ~5% of each class's rows is held out as validation. Test data
    comes from ``test_path`` when given (same format); otherwise the test
    split is empty.
    """
    config.validate()
    if config.source != "file_backed":
        raise ConfigError(f"load_file_stream needs source file_backed, got {config.source!r}")
    rng = np.random.default_rng(config.seed)
    train_rows = _parse_csv(path, config)
    test_rows = _parse_csv(test_path, config) if test_path is not None else {c: [] for c in range(config.total_classes)}
    per_class = {}
    for c in range(config.total_classes):
        rows = train_rows[c]
        if rows:
            pool = np.stack(rows)
            pool_x, pool_y = pool[:, 1:], pool[:, 0].astype(np.int64)
        else:
            pool_x = np.zeros((0, config.input_dim), dtype=np.float32)
            pool_y = np.zeros(0, dtype=np.int64)
        tr_x, tr_y, va_x, va_y = _split_pool(pool_x, pool_y, config.val_fraction, rng)
        if test_rows[c]:
            te = np.stack(test_rows[c])
            te_x, te_y = te[:, 1:], te[:, 0].astype(np.int64)
        else:
            te_x = np.zeros((0, config.input_dim), dtype=np.float32)
            te_y = np.zeros(0, dtype=np.int64)
        per_class[c] = (tr_x, tr_y, va_x, va_y, te_x, te_y)
    tasks = _assemble_tasks(config, per_class, rng)
    return Stream(config, tasks)


def with_seed(config: StreamConfig, seed: int) -> StreamConfig:
    return replace(config, seed=int(seed))
