"""Continual evaluation: per-mini-batch accuracy tracking and stability metrics.

The accuracy matrix holds one row per evaluation point with the per-task
accuracies of every task seen so far. On top of it: average anytime
accuracy, the average minimum accuracy of finished tasks, worst-case
accuracy, and the relative accuracy gap (in percent). Task confusion
matrices quantify recency bias, and per-task traces expose the transient
accuracy drop after each task boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .net import Network, predict_labels


@dataclass(frozen=True)
class MatrixRow:
    iteration: int
    minibatch: int
    task_id: int                      # 0-based id of the task being trained
    accuracies: tuple[float, ...]     # one entry per seen task, oldest first


@dataclass
class AccuracyMatrix:
    """Time-indexed per-task accuracies plus the iteration each task ended at."""

    rows: list[MatrixRow] = field(default_factory=list)
    task_end: dict[int, int] = field(default_factory=dict)

    def append(self, iteration: int, minibatch: int, task_id: int,
               accuracies: Sequence[float]) -> None:
        accs = tuple(float(a) for a in accuracies)
        if len(accs) != task_id + 1:
            raise ValueError(f"row for task {task_id} needs {task_id + 1} accuracies, got {len(accs)}")
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError(f"accuracies must lie in [0, 1]: {accs}")
        if self.rows and iteration <= self.rows[-1].iteration:
            raise ValueError(f"iterations must be strictly increasing, got {iteration}")
        self.rows.append(MatrixRow(iteration, minibatch, task_id, accs))

    def mark_task_end(self, task_id: int, iteration: int) -> None:
        self.task_end[task_id] = iteration

    def row_at(self, at_iteration: Optional[int] = None) -> MatrixRow:
        if not self.rows:
            raise ValueError("empty accuracy matrix")
        if at_iteration is None:
            return self.rows[-1]
        for row in reversed(self.rows):
            if row.iteration == at_iteration:
                return row
        raise ValueError(f"no evaluation row at iteration {at_iteration}")


@dataclass(frozen=True)
class MetricsReport:
    avg_acc: float
    aaa: float
    min_acc: Optional[float]
    wc_acc: float
    rag: Optional[float]              # percent


def evaluate_model(net: Network, eval_sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Fraction of argmax-correct predictions on each evaluation set."""
    if not eval_sets:
        raise ValueError("no evaluation sets given")
    accs = []
    for x, y in eval_sets:
        if len(y) == 0:
            raise ValueError("empty evaluation set")
        accs.append(float(np.mean(predict_labels(net, x) == np.asarray(y))))
    return np.array(accs)


def aaa(matrix: AccuracyMatrix, at_iteration: Optional[int] = None) -> float:
    """Average anytime accuracy: mean over rows of each row's seen-task mean."""
    if not matrix.rows:
        raise ValueError("empty accuracy matrix")
    stop = matrix.row_at(at_iteration).iteration
    row_means = [float(np.mean(r.accuracies)) for r in matrix.rows if r.iteration <= stop]
    return float(np.mean(row_means))


def min_acc(matrix: AccuracyMatrix, at_iteration: Optional[int] = None) -> Optional[float]:
    """Mean over finished tasks of each task's minimum accuracy since it ended.

    None while only one task has been seen (no previous tasks exist).
    """
    row = matrix.row_at(at_iteration)
    k = row.task_id + 1
    if k < 2:
        return None
    minima = []
    for prev in range(k - 1):
        end = matrix.task_end.get(prev)
        if end is None:
            raise ValueError(f"task {prev} has no recorded end iteration")
        trace = [r.accuracies[prev] for r in matrix.rows if end < r.iteration <= row.iteration]
        if not trace:
            raise ValueError(f"no evaluation rows after task {prev} ended")
        minima.append(min(trace))
    return float(np.mean(minima))


def wc_acc(matrix: AccuracyMatrix, at_iteration: Optional[int] = None) -> float:
    """Convex mix of current-task accuracy and the previous-task minimum.

    (1/k) * current + (1 - 1/k) * min_acc; reduces to the current-task
    accuracy while k = 1.
    """
    row = matrix.row_at(at_iteration)
    k = row.task_id + 1
    current = row.accuracies[-1]
    if k < 2:
        return float(current)
    return float(current / k + (1.0 - 1.0 / k) * min_acc(matrix, at_iteration))


def rag(matrix: AccuracyMatrix, at_iteration: Optional[int] = None) -> Optional[float]:
    """Relative gap between average and worst-case accuracy, in percent."""
    row = matrix.row_at(at_iteration)
    avg = float(np.mean(row.accuracies))
    if avg == 0.0:
        return None
    return 100.0 * (avg - wc_acc(matrix, at_iteration)) / avg


def metrics_report(matrix: AccuracyMatrix, at_iteration: Optional[int] = None,
                   avg_acc: Optional[float] = None) -> MetricsReport:
    """Bundle the metric family at one iteration.

    ``avg_acc`` overrides the row's seen-task mean for reports where the
    final accuracy comes from a different split than the matrix.
    """
    row = matrix.row_at(at_iteration)
    return MetricsReport(
        avg_acc=float(np.mean(row.accuracies)) if avg_acc is None else float(avg_acc),
        aaa=aaa(matrix, at_iteration),
        min_acc=min_acc(matrix, at_iteration),
        wc_acc=wc_acc(matrix, at_iteration),
        rag=rag(matrix, at_iteration),
    )


@dataclass(frozen=True)
class TaskConfusionMatrix:
    """counts[i, j] = test examples of task i predicted as some class of task j."""

    counts: np.ndarray
    recency_bias: float     # fraction of all test examples predicted into the last task


def task_confusion(net: Network, test_sets: Sequence[tuple[np.ndarray, np.ndarray]],
                   task_class_ids: Sequence[Sequence[int]]) -> TaskConfusionMatrix:
    k = len(test_sets)
    class_to_task = {}
    for tid, classes in enumerate(task_class_ids):
        for c in classes:
            class_to_task[int(c)] = tid
    counts = np.zeros((k, k), dtype=np.int64)
    for tid, (x, y) in enumerate(test_sets):
        if len(y) == 0:
            raise ValueError(f"task {tid} has no test data")
        preds = predict_labels(net, x)
        for p in preds:
            counts[tid, class_to_task[int(p)]] += 1
    recency = float(counts[:, k - 1].sum() / counts.sum())
    return TaskConfusionMatrix(counts, recency)


@dataclass(frozen=True)
class StabilityTrace:
    """One task's accuracy over time with its boundary and post-boundary dip."""

    task_id: int
    iterations: tuple[int, ...]
    accuracies: tuple[float, ...]
    boundary_iteration: Optional[int]
    depth: Optional[float]            # accuracy at boundary minus minimum from boundary on


def stability_gap_trace(matrix: AccuracyMatrix, task_id: int) -> StabilityTrace:
    rows = [r for r in matrix.rows if len(r.accuracies) > task_id]
    if not rows:
        raise ValueError(f"task {task_id} has not been seen yet")
    iters = tuple(r.iteration for r in rows)
    accs = tuple(r.accuracies[task_id] for r in rows)
    boundary = matrix.task_end.get(task_id)
    depth = None
    if boundary is not None:
        window = [a for it, a in zip(iters, accs) if it >= boundary]
        at_boundary = next(a for it, a in zip(iters, accs) if it == boundary)
        depth = float(at_boundary - min(window))
    return StabilityTrace(task_id, iters, accs, boundary, depth)


# --- trace CSV format -------------------------------------------------------

TRACE_FIXED_COLUMNS = ["iteration", "minibatch", "current_task", "model_id",
                       "avg_acc", "aaa", "min_acc", "wc_acc", "rag"]


def trace_header(n_tasks: int) -> list[str]:
    return TRACE_FIXED_COLUMNS + [f"acc_task_{i}" for i in range(n_tasks)]


def trace_row(row: MatrixRow, model_id: str, matrix: AccuracyMatrix, n_tasks: int) -> list[str]:
    """One trace line; metrics recomputed at the row's iteration."""
    report = metrics_report(matrix, row.iteration)
    cells = [str(row.iteration), str(row.minibatch), str(row.task_id), model_id,
             repr(report.avg_acc), repr(report.aaa),
             "" if report.min_acc is None else repr(report.min_acc),
             repr(report.wc_acc),
             "" if report.rag is None else repr(report.rag)]
    accs = ["" for _ in range(n_tasks)]
    for i, a in enumerate(row.accuracies):
        accs[i] = repr(a)
    return cells + accs


def read_trace(path) -> dict[str, AccuracyMatrix]:
    """Rebuild one accuracy matrix per model_id from a trace CSV.

    Task end iterations are recovered from the task transitions in the
    rows, with the final row closing the last task.
    """
    matrices: dict[str, AccuracyMatrix] = {}
    last_seen: dict[str, MatrixRow] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRACE_FIXED_COLUMNS if reader.fieldnames is None or c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: trace is missing column {missing[0]!r}")
        acc_cols = [c for c in reader.fieldnames if c.startswith("acc_task_")]
        acc_cols.sort(key=lambda c: int(c.rsplit("_", 1)[1]))
        for rec in reader:
            model = rec["model_id"]
            matrix = matrices.setdefault(model, AccuracyMatrix())
            task_id = int(rec["current_task"])
            accs = [float(rec[c]) for c in acc_cols[:task_id + 1]]
            prev = last_seen.get(model)
            if prev is not None and task_id != prev.task_id:
                matrix.mark_task_end(prev.task_id, prev.iteration)
            matrix.append(int(rec["iteration"]), int(rec["minibatch"]), task_id, accs)
            last_seen[model] = matrix.rows[-1]
    for model, matrix in matrices.items():
        if matrix.rows:
            matrix.mark_task_end(matrix.rows[-1].task_id, matrix.rows[-1].iteration)
    return matrices


def write_confusion_csv(confusion: TaskConfusionMatrix, path) -> None:
    """Grid CSV with task ids on the header row and column."""
    k = confusion.counts.shape[0]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task"] + [str(j) for j in range(k)])
        for i in range(k):
            writer.writerow([str(i)] + [str(int(v)) for v in confusion.counts[i]])
