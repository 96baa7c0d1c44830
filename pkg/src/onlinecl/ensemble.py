"""Temporal-ensemble machinery over training-trajectory weights.

Three families of evaluation models built from one training run:

* a recursive exponential moving average of the weights, with a warmup
  momentum for the first iterations;
* a generalized weighted running ensemble: the normalized weighted sum of
  every model on the trajectory, under pluggable weighting schemes
  (uniform, linear, logarithmic, quadratic, or the EMA-equivalent
  multiplicative scheme), renormalized at every update so the stored
  vector never grows;
* a naive checkpoint ensemble that stores snapshots every few iterations
  and averages per-class probabilities at prediction time.

All accumulation is float64 regardless of the training dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .net import (
    LayoutError,
    Network,
    ParameterVector,
    predict_proba,
    save_checkpoint,
)


class EnsembleStateError(RuntimeError):
    """Operation requires state the ensemble does not have yet."""


# --- recursive EMA (with warmup) -----------------------------------------

@dataclass(frozen=True)
class EmaState:
    """Running exponential moving average of weights.

    new = momentum' * old + (1 - momentum') * current, where momentum' is
    ``warmup_momentum`` for the first ``warmup_iters`` updates and
    ``momentum`` afterwards.
    """

    parameters: Optional[ParameterVector]    # float64; None until first update when unseeded
    momentum: float
    warmup_momentum: float = 0.9
    warmup_iters: int = 0
    iteration: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if not 0.0 <= self.warmup_momentum <= 1.0:
            raise ValueError(f"warmup_momentum must be in [0, 1], got {self.warmup_momentum}")

    @staticmethod
    def from_init(theta0: Optional[ParameterVector], momentum: float,
                  warmup_momentum: float = 0.9, warmup_iters: int = 0) -> "EmaState":
        """Start from theta0 (the usual choice: the random init). Passing
        None defers seeding to the first update, i.e. theta0 = theta1."""
        params = theta0.astype(np.float64) if theta0 is not None else None
        return EmaState(params, momentum, warmup_momentum, warmup_iters)

    def network(self, layer_sizes: Sequence[int]) -> Network:
        if self.parameters is None:
            raise EnsembleStateError("EMA has no parameters yet")
        return Network(tuple(layer_sizes), self.parameters)


def ema_update(state: EmaState, theta_t: ParameterVector) -> EmaState:
    """One recursive EMA step; the effective momentum honors warmup."""
    if state.parameters is None:
        new = ParameterVector(np.asarray(theta_t.values, dtype=np.float64).copy(), theta_t.layout)
        return replace(state, parameters=new, iteration=state.iteration + 1)
    if state.parameters.layout != theta_t.layout:
        raise LayoutError("EMA layout does not match incoming parameters")
    lam = state.warmup_momentum if state.iteration < state.warmup_iters else state.momentum
    vals = lam * state.parameters.values + (1.0 - lam) * np.asarray(theta_t.values, dtype=np.float64)
    return replace(state, parameters=ParameterVector(vals, theta_t.layout),
                   iteration=state.iteration + 1)


# --- generalized weighted ensemble ----------------------------------------

SCHEME_KINDS = ("ema", "uniform", "linear", "logarithmic", "quadratic")


@dataclass(frozen=True)
class WeightScheme:
    """Per-iteration weight rule for the running weighted ensemble.

    With w_1 = 1 for every scheme, the next weight is:
    ema -> w_{i-1}/momentum; uniform -> 1; linear -> i;
    logarithmic -> w_{i-1} + ln(i); quadratic -> w_{i-1} + i^2.
    """

    kind: str
    momentum: float = 0.99

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "ema" and not 0.0 < self.momentum < 1.0:
            raise ValueError(f"ema scheme needs momentum in (0, 1), got {self.momentum}")

    def label(self) -> str:
        return f"ema_{self.momentum:g}" if self.kind == "ema" else self.kind

    def next_weight(self, last_weight: float, i: int) -> float:
        """Weight for model i (1-based). ``last_weight`` is w_{i-1}."""
        if i <= 1:
            return 1.0
        if self.kind == "ema":
            return last_weight / self.momentum
        if self.kind == "uniform":
            return 1.0
        if self.kind == "linear":
            return float(i)
        if self.kind == "logarithmic":
            return last_weight + math.log(i)
        return last_weight + float(i) * float(i)

    def weights(self, t: int) -> np.ndarray:
        """Explicit w_1..w_t, for oracles and small-t inspection."""
        out = np.empty(t)
        w = 1.0
        for i in range(1, t + 1):
            w = self.next_weight(w, i)
            out[i - 1] = w
        return out


class EnsembleAccumulator:
    """Running weighted mean of all parameters seen so far.

    The stored vector is renormalized by the cumulative weight at every
    update, so magnitudes stay bounded even for fast-growing schemes. For
    the multiplicative ema scheme the weight state itself is rescaled each
    step (the recurrence is scale-free), keeping all floats conditioned.
    """

    def __init__(self, scheme: WeightScheme):
        self.scheme = scheme
        self.weighted_mean: Optional[ParameterVector] = None   # float64, already normalized
        self.weight_total = 0.0
        self.last_weight = 0.0
        self.iteration = 0

    def update(self, theta_t: ParameterVector) -> None:
        i = self.iteration + 1
        w = self.scheme.next_weight(self.last_weight, i)
        if not math.isfinite(w):
            raise ArithmeticError(f"non-finite ensemble weight at iteration {i}")
        theta64 = np.asarray(theta_t.values, dtype=np.float64)
        if self.weighted_mean is None:
            self.weighted_mean = ParameterVector(theta64.copy(), theta_t.layout)
            self.weight_total = w
        else:
            if self.weighted_mean.layout != theta_t.layout:
                raise LayoutError("accumulator layout does not match incoming parameters")
            r = w / self.weight_total
            vals = (self.weighted_mean.values + r * theta64) / (1.0 + r)
            self.weighted_mean = ParameterVector(vals, theta_t.layout)
            self.weight_total += w
        self.last_weight = w
        if self.scheme.kind == "ema":
            self.last_weight /= self.weight_total
            self.weight_total = 1.0
        self.iteration = i

    def extract(self) -> ParameterVector:
        """The normalized ensemble model; idempotent."""
        if self.weighted_mean is None:
            raise EnsembleStateError("cannot extract from an ensemble with no updates")
        return self.weighted_mean.copy()

    def network(self, layer_sizes: Sequence[int]) -> Network:
        return Network(tuple(layer_sizes), self.extract())


def ensemble_update(acc: EnsembleAccumulator, theta_t: ParameterVector) -> EnsembleAccumulator:
    acc.update(theta_t)
    return acc


def ensemble_extract(acc: EnsembleAccumulator, layer_sizes: Sequence[int]) -> Network:
    return acc.network(layer_sizes)


def task_weight_mass(momentum: float, iters_per_task: int, n_tasks_back: int) -> float:
    """Total EMA weight mass carried by one task's iterations.

    Measured at a task end, the task ``n_tasks_back`` positions before the
    end (0 = most recent) holds mass momentum^(k*L) * (1 - momentum^L)
    under the explicit-form weights (1-momentum)*momentum^(t-i).
    """
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must be in (0, 1), got {momentum}")
    if iters_per_task < 1 or n_tasks_back < 0:
        raise ValueError("iters_per_task must be >= 1 and n_tasks_back >= 0")
    per_task = 1.0 - momentum ** iters_per_task
    return momentum ** (n_tasks_back * iters_per_task) * per_task


# --- naive checkpoint ensemble ---------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    task_id: int
    parameters: ParameterVector


class CheckpointStore:
    """Snapshots of training weights saved every ``save_every`` iterations.

    When a directory is set, each snapshot is also persisted in the binary
    checkpoint format as ckpt_{iteration:07}.bin next to a manifest CSV of
    (iteration, task_id) pairs.
    """

    def __init__(self, save_every: int = 10, directory=None):
        if save_every < 1:
            raise ValueError(f"save_every must be >= 1, got {save_every}")
        self.save_every = save_every
        self.directory = Path(directory) if directory is not None else None
        self.checkpoints: list[Checkpoint] = []
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def save(self, iteration: int, task_id: int, params: ParameterVector) -> None:
        if iteration % self.save_every != 0:
            raise ValueError(
                f"iteration {iteration} is not a multiple of save_every {self.save_every}")
        if self.checkpoints and iteration <= self.checkpoints[-1].iteration:
            raise EnsembleStateError(
                f"iteration {iteration} is not after last saved {self.checkpoints[-1].iteration}")
        snap = ParameterVector(np.asarray(params.values, dtype=np.float32).copy(), params.layout)
        self.checkpoints.append(Checkpoint(iteration, task_id, snap))
        if self.directory is not None:
            save_checkpoint(snap, self.directory / f"ckpt_{iteration:07}.bin")
            manifest = self.directory / "manifest.csv"
            new_file = not manifest.exists()
            with open(manifest, "a", encoding="utf-8") as fh:
                if new_file:
                    fh.write("iteration,task_id\n")
                fh.write(f"{iteration},{task_id}\n")

    def __len__(self) -> int:
        return len(self.checkpoints)

    def task_ids(self) -> list[int]:
        return sorted({c.task_id for c in self.checkpoints})


def checkpoint_save(store: CheckpointStore, iteration: int, task_id: int,
                    params: ParameterVector) -> CheckpointStore:
    store.save(iteration, task_id, params)
    return store


def sample_covering_ensemble(store: CheckpointStore, n_models: int = 20,
                             n_covered_tasks: int = 1,
                             seed: int | np.random.Generator = 0) -> list[Checkpoint]:
    """Sample an ensemble whose members span the last ``n_covered_tasks`` tasks.

    Picks n_models - 1 checkpoints uniformly without replacement from the
    covered tasks' snapshots and always appends the final training
    checkpoint.
    """
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    tasks_present = store.task_ids()
    if n_covered_tasks < 1 or n_covered_tasks > len(tasks_present):
        raise ValueError(
            f"store covers {len(tasks_present)} tasks, cannot cover {n_covered_tasks}")
    covered = set(tasks_present[-n_covered_tasks:])
    final = store.checkpoints[-1]
    pool = [c for c in store.checkpoints if c.task_id in covered and c is not final]
    if len(pool) < n_models - 1:
        raise ValueError(
            f"need {n_models - 1} checkpoints in the covered tasks, have {len(pool)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=n_models - 1, replace=False)
    return [pool[int(i)] for i in idx] + [final]


def naive_ensemble_predict(members: Sequence[tuple[ParameterVector, Sequence[int]]],
                           features: np.ndarray,
                           layer_sizes: Sequence[int]) -> np.ndarray:
    """Per-class mean probability over the members able to predict each class.

    Each member comes with the set of classes it had seen by its save
    point; a class's score is the sum of that class's probabilities over
    predicting members divided by their count. Classes no member predicts
    score zero. The output is a score vector (it need not sum to one);
    predictions are its argmax.
    """
    if not members:
        raise ValueError("naive ensemble needs at least one member")
    feats = np.asarray(features)
    single = feats.ndim == 1
    if single:
        feats = feats[None, :]
    n_classes = int(layer_sizes[-1])
    scores = np.zeros((feats.shape[0], n_classes))
    counts = np.zeros(n_classes)
    for params, class_ids in members:
        probs = predict_proba(Network(tuple(layer_sizes), params), feats)
        mask = np.zeros(n_classes)
        mask[list(class_ids)] = 1.0
        scores += probs * mask
        counts += mask
    out = np.divide(scores, counts, out=np.zeros_like(scores), where=counts > 0)
    return out[0] if single else out
