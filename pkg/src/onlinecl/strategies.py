"""Replay-based online training strategies.

Every strategy consumes one half-batch of current-stream examples at a
time, fills the other half from a bounded reservoir buffer, and never
sees task boundaries. One call performs several SGD iterations; each
iteration is reported through ``on_step`` so evaluation-side ensembles
can track the full trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .net import (
    CrossEntropy,
    DistillTo,
    MaskedCrossEntropy,
    MseOnLogits,
    Network,
    ParameterVector,
    SgdConfig,
    forward,
    loss_and_grad,
    sgd_step,
)
from .stream import Example


@dataclass
class BufferEntry:
    example: Example
    logits: Optional[np.ndarray] = None


class ReplayBuffer:
    """Bounded exemplar store with reservoir-sampling insertion.

    After N >= capacity insertions each candidate is retained with
    probability capacity/N, independent of arrival order.
    """

    def __init__(self, capacity: int, seed: int | np.random.Generator = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[BufferEntry] = []
        self.seen_count = 0
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, example: Example, logits: Optional[np.ndarray] = None):
        self.seen_count += 1
        entry = BufferEntry(example, logits)
        if len(self.entries) < self.capacity:
            self.entries.append(entry)
        else:
            # keep with prob capacity/seen_count, landing on a uniform slot
            j = int(self._rng.integers(self.seen_count))
            if j < self.capacity:
                self.entries[j] = entry

    def sample(self, n: int, seed: int | np.random.Generator) -> list[BufferEntry]:
        """n entries, without replacement when n <= len, else with replacement.

        An empty buffer yields an empty list: on the first task there is
        nothing to replay and strategies train on the current half alone.
        """
        if not self.entries or n <= 0:
            return []
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        idx = rng.choice(len(self.entries), size=n, replace=n > len(self.entries))
        return [self.entries[i] for i in idx]


def _entries_to_arrays(entries: list[BufferEntry]):
    x = np.stack([e.example.features for e in entries])
    y = np.array([e.example.label for e in entries], dtype=np.int64)
    return x, y


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "er"                 # er | er_ace | mir | der | rar
    der_alpha: float = 0.1
    der_beta: float = 0.5
    rar_passes: int = 3
    rar_noise_sigma: float = 0.1
    mir_candidates: int = 64
    distill_alpha: float = 0.0       # > 0 enables mean-teacher distillation
    resample_replay_each_pass: bool = True

    def validate(self, batch_size: int | None = None):
        if self.kind not in ("er", "er_ace", "mir", "der", "rar"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        for name in ("der_alpha", "der_beta", "rar_noise_sigma", "distill_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.rar_passes < 1:
            raise ValueError("rar_passes must be >= 1")
        if batch_size is not None and self.mir_candidates < batch_size // 2:
            raise ValueError("mir_candidates must be at least half the batch size")


def _per_entry_ce(net: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy, used to score replay candidates."""
    logits = forward(net, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y]


def mir_select(net: Network, buf: ReplayBuffer, current_x: np.ndarray, current_y: np.ndarray,
               cfg: SgdConfig, n: int, n_candidates: int = 64,
               rng: int | np.random.Generator = 0) -> list[BufferEntry]:
    """Pick the buffer entries most penalised by a virtual step on current data.

    Scores n_candidates uniformly sampled entries by loss-after minus
    loss-before the virtual update; returns the top n by descending score,
    ties broken by buffer index ascending. The real network is untouched.
    """
    if not buf.entries:
        return []
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_cand = min(n_candidates, len(buf.entries))
    cand_idx = sorted(int(i) for i in gen.choice(len(buf.entries), size=n_cand, replace=False))
    entries = [buf.entries[i] for i in cand_idx]
    x, y = _entries_to_arrays(entries)

    _, grad = loss_and_grad(net, current_x, current_y, CrossEntropy())
    virtual = sgd_step(net, grad, cfg)
    scores = _per_entry_ce(virtual, x, y) - _per_entry_ce(net, x, y)

    ranked = sorted(range(n_cand), key=lambda i: (-scores[i], cand_idx[i]))
    return [entries[i] for i in ranked[:n]]


def _combine(terms):
    """Weighted sum of (coeff, loss, grad) triples."""
    total_loss = 0.0
    total_grad: ParameterVector | None = None
    for coeff, loss, grad in terms:
        total_loss += coeff * loss
        scaled = coeff * grad
        total_grad = scaled if total_grad is None else total_grad + scaled
    return total_loss, total_grad


def _strategy_loss(cfg: StrategyConfig, net: Network,
                   cur_x, cur_y, rep: list[BufferEntry],
                   teacher: Optional[Network]):
    """Per-iteration loss/grad for er, er_ace, mir and der."""
    terms = []
    if cfg.kind in ("er", "mir"):
        if rep:
            rx, ry = _entries_to_arrays(rep)
            x = np.concatenate([cur_x, rx])
            y = np.concatenate([cur_y, ry])
        else:
            x, y = cur_x, cur_y
        terms.append((1.0, *loss_and_grad(net, x, y, CrossEntropy())))
        all_x = x
    elif cfg.kind == "er_ace":
        mask = frozenset(int(c) for c in np.unique(cur_y))
        terms.append((1.0, *loss_and_grad(net, cur_x, cur_y, MaskedCrossEntropy(mask))))
        all_x = cur_x
        if rep:
            rx, ry = _entries_to_arrays(rep)
            terms.append((1.0, *loss_and_grad(net, rx, ry, CrossEntropy())))
            all_x = np.concatenate([cur_x, rx])
    elif cfg.kind == "der":
        terms.append((1.0, *loss_and_grad(net, cur_x, cur_y, CrossEntropy())))
        all_x = cur_x
        if rep:
            if any(e.logits is None for e in rep):
                raise ValueError("der replay requires stored logits on every buffer entry")
            rx, ry = _entries_to_arrays(rep)
            targets = np.stack([e.logits for e in rep])
            terms.append((cfg.der_alpha, *loss_and_grad(net, rx, None, MseOnLogits(targets))))
            terms.append((cfg.der_beta, *loss_and_grad(net, rx, ry, CrossEntropy())))
            all_x = np.concatenate([cur_x, rx])
    else:
        raise ValueError(f"no combined loss for strategy {cfg.kind!r}")

    if cfg.distill_alpha > 0 and teacher is not None:
        t_logits = forward(teacher, all_x)
        terms.append((cfg.distill_alpha, *loss_and_grad(net, all_x, None, DistillTo(t_logits))))
    return _combine(terms)


def mtd_loss(net: Network, ema_net: Network, features: np.ndarray, labels: np.ndarray,
             distill_alpha: float):
    """Cross-entropy plus distillation toward the frozen EMA teacher.

    loss = CE(f(x), y) + alpha * CE(f(x), softmax(f_ema(x))); no gradient
    flows through the teacher.
    """
    if ema_net.parameters.layout != net.parameters.layout:
        from .net import LayoutError
        raise LayoutError("teacher layout does not match student")
    terms = [(1.0, *loss_and_grad(net, features, labels, CrossEntropy()))]
    if distill_alpha > 0:
        teacher_logits = forward(ema_net, features)
        terms.append((distill_alpha, *loss_and_grad(net, features, None, DistillTo(teacher_logits))))
    return _combine(terms)


def _insert_current(cfg: StrategyConfig, net: Network, buf: ReplayBuffer,
                    cur_x: np.ndarray, cur_y: np.ndarray):
    """Store the current half after training on it; der also stores logits."""
    logits = forward(net, cur_x) if cfg.kind == "der" else None
    for i in range(len(cur_y)):
        row_logits = logits[i].astype(np.float32) if logits is not None else None
        buf.insert(Example(np.array(cur_x[i]), int(cur_y[i])), row_logits)


def rar_train(net: Network, buf: ReplayBuffer, cur_x: np.ndarray, cur_y: np.ndarray,
              cfg: StrategyConfig, sgd: SgdConfig, rng: np.random.Generator,
              teacher: Optional[Network] = None,
              on_step: Optional[Callable[[Network], None]] = None):
    """Repeated rehearsal: each pass resamples replay and perturbs all features."""
    half = len(cur_y)
    steps = 0
    for _ in range(cfg.rar_passes):
        rep = buf.sample(half, rng)
        if rep:
            rx, ry = _entries_to_arrays(rep)
            x = np.concatenate([cur_x, rx])
            y = np.concatenate([cur_y, ry])
        else:
            x, y = cur_x, cur_y
        if cfg.rar_noise_sigma > 0:
            x = x + cfg.rar_noise_sigma * rng.standard_normal(x.shape)
        terms = [(1.0, *loss_and_grad(net, x, y, CrossEntropy()))]
        if cfg.distill_alpha > 0 and teacher is not None:
            terms.append((cfg.distill_alpha, *loss_and_grad(net, x, None, DistillTo(forward(teacher, x)))))
        _, grad = _combine(terms)
        net = sgd_step(net, grad, sgd)
        steps += 1
        if on_step is not None:
            on_step(net)
    _insert_current(cfg, net, buf, cur_x, cur_y)
    return net, steps


def train_on_batch(cfg: StrategyConfig, net: Network, buf: ReplayBuffer,
                   cur_x: np.ndarray, cur_y: np.ndarray,
                   sgd: SgdConfig, rng: np.random.Generator,
                   teacher: Optional[Network] = None,
                   on_step: Optional[Callable[[Network], None]] = None):
    """Run one strategy update on a half-batch of current-task examples.

    Returns (new network, optimizer iterations performed). The buffer is
    updated in place: the current examples are inserted after training.
    ``on_step`` fires once per SGD iteration with the post-step network.
    """
    if cfg.kind == "rar":
        return rar_train(net, buf, cur_x, cur_y, cfg, sgd, rng, teacher, on_step)

    half = len(cur_y)
    replay: list[BufferEntry] | None = None
    steps = 0
    for _ in range(sgd.passes_per_batch):
        if replay is None or cfg.resample_replay_each_pass:
            if cfg.kind == "mir":
                replay = mir_select(net, buf, cur_x, cur_y, sgd, half, cfg.mir_candidates, rng)
            else:
                replay = buf.sample(half, rng)
        _, grad = _strategy_loss(cfg, net, cur_x, cur_y, replay, teacher)
        net = sgd_step(net, grad, sgd)
        steps += 1
        if on_step is not None:
            on_step(net)
    _insert_current(cfg, net, buf, cur_x, cur_y)
    return net, steps
