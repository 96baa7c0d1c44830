"""Experiment orchestration: stream -> strategy -> ensembles -> evaluation.

One experiment trains once per seed, updates every tracked evaluation
model after every optimizer iteration, evaluates all of them on the
validation split after every unique mini-batch, and writes one trace CSV
per seed. Final-table numbers come from the test split; the continual
metrics come from the validation trace. Everything is deterministic per
seed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import EmaConfig, ExperimentConfig, config_to_dict
from .ensemble import (
    CheckpointStore,
    EmaState,
    EnsembleAccumulator,
    WeightScheme,
    ema_update,
    naive_ensemble_predict,
    sample_covering_ensemble,
)
from .evaluation import (
    AccuracyMatrix,
    MetricsReport,
    evaluate_model,
    metrics_report,
    task_confusion,
    trace_header,
    trace_row,
    read_trace,
    write_confusion_csv,
)
from .net import Network
from .strategies import ReplayBuffer, train_on_batch
from .stream import ConfigError, Stream, generate_synthetic_stream, load_file_stream, with_seed

OUTPUT_ROOT_ENV = "ONLINECL_OUTPUT_ROOT"

METRIC_KEYS = ("avg_acc", "aaa", "min_acc", "wc_acc", "rag", "recency_bias")


def resolve_output_dir(output_dir: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / output_dir if root else Path(output_dir)


class _EmaTracker:
    def __init__(self, init_params, momentum: float, ema_cfg: EmaConfig):
        self.state = EmaState.from_init(init_params, momentum,
                                        ema_cfg.warmup_momentum, ema_cfg.warmup_iters)

    def update(self, params):
        self.state = ema_update(self.state, params)

    def network(self, layer_sizes) -> Optional[Network]:
        if self.state.parameters is None:
            return None
        return self.state.network(layer_sizes)


class _AccumulatorTracker:
    def __init__(self, scheme: WeightScheme):
        self.acc = EnsembleAccumulator(scheme)

    def update(self, params):
        self.acc.update(params)

    def network(self, layer_sizes) -> Optional[Network]:
        if self.acc.weighted_mean is None:
            return None
        return self.acc.network(layer_sizes)


def _build_trackers(cfg: ExperimentConfig, init_params) -> dict:
    """Evaluation models: the configured EMA plus any extra schemes.

    An ema-kind scheme runs through the recursive EMA (with warmup); it
    reuses the plain "ema" label when its momentum matches the configured
    one, so tracking it twice costs nothing.
    """
    ema_init = None if cfg.ema.init_with_first_model else init_params
    trackers: dict[str, object] = {"ema": _EmaTracker(ema_init, cfg.ema.momentum, cfg.ema)}
    for scheme in cfg.schemes:
        if scheme.kind == "ema":
            label = "ema" if math.isclose(scheme.momentum, cfg.ema.momentum) else scheme.label()
            if label not in trackers:
                trackers[label] = _EmaTracker(ema_init, scheme.momentum, cfg.ema)
        else:
            trackers.setdefault(scheme.label(), _AccumulatorTracker(scheme))
    return trackers


def build_stream(cfg: ExperimentConfig, stream_seed: int) -> Stream:
    stream_cfg = with_seed(cfg.stream, stream_seed)
    if stream_cfg.source == "file_backed":
        return load_file_stream(cfg.dataset_path, stream_cfg, cfg.test_dataset_path)
    return generate_synthetic_stream(stream_cfg)


@dataclass
class SeedRunResult:
    seed: int
    matrices: dict[str, AccuracyMatrix]
    final: dict[str, dict[str, Optional[float]]]
    trace_path: str
    checkpoint_store: Optional[CheckpointStore] = None
    sweep_seed: Optional[int] = None


def _child_seeds(cfg: ExperimentConfig, run_seed: int) -> dict[str, int]:
    root = np.random.SeedSequence([int(run_seed), int(cfg.stream.seed)])
    names = ("stream", "init", "buffer", "strategy", "sweep")
    return {name: int(child.generate_state(1, np.uint64)[0])
            for name, child in zip(names, root.spawn(len(names)))}


def run_single_seed(cfg: ExperimentConfig, run_seed: int, seed_dir: Path) -> SeedRunResult:
    """Train once with one seed; returns matrices and final metrics per model."""
    cfg.validate()
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    kids = _child_seeds(cfg, run_seed)

    stream = build_stream(cfg, kids["stream"])
    sizes = cfg.layer_sizes()
    net = Network.init(sizes, np.random.default_rng(kids["init"]))
    buffer = ReplayBuffer(cfg.buffer_capacity, np.random.default_rng(kids["buffer"]))
    strategy_rng = np.random.default_rng(kids["strategy"])
    trackers = _build_trackers(cfg, net.parameters)
    model_order = ["train"] + list(trackers)
    matrices = {label: AccuracyMatrix() for label in model_order}

    store = None
    if cfg.checkpoint_every > 0:
        store = CheckpointStore(cfg.checkpoint_every, seed_dir / "checkpoints")

    val_sets = stream.val_sets()
    iteration = 0
    current_task = 0

    def on_step(stepped: Network):
        nonlocal iteration
        iteration += 1
        for tracker in trackers.values():
            tracker.update(stepped.parameters)
        if store is not None and iteration % cfg.checkpoint_every == 0:
            store.save(iteration, current_task, stepped.parameters)

    trace_path = seed_dir / "trace.csv"
    prev_task = None
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_header(cfg.stream.n_tasks))
        for mb in stream:
            if prev_task is not None and mb.task_id != prev_task:
                for matrix in matrices.values():
                    matrix.mark_task_end(prev_task, iteration)
            current_task = mb.task_id
            teacher = None
            if cfg.strategy.distill_alpha > 0:
                teacher = trackers["ema"].network(sizes)
            net, _ = train_on_batch(cfg.strategy, net, buffer, mb.features, mb.labels,
                                    cfg.sgd, strategy_rng, teacher, on_step)
            seen_sets = val_sets[:mb.task_id + 1]
            for label in model_order:
                model_net = net if label == "train" else trackers[label].network(sizes)
                accs = evaluate_model(model_net, seen_sets)
                matrix = matrices[label]
                matrix.append(iteration, mb.index, mb.task_id, accs)
                writer.writerow(trace_row(matrix.rows[-1], label, matrix, cfg.stream.n_tasks))
            prev_task = mb.task_id
        for matrix in matrices.values():
            matrix.mark_task_end(prev_task, iteration)

    test_sets = stream.test_sets()
    class_ids = stream.task_class_ids()
    final: dict[str, dict[str, Optional[float]]] = {}
    for label in model_order:
        model_net = net if label == "train" else trackers[label].network(sizes)
        test_accs = evaluate_model(model_net, test_sets)
        report = metrics_report(matrices[label], avg_acc=float(np.mean(test_accs)))
        confusion = task_confusion(model_net, test_sets, class_ids)
        write_confusion_csv(confusion, seed_dir / f"confusion_{label}.csv")
        final[label] = {
            "avg_acc": report.avg_acc,
            "aaa": report.aaa,
            "min_acc": report.min_acc,
            "wc_acc": report.wc_acc,
            "rag": report.rag,
            "recency_bias": confusion.recency_bias,
        }

    return SeedRunResult(
        seed=run_seed,
        matrices=matrices,
        final=final,
        trace_path=str(trace_path),
        checkpoint_store=store,
        sweep_seed=kids["sweep"],
    )


@dataclass
class RunSummary:
    config: dict
    seeds: list[int]
    per_seed: dict[int, dict[str, dict[str, Optional[float]]]]
    aggregate: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    def model_ids(self) -> list[str]:
        first = self.per_seed[self.seeds[0]]
        return list(first)

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config,
            "seeds": self.seeds,
            "per_seed": {str(s): v for s, v in self.per_seed.items()},
            "aggregate": self.aggregate,
        }, indent=2)


def _aggregate(per_seed: dict) -> dict:
    models = list(next(iter(per_seed.values())))
    out: dict[str, dict[str, dict[str, float]]] = {}
    for model in models:
        out[model] = {}
        for key in METRIC_KEYS:
            vals = [per_seed[s][model][key] for s in per_seed]
            vals = [v for v in vals if v is not None]
            if not vals:
                continue
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[model][key] = {"mean": mean, "std": std}
    return out


def _seed_dir(out_dir: Path, seed: int) -> Path:
    return out_dir / f"seed_{seed}"


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunSummary:
    """Full multi-seed run; writes per-seed traces and a summary JSON."""
    cfg.validate()
    out_dir = resolve_output_dir(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[int, SeedRunResult] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(run_single_seed, cfg, seed, _seed_dir(out_dir, seed))
                       for seed in cfg.seeds}
            results = {seed: fut.result() for seed, fut in futures.items()}
    else:
        for seed in cfg.seeds:
            results[seed] = run_single_seed(cfg, seed, _seed_dir(out_dir, seed))
    per_seed = {seed: results[seed].final for seed in cfg.seeds}
    summary = RunSummary(
        config=config_to_dict(cfg),
        seeds=list(cfg.seeds),
        per_seed=per_seed,
        aggregate=_aggregate(per_seed),
    )
    (out_dir / "summary.json").write_text(summary.to_json(), encoding="utf-8")
    return summary


# --- checkpoint-covering sweep ----------------------------------------------

def _covered_classes(class_ids: Sequence[Sequence[int]], task_id: int) -> tuple[int, ...]:
    out: list[int] = []
    for tid in range(task_id + 1):
        out.extend(int(c) for c in class_ids[tid])
    return tuple(out)


def run_covering_sweep(cfg: ExperimentConfig, n_models: int = 20,
                       ensembles_per_point: int = 10) -> list[dict]:
    """Naive-ensemble accuracy as a function of how many tasks the members span.

    Trains once per seed with checkpointing, then for every coverage level
    samples ``ensembles_per_point`` ensembles and evaluates them on the
    full test split. Each row carries mean, a normal-approximation
    confidence interval, and the multiplicative gain in percent over the
    seed's worst-performing coverage level.
    """
    cfg.validate()
    if cfg.checkpoint_every <= 0:
        raise ConfigError("covering sweep requires checkpoint_every > 0")
    out_dir = resolve_output_dir(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = cfg.layer_sizes()
    rows: list[dict] = []
    for seed in cfg.seeds:
        result = run_single_seed(cfg, seed, _seed_dir(out_dir, seed))
        store = result.checkpoint_store
        kids = _child_seeds(cfg, seed)
        stream = build_stream(cfg, kids["stream"])
        test_sets = stream.test_sets()
        test_x = np.concatenate([x for x, _ in test_sets])
        test_y = np.concatenate([y for _, y in test_sets])
        class_ids = stream.task_class_ids()
        sweep_rng = np.random.default_rng(result.sweep_seed)
        seed_rows = []
        for n_cov in range(1, cfg.stream.n_tasks + 1):
            accs = []
            for _ in range(ensembles_per_point):
                members = sample_covering_ensemble(store, n_models, n_cov, sweep_rng)
                tuples = [(c.parameters, _covered_classes(class_ids, c.task_id)) for c in members]
                scores = naive_ensemble_predict(tuples, test_x, sizes)
                accs.append(float(np.mean(np.argmax(scores, axis=1) == test_y)))
            mean = float(np.mean(accs))
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
            ci = 1.96 * std / math.sqrt(len(accs))
            seed_rows.append({"seed": seed, "n_covered_tasks": n_cov, "mean_acc": mean,
                              "ci_low": mean - ci, "ci_high": mean + ci})
        worst = min(r["mean_acc"] for r in seed_rows)
        for r in seed_rows:
            r["rel_gain"] = 0.0 if worst == 0 else 100.0 * (r["mean_acc"] / worst - 1.0)
        rows.extend(seed_rows)
    columns = ["seed", "n_covered_tasks", "mean_acc", "ci_low", "ci_high", "rel_gain"]
    with open(out_dir / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                         for r in rows)
    return rows


def run_scheme_comparison(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Final test accuracy per weighting scheme, all sharing one training run.

    Emits one row per tracked model plus the no-ensemble train row.
    """
    if not cfg.schemes:
        raise ConfigError("scheme comparison needs a non-empty schemes list")
    summary = run_experiment(cfg, workers=workers)
    out_dir = resolve_output_dir(cfg.output_dir)
    rows = []
    for model in summary.model_ids():
        agg = summary.aggregate[model]["avg_acc"]
        rows.append({"model_id": model, "strategy": cfg.strategy.kind,
                     "avg_acc_mean": agg["mean"], "avg_acc_std": agg["std"]})
    with open(out_dir / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model_id", "strategy", "avg_acc_mean", "avg_acc_std"])
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                         for r in rows)
    return rows


# --- plot-ready exports -------------------------------------------------------

class TraceSchemaError(ValueError):
    """A trace file is missing a required column."""


def _read_trace_rows(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["iteration", "minibatch", "current_task", "model_id", "aaa", "wc_acc"]
        for col in required:
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise TraceSchemaError(f"{path}: missing column {col!r}")
        return list(reader)


def _write_plot_csv(path, comment_lines: list[str], columns: list[str], rows: list[dict]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in comment_lines:
            fh.write(f"# {line}\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def emit_plot_data(trace_paths: Sequence, out_dir, zoom_task: int = 1,
                   zoom_window: int = 30) -> dict[str, str]:
    """Reshape trace CSVs into per-figure files.

    Produces task-accuracy-over-time, AAA-over-time and WC-ACC-over-time
    curves plus a stability zoom of +-zoom_window evaluations around the
    start of ``zoom_task``. Every output documents its columns in header
    comments. Returns the written paths keyed by figure name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acc_rows, aaa_rows, wc_rows, zoom_rows = [], [], [], []
    for path in trace_paths:
        source = Path(path).stem if Path(path).stem != "trace" else Path(path).parent.name
        rows = _read_trace_rows(path)
        boundary_mb = None
        for rec in rows:
            if int(rec["current_task"]) == zoom_task:
                boundary_mb = int(rec["minibatch"])
                break
        for rec in rows:
            base = {"source": source, "model_id": rec["model_id"],
                    "iteration": rec["iteration"], "minibatch": rec["minibatch"]}
            aaa_rows.append({**base, "aaa": rec["aaa"]})
            wc_rows.append({**base, "wc_acc": rec["wc_acc"]})
            for col, val in rec.items():
                if col.startswith("acc_task_") and val != "":
                    task = int(col.rsplit("_", 1)[1])
                    acc_rows.append({**base, "task": task, "acc": val})
                    if (boundary_mb is not None
                            and abs(int(rec["minibatch"]) - boundary_mb) <= zoom_window):
                        zoom_rows.append({**base, "current_task": rec["current_task"],
                                          "task": task, "acc": val})
    outputs = {
        "task_accuracy_over_time": (
            ["per-task validation accuracy curves",
             "columns: source,model_id,iteration,minibatch,task,acc"],
            ["source", "model_id", "iteration", "minibatch", "task", "acc"], acc_rows),
        "aaa_over_time": (
            ["average anytime accuracy curve",
             "columns: source,model_id,iteration,minibatch,aaa"],
            ["source", "model_id", "iteration", "minibatch", "aaa"], aaa_rows),
        "wc_acc_over_time": (
            ["worst-case accuracy curve",
             "columns: source,model_id,iteration,minibatch,wc_acc"],
            ["source", "model_id", "iteration", "minibatch", "wc_acc"], wc_rows),
        "stability_zoom": (
            [f"per-task accuracy within +-{zoom_window} evaluations of the start of task {zoom_task}",
             "columns: source,model_id,iteration,minibatch,current_task,task,acc"],
            ["source", "model_id", "iteration", "minibatch", "current_task", "task", "acc"], zoom_rows),
    }
    written = {}
    for name, (comments, columns, rows) in outputs.items():
        path = out_dir / f"{name}.csv"
        _write_plot_csv(path, comments, columns, rows)
        written[name] = str(path)
    return written


def recompute_metrics(trace_path) -> dict[str, MetricsReport]:
    """Final metric family per model_id, recomputed from a stored trace."""
    matrices = read_trace(trace_path)
    return {model: metrics_report(matrix) for model, matrix in matrices.items()}
