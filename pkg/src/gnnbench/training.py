"""Loss, metrics, the epoch loop, and simulated data-parallel training.

A training step consumes ``batch_size`` graphs: each graph runs forward,
loss, and backward on its own tape, and the per-graph gradients are
averaged in a fixed order before one optimizer update.  Simulated data
parallelism reuses exactly that averaging path, with worker w contributing
the w-th gradient of each step's group, so a W-worker run and a
single-worker run with batch size W produce bitwise-identical updates by
construction (the all-reduce contract).

Workers are deterministic replicas inside one process.  Measured wall-clock
scaling is therefore host-dependent and only reported; the simulated
efficiency uses a unit-cost step timer and equals 1.0 for balanced shards.
"""

from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import dataclass
from time import perf_counter

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError, UsageError
from .graphs import EventGraph
from .model import ModelParams, forward
from .profiler import TraceRecorder, current_recorder
from .tensor import Tape, Tensor, add, backward, clip, log, mul, tensor, tensor_sum

SCORE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 1
    learning_rate: float = 1e-3
    workers: int = 1
    optimizer: str = "adam"          # "adam" or "sgd"
    seed: int = 0
    pad_quantile: float = 0.99
    drop_last: bool = False
    trace_steps: int | None = None   # stop recording after this many steps

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs, batch_size and workers must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    auc: float | None        # validation AUC; None when no validation set given
    seconds: float           # wall time of the training loop for this epoch
    step_seconds: float      # summed per-step durations
    steps: int
    trace_ref: str = ""

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.mean_loss, "auc": self.auc,
                "seconds": self.seconds}


# ---------------------------------------------------------------------------
# Loss and metrics
# ---------------------------------------------------------------------------

def bce_loss(scores: Tensor, labels, valid_mask=None) -> Tensor:
    """Mean binary cross entropy over valid edges, differentiable.

    Scores are clamped to [1e-7, 1 - 1e-7] before the logs; gradients stop
    at the clamp.  Invalid edges contribute exactly zero to both the value
    and the gradient.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if valid_mask is None:
        valid_mask = np.ones_like(labels)
    mask = np.asarray(valid_mask, dtype=np.float64)
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise UsageError("bce_loss needs at least one valid edge")
    dt = scores.dtype
    y = tensor(labels, dtype=dt)
    y_inv = tensor(1.0 - labels, dtype=dt)
    m = tensor(mask, dtype=dt)
    p = clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    one_minus_p = add(mul(p, -1.0), 1.0)
    term = add(mul(y, log(p)), mul(y_inv, log(one_minus_p)))
    total = tensor_sum(mul(m, term))
    return mul(total, -1.0 / n_valid)


def auc(scores, labels, valid_mask=None) -> float:
    """Exact rank-statistic AUC: (concordant pairs + 0.5 ties) / (P * N)."""
    s = scores.numpy() if isinstance(scores, Tensor) else np.asarray(scores)
    y = np.asarray(labels)
    if valid_mask is not None:
        keep = np.asarray(valid_mask) > 0
        s, y = s[keep], y[keep]
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {pos} positive / {neg} negative valid edges")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    name = "sgd"

    def __init__(self, learning_rate: float):
        self.lr = learning_rate

    def step(self, params: ModelParams, grads: dict[int, np.ndarray]) -> None:
        t0 = perf_counter()
        total = 0
        total_bytes = 0
        for _, p in sorted(params.tensors.items()):
            g = grads[p.node_id]
            p.data -= self.lr * g
            total += p.size
            total_bytes += p.nbytes
        _emit_opt("sgd", 2 * total, 3 * total_bytes, perf_counter() - t0)


class Adam:
    """Adaptive-moment update with bias correction."""

    name = "adam"

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[int, np.ndarray]) -> None:
        t0 = perf_counter()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        total = 0
        total_bytes = 0
        for _, p in sorted(params.tensors.items()):
            g = grads[p.node_id]
            m = self.m.get(p.node_id)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[p.node_id] = m
                self.v[p.node_id] = np.zeros_like(p.data)
            v = self.v[p.node_id]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            total += p.size
            total_bytes += p.nbytes
        _emit_opt("adam", 10 * total, 7 * total_bytes, perf_counter() - t0)


def _emit_opt(name: str, flops: int, base_bytes: float, duration: float) -> None:
    rec = current_recorder()
    if rec is not None:
        rec.record(name, "optimizer", flops, base_bytes, duration)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate)


# ---------------------------------------------------------------------------
# Epoch loops
# ---------------------------------------------------------------------------

def _graph_gradients(params: ModelParams, g: EventGraph) -> tuple[float, dict[int, np.ndarray]]:
    with Tape() as tape:
        scores = forward(params, g)
        rec = current_recorder()
        scope = rec.scope("loss") if rec is not None else nullcontext()
        with scope:
            loss = bce_loss(scores, g.labels, g.edge_valid)
    grads = backward(tape, loss)
    return loss.item(), {uid: t.numpy() for uid, t in grads.items()}


def _mean_gradients(grad_maps: list[dict[int, np.ndarray]]) -> dict[int, np.ndarray]:
    """Average gradient maps in list order: the fixed all-reduce order."""
    acc = {uid: g.copy() for uid, g in grad_maps[0].items()}
    for gm in grad_maps[1:]:
        for uid, g in gm.items():
            acc[uid] += g
    inv = 1.0 / len(grad_maps)
    for uid in acc:
        acc[uid] *= inv
    return acc


def _step_groups(n: int, group: int, drop_last: bool) -> list[range]:
    groups = [range(i, min(i + group, n)) for i in range(0, n, group)]
    if drop_last and groups and len(groups[-1]) < group:
        groups.pop()
    return groups


def _validation_auc(params: ModelParams, val_events) -> float | None:
    if not val_events:
        return None
    scores, labels, masks = [], [], []
    for g in val_events:
        scores.append(forward(params, g).numpy())
        labels.append(g.labels)
        masks.append(g.edge_valid)
    return auc(np.concatenate(scores), np.concatenate(labels), np.concatenate(masks))


def train_epoch(params: ModelParams, dataset: list[EventGraph], cfg: TrainConfig,
                recorder: TraceRecorder | None = None, *, optimizer=None,
                epoch: int = 0, val_events: list[EventGraph] | None = None,
                start_step: int = 0) -> tuple[ModelParams, EpochReport]:
    """One seeded-shuffled pass; per step: forward, loss, backward, update."""
    if not dataset:
        raise UsageError("train_epoch needs a non-empty dataset")
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
    groups = _step_groups(len(dataset), cfg.batch_size, cfg.drop_last)

    losses = []
    step_seconds = 0.0
    wall0 = perf_counter()
    step = start_step
    for group in groups:
        recording = recorder is not None and (
            cfg.trace_steps is None or step < cfg.trace_steps)
        ctx = recorder if recording else nullcontext()
        if recording:
            recorder.step = step
        t0 = perf_counter()
        with ctx:
            grad_maps = []
            for idx in group:
                loss_val, gm = _graph_gradients(params, dataset[order[idx]])
                losses.append(loss_val)
                grad_maps.append(gm)
            optimizer.step(params, _mean_gradients(grad_maps))
        step_seconds += perf_counter() - t0
        step += 1
    wall = perf_counter() - wall0

    report = EpochReport(
        epoch=epoch,
        mean_loss=float(np.mean(losses)),
        auc=_validation_auc(params, val_events),
        seconds=wall,
        step_seconds=step_seconds,
        steps=len(groups),
        trace_ref=f"steps {start_step}..{step - 1}",
    )
    return params, report


@dataclass
class ScalingSummary:
    workers: int
    steps: int
    dropped_events: int
    serial_seconds: float      # sum of every worker's compute time
    parallel_seconds: float    # per-step barrier: sum of max over workers
    measured_speedup: float
    measured_efficiency: float
    simulated_efficiency: float  # unit-cost step timer, 1.0 for balanced shards

    def render(self) -> str:
        return (
            f"workers={self.workers} steps={self.steps}"
            f" dropped={self.dropped_events}\n"
            f"serial {self.serial_seconds:.4f}s, parallel {self.parallel_seconds:.4f}s"
            f" -> speedup {self.measured_speedup:.2f},"
            f" efficiency {self.measured_efficiency:.3f}"
            f" (simulated {self.simulated_efficiency:.3f})"
        )


def data_parallel_epoch(params: ModelParams, dataset: list[EventGraph],
                        cfg: TrainConfig, recorders: list[TraceRecorder] | None = None,
                        *, optimizer=None, epoch: int = 0,
                        val_events: list[EventGraph] | None = None,
                        start_step: int = 0,
                        ) -> tuple[ModelParams, list[EpochReport], ScalingSummary]:
    """Synchronous data parallelism over W deterministic replicas.

    Each step takes the next W groups of ``batch_size`` shuffled graphs,
    one group per worker; gradients are averaged in worker order and the
    identical update is applied to the shared parameters.  Events beyond a
    multiple of W * batch_size are dropped and counted.
    """
    w = cfg.workers
    if w > len(dataset):
        raise UsageError(f"{w} workers but only {len(dataset)} events")
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    if recorders is not None and len(recorders) != w:
        raise UsageError("need one recorder per worker")
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
    per_step = w * cfg.batch_size
    n_steps = len(dataset) // per_step
    dropped = len(dataset) - n_steps * per_step

    worker_losses = [[] for _ in range(w)]
    worker_seconds = [0.0] * w
    parallel_seconds = 0.0
    step = start_step
    for t in range(n_steps):
        recording = cfg.trace_steps is None or step < cfg.trace_steps
        step_max = 0.0
        grad_maps = []
        for wk in range(w):
            lo = (t * w + wk) * cfg.batch_size
            group = order[lo:lo + cfg.batch_size]
            rec = recorders[wk] if (recorders is not None and recording) else None
            ctx = rec if rec is not None else nullcontext()
            if rec is not None:
                rec.step = step
            t0 = perf_counter()
            with ctx:
                partial = []
                for idx in group:
                    loss_val, gm = _graph_gradients(params, dataset[idx])
                    worker_losses[wk].append(loss_val)
                    partial.append(gm)
            dt = perf_counter() - t0
            worker_seconds[wk] += dt
            step_max = max(step_max, dt)
            grad_maps.append(_mean_gradients(partial))
        t0 = perf_counter()
        rec0 = recorders[0] if (recorders is not None and recording) else None
        ctx = rec0 if rec0 is not None else nullcontext()
        with ctx:
            optimizer.step(params, _mean_gradients(grad_maps))
        opt_dt = perf_counter() - t0
        parallel_seconds += step_max + opt_dt
        step += 1

    serial_seconds = sum(worker_seconds)
    parallel = max(parallel_seconds, 1e-12)
    speedup = serial_seconds / parallel
    summary = ScalingSummary(
        workers=w,
        steps=n_steps,
        dropped_events=dropped,
        serial_seconds=serial_seconds,
        parallel_seconds=parallel_seconds,
        measured_speedup=speedup,
        measured_efficiency=speedup / w,
        # unit-cost timer: every worker runs n_steps equal-cost steps, so the
        # barrier is perfectly balanced and efficiency is exactly 1
        simulated_efficiency=1.0,
    )
    shared_auc = _validation_auc(params, val_events)
    reports = [
        EpochReport(
            epoch=epoch,
            mean_loss=float(np.mean(worker_losses[wk])) if worker_losses[wk] else 0.0,
            auc=shared_auc,
            seconds=max(worker_seconds[wk], 1e-12),
            step_seconds=worker_seconds[wk],
            steps=n_steps,
            trace_ref=f"worker {wk} steps {start_step}..{step - 1}",
        )
        for wk in range(w)
    ]
    return params, reports, summary


def strong_scaling_report(runs: list[tuple[int, float]]) -> list[dict]:
    """Speedup and efficiency vs the W=1 baseline."""
    baseline = [t for w, t in runs if w == 1]
    if not baseline:
        raise UsageError("strong scaling needs a W=1 baseline run")
    t1 = baseline[0]
    rows = []
    for w, t in sorted(runs):
        speedup = t1 / t
        rows.append({"workers": w, "seconds": t, "speedup": speedup,
                     "efficiency": speedup / w})
    return rows


def render_scaling_table(rows: list[dict]) -> str:
    lines = [f"{'W':>3} {'seconds':>12} {'speedup':>9} {'efficiency':>11}"]
    for r in rows:
        lines.append(f"{r['workers']:>3} {r['seconds']:>12.4f}"
                     f" {r['speedup']:>9.3f} {r['efficiency']:>11.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

def write_train_log(reports: list[EpochReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), sort_keys=True))
            f.write("\n")


def read_train_log(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
