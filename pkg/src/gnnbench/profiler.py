"""Per-operation instrumentation and trace analysis.

Every tensor operation executed while a :class:`TraceRecorder` is active
emits one :class:`OpRecord` carrying its FLOP count, modeled memory traffic
per cache level, and measured wall duration.  The analysis functions in this
module turn a finished :class:`Trace` into the reports a performance study
needs: a kernel ranking by total duration, a time breakdown by operation
category, FLOP utilization against a device's peak, and a summary of the
zero-FLOP (pure data movement) kernels.

Durations come from a monotonic high-resolution clock around each op.
Records under a microsecond keep their measured value; desk-scale durations
are noisy, so tests should assert on counts and FLOPs, never on durations.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import UsageError

CATEGORIES = ("matmul", "segment-sum", "concat-slice", "elementwise", "optimizer", "other")

# Smallest duration a record may carry.  The clock can return identical
# ticks for back-to-back calls; a strictly positive duration keeps
# utilization and share arithmetic well defined without flooring anything
# measurably large.
MIN_DURATION_S = 1e-9


@dataclass(slots=True)
class OpRecord:
    """One executed operation: what it was, what it cost, when it ran."""

    op: str                 # kernel name, e.g. "interaction/matmul" or "matmul-grad"
    category: str           # one of CATEGORIES, optionally with a "-grad" suffix
    flops: int
    l1_bytes: float         # modeled traffic at each memory level
    l2_bytes: float
    hbm_bytes: float
    duration_s: float
    step: int = 0

    def bytes_at(self, level: str) -> float:
        if level == "l1":
            return self.l1_bytes
        if level == "l2":
            return self.l2_bytes
        if level == "hbm":
            return self.hbm_bytes
        raise UsageError(f"unknown memory level {level!r}; expected l1, l2 or hbm")

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "category": self.category,
            "flops": self.flops,
            "bytes": {"l1": self.l1_bytes, "l2": self.l2_bytes, "hbm": self.hbm_bytes},
            "duration_s": self.duration_s,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpRecord":
        b = d["bytes"]
        return cls(
            op=d["op"],
            category=d["category"],
            flops=int(d["flops"]),
            l1_bytes=float(b["l1"]),
            l2_bytes=float(b["l2"]),
            hbm_bytes=float(b["hbm"]),
            duration_s=float(d["duration_s"]),
            step=int(d["step"]),
        )


@dataclass
class ByteLevelModel:
    """Per-level traffic model.

    An op's base traffic is the bytes of all its inputs read once plus its
    output written once.  Traffic at each memory level is the base scaled by
    a reuse factor; the defaults of 1.0 model no cache reuse.  Real cache
    traffic cannot be measured in-process, so the factors are explicit
    configuration rather than a hidden estimate.
    """

    l1: float = 1.0
    l2: float = 1.0
    hbm: float = 1.0

    def expand(self, base_bytes: float) -> tuple[float, float, float]:
        return (base_bytes * self.l1, base_bytes * self.l2, base_bytes * self.hbm)


_active = threading.local()


def current_recorder() -> "TraceRecorder | None":
    """The innermost active recorder on this thread, or None."""
    stack = getattr(_active, "stack", None)
    if not stack:
        return None
    return stack[-1]


class TraceRecorder:
    """Collects OpRecords while active as a context manager.

    A recorder owns the byte-level model, a step counter set by the training
    loop, and an optional scope label stack used to give kernels meaningful
    names ("encode/matmul" instead of bare "matmul").
    """

    def __init__(self, byte_model: ByteLevelModel | None = None, meta: dict | None = None):
        self.byte_model = byte_model or ByteLevelModel()
        self.records: list[OpRecord] = []
        self.meta: dict = dict(meta or {})
        self.step = 0
        self._scopes: list[str] = []

    def __enter__(self) -> "TraceRecorder":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = []
            _active.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc=None, tb=None):
        _active.stack.pop()
        return False

    def scope(self, label: str):
        return _Scope(self, label)

    def scoped_name(self, op: str) -> str:
        if self._scopes:
            return "/".join(self._scopes) + "/" + op
        return op

    def record(self, op: str, category: str, flops: int, base_bytes: float,
               duration_s: float) -> None:
        l1, l2, hbm = self.byte_model.expand(base_bytes)
        self.records.append(OpRecord(
            op=op,
            category=category,
            flops=flops,
            l1_bytes=l1,
            l2_bytes=l2,
            hbm_bytes=hbm,
            duration_s=max(duration_s, MIN_DURATION_S),
            step=self.step,
        ))

    def trace(self, **extra_meta) -> "Trace":
        meta = dict(self.meta)
        meta.update(extra_meta)
        return Trace(records=list(self.records), meta=meta)


class _Scope:
    def __init__(self, recorder: TraceRecorder, label: str):
        self.recorder = recorder
        self.label = label

    def __enter__(self):
        self.recorder._scopes.append(self.label)
        return self

    def __exit__(self, exc_type, exc=None, tb=None):
        self.recorder._scopes.pop()
        return False


@dataclass
class Trace:
    """An ordered list of OpRecords plus run metadata."""

    records: list[OpRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total_duration_s(self) -> float:
        return sum(r.duration_s for r in self.records)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.records)

    @classmethod
    def merge(cls, traces: Sequence["Trace"], meta: dict | None = None) -> "Trace":
        """Merge replica traces deterministically by (step, replica, order)."""
        keyed = []
        for replica, t in enumerate(traces):
            for seq, r in enumerate(t.records):
                keyed.append(((r.step, replica, seq), r))
        keyed.sort(key=lambda kr: kr[0])
        return cls(records=[r for _, r in keyed], meta=dict(meta or {}))

    def save(self, path) -> None:
        doc = {"meta": self.meta, "records": [r.to_dict() for r in self.records]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f)

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        return cls(records=[OpRecord.from_dict(d) for d in doc["records"]],
                   meta=doc.get("meta", {}))


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class KernelRank:
    op: str
    count: int
    total_duration_s: float
    duration_share: float
    total_flops: int
    flops_share: float


def rank_kernels(trace: Trace) -> list[KernelRank]:
    """Group records by op name and rank by total duration, descending.

    Ties break by name ascending.  Duration and FLOP shares each sum to 1.
    """
    if not trace.records:
        raise UsageError("cannot rank kernels of an empty trace")
    totals: dict[str, list] = {}
    for r in trace.records:
        agg = totals.setdefault(r.op, [0, 0.0, 0])
        agg[0] += 1
        agg[1] += r.duration_s
        agg[2] += r.flops
    total_dur = sum(v[1] for v in totals.values())
    total_flops = sum(v[2] for v in totals.values())
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1][1], kv[0]))
    return [
        KernelRank(
            op=name,
            count=count,
            total_duration_s=dur,
            duration_share=dur / total_dur,
            total_flops=flops,
            flops_share=(flops / total_flops) if total_flops > 0 else 0.0,
        )
        for name, (count, dur, flops) in ranked
    ]


def time_breakdown(trace: Trace, include_idle: bool | None = None) -> dict[str, float]:
    """Fraction of total time per op category.

    When the trace metadata carries ``wall_time_s`` (and ``include_idle`` is
    not False), the gap between wall time and the summed op durations is
    reported as a pseudo-category ``idle`` and fractions are taken over the
    wall time instead.  Fractions always sum to 1.
    """
    if not trace.records:
        raise UsageError("cannot break down an empty trace")
    per_cat: dict[str, float] = {}
    for r in trace.records:
        per_cat[r.category] = per_cat.get(r.category, 0.0) + r.duration_s
    op_total = sum(per_cat.values())
    wall = trace.meta.get("wall_time_s")
    use_idle = (wall is not None and wall > op_total) if include_idle is None \
        else (include_idle and wall is not None)
    if use_idle:
        per_cat["idle"] = wall - op_total
        denom = wall
    else:
        denom = op_total
    return {cat: dur / denom for cat, dur in sorted(per_cat.items())}


def flop_utilization(trace: Trace, device) -> float:
    """Achieved FLOPS over the device's peak FLOPS.

    ``device`` is any object with a ``peak_flops`` attribute.  The value is
    not clamped; a result above 1 indicates an inconsistent device spec and
    the renderer flags it.
    """
    dur = trace.total_duration_s
    if dur <= 0:
        raise UsageError("cannot compute utilization of a zero-duration trace")
    return (trace.total_flops / dur) / device.peak_flops


@dataclass(slots=True)
class ZeroAiReport:
    kernel_count: int
    total_kernels: int
    count_share: float
    duration_share: float
    byte_share: dict  # level -> share of that level's traffic


def zero_ai_report(trace: Trace) -> ZeroAiReport:
    """Shares held by zero-FLOP (pure data movement) records."""
    if not trace.records:
        raise UsageError("cannot analyze an empty trace")
    zero = [r for r in trace.records if r.flops == 0]
    total_dur = trace.total_duration_s
    byte_share = {}
    for level in ("l1", "l2", "hbm"):
        total_b = sum(r.bytes_at(level) for r in trace.records)
        zero_b = sum(r.bytes_at(level) for r in zero)
        byte_share[level] = (zero_b / total_b) if total_b > 0 else 0.0
    return ZeroAiReport(
        kernel_count=len(zero),
        total_kernels=len(trace.records),
        count_share=len(zero) / len(trace.records),
        duration_share=sum(r.duration_s for r in zero) / total_dur,
        byte_share=byte_share,
    )


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

def render_kernel_report(ranks: Iterable[KernelRank], top_n: int = 3) -> str:
    ranks = list(ranks)
    lines = [
        f"{'rank':>4}  {'kernel':<36} {'calls':>7} {'time [s]':>12} {'time %':>7} {'flops %':>8}",
    ]
    for i, k in enumerate(ranks, start=1):
        lines.append(
            f"{i:>4}  {k.op:<36} {k.count:>7} {k.total_duration_s:>12.6f}"
            f" {100 * k.duration_share:>6.1f}% {100 * k.flops_share:>7.1f}%"
        )
    top = ranks[:top_n]
    top_flops = 100 * sum(k.flops_share for k in top)
    top_time = 100 * sum(k.duration_share for k in top)
    lines.append(
        f"top {len(top)} kernels: {top_flops:.1f}% of total FLOPs, {top_time:.1f}% of total time"
    )
    return "\n".join(lines)


def render_time_breakdown(fractions: dict[str, float]) -> str:
    lines = [f"{'category':<24} {'time %':>7}"]
    for cat, frac in sorted(fractions.items(), key=lambda kv: -kv[1]):
        lines.append(f"{cat:<24} {100 * frac:>6.1f}%")
    return "\n".join(lines)


def render_zero_ai(report: ZeroAiReport) -> str:
    lines = [
        f"zero-AI kernels: {report.kernel_count} of {report.total_kernels}"
        f" ({100 * report.count_share:.1f}% of kernels),"
        f" {100 * report.duration_share:.1f}% of total time",
        "data transactions held by zero-AI kernels:",
    ]
    for level in ("l1", "l2", "hbm"):
        lines.append(f"  {level}: {100 * report.byte_share[level]:.1f}%")
    return "\n".join(lines)


def render_utilization(utilization: float, device) -> str:
    line = f"FLOP utilization on {device.name}: {100 * utilization:.2f}% of peak"
    if utilization > 1.0:
        line += "  [WARNING: exceeds device peak; device spec is inconsistent with this host]"
    return line


def summed_duration_by_step(trace: Trace) -> dict[int, float]:
    """Total recorded op time per step index; used for accounting checks."""
    out: dict[int, float] = {}
    for r in trace.records:
        out[r.step] = out.get(r.step, 0.0) + r.duration_s
    return out
