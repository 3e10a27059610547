"""Device catalog, roofline math, boundedness classes, cost and energy.

The roofline bound at arithmetic intensity x is min(peak_flops, x * bw):
a slanted bandwidth-limited segment meeting the flat compute ceiling at the
ridge point peak / bw.  Kernels with zero FLOPs have no arithmetic
intensity and are listed in a side table instead of plotted.

Achieved FLOPS come from host-measured durations, so absolute positions
reflect this machine, not the accelerators in the catalog; the
classification (which side of the ridge a kernel lands on) is the part
that carries over.  Cost is list price times hours; energy is thermal
design power times latency, which assumes the device is 100% busy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError, DataError, UsageError
from .profiler import OpRecord, Trace, rank_kernels

LEVELS = ("l1", "l2", "hbm")

ZERO_AI = "zero-ai"
MEMORY_BOUND = "memory-bound"
COMPUTE_BOUND = "compute-bound"


@dataclass
class DeviceSpec:
    """One accelerator entry: peaks, per-level bandwidths, price, power."""

    name: str
    peak_flops: float
    bandwidth: dict = field(default_factory=dict)  # level -> bytes/s (levels optional)
    price: float | None = None                     # USD/hour; None if not listed
    tdp: float = 0.0                               # watts
    chips: int = 1
    note: str = ""

    def __post_init__(self):
        if self.peak_flops <= 0:
            raise ConfigError(f"{self.name}: peak_flops must be positive")
        for level, bw in self.bandwidth.items():
            if level not in LEVELS:
                raise ConfigError(f"{self.name}: unknown memory level {level!r}")
            if bw is not None and bw <= 0:
                raise ConfigError(f"{self.name}: bandwidth[{level}] must be positive")
        if self.price is not None and self.price < 0:
            raise ConfigError(f"{self.name}: price must be >= 0")
        if self.tdp <= 0:
            raise ConfigError(f"{self.name}: tdp must be positive")
        if self.chips < 1:
            raise ConfigError(f"{self.name}: chips must be >= 1")

    def levels(self) -> list[str]:
        return [lv for lv in LEVELS if self.bandwidth.get(lv)]

    def to_dict(self) -> dict:
        return {"name": self.name, "peak_flops": self.peak_flops,
                "bandwidth": dict(self.bandwidth), "price": self.price,
                "tdp": self.tdp, "chips": self.chips, "note": self.note}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSpec":
        return cls(**d)


def default_catalog() -> dict[str, DeviceSpec]:
    """The accelerators of the original benchmark study, list prices included.

    Only the V100's HBM bandwidth is public (900 GB/s); L1/L2 bandwidths are
    left unset and must come from the user for multi-level rooflines.  TPU
    peaks are MXU (bfloat16 multiply) figures summed over all chips, so they
    are not directly comparable with the fp32 GPU peaks.
    """
    devices = [
        DeviceSpec(name="V100", peak_flops=14e12,
                   bandwidth={"hbm": 900e9}, price=1.56, tdp=250.0, chips=1,
                   note="Volta, fp32 peak, 16 GiB HBM"),
        DeviceSpec(name="A100", peak_flops=19.5e12,
                   bandwidth={}, price=None, tdp=250.0, chips=1,
                   note="Ampere, fp32 peak, 40 GiB HBM; price not listed"),
        DeviceSpec(name="TPUv2-32", peak_flops=720e12,
                   bandwidth={}, price=15.33, tdp=2400.0, chips=32,
                   note="32 chips summed, bfloat16 MXU peak, 256 GiB"),
        DeviceSpec(name="TPUv3-8", peak_flops=420e12,
                   bandwidth={}, price=8.0, tdp=600.0, chips=8,
                   note="8 chips summed, bfloat16 MXU peak, 128 GiB"),
    ]
    return {d.name: d for d in devices}


def save_catalog(catalog: dict[str, DeviceSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([d.to_dict() for d in catalog.values()], f, indent=1, sort_keys=True)
        f.write("\n")


def load_catalog(path) -> dict[str, DeviceSpec]:
    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    catalog = {}
    for entry in entries:
        spec = DeviceSpec.from_dict(entry)
        catalog[spec.name] = spec
    if not catalog:
        raise ConfigError(f"catalog at {path} lists no devices")
    return catalog


# ---------------------------------------------------------------------------
# Roofline arithmetic
# ---------------------------------------------------------------------------

def arithmetic_intensity(record: OpRecord, level: str) -> float | None:
    """FLOPs per byte at a memory level; None marks a zero-AI record."""
    if record.flops == 0:
        return None
    b = record.bytes_at(level)
    if b <= 0:
        raise DataError(f"record {record.op} has {record.flops} FLOPs"
                        f" but no {level} traffic")
    return record.flops / b


def ridge_point(device: DeviceSpec, level: str = "hbm") -> float:
    bw = device.bandwidth.get(level)
    if not bw:
        raise ConfigError(f"{device.name} has no {level} bandwidth configured")
    return device.peak_flops / bw


def attainable_flops(device: DeviceSpec, ai: float, level: str = "hbm") -> float:
    bw = device.bandwidth.get(level)
    if not bw:
        raise ConfigError(f"{device.name} has no {level} bandwidth configured")
    return min(device.peak_flops, ai * bw)


def classify(ai: float | None, device: DeviceSpec, level: str = "hbm") -> str:
    """Below the ridge point is memory-bound, at or above is compute-bound."""
    if ai is None:
        return ZERO_AI
    if ai < 0:
        raise UsageError("arithmetic intensity cannot be negative")
    return MEMORY_BOUND if ai < ridge_point(device, level) else COMPUTE_BOUND


# ---------------------------------------------------------------------------
# Economics
# ---------------------------------------------------------------------------

def cost_per_epoch(latency_s: float, device: DeviceSpec) -> float:
    """List price times hours of one epoch, in USD."""
    if device.price is None:
        raise ConfigError(f"{device.name} has no list price")
    return device.price * latency_s / 3600.0


def energy_per_epoch(latency_s: float, device: DeviceSpec) -> float:
    """Thermal design watts times latency, in joules (assumes 100% busy)."""
    return device.tdp * latency_s


def joules_to_kwh(joules: float) -> float:
    return joules / 3.6e6


def economics_table(devices: list[DeviceSpec], latencies_s: list[float]) -> list[dict]:
    rows = []
    for device in devices:
        for latency in latencies_s:
            rows.append({
                "device": device.name,
                "latency_s": latency,
                "cost_usd": None if device.price is None
                else cost_per_epoch(latency, device),
                "energy_j": energy_per_epoch(latency, device),
                "energy_kwh": joules_to_kwh(energy_per_epoch(latency, device)),
            })
    return rows


def render_economics(rows: list[dict]) -> str:
    lines = [f"{'device':<10} {'latency [s]':>12} {'cost [USD]':>11} "
             f"{'energy [J]':>14} {'energy [kWh]':>13}"]
    for r in rows:
        cost = "n/a" if r["cost_usd"] is None else f"{r['cost_usd']:.2f}"
        lines.append(f"{r['device']:<10} {r['latency_s']:>12.1f} {cost:>11} "
                     f"{r['energy_j']:>14.0f} {r['energy_kwh']:>13.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Roofline report
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class RooflinePoint:
    kernel: str
    level: str
    ai: float
    achieved: float
    attainable: float
    klass: str
    rank_group: str


@dataclass
class RooflineReport:
    device: str
    points: list[RooflinePoint]
    zero_ai_kernels: list[dict]       # kernel, total_duration_s, duration_share
    over_roof: list[str]              # kernels with achieved > attainable

    def row_count(self) -> int:
        return len(self.points)


def _rank_group(rank: int, boundaries: tuple[int, int]) -> str:
    lo, hi = boundaries
    if rank < lo:
        return f"top{lo}"
    if rank < hi:
        return f"top{lo + 1}-{hi}"
    return "rest"


def emit_roofline(trace: Trace, device: DeviceSpec,
                  top_k: tuple[int, int] = (5, 20)) -> RooflineReport:
    """One point per kernel per configured memory level.

    Kernels are grouped by name; achieved FLOPS is kernel FLOPs over kernel
    duration.  Rank groups follow the duration ranking over all kernels,
    zero-AI ones included, which then only appear in the side table.
    Points above the roof are flagged, not clamped: they mean the device
    spec does not describe the executing host.
    """
    levels = device.levels()
    if "hbm" not in levels:
        raise ConfigError(f"{device.name} needs at least HBM bandwidth"
                          " for a roofline")
    ranks = rank_kernels(trace)
    per_kernel_bytes: dict[str, dict[str, float]] = {}
    for r in trace.records:
        agg = per_kernel_bytes.setdefault(r.op, {lv: 0.0 for lv in LEVELS})
        for lv in LEVELS:
            agg[lv] += r.bytes_at(lv)

    points = []
    zero_rows = []
    over = []
    total_duration = trace.total_duration_s
    for rank, k in enumerate(ranks):
        group = _rank_group(rank, top_k)
        if k.total_flops == 0:
            zero_rows.append({
                "kernel": k.op,
                "total_duration_s": k.total_duration_s,
                "duration_share": k.total_duration_s / total_duration,
            })
            continue
        achieved = k.total_flops / k.total_duration_s
        for level in levels:
            b = per_kernel_bytes[k.op][level]
            if b <= 0:
                raise DataError(f"kernel {k.op} has FLOPs but no {level} bytes")
            ai = k.total_flops / b
            att = attainable_flops(device, ai, level)
            if achieved > att and k.op not in over:
                over.append(k.op)
            points.append(RooflinePoint(
                kernel=k.op, level=level, ai=ai, achieved=achieved,
                attainable=att, klass=classify(ai, device, level),
                rank_group=group,
            ))
    return RooflineReport(device=device.name, points=points,
                          zero_ai_kernels=zero_rows, over_roof=over)


ROOFLINE_CSV_HEADER = "kernel,level,ai_flops_per_byte,achieved_flops,attainable_flops,class,rank_group"


def write_roofline_csv(report: RooflineReport, path) -> None:
    """Canonical formatting: repr() floats, so parse + re-emit is byte-stable."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(ROOFLINE_CSV_HEADER + "\n")
        for p in report.points:
            f.write(f"{p.kernel},{p.level},{p.ai!r},{p.achieved!r},"
                    f"{p.attainable!r},{p.klass},{p.rank_group}\n")


def read_roofline_csv(path) -> list[RooflinePoint]:
    points = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != ROOFLINE_CSV_HEADER:
            raise DataError(f"unexpected roofline CSV header: {header}")
        for line in f:
            kernel, level, ai, achieved, att, klass, group = line.rstrip("\n").split(",")
            points.append(RooflinePoint(kernel=kernel, level=level, ai=float(ai),
                                        achieved=float(achieved), attainable=float(att),
                                        klass=klass, rank_group=group))
    return points


def write_zero_ai_csv(report: RooflineReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("kernel,total_duration_s,duration_share\n")
        for row in report.zero_ai_kernels:
            f.write(f"{row['kernel']},{row['total_duration_s']!r},"
                    f"{row['duration_share']!r}\n")


_GROUP_STYLE = {
    # marker shapes and colors follow the usual roofline convention:
    # dots for the top ranks, squares for the middle band, triangles for the rest
    "top5": {"marker": "o", "color": "tab:red"},
    "top6-20": {"marker": "s", "color": "gold"},
    "rest": {"marker": "^", "color": "tab:green"},
}


def write_roofline_svg(report: RooflineReport, device: DeviceSpec, path) -> None:
    """Log-log roofline plot with the ridge point labeled per level."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    plt.rcParams["svg.hashsalt"] = "gnnbench"
    fig, ax = plt.subplots(figsize=(7, 5))
    ai_values = [p.ai for p in report.points] or [1.0]
    x_lo = min(min(ai_values) / 10, 1e-2)
    x_hi = max(max(ai_values) * 10, 1e3)
    xs = np.logspace(np.log10(x_lo), np.log10(x_hi), 256)
    for level in device.levels():
        roof = np.minimum(device.peak_flops, xs * device.bandwidth[level])
        ax.plot(xs, roof, label=f"{level} roof", linewidth=1.5)
        ridge = ridge_point(device, level)
        ax.axvline(ridge, linestyle=":", linewidth=0.8, color="gray")
        ax.annotate(f"ridge {ridge:.2f}", (ridge, device.peak_flops),
                    textcoords="offset points", xytext=(4, -12), fontsize=8)
    seen_groups = []
    for group, style in _GROUP_STYLE.items():
        pts = [p for p in report.points if p.rank_group == group]
        if not pts:
            continue
        seen_groups.append(group)
        ax.scatter([p.ai for p in pts], [p.achieved for p in pts],
                   marker=style["marker"], color=style["color"],
                   edgecolors="black", linewidths=0.4, s=45,
                   label=f"kernels {group}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("arithmetic intensity [FLOPs/byte]")
    ax.set_ylabel("achieved FLOPS")
    ax.set_title(f"Roofline on {device.name}")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
