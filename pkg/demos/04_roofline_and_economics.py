"""Roofline classification and the cost/energy side of an epoch.

The attainable performance at arithmetic intensity x is min(peak, x * bw):
kernels left of the ridge point (peak / bandwidth) are memory-bound, the
rest compute-bound.  Achieved FLOPS here come from host durations, so the
point heights describe this machine; the classification logic and the
report formats are what carry over to accelerator traces.

Cost is list price times epoch hours; energy is thermal design power times
latency (a 100%-busy assumption, stated where reported).
"""

from pathlib import Path

from gnnbench.profiler import Trace, flop_utilization, render_utilization
from gnnbench.roofline import (
    default_catalog,
    economics_table,
    emit_roofline,
    render_economics,
    ridge_point,
    write_roofline_csv,
    write_roofline_svg,
)

out = Path(__file__).parent / "output"
trace_path = out / "training.trace.json"
if not trace_path.exists():
    raise SystemExit("run 03_train_and_profile.py first to produce a trace")
trace = Trace.load(trace_path)

catalog = default_catalog()
v100 = catalog["V100"]
print(f"V100 ridge point: {ridge_point(v100, 'hbm'):.2f} FLOPs/byte")
print(render_utilization(flop_utilization(trace, v100), v100))

report = emit_roofline(trace, v100)
memory_bound = sum(p.klass == "memory-bound" for p in report.points)
print(f"\n{len(report.points)} roofline points; {memory_bound} memory-bound,"
      f" {len(report.points) - memory_bound} compute-bound,"
      f" {len(report.zero_ai_kernels)} zero-AI kernels in the side table")
for p in report.points[:6]:
    print(f"  {p.kernel:<34} ai {p.ai:8.3f}  {p.klass:<13} [{p.rank_group}]")

write_roofline_csv(report, out / "roofline_v100.csv")
write_roofline_svg(report, v100, out / "roofline_v100.svg")
print(f"\nwrote {out / 'roofline_v100.csv'} and .svg")

# the devices of the study, at two illustrative epoch latencies
rows = economics_table(list(catalog.values()), [1800.0, 3600.0])
print("\n" + render_economics(rows))
