"""Train the edge classifier for a few epochs and profile where time goes.

Every op lands in a trace; afterwards the profiler ranks kernels by total
duration, splits time across operation categories, and isolates the
zero-arithmetic-intensity kernels, the pure data movers whose share is a
key finding of this kind of analysis.
"""

from pathlib import Path

from gnnbench.graphs import GeneratorConfig, PaddingSpec, generate_dataset, pad_dataset
from gnnbench.model import ModelConfig, init_params
from gnnbench.profiler import (
    TraceRecorder,
    rank_kernels,
    render_kernel_report,
    render_time_breakdown,
    render_zero_ai,
    time_breakdown,
    zero_ai_report,
)
from gnnbench.training import TrainConfig, make_optimizer, train_epoch

out = Path(__file__).parent / "output"
out.mkdir(exist_ok=True)

events = generate_dataset(GeneratorConfig.desk_scale(seed=3), 40)
train, val = events[:32], events[32:]
spec = PaddingSpec.from_events(train, q=0.99)
train, trunc_nodes, trunc_edges = pad_dataset(train, spec)
val, _, _ = pad_dataset(val, spec)
print(f"padded to {spec.target_nodes} nodes / {spec.target_edges} edges"
      f" (q=0.99), truncated {trunc_edges} edges")

params = init_params(ModelConfig(seed=3))
cfg = TrainConfig(seed=3)
opt = make_optimizer(cfg)
rec = TraceRecorder()
start = 0
for epoch in range(3):
    _, report = train_epoch(params, train, cfg, rec, optimizer=opt,
                            epoch=epoch, val_events=val, start_step=start)
    start += report.steps
    print(f"epoch {epoch}: loss {report.mean_loss:.4f}"
          f" auc {report.auc:.4f} ({report.seconds:.2f}s)")

trace = rec.trace()
trace.save(out / "training.trace.json")
print(f"\ntrace: {len(trace)} records, {trace.total_flops:,} FLOPs,"
      f" saved to {out / 'training.trace.json'}")

print("\n" + render_kernel_report(rank_kernels(trace)[:12]))
print("\n" + render_time_breakdown(time_breakdown(trace)))
print("\n" + render_zero_ai(zero_ai_report(trace)))
