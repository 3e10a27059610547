"""One instrumented training step, taken apart.

The tensor engine records every operation it executes: FLOPs from closed
forms (2mkn for matmul, E*F for the segment sum, zero for pure data
movement), modeled bytes, and a measured duration.  A tape captures the
same ops so reverse-mode replay can produce gradients, emitting "-grad"
records as it goes.
"""

import numpy as np

from gnnbench.graphs import GeneratorConfig, generate_event
from gnnbench.model import ModelConfig, forward, init_params, parameter_count_report
from gnnbench.profiler import TraceRecorder
from gnnbench.tensor import Tape, backward
from gnnbench.training import auc, bce_loss

g = generate_event(GeneratorConfig.desk_scale(seed=11))
cfg = ModelConfig(seed=11)
params = init_params(cfg)
print(parameter_count_report(params))
print()

rec = TraceRecorder()
with rec:
    with Tape() as tape:
        scores = forward(params, g)
        loss = bce_loss(scores, g.labels, g.edge_valid)
    grads = backward(tape, loss)

print(f"forward+backward recorded {len(rec.records)} ops,"
      f" {sum(r.flops for r in rec.records):,} FLOPs")
print(f"loss {loss.item():.4f}, untrained AUC {auc(scores, g.labels, g.edge_valid):.3f}")

w = params["decoder.w2"]
print(f"\ndecoder head weight {w.shape}: gradient norm"
      f" {np.linalg.norm(grads[w.node_id].numpy()):.2e}")

by_category = {}
for r in rec.records:
    by_category[r.category] = by_category.get(r.category, 0) + r.flops
print("\nFLOPs by category:")
for cat, flops in sorted(by_category.items(), key=lambda kv: -kv[1]):
    if flops:
        print(f"  {cat:<20} {flops:>14,}")
zero_ai = [cat for cat, flops in by_category.items() if flops == 0]
print(f"zero-FLOP categories (pure data movement): {', '.join(sorted(zero_ai))}")
