"""Simulated synchronous data parallelism and strong scaling.

W replicas each compute gradients on their slice of the shuffled step
group; the gradients are averaged in a fixed worker order and one update
is applied everywhere.  Because batching uses the same averaging path,
a W-worker run reproduces the single-worker batch-W run bit for bit,
which is the all-reduce contract made testable.
"""

import numpy as np

from gnnbench.graphs import GeneratorConfig, generate_dataset
from gnnbench.model import ModelConfig, init_params
from gnnbench.training import (
    TrainConfig,
    data_parallel_epoch,
    make_optimizer,
    render_scaling_table,
    strong_scaling_report,
    train_epoch,
)

events = generate_dataset(GeneratorConfig.desk_scale(seed=5), 16)

# bitwise equivalence: 2 workers at batch 1 vs 1 worker at batch 2
pa = init_params(ModelConfig(seed=6))
cfg_batch = TrainConfig(seed=7, batch_size=2, drop_last=True)
train_epoch(pa, events, cfg_batch, optimizer=make_optimizer(cfg_batch))

pb = init_params(ModelConfig(seed=6))
cfg_par = TrainConfig(seed=7, workers=2)
data_parallel_epoch(pb, events, cfg_par, optimizer=make_optimizer(cfg_par))

identical = all(np.array_equal(pa[n].numpy(), pb[n].numpy()) for n in pa.tensors)
print(f"2 workers == batch-2 run, bitwise: {identical}")

# strong scaling: same workload, more replicas
runs = []
for w in (1, 2, 4):
    params = init_params(ModelConfig(seed=6))
    cfg = TrainConfig(seed=7, workers=w)
    _, reports, summary = data_parallel_epoch(params, events, cfg,
                                              optimizer=make_optimizer(cfg))
    runs.append((w, summary.parallel_seconds))
    print(f"W={w}: parallel {summary.parallel_seconds:.3f}s,"
          f" measured efficiency {summary.measured_efficiency:.3f},"
          f" simulated {summary.simulated_efficiency:.1f}")

print()
print(render_scaling_table(strong_scaling_report(runs)))
print("\n(replicas run serially in one process; the wall-clock numbers are"
      "\n host-dependent and reported, never asserted)")
