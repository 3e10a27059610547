"""Desk-scale track-finding GNN benchmark with built-in performance analysis.

The package trains a message-passing edge classifier on synthetic detector
event graphs while instrumenting every tensor operation, then analyzes the
resulting trace with a roofline model and cost/energy arithmetic over a
catalog of accelerator specs.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    GnnBenchError,
    IndexBoundsError,
    UndefinedMetricError,
    UsageError,
)
from .tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    clip,
    concat,
    elementwise,
    gather_rows,
    log,
    matmul,
    mul,
    relu,
    scale_rows,
    sigmoid,
    tanh,
    tensor_sum,
    unsorted_segment_sum,
)
from .profiler import (
    ByteLevelModel,
    OpRecord,
    Trace,
    TraceRecorder,
    flop_utilization,
    rank_kernels,
    time_breakdown,
    zero_ai_report,
)
from .graphs import (
    EventGraph,
    GeneratorConfig,
    PaddingSpec,
    disjoint_union,
    generate_dataset,
    generate_event,
    pad_graph,
    quantile_pad_size,
    read_dataset,
    size_histogram,
    write_dataset,
)
from .model import (
    ModelConfig,
    ModelParams,
    count_params,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
