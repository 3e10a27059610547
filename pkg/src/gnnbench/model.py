"""The benchmark network: encoder, repeated interaction block, edge decoder.

Node and edge features are first lifted to latent width by two independent
MLPs (the edge MLP reads the concatenated raw endpoint features).  One
interaction block then alternates a node update (node latent concatenated
with the sum of incoming edge latents) and an edge update (edge latent
concatenated with both endpoint node latents), applied ``iterations`` times
with shared weights by default.  A final MLP with a scalar sigmoid head
scores each edge.

Hidden-layer widths default to [128, 64]; every MLP applies the configured
nonlinearity after each listed layer, and the decoder head stays linear
before the sigmoid.  Raw coordinates span four orders of magnitude, so the
inputs are scaled by ``feature_scale`` (a fixed per-column preprocessing
constant, not a trained parameter) before entering the encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add_bias,
    concat,
    gather_rows,
    matmul,
    relu,
    reshape,
    scale_rows,
    sigmoid,
    tanh,
    tensor,
    unsorted_segment_sum,
)
from .errors import ConfigError, DataError
from .graphs import EventGraph
from .profiler import current_recorder

# Trainable-parameter count of the original track-finding benchmark network
# this model mirrors.  The original's exact layer widths are not public, so
# the count is reported next to this build's count rather than matched.
REFERENCE_PARAM_COUNT = 132_291

_NONLINS = {"relu": relu, "tanh": tanh}


@dataclass
class ModelConfig:
    hidden_sizes: list = field(default_factory=lambda: [128, 64])
    iterations: int = 8
    nonlinearity: str = "relu"
    edge_input: str = "endpoint-concat"
    share_interaction_weights: bool = True
    seed: int = 0
    dtype: str = "f32"
    feature_scale: tuple = (1e-3, 1.0, 1e-3)   # applied to (r, phi, z) inputs

    def __post_init__(self):
        if not self.hidden_sizes:
            raise ConfigError("hidden_sizes must be non-empty")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.nonlinearity not in _NONLINS:
            raise ConfigError(f"nonlinearity must be one of {sorted(_NONLINS)}")
        if self.edge_input != "endpoint-concat":
            raise ConfigError("only endpoint-concat edge inputs are supported")

    @property
    def latent(self) -> int:
        return self.hidden_sizes[-1]

    def to_dict(self) -> dict:
        return {
            "hidden_sizes": list(self.hidden_sizes),
            "iterations": self.iterations,
            "nonlinearity": self.nonlinearity,
            "edge_input": self.edge_input,
            "share_interaction_weights": self.share_interaction_weights,
            "seed": self.seed,
            "dtype": self.dtype,
            "feature_scale": list(self.feature_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["feature_scale"] = tuple(d.get("feature_scale", (1e-3, 1.0, 1e-3)))
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict  # name -> Tensor, all flagged as parameters

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def interaction_prefixes(self, block: int) -> tuple[str, str]:
        if self.config.share_interaction_weights:
            return "interaction_node", "interaction_edge"
        return f"interaction_node_{block}", f"interaction_edge_{block}"

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            name: tensor(t.numpy().copy(), dtype=t.dtype, param=True)
            for name, t in self.tensors.items()
        })


def _mlp_widths(width_in: int, hidden: list) -> list[tuple[int, int]]:
    widths = []
    w = width_in
    for h in hidden:
        widths.append((w, h))
        w = h
    return widths


def mlp_layer_shapes(cfg: ModelConfig) -> dict[str, list[tuple[int, int]]]:
    """Layer (fan_in, fan_out) pairs for every MLP in the network."""
    hidden = list(cfg.hidden_sizes)
    shapes = {
        "encoder_node": _mlp_widths(3, hidden),
        "encoder_edge": _mlp_widths(6, hidden),
    }
    blocks = 1 if cfg.share_interaction_weights else max(cfg.iterations, 1)
    for b in range(blocks):
        node_name, edge_name = ("interaction_node", "interaction_edge") \
            if cfg.share_interaction_weights else \
            (f"interaction_node_{b}", f"interaction_edge_{b}")
        shapes[node_name] = _mlp_widths(2 * cfg.latent, hidden)
        shapes[edge_name] = _mlp_widths(3 * cfg.latent, hidden)
    shapes["decoder"] = _mlp_widths(cfg.latent, hidden) + [(cfg.latent, 1)]
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for prefix, layers in mlp_layer_shapes(cfg).items():
        for i, (fan_in, fan_out) in enumerate(layers):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            tensors[f"{prefix}.w{i}"] = tensor(w, dtype=cfg.dtype, param=True)
            tensors[f"{prefix}.b{i}"] = tensor(
                np.zeros(fan_out), dtype=cfg.dtype, param=True)
    return ModelParams(cfg, tensors)


def count_params(params: ModelParams) -> int:
    return sum(t.size for t in params.tensors.values())


def parameter_count_report(params: ModelParams) -> str:
    n = count_params(params)
    delta = n - REFERENCE_PARAM_COUNT
    return (
        f"trainable parameters: {n:,}\n"
        f"reference network:    {REFERENCE_PARAM_COUNT:,} (delta {delta:+,};"
        " this build uses 3-wide raw node inputs, concatenated endpoint edge"
        " inputs, and a shared interaction block, so the counts differ by design)"
    )


def _run_mlp(params: ModelParams, prefix: str, x: Tensor,
             final_nonlinearity: bool = True) -> Tensor:
    nonlin = _NONLINS[params.config.nonlinearity]
    n_layers = len([k for k in params.tensors if k.startswith(prefix + ".w")])
    for i in range(n_layers):
        x = add_bias(matmul(x, params.tensors[f"{prefix}.w{i}"]),
                       params.tensors[f"{prefix}.b{i}"])
        if final_nonlinearity or i < n_layers - 1:
            x = nonlin(x)
    return x


def _scaled_node_features(params: ModelParams, g: EventGraph) -> np.ndarray:
    scale = np.asarray(params.config.feature_scale, dtype=g.nodes.dtype)
    return g.nodes * scale


def encode(params: ModelParams, g: EventGraph) -> tuple[Tensor, Tensor]:
    """Lift raw node features and concatenated endpoint features to latents."""
    cfg = params.config
    feats = _scaled_node_features(params, g)
    edge_in = np.concatenate([feats[g.senders], feats[g.receivers]], axis=1)
    node_t = tensor(feats, dtype=cfg.dtype)
    edge_t = tensor(edge_in, dtype=cfg.dtype)
    node_latent = _run_mlp(params, "encoder_node", node_t)
    edge_latent = _run_mlp(params, "encoder_edge", edge_t)
    return node_latent, edge_latent


def interaction_step(params: ModelParams, node_latent: Tensor,
                     edge_latent: Tensor, senders: np.ndarray,
                     receivers: np.ndarray, num_nodes: int,
                     edge_valid: Tensor | None = None,
                     block: int = 0) -> tuple[Tensor, Tensor]:
    """One message-passing update: nodes first, then edges.

    With ``edge_valid`` given, invalid edge latents are zeroed before the
    aggregation so padding cannot leak into real nodes through the sink.
    """
    node_prefix, edge_prefix = params.interaction_prefixes(block)
    contrib = edge_latent if edge_valid is None \
        else scale_rows(edge_latent, edge_valid)
    agg = unsorted_segment_sum(contrib, receivers, num_nodes)
    node_new = _run_mlp(params, node_prefix,
                        concat([node_latent, agg], axis=1))
    edge_new = _run_mlp(params, edge_prefix, concat([
        edge_latent,
        gather_rows(node_new, senders),
        gather_rows(node_new, receivers),
    ], axis=1))
    return node_new, edge_new


def decode(params: ModelParams, edge_latent: Tensor) -> Tensor:
    logits = _run_mlp(params, "decoder", edge_latent, final_nonlinearity=False)
    scores = sigmoid(logits)
    return reshape(scores, (scores.shape[0],))


def forward(params: ModelParams, g: EventGraph) -> Tensor:
    """Edge scores in (0, 1) for every edge, padded ones included."""
    if g.nodes.shape[1] != 3:
        raise DataError(f"expected 3 node features, got {g.nodes.shape[1]}")
    cfg = params.config
    rec = current_recorder()

    def scope(label):
        return rec.scope(label) if rec is not None else _null_scope()

    with scope("encode"):
        node_latent, edge_latent = encode(params, g)
    edge_valid = None
    if (g.edge_valid == 0).any():
        edge_valid = tensor(g.edge_valid, dtype=cfg.dtype)
    for i in range(cfg.iterations):
        with scope("interaction"):
            node_latent, edge_latent = interaction_step(
                params, node_latent, edge_latent, g.senders, g.receivers,
                g.n_nodes, edge_valid=edge_valid, block=i)
    with scope("decode"):
        return decode(params, edge_latent)


class _null_scope:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Named tensors plus config; floats round-trip bit exactly."""
    doc = {
        "config": params.config.to_dict(),
        "tensors": {
            name: {
                "shape": list(t.shape),
                "dtype": t.dtype,
                "data": [float(x) for x in t.numpy().ravel()],
            }
            for name, t in sorted(params.tensors.items())
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_checkpoint(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    cfg = ModelConfig.from_dict(doc["config"])
    tensors = {}
    for name, spec in doc["tensors"].items():
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        tensors[name] = tensor(arr, dtype=spec["dtype"], param=True)
    return ModelParams(cfg, tensors)
