"""Event graphs: data model, synthetic generator, padding, serialization.

An event graph holds one detector event: hits as nodes with cylindrical
coordinates (r in mm, phi in radians, z in mm) and directed candidate
connections as edges, each labeled 1 when both endpoints were left by the
same particle on consecutive layers.

The generator replaces the real reconstruction pipeline with a parametric
toy: helix-like tracks crossing concentric cylinder layers.  Consecutive
hits of one particle form true edges; false edges connect each hit to a
few geometrically nearby hits of other particles on the next layer.  Sizes
are tuned so the full-scale defaults approach 50k nodes / 250k edges per
event with a 4:1 false:true mix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, UsageError

_TWO_PI = 2.0 * math.pi


def _wrap_angle(phi: np.ndarray) -> np.ndarray:
    return (phi + math.pi) % _TWO_PI - math.pi


@dataclass
class EventGraph:
    """Hits, directed candidate edges, and binary edge labels.

    ``node_valid`` / ``edge_valid`` are 1.0 for real entries and 0.0 for
    padding.  Padded edges point sender = receiver = the sink node (last
    node index); the sender != receiver invariant applies to valid edges
    only.  Invalid edges always carry label 0.
    """

    nodes: np.ndarray        # [N, 3] float32, columns (r, phi, z)
    senders: np.ndarray      # [E] int64
    receivers: np.ndarray    # [E] int64
    labels: np.ndarray       # [E] float32 in {0, 1}
    node_valid: np.ndarray   # [N] float32 in {0, 1}
    edge_valid: np.ndarray   # [E] float32 in {0, 1}

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    @property
    def n_valid_edges(self) -> int:
        return int(self.edge_valid.sum())

    @property
    def is_padded(self) -> bool:
        return bool((self.node_valid == 0).any() or (self.edge_valid == 0).any())

    @classmethod
    def create(cls, nodes, senders, receivers, labels,
               node_valid=None, edge_valid=None) -> "EventGraph":
        nodes = np.asarray(nodes, dtype=np.float32).reshape(-1, 3)
        senders = np.asarray(senders, dtype=np.int64)
        receivers = np.asarray(receivers, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.float32)
        n, e = nodes.shape[0], senders.shape[0]
        if node_valid is None:
            node_valid = np.ones(n, dtype=np.float32)
        if edge_valid is None:
            edge_valid = np.ones(e, dtype=np.float32)
        g = cls(nodes, senders, receivers, labels,
                np.asarray(node_valid, dtype=np.float32),
                np.asarray(edge_valid, dtype=np.float32))
        validate_event_graph(g)
        return g


def validate_event_graph(g: EventGraph) -> None:
    n, e = g.n_nodes, g.n_edges
    if g.senders.shape != (e,) or g.receivers.shape != (e,) or g.labels.shape != (e,):
        raise DataError("edge arrays disagree in length")
    if g.node_valid.shape != (n,) or g.edge_valid.shape != (e,):
        raise DataError("validity masks disagree with node/edge counts")
    if e:
        if g.senders.min(initial=0) < 0 or g.senders.max(initial=0) >= n \
                or g.receivers.min(initial=0) < 0 or g.receivers.max(initial=0) >= n:
            raise DataError("edge endpoint index outside [0, N)")
        valid = g.edge_valid > 0
        if (g.senders[valid] == g.receivers[valid]).any():
            raise DataError("valid edge with sender == receiver")
        if ((g.labels != 0) & (g.labels != 1)).any():
            raise DataError("labels must be 0 or 1")
        if (g.labels[~valid] != 0).any():
            raise DataError("invalid edges must carry label 0")
    if n and (np.abs(g.nodes[:, 1]) > math.pi + 1e-6).any():
        raise DataError("phi outside [-pi, pi]")


@dataclass
class ParticleTruth:
    """Generator ground truth: which particle and layer each hit belongs to."""

    particle_id: np.ndarray  # [N] int64
    layer_id: np.ndarray     # [N] int64


@dataclass
class GeneratorConfig:
    """Synthetic event parameters.

    The defaults reproduce the full-scale regime of the original benchmark
    dataset: roughly 50k true edges and 250k edges total per event (node
    count then lands near 56k).  Use :meth:`desk_scale` for test-sized
    events.
    """

    particles_per_event: int = 5556
    layers: int = 10
    false_edge_factor: float = 4.0
    noise: float = 1.0            # coordinate jitter scale, mm
    seed: int = 0
    inner_radius_mm: float = 32.0
    outer_radius_mm: float = 1020.0

    def __post_init__(self):
        if self.particles_per_event < 1:
            raise UsageError("particles_per_event must be >= 1")
        if self.layers < 2:
            raise UsageError("layers must be >= 2")
        if self.false_edge_factor < 0:
            raise UsageError("false_edge_factor must be >= 0")

    @classmethod
    def desk_scale(cls, seed: int = 0, **overrides) -> "GeneratorConfig":
        kw = dict(particles_per_event=10, layers=10, false_edge_factor=4.0, seed=seed)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "particles_per_event": self.particles_per_event,
            "layers": self.layers,
            "false_edge_factor": self.false_edge_factor,
            "noise": self.noise,
            "seed": self.seed,
            "inner_radius_mm": self.inner_radius_mm,
            "outer_radius_mm": self.outer_radius_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def generate_event_with_truth(cfg: GeneratorConfig,
                              event_index: int = 0) -> tuple[EventGraph, ParticleTruth]:
    """Generate one event plus its ground truth, deterministically per seed."""
    rng = np.random.default_rng([cfg.seed, event_index])
    p, layers = cfg.particles_per_event, cfg.layers
    radii = np.linspace(cfg.inner_radius_mm, cfg.outer_radius_mm, layers)

    phi0 = rng.uniform(-math.pi, math.pi, size=p)
    z0 = rng.uniform(-200.0, 200.0, size=p)
    tan_lambda = rng.uniform(-1.5, 1.5, size=p)
    curvature = rng.uniform(-6e-4, 6e-4, size=p)   # rad per mm of radius

    # hit index = particle * layers + layer
    r = np.repeat(radii[None, :], p, axis=0)                     # [p, layers]
    phi = phi0[:, None] + curvature[:, None] * r
    z = z0[:, None] + tan_lambda[:, None] * r
    if cfg.noise > 0:
        phi = phi + rng.normal(0.0, cfg.noise, size=r.shape) / r
        z = z + rng.normal(0.0, cfg.noise, size=r.shape)
    phi = _wrap_angle(phi)

    nodes = np.stack([r.ravel(), phi.ravel(), z.ravel()], axis=1).astype(np.float32)
    particle_id = np.repeat(np.arange(p, dtype=np.int64), layers)
    layer_id = np.tile(np.arange(layers, dtype=np.int64), p)

    # true edges: consecutive hits of each particle, inner layer -> outer layer
    base = np.arange(p, dtype=np.int64)[:, None] * layers + np.arange(layers - 1)
    true_senders = base.ravel()
    true_receivers = true_senders + 1

    false_senders, false_receivers = _sample_false_edges(
        cfg, rng, nodes, particle_id, layer_id, layers)

    senders = np.concatenate([true_senders, false_senders])
    receivers = np.concatenate([true_receivers, false_receivers])
    labels = np.concatenate([
        np.ones(true_senders.shape[0], dtype=np.float32),
        np.zeros(false_senders.shape[0], dtype=np.float32),
    ])

    graph = EventGraph.create(nodes, senders, receivers, labels)
    return graph, ParticleTruth(particle_id=particle_id, layer_id=layer_id)


def generate_event(cfg: GeneratorConfig, event_index: int = 0) -> EventGraph:
    return generate_event_with_truth(cfg, event_index)[0]


def generate_dataset(cfg: GeneratorConfig, n_events: int) -> list[EventGraph]:
    """Independent events; event i depends only on (cfg.seed, i)."""
    return [generate_event(cfg, i) for i in range(n_events)]


def _sample_false_edges(cfg, rng, nodes, particle_id, layer_id, layers):
    factor = cfg.false_edge_factor
    if factor == 0 or cfg.particles_per_event < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    # candidate pool: 2 * ceil(factor) nearest next-layer hits of other
    # particles; each kept with probability factor / k, so the expected
    # false count is factor * (number of sender hits) and the realized
    # count varies event to event
    k = 2 * math.ceil(factor)
    xyz = np.stack([
        nodes[:, 0] * np.cos(nodes[:, 1]),
        nodes[:, 0] * np.sin(nodes[:, 1]),
        nodes[:, 2],
    ], axis=1)
    senders_out = []
    receivers_out = []
    for layer in range(layers - 1):
        src = np.where(layer_id == layer)[0]
        dst = np.where(layer_id == layer + 1)[0]
        tree = cKDTree(xyz[dst])
        n_query = min(k + 1, len(dst))
        _, nbr = tree.query(xyz[src], k=n_query)
        nbr = np.atleast_2d(nbr)
        cand_global = dst[nbr]                                   # [n_src, n_query]
        same = particle_id[cand_global] == particle_id[src][:, None]
        for row, s in enumerate(src):
            cands = cand_global[row][~same[row]][:k]
            if cands.size == 0:
                continue
            keep = rng.random(cands.size) < (factor / cands.size)
            kept = cands[keep]
            senders_out.append(np.full(kept.size, s, dtype=np.int64))
            receivers_out.append(kept.astype(np.int64))
    if not senders_out:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(senders_out), np.concatenate(receivers_out)


# ---------------------------------------------------------------------------
# Size statistics and padding
# ---------------------------------------------------------------------------

@dataclass
class SizeStats:
    n_nodes: np.ndarray
    n_edges: np.ndarray
    mean_nodes: float
    mean_edges: float
    quantiles: dict  # q -> (node size, edge size), nearest rank

    def render(self) -> str:
        lines = [
            f"events: {len(self.n_nodes)}",
            f"mean nodes: {self.mean_nodes:.1f}   mean edges: {self.mean_edges:.1f}",
        ]
        for q, (qn, qe) in sorted(self.quantiles.items()):
            lines.append(f"q={q:g}: nodes <= {qn}, edges <= {qe}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("event,n_nodes,n_edges\n")
            for i, (n, e) in enumerate(zip(self.n_nodes, self.n_edges)):
                f.write(f"{i},{n},{e}\n")


def size_histogram(events: list[EventGraph],
                   quantiles=(0.5, 0.9, 0.99)) -> SizeStats:
    if not events:
        raise UsageError("size_histogram needs at least one event")
    n_nodes = np.array([g.n_nodes for g in events], dtype=np.int64)
    n_edges = np.array([g.n_edges for g in events], dtype=np.int64)
    qmap = {q: (quantile_pad_size(n_nodes, q), quantile_pad_size(n_edges, q))
            for q in quantiles}
    return SizeStats(
        n_nodes=n_nodes, n_edges=n_edges,
        mean_nodes=float(n_nodes.mean()), mean_edges=float(n_edges.mean()),
        quantiles=qmap,
    )


def quantile_pad_size(sizes, q: float) -> int:
    """Nearest-rank quantile: the ceil(q*n)-th smallest size (1-based)."""
    sizes = np.asarray(sizes)
    if sizes.size == 0:
        raise UsageError("quantile of an empty size list is undefined")
    if not (0 < q <= 1):
        raise UsageError(f"quantile must be in (0, 1], got {q}")
    rank = min(math.ceil(q * sizes.size), sizes.size)
    return int(np.sort(sizes)[rank - 1])


@dataclass
class PaddingSpec:
    target_nodes: int
    target_edges: int
    quantile: float = 1.0

    @classmethod
    def from_events(cls, events: list[EventGraph], q: float) -> "PaddingSpec":
        return cls(
            target_nodes=quantile_pad_size([g.n_nodes for g in events], q),
            target_edges=quantile_pad_size([g.n_edges for g in events], q),
            quantile=q,
        )


@dataclass
class PadResult:
    graph: EventGraph
    truncated_nodes: int = 0
    truncated_edges: int = 0


def pad_graph_with_report(g: EventGraph, spec: PaddingSpec) -> PadResult:
    """Pad (or truncate) a graph to the spec's fixed sizes.

    Oversize graphs lose their highest-index nodes (with every edge touching
    them) and highest-index edges; a 99% pad target clips about 1% of
    graphs by construction, so the result carries truncation counters.
    Padded node rows are zero; padded edges attach to the sink node (last
    node index) with zero validity, so fixed-shape kernels see real indices.
    """
    nodes, senders, receivers = g.nodes, g.senders, g.receivers
    labels, node_valid, edge_valid = g.labels, g.node_valid, g.edge_valid
    truncated_nodes = 0
    truncated_edges = 0

    if g.n_nodes > spec.target_nodes:
        truncated_nodes = g.n_nodes - spec.target_nodes
        keep_edge = (senders < spec.target_nodes) & (receivers < spec.target_nodes)
        truncated_edges += int((~keep_edge).sum())
        nodes = nodes[:spec.target_nodes]
        node_valid = node_valid[:spec.target_nodes]
        senders, receivers = senders[keep_edge], receivers[keep_edge]
        labels, edge_valid = labels[keep_edge], edge_valid[keep_edge]
    if senders.shape[0] > spec.target_edges:
        truncated_edges += senders.shape[0] - spec.target_edges
        senders = senders[:spec.target_edges]
        receivers = receivers[:spec.target_edges]
        labels = labels[:spec.target_edges]
        edge_valid = edge_valid[:spec.target_edges]

    n_pad = spec.target_nodes - nodes.shape[0]
    if n_pad:
        nodes = np.concatenate([nodes, np.zeros((n_pad, 3), dtype=np.float32)])
        node_valid = np.concatenate([node_valid, np.zeros(n_pad, dtype=np.float32)])
    e_pad = spec.target_edges - senders.shape[0]
    if e_pad:
        sink = spec.target_nodes - 1
        senders = np.concatenate([senders, np.full(e_pad, sink, dtype=np.int64)])
        receivers = np.concatenate([receivers, np.full(e_pad, sink, dtype=np.int64)])
        labels = np.concatenate([labels, np.zeros(e_pad, dtype=np.float32)])
        edge_valid = np.concatenate([edge_valid, np.zeros(e_pad, dtype=np.float32)])

    padded = EventGraph(nodes, senders, receivers, labels, node_valid, edge_valid)
    validate_event_graph(padded)
    return PadResult(padded, truncated_nodes, truncated_edges)


def pad_graph(g: EventGraph, spec: PaddingSpec) -> EventGraph:
    return pad_graph_with_report(g, spec).graph


def pad_dataset(events: list[EventGraph],
                spec: PaddingSpec) -> tuple[list[EventGraph], int, int]:
    """Pad every event; returns (padded events, truncated nodes, truncated edges)."""
    out = []
    tn = te = 0
    for g in events:
        res = pad_graph_with_report(g, spec)
        out.append(res.graph)
        tn += res.truncated_nodes
        te += res.truncated_edges
    return out, tn, te


def disjoint_union(graphs: list[EventGraph]) -> EventGraph:
    """Stack graphs into one, shifting edge indices by node offsets."""
    if not graphs:
        raise UsageError("disjoint_union needs at least one graph")
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return EventGraph(
        nodes=np.concatenate([g.nodes for g in graphs]),
        senders=np.concatenate([g.senders + off for g, off in zip(graphs, offsets)]),
        receivers=np.concatenate([g.receivers + off for g, off in zip(graphs, offsets)]),
        labels=np.concatenate([g.labels for g in graphs]),
        node_valid=np.concatenate([g.node_valid for g in graphs]),
        edge_valid=np.concatenate([g.edge_valid for g in graphs]),
    )


# ---------------------------------------------------------------------------
# Serialization: one self-describing JSON document per event
# ---------------------------------------------------------------------------

def _fmt9(x: float) -> str:
    # 9 significant digits round-trip float32 exactly
    return format(float(x), ".9g")


def event_to_json(g: EventGraph) -> str:
    node_rows = ",".join(
        "[" + ",".join(_fmt9(v) for v in row) + "]" for row in g.nodes
    )
    senders = ",".join(str(int(s)) for s in g.senders)
    receivers = ",".join(str(int(r)) for r in g.receivers)
    labels = ",".join(str(int(l)) for l in g.labels)
    return ('{"nodes":[%s],"senders":[%s],"receivers":[%s],"labels":[%s]}'
            % (node_rows, senders, receivers, labels))


def write_event(g: EventGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(event_to_json(g))
        f.write("\n")


def read_event(path) -> EventGraph:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        return EventGraph.create(doc["nodes"], doc["senders"],
                                 doc["receivers"], doc["labels"])
    except KeyError as exc:
        raise DataError(f"event file {path} is missing field {exc}") from exc


DATASET_MANIFEST = "dataset.json"


def write_dataset(events: list[EventGraph], directory,
                  cfg: GeneratorConfig) -> list[str]:
    """Write one file per event plus a manifest naming them and the config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, g in enumerate(events):
        name = f"event_{i:05d}.json"
        write_event(g, directory / name)
        files.append(name)
    manifest = {"files": files, "generator": cfg.to_dict()}
    with open(directory / DATASET_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return files


def read_dataset(directory) -> tuple[list[EventGraph], dict]:
    directory = Path(directory)
    manifest_path = directory / DATASET_MANIFEST
    if not manifest_path.exists():
        raise UsageError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    events = [read_event(directory / name) for name in manifest["files"]]
    if not events:
        raise DataError(f"dataset at {directory} lists no events")
    return events, manifest
