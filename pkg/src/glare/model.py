"""The two-level EdgeConv network.

Pipeline per graph: fine EdgeConv stack on the landmark kNN graph, k-means
partition of the landmark coordinates, mean pooling into region nodes,
region EdgeConv stack on a region graph, sum over regions, linear head.

Graphs are batched as a disjoint union (node arrays concatenated with
offsets). Neighbourhoods are stored as padded in-neighbour tables so that
the max over messages is a single reduction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, InvariantError, SchemaError
from .features import FEATURE_MODES, Featurizer, RawSample
from .graph import (FineGraph, Partition, build_knn_edges, build_region_knn, kmeans_partition,
                    mean_pool_matrix, neighbor_table, quotient_induced, region_pool,
                    symmetrize_edges)
from .numerics import Mlp2Params, mlp2_param_count
from .seeding import substream

CHECKPOINT_FORMAT = "glare-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class GlareConfig:
    f: int = 16
    fine_layers: int = 2
    fine_hidden: int = 32
    fine_out: int = 32
    region_layers: int = 2
    region_hidden: int = 64
    region_out: int = 64
    k_regions: int = 8
    k_nn: int = 8
    k_q: int = 3
    n_classes: int = 7
    feature_mode: str = "joint"
    use_quotient: bool = True
    region_edges: str = "knn"  # "knn" | "induced"
    symmetrize: bool = False
    kmeans_seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def d_in(self) -> int:
        return self.f + 3

    def validate(self) -> None:
        widths = ("fine_hidden", "fine_out", "region_hidden", "region_out", "n_classes", "k_nn", "k_q")
        for name in widths:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.f < 0 or self.fine_layers < 0 or self.region_layers < 0:
            raise ValueError("f and layer counts must be non-negative")
        if self.use_quotient and self.k_regions < 2:
            raise ValueError(f"k_regions must be >= 2 with the quotient enabled, got {self.k_regions}")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.region_edges not in ("knn", "induced"):
            raise ValueError("region_edges must be 'knn' or 'induced'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GlareConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def layer_dims(config: GlareConfig) -> tuple[list[tuple[int, int, int]], list[tuple[int, int, int]], int]:
    """``(fine, region, head_in)`` where each stack is a list of (d_in, hidden, d_out)."""
    fine, width = [], config.d_in
    for _ in range(config.fine_layers):
        fine.append((2 * width, config.fine_hidden, config.fine_out))
        width = config.fine_out
    region = []
    for _ in range(config.region_layers):
        region.append((2 * width, config.region_hidden, config.region_out))
        width = config.region_out
    return fine, region, width


def param_count(config: GlareConfig) -> int:
    fine, region, head_in = layer_dims(config)
    total = sum(mlp2_param_count(*dims) for dims in fine + region)
    return total + config.n_classes * head_in + config.n_classes


class ModelParams:
    """All trainable weights, stored in one flat vector.

    ``fine_convs``, ``region_convs``, ``head_W`` and ``head_b`` are views
    into ``flat``; update ``flat`` in place (``assign``) to keep them live.
    """

    def __init__(self, config: GlareConfig, flat: np.ndarray | None = None):
        self.config = config
        n = param_count(config)
        if flat is None:
            flat = np.zeros(n)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise DimensionError(f"flat parameter vector has shape {flat.shape}, config needs ({n},)")
        self.flat = flat.copy()
        self.version = 0
        fine, region, head_in = layer_dims(config)
        offset = 0

        def take(shape):
            nonlocal offset
            size = int(np.prod(shape))
            view = self.flat[offset:offset + size].reshape(shape)
            offset += size
            return view

        def mlp(d_in, h, d_out):
            return Mlp2Params(take((h, d_in)), take((h,)), take((d_out, h)), take((d_out,)))

        self.fine_convs = [mlp(*dims) for dims in fine]
        self.region_convs = [mlp(*dims) for dims in region]
        self.head_W = take((config.n_classes, head_in))
        self.head_b = take((config.n_classes,))
        assert offset == n

    @property
    def size(self) -> int:
        return self.flat.size

    def assign(self, flat: np.ndarray) -> None:
        self.flat[:] = flat
        self.version += 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat)


def init_params(config: GlareConfig, seed: int) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, one named stream per layer."""
    params = ModelParams(config)
    convs = [("fine", i, m) for i, m in enumerate(params.fine_convs)]
    convs += [("region", i, m) for i, m in enumerate(params.region_convs)]
    for stack, i, m in convs:
        rng = substream(seed, f"init/{stack}{i}")
        for arr, fan_in in ((m.W1, m.d_in), (m.b1, m.d_in), (m.W2, m.hidden), (m.b2, m.hidden)):
            bound = 1.0 / np.sqrt(fan_in)
            arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    rng = substream(seed, "init/head")
    bound = 1.0 / np.sqrt(params.head_W.shape[1])
    params.head_W[...] = rng.uniform(-bound, bound, size=params.head_W.shape)
    params.head_b[...] = rng.uniform(-bound, bound, size=params.head_b.shape)
    return params


# --------------------------------------------------------------------------
# EdgeConv

@dataclass
class EdgeConvCache:
    H: np.ndarray
    idx: np.ndarray
    mask: np.ndarray
    act: np.ndarray  # (K*n, hidden), slot-major
    winner: np.ndarray  # (K, n, d_out) bool, exactly one True along axis 0

    @property
    def argmax(self) -> np.ndarray:
        """Winning slot per node and output coordinate."""
        return np.argmax(self.winner, axis=0)


def _first_max(msg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = msg.max(axis=0)
    winner = msg == out
    seen = winner[0].copy()
    for s in range(1, msg.shape[0]):
        # keep only the first maximal slot: ties go to the lowest source index
        winner[s] &= ~seen
        seen |= winner[s]
    return out, winner


def edgeconv_table(H: np.ndarray, idx: np.ndarray, mask: np.ndarray,
                   phi: Mlp2Params, keep_cache: bool = True) -> tuple[np.ndarray, EdgeConvCache | None]:
    """EdgeConv over a padded neighbour table: ``max_j phi([h_i || h_j - h_i])``.

    The first layer is evaluated per node rather than per edge, using
    ``W1 [h_i || h_j - h_i] = (W1a - W1b) h_i + W1b h_j``. Messages are laid
    out slot-major, ``(K, n, d_out)``.
    """
    n, K = idx.shape
    d = H.shape[1]
    if phi.d_in != 2 * d:
        raise DimensionError(f"EdgeConv: phi expects width {phi.d_in}, node features give 2*{d}")
    W1a, W1b = phi.W1[:, :d], phi.W1[:, d:]
    P = H @ (W1a - W1b).T + phi.b1
    Q = H @ W1b.T
    act = np.maximum(Q[idx.T] + P, 0.0).reshape(K * n, -1)
    msg = (act @ phi.W2.T + phi.b2).reshape(K, n, phi.d_out)
    if not mask.all():
        msg[~mask.T] = -np.inf
    if not keep_cache:
        return msg.max(axis=0), None
    out, winner = _first_max(msg)
    return out, EdgeConvCache(H, idx, mask, act, winner)


def edgeconv_table_backward(cache: EdgeConvCache, d_out: np.ndarray, phi: Mlp2Params,
                            scatter: sp.csr_matrix) -> tuple[Mlp2Params, np.ndarray]:
    """Max routes each output coordinate's gradient to its winning message."""
    n, K = cache.idx.shape
    H = cache.H
    d = H.shape[1]
    if d_out.shape != (n, phi.d_out):
        raise DimensionError(f"EdgeConv backward: upstream shape {d_out.shape}, expected {(n, phi.d_out)}")
    d_msg = (cache.winner * d_out).reshape(K * n, phi.d_out)
    dW2 = d_msg.T @ cache.act
    d_pre = (d_msg @ phi.W2) * (cache.act > 0.0)
    dP = d_pre.reshape(K, n, -1).sum(axis=0)
    dQ = np.asarray(scatter @ d_pre)
    W1a, W1b = phi.W1[:, :d], phi.W1[:, d:]
    dA = dP.T @ H
    dW1 = np.concatenate([dA, dQ.T @ H - dA], axis=1)
    dH = dP @ (W1a - W1b) + dQ @ W1b
    return Mlp2Params(dW1, dP.sum(axis=0), dW2, d_out.sum(axis=0)), dH


def scatter_matrix(idx: np.ndarray) -> sp.csr_matrix:
    """(n, K*n) matrix adding each slot-major message gradient onto its source node."""
    n, K = idx.shape
    m = sp.csr_matrix((np.ones(n * K), (idx.T.ravel(), np.arange(n * K))), shape=(n, n * K))
    m.sort_indices()
    return m


def edgeconv_forward(node_feats, edges, phi: Mlp2Params) -> tuple[np.ndarray, EdgeConvCache]:
    """EdgeConv with max aggregation on an explicit edge list.

    Nodes without in-edges aggregate the single message ``phi([h_i || 0])``.
    """
    H = np.asarray(node_feats, dtype=np.float64)
    idx, mask = neighbor_table(edges, H.shape[0])
    return edgeconv_table(H, idx, mask, phi)


def edgeconv_backward(cache: EdgeConvCache, d_out, phi: Mlp2Params) -> tuple[Mlp2Params, np.ndarray]:
    return edgeconv_table_backward(cache, np.asarray(d_out, dtype=np.float64), phi,
                                   scatter_matrix(cache.idx))


def global_add_pool(region_feats) -> np.ndarray:
    R = np.asarray(region_feats, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 1:
        raise DimensionError(f"global_add_pool needs a non-empty (k, d) matrix, got {R.shape}")
    out = R[0].copy()
    for row in R[1:]:
        out += row
    return out


def classify(h_G, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    h_G = np.asarray(h_G, dtype=np.float64)
    if W.shape[1] != h_G.shape[-1] or b.shape != (W.shape[0],):
        raise DimensionError(f"classifier W {W.shape}, b {b.shape} incompatible with input {h_G.shape}")
    return h_G @ W.T + b


# --------------------------------------------------------------------------
# graph preparation and batching

@dataclass
class PreparedGraph:
    """Everything the network needs for one sample that does not depend on
    the weights: node features, fine edges, partition and region edges."""

    features: np.ndarray
    coords: np.ndarray
    fine_edges: np.ndarray
    partition: Partition | None = None
    region_edges: np.ndarray | None = None
    fine_table: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)
    region_table: tuple[np.ndarray, np.ndarray] | None = field(init=False, repr=False)

    def __post_init__(self):
        self.fine_table = neighbor_table(self.fine_edges, self.n_nodes)
        self.region_table = None
        if self.partition is not None:
            self.region_table = neighbor_table(self.region_edges, self.partition.k)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def n_regions(self) -> int:
        return self.partition.k if self.partition is not None else 0


def prepare_graph(graph: FineGraph, config: GlareConfig) -> PreparedGraph:
    if graph.features.shape[1] != config.d_in:
        raise DimensionError(f"node features have width {graph.features.shape[1]}, "
                             f"config expects {config.d_in}")
    edges = symmetrize_edges(graph.edges) if config.symmetrize else graph.edges
    if not config.use_quotient:
        return PreparedGraph(graph.features, graph.coords, edges)
    part, _ = kmeans_partition(graph.coords, config.k_regions, seed=config.kmeans_seed)
    if config.region_edges == "induced":
        q = quotient_induced(FineGraph(graph.coords, graph.features, edges), part)
        region_edges = q.edges
    else:
        _, region_coords = region_pool(graph.features, graph.coords, part)
        region_edges = build_region_knn(region_coords, config.k_q)
    return PreparedGraph(graph.features, graph.coords, edges, part, region_edges)


def build_fine_graph(coords: np.ndarray, features: np.ndarray, config: GlareConfig) -> FineGraph:
    return FineGraph(coords, features, build_knn_edges(coords, config.k_nn))


def prepare_sample(sample: RawSample, featurizer: Featurizer, config: GlareConfig) -> PreparedGraph:
    coords, feats = featurizer.transform(sample)
    return prepare_graph(build_fine_graph(coords, feats, config), config)


@dataclass
class GraphBatch:
    x: np.ndarray
    fine_idx: np.ndarray
    fine_mask: np.ndarray
    fine_scatter: sp.csr_matrix
    node_readout: sp.csr_matrix  # (B, n_total) ones
    pool: sp.csr_matrix | None = None  # (n_regions_total, n_total) means
    region_idx: np.ndarray | None = None
    region_mask: np.ndarray | None = None
    region_scatter: sp.csr_matrix | None = None
    region_readout: sp.csr_matrix | None = None  # (B, n_regions_total) ones
    n_graphs: int = 0


def _padded_union(tables: list[tuple[np.ndarray, np.ndarray]], offsets: np.ndarray):
    K = max(t[0].shape[1] for t in tables)
    idx_parts, mask_parts = [], []
    for (idx, mask), off in zip(tables, offsets):
        n, k = idx.shape
        pad = K - k
        gi = idx + off
        if pad:
            self_col = np.repeat((np.arange(n) + off)[:, None], pad, axis=1)
            gi = np.concatenate([gi, self_col], axis=1)
            mask = np.concatenate([mask, np.zeros((n, pad), dtype=bool)], axis=1)
        idx_parts.append(gi)
        mask_parts.append(mask)
    return np.concatenate(idx_parts), np.concatenate(mask_parts)


def _readout(sizes: list[int]) -> sp.csr_matrix:
    rows = np.repeat(np.arange(len(sizes)), sizes)
    n = int(np.sum(sizes))
    m = sp.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(len(sizes), n))
    m.sort_indices()
    return m


def collate(graphs: list[PreparedGraph], use_quotient: bool) -> GraphBatch:
    sizes = [g.n_nodes for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    x = np.concatenate([g.features for g in graphs])
    fine_idx, fine_mask = _padded_union([g.fine_table for g in graphs], offsets)
    batch = GraphBatch(x, fine_idx, fine_mask, scatter_matrix(fine_idx), _readout(sizes),
                       n_graphs=len(graphs))
    if not use_quotient:
        return batch
    if any(g.partition is None for g in graphs):
        raise InvariantError("graph was prepared without a partition but the quotient is enabled")
    ks = [g.n_regions for g in graphs]
    r_offsets = np.concatenate([[0], np.cumsum(ks)[:-1]]).astype(np.int64)
    assign = np.concatenate([g.partition.assignment + off for g, off in zip(graphs, r_offsets)])
    batch.pool = mean_pool_matrix(assign, int(np.sum(ks)))
    batch.region_idx, batch.region_mask = _padded_union([g.region_table for g in graphs], r_offsets)
    batch.region_scatter = scatter_matrix(batch.region_idx)
    batch.region_readout = _readout(ks)
    return batch


# --------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardCache:
    batch: GraphBatch
    params: ModelParams
    version: int
    fine: list[EdgeConvCache]
    region: list[EdgeConvCache]
    fine_embeddings: list[np.ndarray]
    region_embeddings: list[np.ndarray]
    h_G: np.ndarray
    logits: np.ndarray
    message_counts: dict[str, list[int]] = field(default_factory=dict)
    used: bool = False


def run_stack(H: np.ndarray, idx: np.ndarray, mask: np.ndarray, convs: list[Mlp2Params],
              keep_cache: bool = True) -> tuple[list[np.ndarray], list[EdgeConvCache]]:
    outs, caches = [H], []
    for phi in convs:
        H, c = edgeconv_table(H, idx, mask, phi, keep_cache)
        outs.append(H)
        caches.append(c)
    return outs, caches


def forward_batch(batch: GraphBatch, params: ModelParams,
                  keep_cache: bool = True) -> tuple[np.ndarray, ForwardCache | None]:
    """Logits ``(B, C)`` for a collated batch. With ``keep_cache=False`` the
    max-routing state needed by backward is not built and no cache is returned."""
    cfg = params.config
    if batch.x.shape[1] != cfg.d_in:
        raise DimensionError(f"batch features have width {batch.x.shape[1]}, model expects {cfg.d_in}")
    fine_out, fine_c = run_stack(batch.x, batch.fine_idx, batch.fine_mask, params.fine_convs, keep_cache)
    n_fine_msgs = int(batch.fine_mask.sum())
    if cfg.use_quotient:
        R0 = np.asarray(batch.pool @ fine_out[-1])
        reg_out, reg_c = run_stack(R0, batch.region_idx, batch.region_mask, params.region_convs, keep_cache)
        h_G = np.asarray(batch.region_readout @ reg_out[-1])
        n_reg_msgs = int(batch.region_mask.sum())
    else:
        # no coarsening: the second stack runs directly on the landmark graph
        reg_out, reg_c = run_stack(fine_out[-1], batch.fine_idx, batch.fine_mask, params.region_convs,
                                   keep_cache)
        h_G = np.asarray(batch.node_readout @ reg_out[-1])
        n_reg_msgs = n_fine_msgs
    logits = classify(h_G, params.head_W, params.head_b)
    if not keep_cache:
        return logits, None
    counts = {"fine": [n_fine_msgs] * len(params.fine_convs),
              "region": [n_reg_msgs] * len(params.region_convs)}
    cache = ForwardCache(batch, params, params.version, fine_c, reg_c, fine_out, reg_out,
                         h_G, logits, counts)
    return logits, cache


def backward_batch(cache: ForwardCache, d_logits: np.ndarray, params: ModelParams) -> ModelParams:
    """Exact reverse pass. The partition is treated as a constant."""
    if cache.used:
        raise InvariantError("forward cache already consumed by a backward pass")
    if cache.params is not params or cache.version != params.version:
        raise InvariantError("forward cache is stale: parameters changed since the forward pass")
    cache.used = True
    cfg = params.config
    batch = cache.batch
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != cache.logits.shape:
        raise DimensionError(f"d_logits shape {d_logits.shape} != logits shape {cache.logits.shape}")
    grads = ModelParams(cfg)
    grads.head_W[...] = d_logits.T @ cache.h_G
    grads.head_b[...] = d_logits.sum(axis=0)
    d_hG = d_logits @ params.head_W

    if cfg.use_quotient:
        dR = np.asarray(batch.region_readout.T @ d_hG)
        scatter = batch.region_scatter
    else:
        dR = np.asarray(batch.node_readout.T @ d_hG)
        scatter = batch.fine_scatter
    for layer in reversed(range(len(params.region_convs))):
        g, dR = edgeconv_table_backward(cache.region[layer], dR, params.region_convs[layer], scatter)
        _copy_mlp(grads.region_convs[layer], g)
    dH = np.asarray(batch.pool.T @ dR) if cfg.use_quotient else dR
    for layer in reversed(range(len(params.fine_convs))):
        g, dH = edgeconv_table_backward(cache.fine[layer], dH, params.fine_convs[layer], batch.fine_scatter)
        _copy_mlp(grads.fine_convs[layer], g)
    return grads


def _copy_mlp(dst: Mlp2Params, src: Mlp2Params) -> None:
    dst.W1[...] = src.W1
    dst.b1[...] = src.b1
    dst.W2[...] = src.W2
    dst.b2[...] = src.b2


def glare_forward(graph: FineGraph, params: ModelParams, config: GlareConfig | None = None
                  ) -> tuple[np.ndarray, ForwardCache]:
    """Logits for one landmark graph (k-means runs on ``graph.coords``)."""
    config = config or params.config
    if config != params.config:
        raise SchemaError("config does not match the parameters' config")
    prepared = prepare_graph(graph, config)
    logits, cache = forward_batch(collate([prepared], config.use_quotient), params)
    return logits[0], cache


def glare_backward(cache: ForwardCache, d_logits, params: ModelParams) -> ModelParams:
    return backward_batch(cache, np.atleast_2d(d_logits), params)


# --------------------------------------------------------------------------
# bundled model + checkpoints

@dataclass
class GlareModel:
    config: GlareConfig
    params: ModelParams
    featurizer: Featurizer

    def prepare(self, samples: list[RawSample]) -> list[PreparedGraph]:
        return [prepare_sample(s, self.featurizer, self.config) for s in samples]

    def logits(self, samples: list[RawSample], batch_size: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(samples), batch_size):
            graphs = self.prepare(samples[start:start + batch_size])
            lg, _ = forward_batch(collate(graphs, self.config.use_quotient), self.params, keep_cache=False)
            out.append(lg)
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))


def checkpoint_dumps(model: GlareModel) -> str:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "config": model.config.to_dict(), "featurizer": model.featurizer.to_dict(),
           "params": model.params.flat.tolist()}
    return json.dumps(doc, sort_keys=True) + "\n"


def checkpoint_loads(text: str) -> GlareModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"checkpoint is not valid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = GlareConfig.from_dict(doc["config"])
        featurizer = Featurizer.from_dict(doc["featurizer"])
        flat = np.asarray(doc["params"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed checkpoint: {exc}") from exc
    if not np.all(np.isfinite(flat)):
        raise SchemaError("checkpoint parameters contain NaN or Inf")
    if featurizer.width != config.d_in:
        raise SchemaError(f"featurizer width {featurizer.width} != model input width {config.d_in}")
    try:
        params = ModelParams(config, flat)
    except DimensionError as exc:
        raise SchemaError(f"checkpoint parameters do not fit the config: {exc}") from exc
    return GlareModel(config, params, featurizer)
