"""Landmark graphs, k-means partitions and quotient graphs.

Edges are stored as an ``(E, 2)`` integer array of ``(src, dst)`` pairs. A
kNN edge ``j -> i`` means ``j`` is one of ``i``'s nearest neighbours, so the
in-neighbours of ``i`` are exactly ``kNN(i)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateInputError, DimensionError, InvariantError
from .numerics import as_matrix

EMPTY_EDGES = np.zeros((0, 2), dtype=np.int64)


@dataclass(frozen=True)
class FineGraph:
    coords: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, d)
    edges: np.ndarray  # (E, 2) src, dst

    def __post_init__(self):
        coords = as_matrix(self.coords, "coords", cols=3)
        features = as_matrix(self.features, "features")
        if features.shape[0] != coords.shape[0]:
            raise DimensionError(
                f"features have {features.shape[0]} rows but coords have {coords.shape[0]}"
            )
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "edges", _check_edges(self.edges, coords.shape[0]))

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray  # (N,) region id per node
    k: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1:
            raise DimensionError(f"assignment must be 1-D, got shape {a.shape}")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise InvariantError(f"region ids must lie in [0, {self.k})")
        if np.any(np.bincount(a, minlength=self.k) == 0):
            raise InvariantError("partition has an empty region")
        object.__setattr__(self, "assignment", a)

    @property
    def n_nodes(self) -> int:
        return self.assignment.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == r) for r in range(self.k)]


@dataclass(frozen=True)
class QuotientGraph:
    region_features: np.ndarray  # (k, d)
    region_coords: np.ndarray  # (k, 3)
    edges: np.ndarray

    @property
    def k(self) -> int:
        return self.region_coords.shape[0]


@dataclass
class KMeansState:
    centroids: np.ndarray
    partition: Partition
    inertia: float
    iterations: int
    inertia_trace: list[float] = field(default_factory=list)


def _check_edges(edges, n_nodes: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64)
    if e.size == 0:
        return EMPTY_EDGES.copy()
    if e.ndim != 2 or e.shape[1] != 2:
        raise DimensionError(f"edges must have shape (E, 2), got {e.shape}")
    if e.min() < 0 or e.max() >= n_nodes:
        raise DimensionError(f"edge endpoint out of range for {n_nodes} nodes")
    return e


def pairwise_sq_dists(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def build_knn_edges(coords, k_nn: int) -> np.ndarray:
    """Directed kNN edges ``j -> i`` for the ``min(k_nn, N-1)`` nearest ``j != i``.

    Ties in distance go to the lower node index. Output is ordered by
    destination, then distance, then source.
    """
    coords = as_matrix(coords, "coords")
    n = coords.shape[0]
    if n < 2:
        raise DegenerateInputError(f"kNN graph needs at least 2 nodes, got {n}")
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    k = min(k_nn, n - 1)
    d2 = pairwise_sq_dists(coords)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps ascending index among equal distances
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dst = np.repeat(np.arange(n), k)
    return np.stack([order.ravel(), dst], axis=1).astype(np.int64)


def build_region_knn(region_coords, k_q: int) -> np.ndarray:
    region_coords = as_matrix(region_coords, "region_coords")
    if region_coords.shape[0] < 2:
        raise DegenerateInputError("region kNN needs at least 2 regions")
    if k_q < 1:
        raise ValueError(f"k_q must be >= 1, got {k_q}")
    return build_knn_edges(region_coords, min(k_q, region_coords.shape[0] - 1))


def symmetrize_edges(edges: np.ndarray) -> np.ndarray:
    """Union of ``edges`` and their reversals, sorted by (dst, src)."""
    e = np.asarray(edges, dtype=np.int64)
    if e.size == 0:
        return EMPTY_EDGES.copy()
    both = np.unique(np.concatenate([e, e[:, ::-1]]), axis=0)
    return both[np.lexsort((both[:, 0], both[:, 1]))]


def _lloyd_assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = points[:, None, :] - centroids[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    labels = np.argmin(d2, axis=1)  # first minimum: ties go to the lower centroid id
    return labels, d2[np.arange(points.shape[0]), labels]


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            cdf = np.cumsum(closest / total)
            idx = int(np.searchsorted(cdf, rng.random(), side="right"))
            idx = min(idx, n - 1)
            while closest[idx] == 0:  # guard against landing on a zero-mass point
                idx -= 1
        else:
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        closest = np.minimum(closest, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _repair_empty(points, labels, centroids, k) -> bool:
    """Move the point farthest from its centroid into each empty cluster."""
    repaired = False
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        dist = np.sum((points - centroids[labels]) ** 2, axis=1)
        dist[sizes[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        labels[far] = c
        centroids[c] = points[far]
        repaired = True
    return repaired


def _centroids(points, labels, k) -> np.ndarray:
    return np.stack([points[labels == c].mean(axis=0) for c in range(k)])


def kmeans_partition(coords, k: int, seed: int = 0, max_iter: int = 100) -> tuple[Partition, KMeansState]:
    """Lloyd's k-means with k-means++ seeding.

    Points are sorted lexicographically before seeding and regions are
    relabelled by their first member in that order, so the result does not
    depend on the input node order. Empty clusters are refilled with the
    point farthest from its centroid.
    """
    coords = as_matrix(coords, "coords")
    n = coords.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise DegenerateInputError(f"cannot partition {n} nodes into {k} non-empty regions")

    order = np.lexsort(coords.T[::-1])
    points = coords[order]
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)

    labels, d2 = _lloyd_assign(points, centroids)
    trace = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        _repair_empty(points, labels, centroids, k)
        centroids = _centroids(points, labels, k)
        trace.append(float(np.sum((points - centroids[labels]) ** 2)))
        new_labels, d2 = _lloyd_assign(points, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    else:
        # cap reached: recentre on the last assignment
        _repair_empty(points, labels, centroids, k)
        centroids = _centroids(points, labels, k)
        trace.append(float(np.sum((points - centroids[labels]) ** 2)))

    # canonical relabelling: region ids in order of first appearance
    _, first = np.unique(labels, return_index=True)
    relabel = np.empty(k, dtype=np.int64)
    relabel[np.argsort(first, kind="stable")] = np.arange(k)
    sorted_labels = relabel[labels]
    centroids_out = np.empty_like(centroids)
    centroids_out[relabel] = centroids

    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = sorted_labels
    part = Partition(assignment, k)
    inertia = float(np.sum((coords - centroids_out[assignment]) ** 2))
    return part, KMeansState(centroids_out, part, inertia, iterations, trace)


def mean_pool_matrix(assignment: np.ndarray, k: int) -> sp.csr_matrix:
    """Sparse (k, N) matrix whose rows average the members of each region.

    Column indices within a row are ascending, so the product sums members
    in ascending node order.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    sizes = np.bincount(assignment, minlength=k)
    if np.any(sizes == 0):
        raise InvariantError("mean pooling over an empty region")
    n = assignment.shape[0]
    m = sp.csr_matrix((1.0 / sizes[assignment], (assignment, np.arange(n))), shape=(k, n))
    m.sort_indices()
    return m


def region_pool(features, coords, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Per-region means of node features and node coordinates."""
    features = as_matrix(features, "features")
    coords = as_matrix(coords, "coords")
    if features.shape[0] != partition.n_nodes or coords.shape[0] != partition.n_nodes:
        raise DimensionError(
            f"partition covers {partition.n_nodes} nodes but got features {features.shape}, "
            f"coords {coords.shape}"
        )
    pool = mean_pool_matrix(partition.assignment, partition.k)
    return np.asarray(pool @ features), np.asarray(pool @ coords)


def quotient_induced(graph: FineGraph, partition: Partition) -> QuotientGraph:
    """Classical quotient: blocks become nodes, ``B_a -> B_b`` iff some fine
    edge crosses from ``B_a`` into ``B_b`` (``a != b``)."""
    if partition.n_nodes != graph.n_nodes:
        raise DimensionError(
            f"partition covers {partition.n_nodes} nodes, graph has {graph.n_nodes}"
        )
    feats, coords = region_pool(graph.features, graph.coords, partition)
    a = partition.assignment
    mapped = np.stack([a[graph.edges[:, 0]], a[graph.edges[:, 1]]], axis=1) if len(graph.edges) else EMPTY_EDGES
    mapped = mapped[mapped[:, 0] != mapped[:, 1]]
    if len(mapped):
        mapped = np.unique(mapped, axis=0)
        mapped = mapped[np.lexsort((mapped[:, 0], mapped[:, 1]))]
    else:
        mapped = EMPTY_EDGES.copy()
    return QuotientGraph(feats, coords, mapped)


def quotient_knn(graph: FineGraph, partition: Partition, k_q: int) -> QuotientGraph:
    feats, coords = region_pool(graph.features, graph.coords, partition)
    return QuotientGraph(feats, coords, build_region_knn(coords, k_q))


def message_count(edges, n_layers: int) -> int:
    """Number of message-function evaluations an EdgeConv stack performs."""
    return int(n_layers) * len(np.asarray(edges).reshape(-1, 2))


def neighbor_table(edges, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded in-neighbour lists ``(idx, mask)`` of shape ``(n_nodes, K)``.

    Slots are ordered by ascending source index. A node without in-edges
    gets a single slot pointing at itself (the ``[h_i || 0]`` self-message).
    Padding slots also point at the node itself and are masked out.
    """
    e = _check_edges(edges, n_nodes)
    if len(e):
        e = e[np.lexsort((e[:, 0], e[:, 1]))]
    deg = np.bincount(e[:, 1], minlength=n_nodes) if len(e) else np.zeros(n_nodes, dtype=np.int64)
    K = max(1, int(deg.max()) if n_nodes else 1)
    idx = np.repeat(np.arange(n_nodes)[:, None], K, axis=1)
    mask = np.zeros((n_nodes, K), dtype=bool)
    if len(e):
        starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
        slot = np.arange(len(e)) - starts[e[:, 1]]
        idx[e[:, 1], slot] = e[:, 0]
        mask[e[:, 1], slot] = True
    mask[deg == 0, 0] = True
    return idx, mask
