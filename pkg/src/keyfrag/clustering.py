"""Unsupervised clustering of trial-level representations.

Trials are pooled to single vectors (mean over the sampled indices, or over
the whole trial when no fragments are given), connected by k-NN star
hyperedges, and clustered in the eigenspace of the normalized hypergraph
Laplacian. Simple-graph and PCA+k-means baselines share the same surface.
Cluster-to-class alignment uses a Hungarian assignment on the contingency
table; localization quality is scored by tIoU recall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data_io import Trial
from .numerics import Array, Rng, sym_eigs_smallest
from .selector import Fragment, fragment_indices, fragment_interval

METHODS = ("hypergraph", "simple_graph", "pca_kmeans")

SIGMA_FLOOR = 1e-12


@dataclass
class Hypergraph:
    """Star-expansion hypergraph: one weighted hyperedge per vertex containing
    the vertex and its nearest neighbors."""

    vertex_count: int
    incidence: Array       # vertex x hyperedge, 0/1
    weights: Array         # per hyperedge, > 0
    vertex_degrees: Array  # sum_e w_e h(v, e)
    edge_degrees: Array    # |e|

    def __post_init__(self):
        if np.any(self.incidence.sum(axis=0) < 2):
            raise ValueError("every hyperedge must contain at least 2 vertices")
        if np.any(self.weights <= 0):
            raise ValueError("hyperedge weights must be positive")


@dataclass
class ClusterResult:
    assignments: Array
    embedding: Array
    method: str
    aligned_accuracy: float | None = None
    f1: float | None = None
    nmi: float | None = None


def pool_trial(trial: Trial, fragments: list[Fragment] | None = None) -> Array:
    """Mean feature vector over the union of fragment samples, or over the
    whole trial when no fragments are supplied."""
    if fragments:
        idx = fragment_indices(fragments, trial.T)
        return trial.features[idx].mean(axis=0)
    return trial.features.mean(axis=0)


def _distance_matrix(vectors: Array) -> Array:
    sq = np.sum(vectors ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * vectors @ vectors.T
    return np.sqrt(np.maximum(d2, 0.0))


def _median_sigma(dists: Array) -> float:
    n = dists.shape[0]
    upper = dists[np.triu_indices(n, k=1)]
    return max(float(np.median(upper)), SIGMA_FLOOR)


def _knn_indices(dists: Array, k_nn: int) -> list[Array]:
    """k nearest neighbors per vertex (self excluded); stable order breaks
    distance ties by index."""
    n = dists.shape[0]
    out = []
    for v in range(n):
        order = np.argsort(dists[v], kind="stable")
        out.append(np.array([j for j in order if j != v][:k_nn]))
    return out


def build_hypergraph(vectors: Array, k_nn: int) -> Hypergraph:
    """One hyperedge per vertex joining it with its k_nn nearest Euclidean
    neighbors; Gaussian weights with a median-distance bandwidth."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if not 1 <= k_nn < n:
        raise ValueError(f"need n > k_nn >= 1, got n={n}, k_nn={k_nn}")
    dists = _distance_matrix(vectors)
    sigma = _median_sigma(dists)
    neighbors = _knn_indices(dists, k_nn)
    incidence = np.zeros((n, n))
    weights = np.empty(n)
    for v, nbrs in enumerate(neighbors):
        members = np.concatenate([[v], nbrs])
        incidence[members, v] = 1.0
        weights[v] = float(np.mean(np.exp(-(dists[v, members] / sigma) ** 2)))
    vertex_degrees = incidence @ weights
    edge_degrees = incidence.sum(axis=0)
    return Hypergraph(vertex_count=n, incidence=incidence, weights=weights,
                      vertex_degrees=vertex_degrees, edge_degrees=edge_degrees)


def hypergraph_laplacian(h: Hypergraph) -> Array:
    """Normalized hypergraph Laplacian
    I - Dv^{-1/2} H W De^{-1} H^T Dv^{-1/2}; symmetric positive semidefinite."""
    isolated = np.flatnonzero(h.vertex_degrees <= 0)
    if isolated.size:
        raise ValueError(f"isolated vertex {int(isolated[0])} has zero degree")
    dv_inv_sqrt = 1.0 / np.sqrt(h.vertex_degrees)
    scaled = h.incidence * dv_inv_sqrt[:, None]          # Dv^{-1/2} H
    core = scaled * (h.weights / h.edge_degrees)[None, :]
    lap = np.eye(h.vertex_count) - core @ scaled.T
    return 0.5 * (lap + lap.T)


def _simple_graph_laplacian(vectors: Array, k_nn: int) -> Array:
    """Normalized Laplacian of the Gaussian-weighted k-NN pairwise graph
    (edges are the symmetric union of neighbor relations)."""
    n = vectors.shape[0]
    dists = _distance_matrix(vectors)
    sigma = _median_sigma(dists)
    w = np.zeros((n, n))
    for v, nbrs in enumerate(_knn_indices(dists, k_nn)):
        w[v, nbrs] = np.exp(-(dists[v, nbrs] / sigma) ** 2)
    w = np.maximum(w, w.T)
    deg = w.sum(axis=1)
    isolated = np.flatnonzero(deg <= 0)
    if isolated.size:
        raise ValueError(f"isolated vertex {int(isolated[0])} has zero degree")
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - w * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def _kmeans_pp_init(data: Array, k: int, rng: Rng) -> Array:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = data[first]
    closest_sq = np.sum((data - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total <= 0:
            pick = int(rng.integers(0, n))
        else:
            u = float(rng.uniform()) * total
            pick = int(np.searchsorted(np.cumsum(closest_sq), u, side="right"))
            pick = min(pick, n - 1)
        centers[j] = data[pick]
        closest_sq = np.minimum(closest_sq, np.sum((data - centers[j]) ** 2, axis=1))
    return centers


def kmeans(data: Array, k: int, rng: Rng, restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-9) -> tuple[Array, float]:
    """k-means++ with seeded restarts; returns (assignments, inertia) of the
    best restart (lowest inertia, ties to the earliest restart)."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = _kmeans_pp_init(data, k, rng)
        prev_inertia = np.inf
        for _ in range(max_iter):
            d2 = (np.sum(data ** 2, axis=1)[:, None] + np.sum(centers ** 2, axis=1)[None, :]
                  - 2.0 * data @ centers.T)
            assign = np.argmin(d2, axis=1)
            inertia = float(np.maximum(d2[np.arange(n), assign], 0.0).sum())
            for j in range(k):
                mask = assign == j
                if mask.any():
                    centers[j] = data[mask].mean(axis=0)
                else:
                    # revive an empty cluster at the worst-fit point
                    worst = int(np.argmax(np.maximum(d2[np.arange(n), assign], 0.0)))
                    centers[j] = data[worst]
                    assign[worst] = j
            if np.isfinite(prev_inertia) and prev_inertia - inertia <= tol * max(prev_inertia, 1e-300):
                break
            prev_inertia = inertia
        if inertia < best_inertia:
            best_assign, best_inertia = assign.copy(), inertia
    return best_assign, best_inertia


def _row_normalize(m: Array) -> Array:
    norms = np.linalg.norm(m, axis=1)
    return m / np.where(norms > 0, norms, 1.0)[:, None]


def spectral_cluster(vectors: Array, c: int, method: str = "hypergraph",
                     seed: int = 0, k_nn: int = 5) -> ClusterResult:
    """Cluster n vectors into c groups.

    hypergraph / simple_graph: embed with the eigenvectors of the c smallest
    eigenvalues of the respective normalized Laplacian, row-normalize, then
    k-means. pca_kmeans: project onto the top-c principal components, then
    k-means. Deterministic given the seed.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if method not in METHODS:
        raise ValueError(f"unknown clustering method '{method}' (expected one of {METHODS})")
    if c < 2:
        raise ValueError("need at least 2 clusters")
    if c >= n:
        raise ValueError(f"degenerate configuration: c={c} clusters for n={n} points")
    rng = Rng(seed)
    if method == "pca_kmeans":
        centered = vectors - vectors.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        comps = vt[:c]
        signs = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
        comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
        embedding = centered @ comps.T
    else:
        k_eff = min(k_nn, n - 1)
        if method == "hypergraph":
            lap = hypergraph_laplacian(build_hypergraph(vectors, k_eff))
        else:
            lap = _simple_graph_laplacian(vectors, k_eff)
        _, vecs = sym_eigs_smallest(lap, c)
        embedding = _row_normalize(vecs)
    assignments, _ = kmeans(embedding, c, rng)
    return ClusterResult(assignments=assignments, embedding=embedding, method=method)


def _contingency(labels: Array, assignments: Array) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    assignments = np.asarray(assignments, dtype=np.int64)
    size = int(max(labels.max(), assignments.max())) + 1
    table = np.zeros((size, size), dtype=np.int64)
    np.add.at(table, (labels, assignments), 1)
    return table


def _nmi_from_table(table: Array) -> float:
    # integer marginals plus fsum over sorted terms keep the value exactly
    # invariant under any permutation of the cluster indices
    n = table.sum()
    pij = table / n
    pi = table.sum(axis=1) / n
    pj = table.sum(axis=0) / n
    nz = pij > 0
    mi = math.fsum(sorted(pij[nz] * np.log(pij[nz] / np.outer(pi, pj)[nz])))
    h_u = -math.fsum(sorted(pi[pi > 0] * np.log(pi[pi > 0])))
    h_v = -math.fsum(sorted(pj[pj > 0] * np.log(pj[pj > 0])))
    denom = 0.5 * (h_u + h_v)
    if denom == 0.0:
        return 1.0  # both partitions are single-cluster, hence identical
    return mi / denom


def align_and_score(assignments: Array, labels: Array) -> tuple[float, float, float]:
    """Optimal cluster-to-class alignment and the resulting metrics.

    Returns (accuracy, F1, NMI). F1 is the positive-class score for two-class
    problems and the macro average otherwise; NMI uses arithmetic-mean
    normalization.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if assignments.shape != labels.shape:
        raise ValueError(f"length mismatch: {assignments.shape} vs {labels.shape}")
    table = _contingency(labels, assignments)
    rows, cols = linear_sum_assignment(-table)
    acc = float(table[rows, cols].sum() / labels.size)

    cluster_to_class = {int(c): int(r) for r, c in zip(rows, cols)}
    predicted = np.array([cluster_to_class[int(a)] for a in assignments])
    classes = np.unique(labels)
    f1s = []
    for cls in classes:
        tp = int(np.sum((predicted == cls) & (labels == cls)))
        fp = int(np.sum((predicted == cls) & (labels != cls)))
        fn = int(np.sum((predicted != cls) & (labels == cls)))
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    if classes.size == 2:
        f1 = f1s[-1]  # positive class of the binary task
    else:
        f1 = float(np.mean(f1s))
    return acc, float(f1), _nmi_from_table(table)


def tiou(pred: tuple[int, int], truth: tuple[int, int]) -> float:
    """Temporal IoU of two half-open [start, end) sample intervals."""
    for name, (start, end) in (("pred", pred), ("truth", truth)):
        if end <= start:
            raise ValueError(f"{name} interval [{start}, {end}) is empty")
    inter = max(0, min(pred[1], truth[1]) - max(pred[0], truth[0]))
    union = (pred[1] - pred[0]) + (truth[1] - truth[0]) - inter
    return inter / union


def recall_at(fragments: list[Fragment], truth_intervals, tau: float) -> float:
    """Fraction of truth intervals matched by a fragment with tIoU >= tau.

    Matching is greedy by descending tIoU; each fragment and each truth
    interval participates in at most one match.
    """
    truth_intervals = list(truth_intervals)
    if not truth_intervals:
        return 0.0
    candidates = []
    for ti, truth in enumerate(truth_intervals):
        for fi, frag in enumerate(fragments):
            v = tiou(fragment_interval(frag), tuple(truth))
            if v >= tau:
                candidates.append((-v, ti, fi))
    candidates.sort()
    used_truth: set[int] = set()
    used_frag: set[int] = set()
    for _, ti, fi in candidates:
        if ti in used_truth or fi in used_frag:
            continue
        used_truth.add(ti)
        used_frag.add(fi)
    return len(used_truth) / len(truth_intervals)
