"""Cosine distance and k-reciprocal Jaccard distance, plain and modality-balanced.

The modality-aware variant retrieves intra- and inter-modality nearest
neighbors independently (half each) and feeds the rebalanced lists through
the usual reciprocal-expansion / weighted-encoding / local-query-expansion
stages, so that cross-modality neighbors contribute on equal footing to the
final set-overlap distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .embeddings import EmbeddingSet, ensure_normalized

SYMMETRY_TOL = 1e-6
EXPANSION_NUM = 2  # candidate joins when overlap >= (2/3) * |half set|
EXPANSION_DEN = 3


class DistanceError(ValueError):
    """Invalid input to a distance-engine stage."""


class Metric(str, Enum):
    COSINE = "cosine"
    JACCARD_VANILLA = "jaccard_vanilla"
    JACCARD_MODALITY_AWARE = "jaccard_modality_aware"


@dataclass(frozen=True)
class DistanceMatrix:
    """Dense symmetric pairwise distance with metric provenance."""

    values: np.ndarray
    metric: Metric
    params: dict | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DistanceError(f"distance matrix must be square, got {v.shape}")
        if np.abs(v - v.T).max() > SYMMETRY_TOL:
            raise DistanceError("distance matrix is not symmetric")
        if np.abs(np.diagonal(v)).max() > SYMMETRY_TOL:
            raise DistanceError("distance matrix diagonal is not zero")
        lo, hi = v.min(), v.max()
        limit = self._range_limit()
        if lo < -SYMMETRY_TOL or hi > limit + SYMMETRY_TOL:
            raise DistanceError(
                f"{self.metric.value} values [{lo}, {hi}] outside [0, {limit}]"
            )
        object.__setattr__(self, "values", v)
        v.setflags(write=False)

    def _range_limit(self) -> float:
        if self.metric is Metric.COSINE:
            return 2.0
        if self.params and self.params.get("cosine_weight", 0.0) > 0.0:
            return 2.0
        return 1.0

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NeighborList:
    """Per-query neighbor indices sorted ascending by distance (ties by index)."""

    indices: np.ndarray    # (N, k) int64
    distances: np.ndarray  # (N, k) float64
    k: int
    balanced: bool


@dataclass(frozen=True)
class ReciprocalSet:
    """Per-query expanded k-reciprocal membership; always contains the query."""

    membership: np.ndarray  # (N, N) bool

    def indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.membership[i])


def cosine_distance(s: EmbeddingSet) -> DistanceMatrix:
    """1 - <f_i, f_j> on unit rows; symmetric, zero diagonal, values in [0, 2]."""
    s = ensure_normalized(s)
    v = 1.0 - s.features @ s.features.T
    v = np.clip((v + v.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(v, 0.0)
    return DistanceMatrix(v, Metric.COSINE)


def _row_sorted(indices: np.ndarray, dists: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort each row by (distance, index)."""
    n, k = indices.shape
    rows = np.repeat(np.arange(n), k)
    order = np.lexsort((indices.ravel(), dists.ravel(), rows))
    return indices.ravel()[order].reshape(n, k), dists.ravel()[order].reshape(n, k)


def knn(d: DistanceMatrix, k: int) -> NeighborList:
    """k nearest non-self indices per query, ascending; ties broken by lower index."""
    n = d.n
    if not 0 < k < n:
        raise DistanceError(f"k must satisfy 0 < k < N; got k={k}, N={n}")
    vals = d.values.copy()
    np.fill_diagonal(vals, np.inf)
    idx = np.argsort(vals, axis=1, kind="stable")[:, :k]
    return NeighborList(idx, np.take_along_axis(vals, idx, axis=1), k, balanced=False)


def knn_modality_balanced(d: DistanceMatrix, modality: np.ndarray, k: int) -> NeighborList:
    """Union of the ceil(k/2) nearest intra- and floor(k/2) nearest inter-modality
    non-self indices per query, merged and sorted by distance."""
    n = d.n
    modality = np.asarray(modality)
    if modality.shape != (n,):
        raise DistanceError("modality vector length does not match distance matrix")
    if not 0 < k < n:
        raise DistanceError(f"k must satisfy 0 < k < N; got k={k}, N={n}")
    q_intra, q_inter = (k + 1) // 2, k // 2

    groups = {int(m): np.flatnonzero(modality == m) for m in np.unique(modality)}
    if len(groups) < 2:
        raise DistanceError("balanced retrieval needs both modalities present")
    for m, rows in groups.items():
        if rows.size < max(q_intra + 1, q_inter):
            raise DistanceError(
                f"modality {m} has {rows.size} rows; needs >= {max(q_intra + 1, q_inter)}"
            )

    vals = d.values.copy()
    np.fill_diagonal(vals, np.inf)
    # Rank every query against each modality group once; stable sort keeps
    # the documented lower-index tie-break because group columns ascend.
    group_order = {m: np.argsort(vals[:, cols], axis=1, kind="stable")
                   for m, cols in groups.items()}

    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for m, cols in groups.items():
        queries = np.flatnonzero(modality == m)
        other = next(mm for mm in groups if mm != m)
        intra = groups[m][group_order[m][queries, :q_intra]]
        inter = groups[other][group_order[other][queries, :q_inter]]
        idx[queries] = np.concatenate([intra, inter], axis=1)
        dist[queries] = np.take_along_axis(vals[queries], idx[queries], axis=1)
    idx, dist = _row_sorted(idx, dist)
    return NeighborList(idx, dist, k, balanced=True)


def _membership(indices: np.ndarray, n: int, include_self: bool) -> np.ndarray:
    m = np.zeros((n, n), dtype=bool)
    m[np.repeat(np.arange(n), indices.shape[1]), indices.ravel()] = True
    if include_self:
        np.fill_diagonal(m, True)
    return m


def reciprocal_expand(neighbors: NeighborList, k1: int,
                      half_neighbors: NeighborList | None = None) -> ReciprocalSet:
    """Mutual-kNN sets (self included), expanded by each candidate's half-k1
    reciprocal set when it overlaps the query's set in at least 2/3 of its size.

    For balanced neighbor lists the half-k1 lists must be supplied, built by
    the same balanced constructor at k1//2; the sorted prefix of a merged
    balanced list is not the balanced half-list.
    """
    n = neighbors.indices.shape[0]
    if neighbors.k < k1:
        raise DistanceError(f"neighbor lists of length {neighbors.k} < k1={k1}")
    if half_neighbors is None:
        if neighbors.balanced:
            raise DistanceError("balanced lists require explicit half_neighbors")
        half_idx = neighbors.indices[:, : k1 // 2]
    else:
        half_idx = half_neighbors.indices

    mutual = _membership(neighbors.indices[:, :k1], n, include_self=False)
    mutual &= mutual.T
    np.fill_diagonal(mutual, True)

    half = _membership(half_idx, n, include_self=False)
    half &= half.T
    np.fill_diagonal(half, True)
    half_sizes = half.sum(axis=1)

    expanded = mutual.copy()
    for i in range(n):
        cand = np.flatnonzero(mutual[i])
        overlap = (half[cand] & mutual[i]).sum(axis=1)
        join = cand[EXPANSION_DEN * overlap >= EXPANSION_NUM * half_sizes[cand]]
        if join.size:
            expanded[i] |= np.any(half[join], axis=0)
    return ReciprocalSet(expanded)


def v_encode(d: DistanceMatrix, reciprocal: ReciprocalSet) -> sp.csr_matrix:
    """Gaussian-weighted neighbor encoding: V[i,j] = exp(-D[i,j]) on the expanded
    set of i, rows L1-normalized."""
    rows, cols = np.nonzero(reciprocal.membership)
    weights = np.exp(-d.values[rows, cols])
    v = sp.csr_matrix((weights, (rows, cols)), shape=reciprocal.membership.shape)
    sums = np.asarray(v.sum(axis=1)).ravel()
    inv = sp.diags(1.0 / sums)
    return (inv @ v).tocsr()


def _lqe_neighborhood(d: DistanceMatrix, modality: np.ndarray | None, k2: int,
                      balanced: bool) -> np.ndarray:
    """k2 expansion indices per query, self included as an intra candidate."""
    n = d.n
    if not 0 < k2 <= n:
        raise DistanceError(f"k2 must satisfy 0 < k2 <= N; got k2={k2}, N={n}")
    if not balanced:
        return np.argsort(d.values, axis=1, kind="stable")[:, :k2]
    q = k2 // 2
    groups = {int(m): np.flatnonzero(modality == m) for m in np.unique(modality)}
    if len(groups) < 2:
        raise DistanceError("balanced expansion needs both modalities present")
    for m, rows in groups.items():
        if rows.size < q + 1:
            raise DistanceError(f"modality {m} has {rows.size} rows; needs >= {q + 1}")
    order = {m: np.argsort(d.values[:, cols], axis=1, kind="stable")
             for m, cols in groups.items()}
    idx = np.empty((n, k2), dtype=np.int64)
    for m, cols in groups.items():
        queries = np.flatnonzero(modality == m)
        other = next(mm for mm in groups if mm != m)
        intra = groups[m][order[m][queries, :q]]
        inter = groups[other][order[other][queries, :q]]
        idx[queries] = np.concatenate([intra, inter], axis=1)
    return idx


def balanced_lqe(v: sp.spmatrix, d: DistanceMatrix, modality: np.ndarray,
                 k2: int) -> sp.csr_matrix:
    """Average the V rows of the balanced k2 neighborhood (k2/2 intra including
    self, k2/2 inter) of each query."""
    if k2 % 2:
        raise DistanceError(f"k2 must be even, got {k2}")
    nb = _lqe_neighborhood(d, modality, k2, balanced=True)
    return _average_rows(v, nb)


def plain_lqe(v: sp.spmatrix, d: DistanceMatrix, k2: int) -> sp.csr_matrix:
    """Average the V rows of the plain k2-nearest neighborhood (self included)."""
    nb = _lqe_neighborhood(d, None, k2, balanced=False)
    return _average_rows(v, nb)


def _average_rows(v: sp.spmatrix, nb: np.ndarray) -> sp.csr_matrix:
    n, k = nb.shape
    ones = np.full(n * k, 1.0 / k)
    a = sp.csr_matrix((ones, (np.repeat(np.arange(n), k), nb.ravel())), shape=(n, n))
    return (a @ v.tocsr()).tocsr()


def jaccard_from_v(v: sp.spmatrix, metric: Metric = Metric.JACCARD_VANILLA,
                   params: dict | None = None) -> DistanceMatrix:
    """1 - sum_k min(V[i,k], V[j,k]) / sum_k max(V[i,k], V[j,k]).

    The max-sum is evaluated through the exact identity
    sum max = rowsum_i + rowsum_j - sum min.
    """
    v = v.tocsr()
    if v.nnz and v.data.min() < 0:
        raise DistanceError("negative weight in V encoding")
    n = v.shape[0]
    sums = np.asarray(v.sum(axis=1)).ravel()
    if np.any(sums <= 0):
        raise DistanceError("V has an empty row")
    mins = np.zeros((n, n))
    vc = v.tocsc()
    for c in range(n):
        lo, hi = vc.indptr[c], vc.indptr[c + 1]
        if hi > lo:
            rows = vc.indices[lo:hi]
            vals = vc.data[lo:hi]
            mins[np.ix_(rows, rows)] += np.minimum.outer(vals, vals)
    denom = sums[:, None] + sums[None, :] - mins
    out = 1.0 - mins / denom
    out = np.clip((out + out.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(out, metric, params)


def jaccard_distance(s: EmbeddingSet, k1: int = 30, k2: int = 6,
                     mode: str = "vanilla", cosine_weight: float = 0.0,
                     lqe_mode: str = "v") -> DistanceMatrix:
    """Full k-reciprocal Jaccard pipeline over cosine base distance.

    mode "vanilla" uses plain kNN retrieval and expansion; "modality_aware"
    uses the balanced per-modality retrieval for both the k1 lists and the k2
    expansion neighborhoods. The output is pure Jaccard unless cosine_weight
    > 0 mixes the base cosine matrix back in. lqe_mode "dist" switches local
    query expansion from averaging V rows to averaging the resulting distance
    rows (non-default alternative reading; output symmetrized).
    """
    if mode not in ("vanilla", "modality_aware"):
        raise DistanceError(f"unknown mode {mode!r}")
    if lqe_mode not in ("v", "dist"):
        raise DistanceError(f"unknown lqe_mode {lqe_mode!r}")
    if k1 % 2 or k2 % 2:
        raise DistanceError(f"k1 and k2 must be even, got k1={k1}, k2={k2}")
    if not 0.0 <= cosine_weight <= 1.0:
        raise DistanceError("cosine_weight must be in [0, 1]")
    s = ensure_normalized(s)
    d = cosine_distance(s)
    metric = Metric.JACCARD_VANILLA if mode == "vanilla" else Metric.JACCARD_MODALITY_AWARE
    params = {"k1": k1, "k2": k2}
    if cosine_weight:
        params["cosine_weight"] = cosine_weight

    if mode == "vanilla":
        nb = knn(d, k1)
        rec = reciprocal_expand(nb, k1)
    else:
        nb = knn_modality_balanced(d, s.modality, k1)
        half = knn_modality_balanced(d, s.modality, k1 // 2)
        rec = reciprocal_expand(nb, k1, half_neighbors=half)
    v = v_encode(d, rec)

    if lqe_mode == "v":
        if mode == "vanilla":
            v2 = plain_lqe(v, d, k2)
        else:
            v2 = balanced_lqe(v, d, s.modality, k2)
        out = jaccard_from_v(v2, metric, params)
        values = out.values
    else:
        base = jaccard_from_v(v, metric, params)
        nbh = _lqe_neighborhood(d, s.modality if mode != "vanilla" else None,
                                k2, balanced=mode != "vanilla")
        values = base.values[nbh.ravel()].reshape(d.n, k2, d.n).mean(axis=1)
        values = np.clip((values + values.T) / 2.0, 0.0, 1.0)
        np.fill_diagonal(values, 0.0)

    if cosine_weight:
        values = (1.0 - cosine_weight) * values + cosine_weight * d.values
        values = values.copy()
        np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values, metric, params)


def knn_composition(neighbors: NeighborList, modality: np.ndarray) -> tuple[np.ndarray, float]:
    """Fraction of inter-modality indices in each query's list, and the mean."""
    modality = np.asarray(modality)
    inter = modality[neighbors.indices] != modality[:, None]
    frac = inter.mean(axis=1)
    return frac, float(frac.mean())
