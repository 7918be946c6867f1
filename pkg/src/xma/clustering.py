"""DBSCAN over precomputed distances, subset sampling, intra and global clustering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .distance import DistanceError, DistanceMatrix, jaccard_distance
from .embeddings import EmbeddingSet, Modality, subset_view

logger = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True)
class ClusterConfig:
    eps: float = 0.6
    min_samples: int = 4
    subset_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise DistanceError("eps must be > 0")
        if self.min_samples < 1:
            raise DistanceError("min_samples must be >= 1")
        if not 0.0 < self.subset_ratio <= 1.0:
            raise DistanceError("subset_ratio must be in (0, 1]")


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-row labels (-1 noise, else contiguous 0..C-1) with the member index."""

    labels: np.ndarray
    num_clusters: int
    members: dict[int, np.ndarray]
    source_indices: np.ndarray | None = None

    @classmethod
    def from_labels(cls, labels: np.ndarray,
                    source_indices: np.ndarray | None = None) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        distinct = [int(c) for c in np.unique(labels) if c != NOISE]
        remap = {c: i for i, c in enumerate(sorted(distinct, key=lambda c: int(np.flatnonzero(labels == c)[0])))}
        out = np.full(labels.shape, NOISE, dtype=np.int64)
        for c, i in remap.items():
            out[labels == c] = i
        members = {i: np.flatnonzero(out == i) for i in range(len(remap))}
        return cls(out, len(remap), members, source_indices)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def noise_count(self) -> int:
        return int(np.sum(self.labels == NOISE))

    def parent_labels(self, parent_n: int) -> np.ndarray:
        """Labels lifted to the parent set; rows outside the clustered subset
        carry no label (-1)."""
        if self.source_indices is None:
            if parent_n != self.n:
                raise DistanceError("no source_indices and size mismatch")
            return self.labels.copy()
        out = np.full(parent_n, NOISE, dtype=np.int64)
        out[self.source_indices] = self.labels
        return out


def dbscan(d: DistanceMatrix, config: ClusterConfig) -> ClusterAssignment:
    """Density clustering on a precomputed distance matrix.

    A point is core iff it has >= min_samples neighbors within eps (itself
    included). Clusters are connected components of core points; border
    points attach to the cluster of their lowest-index core neighbor.
    Cluster ids follow first-core-appearance order, so the result is
    deterministic and invariant to row permutation up to relabeling.
    """
    within = d.values <= config.eps
    core = within.sum(axis=1) >= config.min_samples
    n = d.n
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        frontier = [i]
        labels[i] = cluster
        while frontier:
            j = frontier.pop()
            reach = np.flatnonzero(within[j] & core & (labels == NOISE))
            labels[reach] = cluster
            frontier.extend(reach.tolist())
        cluster += 1
    border = np.flatnonzero(~core)
    for i in border:
        near_cores = np.flatnonzero(within[i] & core)
        if near_cores.size:
            labels[i] = labels[near_cores[0]]
    return ClusterAssignment.from_labels(labels)


def subset_sample(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """ceil(ratio*n) distinct uniform indices (sorted); a fresh draw per call."""
    if not 0.0 < ratio <= 1.0:
        raise DistanceError("ratio must be in (0, 1]")
    count = int(np.ceil(ratio * n))
    return np.sort(rng.choice(n, size=count, replace=False))


def cluster_intra(s: EmbeddingSet, modality_tag: Modality, config: ClusterConfig,
                  distance_mode: str = "vanilla", rng: np.random.Generator | None = None,
                  k1: int = 30, k2: int = 6) -> ClusterAssignment:
    """Cluster one modality of `s` with Jaccard distance + DBSCAN.

    The visible path samples a subset at config.subset_ratio first, so rows
    left out this round carry no label. source_indices maps the assignment
    back into `s`.
    """
    rows = s.modality_indices(modality_tag)
    if rows.size == 0:
        raise DistanceError(f"set has no rows of modality {modality_tag!r}")
    if modality_tag == Modality.VIS and config.subset_ratio < 1.0:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        rows = rows[subset_sample(rows.size, config.subset_ratio, rng)]
    sub = subset_view(s, rows)
    d = jaccard_distance(sub, k1=k1, k2=k2, mode=distance_mode)
    assignment = dbscan(d, config)
    return ClusterAssignment(assignment.labels, assignment.num_clusters,
                             assignment.members, source_indices=rows)


def cluster_global(s: EmbeddingSet, config: ClusterConfig, k1: int = 30, k2: int = 6,
                   mode: str = "modality_aware") -> ClusterAssignment:
    """Cluster the full mixed-modality set; default distance is modality-aware."""
    counts = s.modality_counts()
    if min(counts) == 0:
        raise DistanceError("global clustering needs both modalities present")
    d = jaccard_distance(s, k1=k1, k2=k2, mode=mode)
    return dbscan(d, config)


def mixed_cluster_rate(assignment: ClusterAssignment, modality: np.ndarray) -> float:
    """Fraction of clusters containing both modalities (0 if no clusters)."""
    if assignment.num_clusters == 0:
        return 0.0
    modality = np.asarray(modality)
    mixed = sum(
        1 for members in assignment.members.values()
        if np.unique(modality[members]).size == 2
    )
    return mixed / assignment.num_clusters
