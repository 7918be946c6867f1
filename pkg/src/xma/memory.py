"""Prototype memory banks: intra-modality, split global, EMA updates, hard negatives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterAssignment
from .embeddings import Modality

logger = logging.getLogger(__name__)

TAG_NONE = 2  # prototype not tied to one modality (unsplit centroid banks)


class MemoryError_(ValueError):
    """Invalid prototype bank operation."""


@dataclass
class PrototypeBank:
    """C unit-norm prototype rows with per-prototype modality and owner cluster.

    Single-writer: EMA updates mutate `vectors` in place and must not run
    concurrently with reads. `positives` maps each owner cluster to its one
    or two prototype indices.
    """

    vectors: np.ndarray
    modality_tag: np.ndarray
    owner_cluster: np.ndarray
    mu: float
    positives: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.modality_tag = np.asarray(self.modality_tag, dtype=np.int8)
        self.owner_cluster = np.asarray(self.owner_cluster, dtype=np.int64)
        if not 0.0 <= self.mu <= 1.0:
            raise MemoryError_("mu must be in [0, 1]")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def prototype_for(self, cluster: int, modality: int) -> int:
        """Index of the cluster's prototype matching the sample's modality."""
        for p in self.positives[cluster]:
            if self.modality_tag[p] in (modality, TAG_NONE):
                return int(p)
        raise MemoryError_(f"cluster {cluster} has no prototype for modality {modality}")


def _unit_mean(rows: np.ndarray) -> np.ndarray:
    m = rows.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm == 0.0:
        raise MemoryError_("cluster mean has zero norm")
    return m / norm


def build_intra_bank(features: np.ndarray, assignment: ClusterAssignment,
                     mu: float, modality_tag: Modality) -> PrototypeBank:
    """One prototype per cluster, the unit-normalized cluster mean.

    `features` must align row-for-row with assignment.labels.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != assignment.n:
        raise MemoryError_("features do not align with the assignment")
    c = assignment.num_clusters
    if c == 0:
        logger.warning("all-noise assignment: building an empty prototype bank")
        return PrototypeBank(np.empty((0, features.shape[1])), np.empty(0, np.int8),
                             np.empty(0, np.int64), mu, {})
    vectors = np.stack([_unit_mean(features[assignment.members[j]]) for j in range(c)])
    return PrototypeBank(
        vectors,
        np.full(c, int(modality_tag), dtype=np.int8),
        np.arange(c, dtype=np.int64),
        mu,
        {j: np.array([j]) for j in range(c)},
    )


def build_global_bank_split(features: np.ndarray, modality: np.ndarray,
                            assignment: ClusterAssignment, mu: float) -> PrototypeBank:
    """Split each global cluster by modality; one prototype per non-empty
    modality subcluster, so mixed clusters carry two modality-specific
    prototypes and positives[z] lists both."""
    features = np.asarray(features, dtype=np.float64)
    modality = np.asarray(modality)
    if features.shape[0] != assignment.n or modality.shape[0] != assignment.n:
        raise MemoryError_("features/modality do not align with the assignment")
    vectors, tags, owners = [], [], []
    positives: dict[int, np.ndarray] = {}
    for z in range(assignment.num_clusters):
        members = assignment.members[z]
        mine = []
        for tag in (Modality.VIS, Modality.IR):
            sub = members[modality[members] == tag]
            if sub.size == 0:
                continue
            mine.append(len(vectors))
            vectors.append(_unit_mean(features[sub]))
            tags.append(int(tag))
            owners.append(z)
        positives[z] = np.asarray(mine, dtype=np.int64)
    if not vectors:
        logger.warning("all-noise global assignment: building an empty bank")
        return PrototypeBank(np.empty((0, features.shape[1])), np.empty(0, np.int8),
                             np.empty(0, np.int64), mu, {})
    return PrototypeBank(np.stack(vectors), np.asarray(tags, np.int8),
                         np.asarray(owners, np.int64), mu, positives)


def build_global_bank_centroid(features: np.ndarray, assignment: ClusterAssignment,
                               mu: float) -> PrototypeBank:
    """Unsplit baseline: one centroid prototype per global cluster (tag NONE)."""
    bank = build_intra_bank(features, assignment, mu, Modality.VIS)
    bank.modality_tag = np.full(bank.size, TAG_NONE, dtype=np.int8)
    return bank


def ema_update(bank: PrototypeBank, prototype_index: int, feature: np.ndarray) -> None:
    """v <- mu*v + (1-mu)*f, re-normalized to unit length; in place."""
    if not 0 <= prototype_index < bank.size:
        raise MemoryError_(f"prototype index {prototype_index} out of range")
    v = bank.mu * bank.vectors[prototype_index] + (1.0 - bank.mu) * np.asarray(feature)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise MemoryError_("EMA update produced a zero vector")
    bank.vectors[prototype_index] = v / norm


def hard_negatives(bank: PrototypeBank, query_feature: np.ndarray,
                   exclude: np.ndarray, k_neg: int) -> np.ndarray:
    """Indices of the k_neg prototypes most similar to the query, skipping the
    excluded (positive) set; ties broken by lower index."""
    exclude = np.asarray(exclude, dtype=np.int64)
    avail = bank.size - exclude.size
    if k_neg < 0 or k_neg > avail:
        raise MemoryError_(f"k_neg={k_neg} exceeds available negatives {avail}")
    if k_neg == 0:
        return np.empty(0, dtype=np.int64)
    sims = bank.vectors @ np.asarray(query_feature)
    sims[exclude] = -np.inf
    order = np.lexsort((np.arange(bank.size), -sims))
    return order[:k_neg]
