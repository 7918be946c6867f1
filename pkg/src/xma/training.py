"""Two-stage trainer: intra-modality warm-up, then joint intra + global learning
over a toy linear encoder on synthetic raw features."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .clustering import (NOISE, ClusterAssignment, ClusterConfig, cluster_global,
                         cluster_intra, mixed_cluster_rate)
from .embeddings import EmbeddingSet, Modality, subset_view
from .evaluation import RetrievalResult, ari, cmc_map
from .losses import (grad_through_normalization, intra_infonce,
                     multi_positive_global)
from .memory import (PrototypeBank, build_global_bank_centroid,
                     build_global_bank_split, build_intra_bank, ema_update)
from .synth import SynthCorpus

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted (divergence or invalid configuration)."""


@dataclass
class ToyEncoder:
    """Linear map raw -> embed followed by L2 normalization."""

    weight: np.ndarray  # (embed_dim, raw_dim)

    @classmethod
    def init(cls, raw_dim: int, embed_dim: int, rng: np.random.Generator) -> "ToyEncoder":
        return cls(rng.standard_normal((embed_dim, raw_dim)) / np.sqrt(raw_dim))

    def forward(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(unit-norm features, pre-normalization activations)."""
        pre = raw @ self.weight.T
        norms = np.linalg.norm(pre, axis=1, keepdims=True)
        if np.any(norms == 0.0) or not np.all(np.isfinite(pre)):
            raise TrainingError("encoder produced zero or non-finite activations")
        return pre / norms, pre

    def encode_set(self, s: EmbeddingSet) -> EmbeddingSet:
        feats, _ = self.forward(s.features)
        return EmbeddingSet(feats, s.modality, s.true_id, s.camera, normalized=True)


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_stage: int = 20
    batch_p: int = 8
    batch_k: int = 16
    lr: float = 3.5e-3
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    mu: float = 0.1
    tau: float = 0.05
    eps: float = 0.6
    min_samples: int = 4
    subset_ratio: float = 0.5
    k1: int = 30
    k2: int = 6
    k_neg: int = 50
    iters_per_epoch: int = 0  # 0 = cover the larger labeled modality once
    seed: int = 0
    use_subset: bool = True
    use_ma_distance: bool = True
    use_global_loss: bool = True

    def cluster_config(self) -> ClusterConfig:
        ratio = self.subset_ratio if self.use_subset else 1.0
        return ClusterConfig(self.eps, self.min_samples, ratio, self.seed)


@dataclass
class EpochMetrics:
    epoch: int
    stage: int
    loss_intra: float
    loss_global: float | None
    clusters_vis: int
    clusters_ir: int
    clusters_global: int | None
    ari_vis: float | None
    ari_ir: float | None
    ari_global: float | None
    mixed_rate: float | None
    noise_vis: int
    noise_ir: int


@dataclass
class TrainResult:
    config: TrainConfig
    encoder: ToyEncoder
    stage1_weight: np.ndarray
    epochs: list[EpochMetrics]
    stage1_eval: RetrievalResult
    final_eval: RetrievalResult

    def report(self) -> dict:
        return {
            "config": asdict(self.config),
            "epochs": [asdict(e) for e in self.epochs],
            "stage1": {"rank1": self.stage1_eval.rank1, "map": self.stage1_eval.map_score},
            "final": {"rank1": self.final_eval.rank1, "map": self.final_eval.map_score},
        }


def pk_sample(assignment: ClusterAssignment, p: int, k: int,
              rng: np.random.Generator) -> np.ndarray:
    """P distinct clusters, K members each (with replacement only when a
    cluster has fewer than K members). Indices are in the assignment's space."""
    if assignment.num_clusters < p:
        raise TrainingError(
            f"need {p} clusters for PK sampling, have {assignment.num_clusters}"
        )
    chosen = rng.choice(assignment.num_clusters, size=p, replace=False)
    batch = []
    for c in chosen:
        members = assignment.members[int(c)]
        batch.append(rng.choice(members, size=k, replace=members.size < k))
    return np.concatenate(batch)


def _learning_rate(config: TrainConfig, epoch_in_stage: int) -> float:
    return config.lr / config.lr_decay_factor ** (epoch_in_stage // config.lr_decay_every)


def _apply_step(encoder: ToyEncoder, grads_raw, lr: float) -> None:
    """Accumulate d(loss)/dW over (grad_f, pre_norm, raw_rows) triples and step."""
    gw = np.zeros_like(encoder.weight)
    for grad_f, pre, raw in grads_raw:
        gpre = grad_through_normalization(grad_f, pre)
        gw += gpre.T @ raw
    if not np.all(np.isfinite(gw)):
        raise TrainingError("non-finite gradient; training diverged")
    encoder.weight = encoder.weight - lr * gw


def _ema_batch(bank: PrototypeBank, labels: np.ndarray, feats: np.ndarray,
               modality: np.ndarray | None = None) -> None:
    for j in range(labels.shape[0]):
        cluster = int(labels[j])
        proto = bank.prototype_for(cluster, int(modality[j])) if modality is not None \
            else cluster
        ema_update(bank, proto, feats[j])


def _intra_structures(train: EmbeddingSet, encoded: EmbeddingSet, config: TrainConfig,
                      rng: np.random.Generator):
    """Per-modality clustering + banks on current features."""
    cconf = config.cluster_config()
    out = {}
    for tag in (Modality.VIS, Modality.IR):
        assignment = cluster_intra(encoded, tag, cconf, rng=rng,
                                   k1=config.k1, k2=config.k2)
        feats = encoded.features[assignment.source_indices]
        bank = build_intra_bank(feats, assignment, config.mu, tag)
        labels_parent = assignment.parent_labels(train.n)
        truth = train.true_id[assignment.source_indices] if train.true_id is not None else None
        out[tag] = {
            "assignment": assignment,
            "bank": bank,
            "labels": labels_parent,
            "ari": None if truth is None else ari(assignment.labels, truth),
        }
    return out


def _intra_batch_step(train: EmbeddingSet, encoder: ToyEncoder, intra: dict,
                      config: TrainConfig, rng: np.random.Generator, lr: float) -> float:
    loss_total = 0.0
    grads = []
    updates = []
    for tag in (Modality.VIS, Modality.IR):
        st = intra[tag]
        local = pk_sample(st["assignment"], config.batch_p, config.batch_k, rng)
        parent_rows = st["assignment"].source_indices[local]
        raw = train.features[parent_rows]
        feats, pre = encoder.forward(raw)
        labels = st["assignment"].labels[local]
        out = intra_infonce(feats, labels, st["bank"], config.tau)
        loss_total += out.value
        grads.append((out.grad, pre, raw))
        updates.append((st["bank"], labels, feats))
    _apply_step(encoder, grads, lr)
    for bank, labels, feats in updates:
        _ema_batch(bank, labels, feats)
    return loss_total


def stage1_epoch(train: EmbeddingSet, encoder: ToyEncoder, config: TrainConfig,
                 rng: np.random.Generator, epoch: int, stage_epoch: int) -> EpochMetrics:
    """One warm-up epoch: per-modality clustering, bank rebuild, intra batches."""
    encoded = encoder.encode_set(train)
    intra = _intra_structures(train, encoded, config, rng)
    lr = _learning_rate(config, stage_epoch)
    iters = _iterations(intra, config)
    losses = []
    for _ in range(iters):
        losses.append(_intra_batch_step(train, encoder, intra, config, rng, lr))
    vis, ir = intra[Modality.VIS], intra[Modality.IR]
    return EpochMetrics(
        epoch=epoch, stage=1,
        loss_intra=float(np.mean(losses)) if losses else 0.0,
        loss_global=None,
        clusters_vis=vis["assignment"].num_clusters,
        clusters_ir=ir["assignment"].num_clusters,
        clusters_global=None,
        ari_vis=vis["ari"], ari_ir=ir["ari"], ari_global=None,
        mixed_rate=None,
        noise_vis=vis["assignment"].noise_count,
        noise_ir=ir["assignment"].noise_count,
    )


def _iterations(intra: dict, config: TrainConfig) -> int:
    if config.iters_per_epoch > 0:
        return config.iters_per_epoch
    labeled = max(
        int(np.sum(st["assignment"].labels != NOISE)) for st in intra.values()
    )
    return max(1, int(np.ceil(labeled / (config.batch_p * config.batch_k))))


def stage2_epoch(train: EmbeddingSet, encoder: ToyEncoder, config: TrainConfig,
                 rng: np.random.Generator, epoch: int, stage_epoch: int) -> EpochMetrics:
    """One joint epoch: intra structures plus modality-aware global clustering;
    each iteration takes an intra batch step then an independent global batch
    step (two-step update)."""
    encoded = encoder.encode_set(train)
    intra = _intra_structures(train, encoded, config, rng)
    cconf = config.cluster_config()
    mode = "modality_aware" if config.use_ma_distance else "vanilla"
    global_assign = cluster_global(encoded, cconf, k1=config.k1, k2=config.k2, mode=mode)
    if config.use_global_loss:
        global_bank = build_global_bank_split(encoded.features, train.modality,
                                              global_assign, config.mu)
    else:
        global_bank = build_global_bank_centroid(encoded.features, global_assign, config.mu)

    mixed = mixed_cluster_rate(global_assign, train.modality)
    ari_g = None if train.true_id is None else ari(global_assign.labels, train.true_id)

    lr = _learning_rate(config, stage_epoch)
    iters = _iterations(intra, config)
    intra_losses, global_losses = [], []
    for _ in range(iters):
        intra_losses.append(_intra_batch_step(train, encoder, intra, config, rng, lr))
        global_losses.append(_global_batch_step(train, encoder, global_assign,
                                                global_bank, config, rng, lr))
    vis, ir = intra[Modality.VIS], intra[Modality.IR]
    return EpochMetrics(
        epoch=epoch, stage=2,
        loss_intra=float(np.mean(intra_losses)) if intra_losses else 0.0,
        loss_global=float(np.mean(global_losses)) if global_losses else None,
        clusters_vis=vis["assignment"].num_clusters,
        clusters_ir=ir["assignment"].num_clusters,
        clusters_global=global_assign.num_clusters,
        ari_vis=vis["ari"], ari_ir=ir["ari"], ari_global=ari_g,
        mixed_rate=mixed,
        noise_vis=vis["assignment"].noise_count,
        noise_ir=ir["assignment"].noise_count,
    )


def _global_batch_step(train: EmbeddingSet, encoder: ToyEncoder,
                       assignment: ClusterAssignment, bank: PrototypeBank,
                       config: TrainConfig, rng: np.random.Generator,
                       lr: float) -> float:
    p = min(config.batch_p, assignment.num_clusters)
    if p == 0:
        return 0.0
    rows = pk_sample(assignment, p, config.batch_k, rng)
    raw = train.features[rows]
    feats, pre = encoder.forward(raw)
    labels = assignment.labels[rows]
    if config.use_global_loss:
        k_neg = max(0, min(config.k_neg, bank.size - 2))
        out = multi_positive_global(feats, labels, bank, config.tau, k_neg)
    else:
        out = intra_infonce(feats, labels, bank, config.tau)
    _apply_step(encoder, [(out.grad, pre, raw)], lr)
    modality = train.modality[rows] if config.use_global_loss else None
    _ema_batch(bank, labels, feats, modality)
    return out.value


def evaluate_encoder(encoder: ToyEncoder, corpus: SynthCorpus,
                     max_rank: int = 20) -> RetrievalResult:
    """Cross-modal retrieval (IR query vs VIS gallery) on the held-out split."""
    query = encoder.encode_set(subset_view(corpus.raw, corpus.split.query))
    gallery = encoder.encode_set(subset_view(corpus.raw, corpus.split.gallery))
    return cmc_map(query, gallery, max_rank=max_rank)


def run_stage1(corpus: SynthCorpus, config: TrainConfig,
               encoder: ToyEncoder | None = None) -> tuple[ToyEncoder, list[EpochMetrics]]:
    train = subset_view(corpus.raw, corpus.split.train)
    rng = np.random.default_rng([config.seed, 1])
    if encoder is None:
        encoder = ToyEncoder.init(corpus.config.raw_dim, corpus.config.embed_dim,
                                  np.random.default_rng([config.seed, 0]))
    metrics = []
    for e in range(config.epochs_per_stage):
        metrics.append(stage1_epoch(train, encoder, config, rng, e, e))
    return encoder, metrics


def run_stage2(corpus: SynthCorpus, encoder: ToyEncoder,
               config: TrainConfig) -> tuple[ToyEncoder, list[EpochMetrics]]:
    train = subset_view(corpus.raw, corpus.split.train)
    rng = np.random.default_rng([config.seed, 2])
    metrics = []
    for e in range(config.epochs_per_stage):
        metrics.append(stage2_epoch(train, encoder, config, rng,
                                    config.epochs_per_stage + e, e))
    return encoder, metrics


def train(corpus: SynthCorpus, config: TrainConfig) -> TrainResult:
    """Full two-stage run; checkpoints the stage-1 encoder and evaluates both."""
    encoder, m1 = run_stage1(corpus, config)
    stage1_weight = encoder.weight.copy()
    stage1_eval = evaluate_encoder(ToyEncoder(stage1_weight), corpus)
    encoder, m2 = run_stage2(corpus, encoder, config)
    final_eval = evaluate_encoder(encoder, corpus)
    return TrainResult(config, encoder, stage1_weight, m1 + m2, stage1_eval, final_eval)
