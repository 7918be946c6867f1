"""Synthetic two-modality embedding corpora with controllable modality bias."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, FormatError, Modality, load, save

# Geometry constants mapping modality_gap in [0,1] onto the generative model:
# gap scales both the principal angle between the two modality subspaces and
# the norm of the antipodal offset pair. Calibrated so the default gap=0.8
# corpus shows strongly intra-dominated cosine KNNs while per-modality
# retrieval still ranks same-identity cross pairs above impostors.
MAX_SUBSPACE_ANGLE = np.pi / 2
OFFSET_SCALE = 0.8

QUERY_FRACTION = 0.2
GALLERY_FRACTION = 0.2


@dataclass(frozen=True)
class SynthConfig:
    num_ids: int = 50
    imgs_per_id_vis: int = 20
    imgs_per_id_ir: int = 10
    latent_dim: int = 16
    raw_dim: int = 64
    embed_dim: int = 32
    modality_gap: float = 0.8
    intra_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 1 or self.imgs_per_id_vis < 1 or self.imgs_per_id_ir < 1:
            raise FormatError("num_ids and per-id image counts must be positive")
        if self.raw_dim < self.latent_dim:
            raise FormatError("raw_dim must be >= latent_dim")
        if self.embed_dim < 2 or self.latent_dim < 1:
            raise FormatError("embed_dim must be >= 2 and latent_dim >= 1")
        if not 0.0 <= self.modality_gap <= 1.0:
            raise FormatError("modality_gap must be in [0, 1]")
        if self.intra_noise < 0.0:
            raise FormatError("intra_noise must be >= 0")


@dataclass(frozen=True)
class Split:
    """Disjoint row partitions; query is all IR, gallery all VIS."""

    train: np.ndarray
    query: np.ndarray
    gallery: np.ndarray


@dataclass(frozen=True)
class SynthCorpus:
    config: SynthConfig
    raw: EmbeddingSet
    oracle_embed: EmbeddingSet
    split: Split


@dataclass(frozen=True)
class BiasReport:
    """Per-class cosine-distance statistics split by pair modality."""

    class_intra: np.ndarray
    class_inter: np.ndarray | None
    mean_intra: float
    mean_inter: float | None
    gap: float | None  # mean_inter - mean_intra; None for single-modality sets


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q[:, :cols]


def generate(config: SynthConfig) -> SynthCorpus:
    """Deterministic synthetic corpus for the given config.

    Identity centers are uniform on the latent unit sphere. The two modality
    maps share a column space at gap=0 and rotate apart (per-pair principal
    angle gap*pi/2) as the gap grows; antipodal offset vectors of norm
    0.8*gap push the modalities to opposite sides so that cosine KNNs become
    intra-modality dominated. Each sample is the unit-normalized image of its
    center plus isotropic noise (per-component sigma = intra_noise).
    """
    rng = np.random.default_rng(config.seed)
    L, R = config.latent_dim, config.raw_dim

    centers = rng.standard_normal((config.num_ids, L))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    # Basis Q spans the shared subspace; pairs of columns rotate into the
    # orthogonal complement. With raw_dim < 2*latent_dim only the first
    # (raw_dim - latent_dim) columns can rotate.
    n_rot = min(L, R - L)
    basis = _orthonormal_columns(rng, R, L + n_rot)
    q, q_perp = basis[:, :L], basis[:, L:]
    theta = config.modality_gap * MAX_SUBSPACE_ANGLE
    a_vis = q
    a_ir = q.copy()
    if n_rot:
        a_ir[:, :n_rot] = q[:, :n_rot] * np.cos(theta) + q_perp * np.sin(theta)

    offset_dir = rng.standard_normal(R)
    offset_dir /= np.linalg.norm(offset_dir)
    b_vis = OFFSET_SCALE * config.modality_gap * offset_dir
    b_ir = -b_vis

    blocks, mods, ids = [], [], []
    for k in range(config.num_ids):
        for tag, count, a_m, b_m in (
            (Modality.VIS, config.imgs_per_id_vis, a_vis, b_vis),
            (Modality.IR, config.imgs_per_id_ir, a_ir, b_ir),
        ):
            noise = config.intra_noise * rng.standard_normal((count, R))
            blocks.append(a_m @ centers[k] + b_m + noise)
            mods.append(np.full(count, int(tag), dtype=np.uint8))
            ids.append(np.full(count, k, dtype=np.uint32))
    raw_feats = np.vstack(blocks)
    raw_feats /= np.linalg.norm(raw_feats, axis=1, keepdims=True)
    modality = np.concatenate(mods)
    true_id = np.concatenate(ids)

    proj = rng.standard_normal((config.embed_dim, R)) / np.sqrt(R)
    emb = raw_feats @ proj.T
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)

    raw_set = EmbeddingSet(raw_feats, modality, true_id, normalized=True)
    emb_set = EmbeddingSet(emb, modality, true_id, normalized=True)
    return SynthCorpus(config, raw_set, emb_set, _make_split(config, modality, rng))


def _make_split(config: SynthConfig, modality: np.ndarray, rng: np.random.Generator) -> Split:
    n_gal = max(1, int(round(GALLERY_FRACTION * config.imgs_per_id_vis)))
    n_qry = max(1, int(round(QUERY_FRACTION * config.imgs_per_id_ir)))
    per_id = config.imgs_per_id_vis + config.imgs_per_id_ir
    train, query, gallery = [], [], []
    for k in range(config.num_ids):
        base = k * per_id
        vis = base + rng.permutation(config.imgs_per_id_vis)
        ir = base + config.imgs_per_id_vis + rng.permutation(config.imgs_per_id_ir)
        gallery.append(vis[:n_gal])
        train.append(vis[n_gal:])
        query.append(ir[:n_qry])
        train.append(ir[n_qry:])
    return Split(
        train=np.sort(np.concatenate(train)),
        query=np.sort(np.concatenate(query)),
        gallery=np.sort(np.concatenate(gallery)),
    )


def bias_report(corpus: SynthCorpus) -> BiasReport:
    """Per-class mean intra/inter-modality cosine distances on oracle embeddings."""
    return modality_bias_stats(corpus.oracle_embed)


def modality_bias_stats(s: EmbeddingSet) -> BiasReport:
    if s.true_id is None:
        raise FormatError("bias statistics require true_id")
    feats = s.features
    if not s.normalized:
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    intra, inter = [], []
    has_inter = len(set(np.unique(s.modality))) == 2
    for k in np.unique(s.true_id):
        rows = np.flatnonzero(s.true_id == k)
        d = 1.0 - feats[rows] @ feats[rows].T
        same = s.modality[rows][:, None] == s.modality[rows][None, :]
        iu = np.triu_indices(len(rows), k=1)
        same_u = same[iu]
        intra.append(d[iu][same_u].mean() if same_u.any() else np.nan)
        if has_inter:
            inter.append(d[iu][~same_u].mean() if (~same_u).any() else np.nan)
    class_intra = np.asarray(intra)
    mean_intra = float(np.nanmean(class_intra))
    if not has_inter:
        return BiasReport(class_intra, None, mean_intra, None, None)
    class_inter = np.asarray(inter)
    mean_inter = float(np.nanmean(class_inter))
    return BiasReport(class_intra, class_inter, mean_intra, mean_inter,
                      mean_inter - mean_intra)


def save_corpus(corpus: SynthCorpus, path) -> dict:
    """Write oracle embeddings to `path`, raw features and the config/split sidecar
    next to it. Returns the path manifest."""
    path = Path(path)
    raw_path = path.with_suffix(path.suffix + ".raw")
    sidecar = path.with_suffix(path.suffix + ".json")
    save(corpus.oracle_embed, path, "binary")
    save(corpus.raw, raw_path, "binary")
    doc = {
        "config": asdict(corpus.config),
        "split": {
            "train": corpus.split.train.tolist(),
            "query": corpus.split.query.tolist(),
            "gallery": corpus.split.gallery.tolist(),
        },
    }
    sidecar.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"embed": str(path), "raw": str(raw_path), "sidecar": str(sidecar)}


def load_corpus(path) -> SynthCorpus:
    path = Path(path)
    raw_path = path.with_suffix(path.suffix + ".raw")
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise FormatError(f"missing corpus sidecar {sidecar}")
    doc = json.loads(sidecar.read_text())
    config = SynthConfig(**doc["config"])
    split = Split(
        train=np.asarray(doc["split"]["train"], dtype=np.int64),
        query=np.asarray(doc["split"]["query"], dtype=np.int64),
        gallery=np.asarray(doc["split"]["gallery"], dtype=np.int64),
    )
    return SynthCorpus(config, load(raw_path, "binary"), load(path, "binary"), split)
