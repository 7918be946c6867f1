"""Evaluation: ARI, CMC/mAP retrieval, distance distributions, report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .clustering import NOISE
from .distance import DistanceMatrix, Metric
from .embeddings import EmbeddingSet, Modality

_PAIR_TYPES = ("vis_vis", "ir_ir", "vis_ir")


class EvalError(ValueError):
    """Invalid input to an evaluation routine."""


def ari(pred_labels: np.ndarray, truth: np.ndarray) -> float:
    """Adjusted Rand index; noise points (-1) count as singleton clusters."""
    pred = np.asarray(pred_labels, dtype=np.int64).copy()
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise EvalError(f"length mismatch: {pred.shape} vs {truth.shape}")
    noise = pred == NOISE
    if noise.any():
        fresh = pred.max(initial=-1) + 1
        pred[noise] = np.arange(fresh, fresh + noise.sum())
    return float(adjusted_rand_score(truth, pred))


@dataclass(frozen=True)
class RetrievalResult:
    cmc: np.ndarray          # cmc[r-1] = fraction of queries with a hit in top r
    map_score: float
    protocol: dict
    num_queries: int
    num_skipped: int         # queries whose id is absent from the gallery

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def _modality_name(s: EmbeddingSet) -> str:
    tags = np.unique(s.modality)
    if tags.size == 1:
        return Modality(int(tags[0])).name
    return "mixed"


def cmc_map(query: EmbeddingSet, gallery: EmbeddingSet, max_rank: int = 20) -> RetrievalResult:
    """Cosine-ranked retrieval accuracy, single-gallery-shot semantics.

    Queries whose identity never occurs in the gallery are excluded from the
    averages and reported in num_skipped.
    """
    if query.dim != gallery.dim:
        raise EvalError("query/gallery feature dims differ")
    if query.true_id is None or gallery.true_id is None:
        raise EvalError("retrieval evaluation requires true_id on both sets")
    qf = query.features / np.linalg.norm(query.features, axis=1, keepdims=True)
    gf = gallery.features / np.linalg.norm(gallery.features, axis=1, keepdims=True)
    max_rank = min(max_rank, gallery.n)
    sims = qf @ gf.T
    order = np.argsort(-sims, axis=1, kind="stable")
    cmc = np.zeros(max_rank)
    ap_sum = 0.0
    used = 0
    skipped = 0
    for i in range(query.n):
        good = gallery.true_id[order[i]] == query.true_id[i]
        n_rel = int(good.sum())
        if n_rel == 0:
            skipped += 1
            continue
        used += 1
        first = int(np.argmax(good))
        if first < max_rank:
            cmc[first:] += 1.0
        hit_ranks = np.flatnonzero(good) + 1
        precisions = np.arange(1, n_rel + 1) / hit_ranks
        ap_sum += precisions.mean()
    if used == 0:
        raise EvalError("no query identity occurs in the gallery")
    return RetrievalResult(
        cmc / used,
        ap_sum / used,
        {"query_modality": _modality_name(query), "gallery_modality": _modality_name(gallery)},
        used,
        skipped,
    )


@dataclass(frozen=True)
class DistanceHistograms:
    """Pooled within-group pairwise distance histograms, split by pair modality."""

    edges: np.ndarray
    counts: dict[str, np.ndarray]
    means: dict[str, float | None]
    totals: dict[str, int]
    metric: str
    group_by: str


def distance_distribution(s: EmbeddingSet, d: DistanceMatrix, group_by: str = "true_class",
                          cluster_labels: np.ndarray | None = None,
                          bins: int = 50) -> DistanceHistograms:
    """Histogram Vis-to-Vis / IR-to-IR / Vis-to-IR pairwise distances inside each
    group (true class or predicted cluster), pooled over groups."""
    if group_by == "true_class":
        if s.true_id is None:
            raise EvalError("true_class grouping requires true_id")
        groups = np.asarray(s.true_id, dtype=np.int64)
    elif group_by == "predicted_cluster":
        if cluster_labels is None:
            raise EvalError("predicted_cluster grouping requires cluster_labels")
        groups = np.asarray(cluster_labels, dtype=np.int64)
    else:
        raise EvalError(f"unknown group_by {group_by!r}")
    if groups.shape[0] != s.n or d.n != s.n:
        raise EvalError("labels/distances do not align with the set")

    hi = 2.0 if d.metric is Metric.COSINE else 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    pools: dict[str, list[np.ndarray]] = {t: [] for t in _PAIR_TYPES}
    for g in np.unique(groups):
        if g == NOISE and group_by == "predicted_cluster":
            continue
        rows = np.flatnonzero(groups == g)
        if rows.size < 2:
            continue
        sub = d.values[np.ix_(rows, rows)]
        mod = s.modality[rows]
        iu = np.triu_indices(rows.size, k=1)
        both_vis = (mod[iu[0]] == Modality.VIS) & (mod[iu[1]] == Modality.VIS)
        both_ir = (mod[iu[0]] == Modality.IR) & (mod[iu[1]] == Modality.IR)
        vals = sub[iu]
        pools["vis_vis"].append(vals[both_vis])
        pools["ir_ir"].append(vals[both_ir])
        pools["vis_ir"].append(vals[~both_vis & ~both_ir])

    counts, means, totals = {}, {}, {}
    for t in _PAIR_TYPES:
        vals = np.concatenate(pools[t]) if pools[t] else np.empty(0)
        counts[t] = np.histogram(np.clip(vals, 0.0, hi), bins=edges)[0]
        means[t] = float(vals.mean()) if vals.size else None
        totals[t] = int(vals.size)
    return DistanceHistograms(edges, counts, means, totals, d.metric.value, group_by)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def emit_report(artifacts: dict, out_dir) -> dict:
    """Write summary JSON plus one CSV per curve/histogram; returns the manifest.

    Recognized artifact keys: "summary" (dict), "cmc" (RetrievalResult),
    "histograms" (dict name -> DistanceHistograms), "epochs" (list of dicts
    with epoch/ari/clusters_* fields), "losses" (list of dicts).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, str] = {}

    cmc: RetrievalResult | None = artifacts.get("cmc")
    if cmc is not None:
        _write_csv(out / "cmc.csv", ["rank", "cmc"],
                   [(r + 1, cmc.cmc[r]) for r in range(len(cmc.cmc))])
        manifest["cmc"] = "cmc.csv"

    for name, h in (artifacts.get("histograms") or {}).items():
        rows = []
        for t in _PAIR_TYPES:
            for b in range(len(h.edges) - 1):
                rows.append((h.edges[b], h.edges[b + 1], int(h.counts[t][b]), t))
        _write_csv(out / f"distances_{name}.csv",
                   ["bin_lo", "bin_hi", "count", "pair_type"], rows)
        manifest[f"distances_{name}"] = f"distances_{name}.csv"

    epochs = artifacts.get("epochs")
    if epochs:
        _write_csv(
            out / "clusters.csv",
            ["epoch", "ari", "clusters_vis", "clusters_ir", "clusters_global"],
            [(e.get("epoch"), e.get("ari"), e.get("clusters_vis"),
              e.get("clusters_ir"), e.get("clusters_global")) for e in epochs],
        )
        manifest["clusters"] = "clusters.csv"

    losses = artifacts.get("losses")
    if losses:
        _write_csv(out / "losses.csv", ["epoch", "stage", "loss_intra", "loss_global"],
                   [(e.get("epoch"), e.get("stage"), e.get("loss_intra"),
                     e.get("loss_global")) for e in losses])
        manifest["losses"] = "losses.csv"

    summary = dict(artifacts.get("summary") or {})
    if cmc is not None:
        summary["rank1"] = cmc.rank1
        summary["map"] = cmc.map_score
        summary["retrieval_protocol"] = cmc.protocol
        summary["num_queries"] = cmc.num_queries
        summary["num_skipped_queries"] = cmc.num_skipped
    summary["manifest"] = manifest
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n"
    )
    manifest = {"summary": "summary.json", **manifest}
    return manifest


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
