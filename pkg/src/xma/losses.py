"""Contrastive objectives over prototype banks, with analytic feature gradients.

Bank vectors are treated as constants (stop-gradient through memory); they
move only via EMA updates. Losses reduce by sum over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import PrototypeBank, hard_negatives

UNIT_TOL = 1e-5


class LossError(ValueError):
    """Invalid input to a loss computation."""


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray  # d(loss)/d(batch features), post-normalization

    def __post_init__(self):
        if not np.isfinite(self.value) or not np.all(np.isfinite(self.grad)):
            raise LossError("non-finite loss or gradient")


def _check_batch(features: np.ndarray, tau: float) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if tau <= 0:
        raise LossError(f"tau must be > 0, got {tau}")
    norms = np.linalg.norm(features, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise LossError("batch features must be unit-norm")
    return features


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def intra_infonce(batch_features: np.ndarray, batch_labels: np.ndarray,
                  bank: PrototypeBank, tau: float) -> LossOutput:
    """Sum over the batch of -log softmax(<bank, f>/tau)[label]."""
    f = _check_batch(batch_features, tau)
    labels = np.asarray(batch_labels, dtype=np.int64)
    if labels.shape[0] != f.shape[0]:
        raise LossError("labels do not align with batch")
    if bank.size == 0 or labels.min() < 0 or labels.max() >= bank.size:
        raise LossError("label out of range for the prototype bank")
    logits = f @ bank.vectors.T / tau
    logp = _log_softmax(logits)
    rows = np.arange(f.shape[0])
    value = float(-logp[rows, labels].sum())
    p = np.exp(logp)
    p[rows, labels] -= 1.0
    grad = p @ bank.vectors / tau
    return LossOutput(value, grad)


def multi_positive_global(batch_features: np.ndarray, batch_global_labels: np.ndarray,
                          global_bank: PrototypeBank, tau: float,
                          k_neg: int) -> LossOutput:
    """Multi-positive contrastive loss against modality-specific global prototypes.

    Each query attracts every prototype of its global cluster equally; the
    denominator runs over the positives plus the k_neg hardest negative
    prototypes. Per-modality batch sums are combined with weight 0.5.
    """
    f = _check_batch(batch_features, tau)
    labels = np.asarray(batch_global_labels, dtype=np.int64)
    if labels.shape[0] != f.shape[0]:
        raise LossError("labels do not align with batch")
    value = 0.0
    grad = np.zeros_like(f)
    for i in range(f.shape[0]):
        z = int(labels[i])
        pos = global_bank.positives.get(z)
        if pos is None or len(pos) == 0:
            raise LossError(f"cluster {z} has an empty positive set")
        negs = hard_negatives(global_bank, f[i], pos, k_neg)
        sel = np.concatenate([pos, negs])
        logits = global_bank.vectors[sel] @ f[i] / tau
        m = logits.max()
        logz = m + np.log(np.exp(logits - m).sum())
        value += logz - logits[: len(pos)].mean()
        q = np.exp(logits - logz)
        grad[i] = (q @ global_bank.vectors[sel]
                   - global_bank.vectors[pos].mean(axis=0)) / tau
    return LossOutput(0.5 * value, 0.5 * grad)


def grad_through_normalization(raw_grad: np.ndarray,
                               pre_norm_features: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. unit features back through x -> x/||x||."""
    x = np.asarray(pre_norm_features, dtype=np.float64)
    g = np.asarray(raw_grad, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise LossError("zero-norm row in pre-normalization features")
    xhat = x / norms
    return (g - (g * xhat).sum(axis=1, keepdims=True) * xhat) / norms
