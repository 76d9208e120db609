"""Negative-key queues and the contrastive losses.

Queues store raw momentum embeddings (unit vectors); when angular mode is on,
the class-anchored normalization is applied at loss time with the current
classifier weights, since those change every step. Negatives are snapshotted
before a batch's own keys are enqueued, so a sample never serves as its own
negative.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import angular
from .errors import ConfigError, NumericsError
from .numcore import as_array

QUEUE_MODES = ("multi", "single")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.2
    angular_enabled: bool = True
    queue_mode: str = "multi"
    capacity: int = 256
    anchor_grad: bool = True  # propagate loss gradient into W_y through the anchors

    def validate(self) -> "ContrastiveConfig":
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.queue_mode not in QUEUE_MODES:
            raise ConfigError(f"queue_mode must be one of {QUEUE_MODES}, got {self.queue_mode!r}")
        if self.capacity < 0:
            raise ConfigError(f"queue capacity must be >= 0, got {self.capacity}")
        return self


class ClassQueueSet:
    """Per-class (or shared) FIFO buffers of unit negative keys."""

    def __init__(self, n_classes: int, capacity: int, mode: str = "multi"):
        if mode not in QUEUE_MODES:
            raise ConfigError(f"queue mode must be one of {QUEUE_MODES}, got {mode!r}")
        if capacity < 0:
            raise ConfigError("capacity must be >= 0")
        self.n_classes = n_classes
        self.capacity = capacity
        self.mode = mode
        n_queues = n_classes if mode == "multi" else 1
        self._queues: list[deque] = [deque(maxlen=capacity) for _ in range(n_queues)]

    def _queue_for(self, y: int) -> deque:
        if self.mode == "single":
            return self._queues[0]
        if not 0 <= y < self.n_classes:
            raise IndexError(f"class {y} out of range for {self.n_classes} queues")
        return self._queues[y]

    def enqueue(self, y: int, key: np.ndarray) -> None:
        """Append a unit key to class y's queue (shared queue in single mode)."""
        key = as_array(key, 1)
        norm = float(np.linalg.norm(key))
        if abs(norm - 1.0) > 1e-6:
            raise NumericsError(f"enqueued key must be unit norm, got {norm:.8f}")
        if self.capacity == 0:
            return
        self._queue_for(y).append(key.copy())

    def negatives_for(self, y: int) -> np.ndarray:
        """Snapshot of the negatives for class y as an (m, e) matrix (m >= 0)."""
        q = self._queue_for(y)
        if not q:
            return np.empty((0, 0))
        return np.stack(list(q))

    def sizes(self) -> list[int]:
        return [len(q) for q in self._queues]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Queues as named matrices (FIFO order preserved), for resume files."""
        out = []
        for i, q in enumerate(self._queues):
            name = "queue.shared" if self.mode == "single" else f"queue.{i}"
            if q:
                out.append((name, np.stack(list(q))))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i, q in enumerate(self._queues):
            name = "queue.shared" if self.mode == "single" else f"queue.{i}"
            q.clear()
            if name in arrays:
                for row in arrays[name]:
                    q.append(np.array(row))


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _as_negs(k_negs, dim: int) -> np.ndarray:
    if np.size(k_negs) == 0:
        return np.empty((0, dim))
    return np.asarray(k_negs, dtype=np.float64).reshape(-1, dim)


def _info_nce_rows(
    Q: np.ndarray,
    K: np.ndarray,
    negs: np.ndarray,
    temperature: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise InfoNCE: row i of Q against positive row i of K and all negs.

    Returns (loss_rows (g,), dQ (g, e), dK (g, e), d_negs (m, e)); the
    negative gradients are summed over the g queries.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    l_pos = np.sum(Q * K, axis=1, keepdims=True)
    logits = np.concatenate([l_pos, Q @ negs.T], axis=1) / temperature
    m = logits.max(axis=1, keepdims=True)
    exps = np.exp(logits - m)
    denom = exps.sum(axis=1, keepdims=True)
    losses = np.log(denom[:, 0]) + m[:, 0] - logits[:, 0]
    coeff = exps / denom
    coeff[:, 0] -= 1.0
    dQ = (coeff[:, :1] * K + coeff[:, 1:] @ negs) / temperature
    dK = coeff[:, :1] * Q / temperature
    d_negs = coeff[:, 1:].T @ Q / temperature
    return losses, dQ, dK, d_negs


def info_nce(q: np.ndarray, k_pos: np.ndarray, k_negs: np.ndarray, temperature: float) -> float:
    """Single-positive InfoNCE with stable log-sum-exp; 0 with no negatives."""
    loss, _, _, _ = info_nce_grads(q, k_pos, k_negs, temperature)
    return loss


def info_nce_grads(
    q: np.ndarray,
    k_pos: np.ndarray,
    k_negs: np.ndarray,
    temperature: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """InfoNCE loss and its gradients.

    Returns (loss, d_q, d_kpos, d_knegs). The key gradients are only consumed
    when the keys are themselves functions of the classifier weights (angular
    mode); the raw keys stay constants.
    """
    q = as_array(q, 1)
    k_pos = as_array(k_pos, 1)
    negs = _as_negs(k_negs, q.shape[0])
    losses, dQ, dK, d_negs = _info_nce_rows(q[None, :], k_pos[None, :], negs, temperature)
    return float(losses[0]), dQ[0], dK[0], d_negs


def group_contrastive_grads(
    Q: np.ndarray,
    K: np.ndarray,
    negatives: np.ndarray,
    cfg: ContrastiveConfig,
    y: int,
    W: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contrastive term for a group of same-class samples sharing negatives.

    With angular enabled the queries, positives and negatives are first
    anchored on W_y; otherwise the raw vectors feed InfoNCE unchanged (the
    naive combination baseline). Returns (loss_rows, d_Q_raw, d_W) where d_W
    is nonzero only in row y and only when anchor gradients are enabled.
    """
    Q = as_array(Q, 2)
    K = as_array(K, 2)
    negs = _as_negs(negatives, Q.shape[1])
    d_w = np.zeros_like(W)
    if not cfg.angular_enabled:
        losses, dQ, _, _ = _info_nce_rows(Q, K, negs, cfg.temperature)
        return losses, dQ, d_w
    aQ, q_cache = angular.angular_rows(Q, W, y)
    aK, k_cache = angular.angular_rows(K, W, y)
    if negs.shape[0]:
        a_negs, n_cache = angular.angular_rows(negs, W, y)
    else:
        a_negs, n_cache = negs, None
    losses, d_aQ, d_aK, d_anegs = _info_nce_rows(aQ, aK, a_negs, cfg.temperature)
    dQ, d_wy = angular.angular_rows_grad(q_cache, d_aQ)
    if cfg.anchor_grad:
        _, d_wy_k = angular.angular_rows_grad(k_cache, d_aK)
        d_wy = d_wy + d_wy_k
        if n_cache is not None:
            _, d_wy_n = angular.angular_rows_grad(n_cache, d_anegs)
            d_wy = d_wy + d_wy_n
        d_w[y] = d_wy
    return losses, dQ, d_w


def class_contrastive_loss(
    queues: ClassQueueSet,
    cfg: ContrastiveConfig,
    q: np.ndarray,
    k_pos: np.ndarray,
    y: int,
    W: np.ndarray,
) -> float:
    """Contrastive term for one sample: InfoNCE over the class-y negatives."""
    loss, _, _ = class_contrastive_grads(queues.negatives_for(y), cfg, q, k_pos, y, W)
    return loss


def class_contrastive_grads(
    negatives: np.ndarray,
    cfg: ContrastiveConfig,
    q: np.ndarray,
    k_pos: np.ndarray,
    y: int,
    W: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, gradient w.r.t. raw q, and gradient w.r.t. W (nonzero row y only)."""
    q = as_array(q, 1)
    losses, dQ, d_w = group_contrastive_grads(
        q[None, :], as_array(k_pos, 1)[None, :], negatives, cfg, y, W
    )
    return float(losses[0]), dQ[0], d_w


# ---------------------------------------------------------------------------
# Supervised contrastive baseline
# ---------------------------------------------------------------------------


def supcon_loss(embeddings: np.ndarray, labels, temperature: float) -> float:
    loss, _ = supcon_grads(embeddings, labels, temperature)
    return loss


def supcon_grads(embeddings: np.ndarray, labels, temperature: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over a batch of unit embeddings.

    Each anchor contrasts against all other batch members; its positives are
    the same-label members. Anchors with no positives contribute nothing and
    the loss is averaged over anchors that have at least one positive.
    Returns (loss, d_embeddings).
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    Z = as_array(embeddings, 2)
    labels = np.asarray(labels)
    n = Z.shape[0]
    if n < 2:
        raise ConfigError("supcon needs a batch of at least 2 embeddings")
    if labels.shape != (n,):
        raise ConfigError(f"labels shape {labels.shape} != ({n},)")
    sims = Z @ Z.T / temperature
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    pos_mask = same & off_diag
    pos_counts = pos_mask.sum(axis=1)
    anchors = pos_counts > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        return 0.0, np.zeros_like(Z)
    # row-wise softmax over the n-1 non-self entries
    masked = np.where(off_diag, sims, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    exps = np.where(off_diag, np.exp(masked - m), 0.0)
    denom = exps.sum(axis=1, keepdims=True)
    logp = masked - (np.log(denom) + m)
    safe_counts = np.where(anchors, pos_counts, 1)[:, None]
    pos_logp = np.where(pos_mask, logp, 0.0)
    loss = float(-(pos_logp.sum(axis=1)[anchors] / safe_counts[anchors, 0]).sum() / n_anchors)
    # dL/d sims[i, a] = (softmax_ia - pos_ia / |P(i)|) / n_anchors on anchor rows
    coeff = (exps / denom - pos_mask / safe_counts) / n_anchors
    coeff[~anchors] = 0.0
    dZ = (coeff @ Z + coeff.T @ Z) / temperature
    return loss, dZ
