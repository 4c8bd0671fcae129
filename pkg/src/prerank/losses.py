"""Engagement (weighted BCE) and in-batch sampled softmax losses.

The numpy functions return analytic gradients and are the reference
implementations; the ``*_t`` torch versions are what the training loop
differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .core import PrerankError


class DomainError(PrerankError, ValueError):
    code = "DOMAIN_ERROR"


class BatchTooSmall(PrerankError, ValueError):
    code = "BATCH_TOO_SMALL"


@dataclass(frozen=True)
class LossWeights:
    engagement_weight: float = 1.0
    softmax_weight: float = 0.01

    def __post_init__(self):
        if self.engagement_weight < 0 or self.softmax_weight < 0:
            raise ValueError("loss weights must be nonnegative")


def engagement_loss(p, labels, weights=None):
    """Weighted mean binary cross entropy and its gradient with respect to ``p``."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1) or not np.all(np.isfinite(p)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    n = p.shape[0]
    loss = -np.sum(w * (u * np.log(p) + (1 - u) * np.log1p(-p))) / n
    grad = -w * (u / p - (1 - u) / (1 - p)) / n
    return float(loss), grad


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def sampled_softmax_loss(q_embs, i_embs, labels, log_q):
    """In-batch softmax with logQ correction.

    ``logits[i, j] = q_i . p_j - log Q(p_j)``; row ``i`` contributes
    ``-U_i * log softmax(logits[i])[i]``.  Returns the loss and gradients for
    both embedding matrices.
    """
    q = np.asarray(q_embs, dtype=np.float64)
    p = np.asarray(i_embs, dtype=np.float64)
    u = np.asarray(labels, dtype=np.float64)
    lq = np.asarray(log_q, dtype=np.float64)
    b = q.shape[0]
    if b < 2:
        raise BatchTooSmall("sampled softmax needs at least two rows")
    logits = q @ p.T - lq[None, :]
    logsm = _log_softmax_rows(logits)
    loss = -float(np.sum(u * np.diag(logsm))) / b
    probs = np.exp(logsm)
    dlogits = (u[:, None] * (probs - np.eye(b))) / b
    return loss, dlogits @ p, dlogits.T @ q


def composite_loss(l_e: float, l_s: float, weights: LossWeights = LossWeights()) -> float:
    return weights.engagement_weight * l_e + weights.softmax_weight * l_s


# ---------------------------------------------------------------------------
# torch versions


def engagement_loss_t(raw: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Same loss as ``engagement_loss`` but on logits, which is stable near 0 and 1."""
    return F.binary_cross_entropy_with_logits(raw, labels, weight=weights, reduction="mean")


def sampled_softmax_loss_t(q: torch.Tensor, p: torch.Tensor, labels: torch.Tensor, log_q: torch.Tensor):
    b = q.shape[0]
    if b < 2:
        raise BatchTooSmall("sampled softmax needs at least two rows")
    logits = q @ p.T - log_q.unsqueeze(0)
    diag = torch.log_softmax(logits, dim=1).diagonal()
    return -(labels * diag).sum() / b
