"""Distillation and contrastive objectives.

Student quantities are :class:`Tensor` objects so gradients flow; teacher
quantities may be plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    concat,
    getitem,
    l2_normalize,
    log_softmax_rows,
    logsumexp_rows,
    matmul,
    softmax_rows,
)


@dataclass(frozen=True)
class LossWeights:
    w_cosine: float = 10.0
    w_similarity: float = 0.0
    w_cl: float = 0.0
    w_soft: float = 0.0

    def __post_init__(self):
        if min(self.w_cosine, self.w_similarity, self.w_cl, self.w_soft) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {"cosine": self.w_cosine, "similarity": self.w_similarity,
                "contrastive": self.w_cl, "soft": self.w_soft}


DISTILL_WEIGHTS = LossWeights(10.0, 0.0, 0.0, 0.0)
STAGE3_WEIGHTS = LossWeights(10.0, 100.0, 0.0, 0.0)
STAGE4_WEIGHTS = LossWeights(10.0, 0.0, 1.0, 16.0)


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), **self.components}


@dataclass
class ContrastiveBatch:
    queries: Tensor  # [N, d]
    positives: Tensor  # [N, d]
    hard_negatives: Tensor | None  # [N, K, d] or None when K == 0
    temperature: float = 0.3
    soft_temperature: float = 0.1

    def __post_init__(self):
        if self.queries.ndim != 2 or self.queries.shape != self.positives.shape:
            raise DimensionError(f"queries {self.queries.shape} and positives {self.positives.shape} must match")
        if self.hard_negatives is not None:
            neg = self.hard_negatives
            if neg.ndim != 3 or neg.shape[0] != self.n or neg.shape[2] != self.queries.shape[1]:
                raise DimensionError(f"hard_negatives must be [N, K, d], got {neg.shape}")
        if self.temperature <= 0 or self.soft_temperature <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    @property
    def k(self) -> int:
        return 0 if self.hard_negatives is None else self.hard_negatives.shape[1]

    def documents(self) -> Tensor:
        """All ``N * (1 + K)`` documents: positives first, then hard negatives row-major."""
        if self.k == 0:
            return self.positives
        flat = self.hard_negatives.reshape(self.n * self.k, self.queries.shape[1])
        return concat([self.positives, flat], axis=0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def cosine_loss(e_s: Tensor, e_t) -> Tensor:
    """Mean over the batch of ``1 - <e_s_i, e_t_i>`` (unit-norm rows)."""
    e_t = _as_tensor(e_t)
    if e_s.shape != e_t.shape:
        raise DimensionError(f"student {e_s.shape} and teacher {e_t.shape} shapes differ")
    return (1.0 - (e_s * e_t).sum(axis=-1)).mean()


def similarity_loss(be_s: Tensor, be_t) -> Tensor:
    """Mean squared difference between the student and teacher Gram matrices."""
    be_t = _as_tensor(be_t)
    if be_s.ndim != 2 or be_t.ndim != 2 or be_s.shape[0] != be_t.shape[0]:
        raise DimensionError(f"need [N, d] batches with equal N, got {be_s.shape} and {be_t.shape}")
    if be_s.shape[0] < 2:
        raise ValueError("similarity loss needs at least two rows")
    diff = matmul(be_s, be_s.T) - matmul(be_t, be_t.T)
    return (diff * diff).mean()


def cosine_scores(queries: Tensor, docs: Tensor) -> Tensor:
    """``[N, M]`` cosine similarities between every query and every document."""
    return matmul(l2_normalize(queries), l2_normalize(docs).T)


def contrastive_loss(batch: ContrastiveBatch) -> Tensor:
    """InfoNCE over positives, own hard negatives and every other instance's documents.

    For query ``i`` the partition sum covers all ``N * (1 + K)`` documents of
    the batch: its positive, its ``K`` hard negatives and the
    ``(N - 1) * (1 + K)`` documents belonging to other instances.
    """
    n = batch.n
    logits = cosine_scores(batch.queries, batch.documents()) * (1.0 / batch.temperature)
    positive = getitem(logits, (np.arange(n), np.arange(n)))
    return (logsumexp_rows(logits) - positive).mean()


def soft_distill_loss(scores_s: Tensor, scores_t, alpha: float) -> Tensor:
    """``KL(softmax(s/alpha) || softmax(t/alpha))``, averaged over rows when 2-D."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    scores_t = _as_tensor(scores_t)
    if scores_s.shape != scores_t.shape:
        raise DimensionError(f"score shapes differ: {scores_s.shape} vs {scores_t.shape}")
    s = scores_s * (1.0 / alpha)
    t = scores_t * (1.0 / alpha)
    if s.ndim == 1:
        s = s.reshape(1, -1)
        t = t.reshape(1, -1)
    log_p = log_softmax_rows(s)
    log_q = log_softmax_rows(t)
    kl = (softmax_rows(s) * (log_p - log_q)).sum(axis=-1)
    return kl.mean()


def combine(components: dict[str, Tensor], weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the named components; zero-weight entries are logged but not summed."""
    w = weights.as_dict()
    total = None
    for name, value in components.items():
        if w[name] == 0:
            continue
        term = value * w[name]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all loss weights are zero")
    return LossBreakdown(total, {name: value.item() for name, value in components.items()})


def stage3_loss(e_s: Tensor, e_t, be_s: Tensor | None = None, be_t=None,
                weights: LossWeights = STAGE3_WEIGHTS) -> LossBreakdown:
    """``10 * cosine + 100 * similarity`` by default; the Gram batch defaults to ``e_s``/``e_t``."""
    be_s = e_s if be_s is None else be_s
    be_t = e_t if be_t is None else be_t
    return combine({"cosine": cosine_loss(e_s, e_t), "similarity": similarity_loss(be_s, be_t)}, weights)


def stage4_loss(batch: ContrastiveBatch, teacher_scores, e_s: Tensor, e_t,
                weights: LossWeights = STAGE4_WEIGHTS) -> LossBreakdown:
    """``contrastive + 16 * soft + 10 * cosine`` by default.

    ``teacher_scores`` are the ``[N, N(1+K)]`` teacher cosine scores over the
    same document order as :meth:`ContrastiveBatch.documents`.
    """
    student_scores = cosine_scores(batch.queries, batch.documents())
    return combine({
        "contrastive": contrastive_loss(batch),
        "soft": soft_distill_loss(student_scores, teacher_scores, batch.soft_temperature),
        "cosine": cosine_loss(e_s, e_t),
    }, weights)


def teacher_scores(queries: np.ndarray, positives: np.ndarray, negatives: np.ndarray | None) -> np.ndarray:
    """Teacher-side counterpart of the student score matrix, as a plain array."""
    docs = positives if negatives is None or negatives.shape[1] == 0 else np.concatenate(
        [positives, negatives.reshape(-1, positives.shape[1])], axis=0)
    q = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    d = docs / np.linalg.norm(docs, axis=1, keepdims=True)
    return q @ d.T
