"""Four-stage training: distillation, fixed compression, dynamic compression, contrastive.

Stages 1-3 pull student embeddings towards fused teacher targets; stage 4
trains on (query, positive, hard negatives) tuples.  Each optimizer step
accumulates ``grad_accum`` micro-batches, averages their gradients and
applies one Adam update under a warmup + cosine learning-rate schedule.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .compression import CompressionPolicy, RatioDistribution, resolve_ratio
from .encoder import EncoderModel
from .losses import (
    DISTILL_WEIGHTS,
    STAGE3_WEIGHTS,
    STAGE4_WEIGHTS,
    ContrastiveBatch,
    LossBreakdown,
    LossWeights,
    combine,
    cosine_loss,
    similarity_loss,
    stage4_loss,
    teacher_scores,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient, or an invalid training setup."""


class StageOrderError(TrainingError):
    """A stage was run on a model that has not completed the previous stage."""


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    learning_rate: float
    steps: int
    micro_batch: int = 8
    grad_accum: int = 2
    warmup_ratio: float = 0.005
    schedule: str = "cosine"
    compression: CompressionPolicy | None = None
    loss_weights: LossWeights = DISTILL_WEIGHTS
    seed: int = 42
    n_negatives: int = 3
    temperature: float = 0.3
    soft_temperature: float = 0.1

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3, 4):
            raise ValueError(f"stage_id must be 1-4, got {self.stage_id}")
        if self.steps < 1 or self.micro_batch < 1 or self.grad_accum < 1:
            raise ValueError("steps, micro_batch and grad_accum must be >= 1")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.stage_id == 1 and self.compression is not None:
            raise ValueError("stage 1 trains without compression")
        if self.stage_id == 2 and (self.compression is None or self.compression.mode != "fixed"):
            raise ValueError("stage 2 needs a fixed compression policy")
        if self.stage_id >= 3 and (self.compression is None or self.compression.mode != "dynamic"):
            raise ValueError(f"stage {self.stage_id} needs a dynamic compression policy")
        if self.stage_id <= 3 and self.loss_weights.w_similarity > 0 and self.micro_batch < 2:
            raise ValueError("the similarity loss needs micro_batch >= 2")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum


def default_stage_config(stage_id: int, **overrides) -> StageConfig:
    """Desk-scale defaults for each stage; keyword overrides replace fields."""
    base = {
        1: StageConfig(1, learning_rate=2e-3, steps=1000, micro_batch=8, grad_accum=2),
        2: StageConfig(2, learning_rate=1.4e-3, steps=1000, micro_batch=8, grad_accum=2,
                       compression=CompressionPolicy(80, 0.33, "fixed")),
        3: StageConfig(3, learning_rate=1.4e-3, steps=400, micro_batch=8, grad_accum=4,
                       compression=CompressionPolicy(80, 0.33, "dynamic"), loss_weights=STAGE3_WEIGHTS),
        4: StageConfig(4, learning_rate=4e-4, steps=600, micro_batch=8, grad_accum=1,
                       compression=CompressionPolicy(80, 0.33, "dynamic"), loss_weights=STAGE4_WEIGHTS),
    }[stage_id]
    return replace(base, **overrides)


# -- schedule & optimizer ------------------------------------------------------

def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_ratio * total_steps
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; returns the advanced state."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            name = p.name or f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def grad_accumulate(micro_losses: Iterable[Tensor], accum: int) -> None:
    """Back-propagate each micro-batch loss scaled by ``1/accum``.

    Gradients are summed into the parameters, so after all micro-batches
    they hold the mean gradient.  A non-finite micro-loss aborts the step.
    """
    if accum < 1:
        raise ValueError("accum must be >= 1")
    for i, loss in enumerate(micro_losses):
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss in micro-batch {i}")
        (loss * (1.0 / accum)).backward()


# -- data --------------------------------------------------------------------------

@dataclass
class TrainingExample:
    id: str
    ids: list[int]
    positive: list[int] | None = None
    negatives: list[list[int]] | None = None


TeacherFn = Callable[[str, Sequence[int]], np.ndarray]


def _teacher_targets(examples: Sequence[TrainingExample], teacher: TeacherFn) -> dict[str, np.ndarray]:
    targets = {}
    for ex in examples:
        targets[ex.id] = np.asarray(teacher(ex.id, ex.ids), dtype=np.float64)
        if ex.positive is not None:
            targets[ex.id + "#pos"] = np.asarray(teacher(ex.id + "#pos", ex.positive), dtype=np.float64)
        for k, neg in enumerate(ex.negatives or ()):
            targets[f"{ex.id}#neg{k}"] = np.asarray(teacher(f"{ex.id}#neg{k}", neg), dtype=np.float64)
    return targets


def mine_hard_negatives(query_emb: np.ndarray, doc_emb: np.ndarray, positive_index: Sequence[int],
                        k: int) -> np.ndarray:
    """Indices of the ``k`` documents most similar to each query, excluding its positive."""
    q = query_emb / np.linalg.norm(query_emb, axis=1, keepdims=True)
    d = doc_emb / np.linalg.norm(doc_emb, axis=1, keepdims=True)
    sims = q @ d.T
    sims[np.arange(len(q)), np.asarray(positive_index)] = -np.inf
    if k > d.shape[0] - 1:
        raise ValueError(f"cannot mine {k} negatives from {d.shape[0]} documents")
    # stable order: ties broken by document index
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


# -- stage runner -------------------------------------------------------------------------

@dataclass
class StageResult:
    model: EncoderModel
    metrics: list[dict]


def _micro_loss(stage: StageConfig, model: EncoderModel, batch: Sequence[TrainingExample],
                targets: dict[str, np.ndarray], ratio: float | None) -> LossBreakdown:
    policy = stage.compression
    w = stage.loss_weights
    if stage.stage_id <= 3:
        e_s = model.encode([ex.ids for ex in batch], policy, ratio=ratio)
        e_t = np.stack([targets[ex.id] for ex in batch])
        comps = {"cosine": cosine_loss(e_s, e_t)}
        if w.w_similarity > 0:
            comps["similarity"] = similarity_loss(e_s, e_t)
        return combine(comps, w)

    n, k = len(batch), stage.n_negatives
    texts = [ex.ids for ex in batch] + [ex.positive for ex in batch]
    texts += [neg for ex in batch for neg in ex.negatives]
    emb = model.encode(texts, policy, ratio=ratio)
    q = emb[0:n]
    pos = emb[n:2 * n]
    negs = emb[2 * n:].reshape(n, k, emb.shape[1]) if k else None
    cb = ContrastiveBatch(q, pos, negs, stage.temperature, stage.soft_temperature)

    keys = [ex.id for ex in batch] + [ex.id + "#pos" for ex in batch]
    keys += [f"{ex.id}#neg{j}" for ex in batch for j in range(k)]
    t_all = np.stack([targets[key] for key in keys])
    t_neg = t_all[2 * n:].reshape(n, k, -1) if k else None
    t_scores = teacher_scores(t_all[:n], t_all[n:2 * n], t_neg)
    return stage4_loss(cb, t_scores, emb, t_all, w)


def run_stage(stage: StageConfig, corpus: Sequence[TrainingExample], teacher: TeacherFn,
              model: EncoderModel, metrics_sink: Callable[[dict], None] | None = None,
              ratio_distribution: RatioDistribution | None = None) -> StageResult:
    """Train ``model`` in place for one stage and return it with per-step metrics."""
    if not corpus:
        raise TrainingError("empty corpus")
    if model.stage != stage.stage_id - 1:
        raise StageOrderError(
            f"stage {stage.stage_id} needs a model that completed stage {stage.stage_id - 1}; "
            f"this model completed stage {model.stage}"
        )
    if stage.stage_id == 4:
        bad = [ex.id for ex in corpus if ex.positive is None or len(ex.negatives or ()) != stage.n_negatives]
        if bad:
            raise TrainingError(f"stage 4 examples need a positive and exactly {stage.n_negatives} "
                                f"negatives; offending id {bad[0]!r}")

    targets = _teacher_targets(corpus, teacher)
    width = next(iter(targets.values())).shape[-1]
    if width != model.config.output_dim:
        raise TrainingError(f"teacher width {width} does not match output_dim {model.config.output_dim}")

    if stage.stage_id >= 2 and not model.has_compressor:
        model.add_compressor(seed=stage.seed + 1)
    for name, p in model.named_parameters():
        p.name = name

    rng = np.random.default_rng(stage.seed)
    ratio_rng = np.random.default_rng([stage.seed, stage.stage_id])
    dist = ratio_distribution or RatioDistribution()
    params = model.parameters()
    state = AdamState()
    order: list[int] = []
    metrics: list[dict] = []

    for step in range(stage.steps):
        lr = lr_at(step, stage.steps, stage.learning_rate, stage.warmup_ratio)
        ratio = None
        if stage.compression is not None:
            ratio = resolve_ratio(stage.compression, ratio_rng, dist)
        model.zero_grad()
        micro_losses, breakdowns = [], []
        for _ in range(stage.grad_accum):
            if len(order) < stage.micro_batch:
                order.extend(rng.permutation(len(corpus)).tolist())
            batch = [corpus[i] for i in order[: stage.micro_batch]]
            del order[: stage.micro_batch]
            bd = _micro_loss(stage, model, batch, targets, ratio)
            micro_losses.append(bd.total)
            breakdowns.append(bd)
        grad_accumulate(micro_losses, stage.grad_accum)
        adam_step(params, [p.grad for p in params], state, lr)

        record = {"stage": stage.stage_id, "step": step, "lr": lr, "ratio": ratio}
        for key in breakdowns[0].as_dict():
            record[key] = float(np.mean([bd.as_dict()[key] for bd in breakdowns]))
        metrics.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
        if step % 100 == 0 or step == stage.steps - 1:
            log.info("stage %d step %d lr %.2e loss %.5f", stage.stage_id, step, lr, record["total"])

    model.stage = stage.stage_id
    return StageResult(model, metrics)


def write_metrics(path, metrics: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- evaluation -----------------------------------------------------------------------------

def mean_teacher_cosine(model: EncoderModel, token_lists: Sequence[Sequence[int]], targets: np.ndarray,
                        policy: CompressionPolicy | None = None, ratio: float | None = None) -> float:
    emb = model.embed_numpy(list(token_lists), policy, ratio=ratio)
    return float(np.mean(np.sum(emb * targets, axis=1)))


def ranking_accuracy(model: EncoderModel, examples: Sequence[TrainingExample],
                     policy: CompressionPolicy | None = None, ratio: float | None = None) -> float:
    """Fraction of queries whose positive outscores every one of its negatives."""
    n = len(examples)
    k = len(examples[0].negatives)
    texts = [ex.ids for ex in examples] + [ex.positive for ex in examples]
    texts += [neg for ex in examples for neg in ex.negatives]
    emb = model.embed_numpy(texts, policy, ratio=ratio)
    q, pos, neg = emb[:n], emb[n:2 * n], emb[2 * n:].reshape(n, k, -1)
    pos_score = np.sum(q * pos, axis=1)
    neg_score = np.einsum("nd,nkd->nk", q, neg)
    return float(np.mean(np.all(pos_score[:, None] > neg_score, axis=1)))
