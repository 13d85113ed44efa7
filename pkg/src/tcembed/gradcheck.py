"""Central finite-difference checks for the losses and the encoder.

Used by the ``gradcheck`` CLI command and the test-suite.  Everything runs in
float64; the encoder check perturbs a random sample of coordinates from every
parameter tensor so that many configurations stay cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .compression import CompressionPolicy
from .encoder import EncoderConfig, EncoderModel
from .losses import (
    ContrastiveBatch,
    contrastive_loss,
    cosine_loss,
    similarity_loss,
    soft_distill_loss,
    stage3_loss,
    stage4_loss,
    teacher_scores,
)
from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps round-off in near-zero entries (saturated softmax tails)
    from reading as large relative errors; below it the test is absolute.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _numeric(f: Callable[[], float], arr: np.ndarray, index, h: float) -> float:
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def check_function(name: str, fn: Callable[..., Tensor], arrays: list[np.ndarray],
                   tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckResult:
    """Compare autodiff and central differences for ``fn(*tensors) -> scalar``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()

    def value() -> float:
        with no_grad():
            return fn(*[Tensor(a) for a in arrays]).item()

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        numeric = np.zeros_like(arr)
        for index in np.ndindex(arr.shape):
            numeric[index] = _numeric(value, arr, index, h)
        worst = max(worst, rel_error(leaf.grad, numeric))
    return GradCheckResult(name, worst, tolerance)


def _unit(rng: np.random.Generator, *shape: int) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def loss_suite(seed: int) -> list[GradCheckResult]:
    """Every loss and both stage combinations on one random small configuration."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    k = int(rng.integers(0, 3))
    d = int(rng.integers(2, 6))
    tau = float(rng.uniform(0.1, 1.0))
    alpha = float(rng.uniform(0.05, 0.5))
    q, p, e_t = _unit(rng, n, d), _unit(rng, n, d), _unit(rng, n, d)
    be_t = _unit(rng, n, d + 2)
    neg = _unit(rng, n, k, d) if k else None
    t_scores = teacher_scores(_unit(rng, n, d), _unit(rng, n, d), _unit(rng, n, k, d) if k else None)

    def batch(a, b, c=None):
        return ContrastiveBatch(a, b, c, temperature=tau, soft_temperature=alpha)

    arrays_cl = [q.copy(), p.copy()] + ([neg.copy()] if k else [])
    return [
        check_function(f"cosine[{seed}]", lambda a: cosine_loss(a, e_t), [q.copy()]),
        check_function(f"similarity[{seed}]", lambda a: similarity_loss(a, be_t), [q.copy()]),
        check_function(f"contrastive[{seed}]", lambda *t: contrastive_loss(batch(*t)), arrays_cl),
        check_function(f"soft[{seed}]", lambda a: soft_distill_loss(a, t_scores, alpha),
                       [rng.uniform(-1, 1, size=t_scores.shape)]),
        check_function(f"stage3[{seed}]", lambda a: stage3_loss(a, e_t).total, [q.copy()]),
        check_function(f"stage4[{seed}]", lambda *t: stage4_loss(batch(*t), t_scores, t[0], e_t).total,
                       arrays_cl),
    ]


def random_encoder_config(rng: np.random.Generator) -> EncoderConfig:
    n_heads = int(rng.choice([1, 2]))
    head_dim = int(rng.choice([2, 4]))
    return EncoderConfig(
        vocab_size=int(rng.integers(8, 20)),
        d_model=n_heads * head_dim * int(rng.integers(1, 3)),
        n_layers=int(rng.integers(1, 3)),
        n_heads=n_heads,
        mlp_hidden=int(rng.integers(4, 12)),
        output_dim=int(rng.integers(3, 8)),
        max_seq_len=64,
    )


def encoder_check(seed: int, config: EncoderConfig | None = None, coords_per_param: int = 6,
                  tolerance: float = 1e-3, h: float = 1e-6) -> GradCheckResult:
    """Gradient of a random linear functional of the embeddings w.r.t. the parameters.

    The batch mixes sequence lengths so that padding, masking and (with the
    compressor present) pooling paths all contribute.
    """
    rng = np.random.default_rng(seed)
    config = config or random_encoder_config(rng)
    model = EncoderModel.init(config, seed=seed, with_compressor=True)
    threshold = int(rng.integers(2, 6))
    policy = CompressionPolicy(threshold, float(rng.uniform(0.2, 0.9)))
    lengths = rng.integers(1, 13, size=int(rng.integers(2, 4)))
    batch = [list(rng.integers(0, config.vocab_size, size=n)) for n in lengths]
    weights = rng.normal(size=(len(batch), config.output_dim))

    def value() -> float:
        with no_grad():
            return float((model.encode(batch, policy, ratio=policy.ratio).data * weights).sum())

    model.zero_grad()
    (model.encode(batch, policy, ratio=policy.ratio) * Tensor(weights)).sum().backward()
    worst = 0.0
    for name, param in model.named_parameters():
        flat = rng.choice(param.data.size, size=min(coords_per_param, param.data.size), replace=False)
        analytic, numeric = [], []
        for f in flat:
            index = np.unravel_index(f, param.shape)
            analytic.append(param.grad[index])
            numeric.append(_numeric(value, param.data, index, h))
        worst = max(worst, rel_error(np.array(analytic), np.array(numeric)))
    return GradCheckResult(f"encoder[{seed}]", worst, tolerance)


def run_all(n_configs: int = 20, seed: int = 0) -> list[GradCheckResult]:
    results = []
    for i in range(n_configs):
        results.extend(loss_suite(seed + i))
        results.append(encoder_check(seed + i))
    return results
