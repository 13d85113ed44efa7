"""Token compression: SwiGLU feature transform followed by adaptive 1-D average pooling.

Sequences at or below ``length_threshold`` keep their length; longer ones are
pooled to ``L_th + (L_in - L_th) * ratio`` rows (floored, minimum 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Literal

import numpy as np

from .tensor import DimensionError, Tensor, matmul, silu

FIXED_POINT_RATIO = 0.33333


@dataclass(frozen=True)
class CompressionPolicy:
    length_threshold: int = 80
    ratio: float = 0.33
    mode: Literal["fixed", "dynamic"] = "fixed"

    def __post_init__(self):
        if int(self.length_threshold) != self.length_threshold or self.length_threshold < 1:
            raise ValueError(f"length_threshold must be an integer >= 1, got {self.length_threshold}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.mode not in ("fixed", "dynamic"):
            raise ValueError(f"mode must be 'fixed' or 'dynamic', got {self.mode!r}")


@dataclass(frozen=True)
class RatioDistribution:
    """Piecewise sampler for per-batch compression ratios.

    A uniform draw ``r`` selects a branch by the cumulative ``boundaries``:
    the first branch samples ``low_range``, the second returns ``fixed_point``,
    the third samples ``mid_range`` and the last samples ``high_range``.
    """

    boundaries: tuple[float, float, float] = (0.1, 0.5, 0.8)
    fixed_point: float = FIXED_POINT_RATIO
    low_range: tuple[float, float] = (0.1, 0.33)
    mid_range: tuple[float, float] = (0.33, 0.66)
    high_range: tuple[float, float] = (0.66, 1.0)

    @property
    def branch_probabilities(self) -> tuple[float, float, float, float]:
        b0, b1, b2 = self.boundaries
        return (b0, b1 - b0, b2 - b1, 1.0 - b2)


def target_length(input_len: int, policy: CompressionPolicy, ratio: float | None = None) -> int | None:
    """Pooled length for a sequence of ``input_len`` tokens, or None when no pooling applies.

    ``ratio`` overrides ``policy.ratio`` (used once a dynamic ratio has been drawn).
    Evaluated in exact rational arithmetic so the floor never depends on
    float rounding of the product.
    """
    if input_len < 1:
        raise ValueError(f"input_len must be >= 1, got {input_len}")
    rho = policy.ratio if ratio is None else ratio
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {rho}")
    th = policy.length_threshold
    if input_len <= th:
        return None
    exact = th + (input_len - th) * Fraction(rho)
    return min(input_len, max(1, int(exact // 1)))


def _branch_values(r: np.ndarray, u: np.ndarray, dist: RatioDistribution) -> np.ndarray:
    b0, b1, b2 = dist.boundaries

    def scale(lo_hi):
        lo, hi = lo_hi
        return lo + (hi - lo) * u

    return np.select(
        [r < b0, r < b1, r < b2],
        [scale(dist.low_range), np.full_like(u, dist.fixed_point), scale(dist.mid_range)],
        default=scale(dist.high_range),
    )


def sample_ratio(dist: RatioDistribution, rng: np.random.Generator, r: float | None = None) -> float:
    """Draw one compression ratio.  ``r`` forces the branch-selection draw."""
    if r is None:
        r = rng.random()
    u = rng.random()
    return float(_branch_values(np.array([r]), np.array([u]), dist)[0])


def sample_ratios(dist: RatioDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorised form of :func:`sample_ratio` for ``n`` independent draws."""
    r = rng.random(n)
    u = rng.random(n)
    return _branch_values(r, u, dist)


def resolve_ratio(policy: CompressionPolicy, rng: np.random.Generator | None,
                  dist: RatioDistribution | None = None) -> float:
    if policy.mode == "fixed":
        return policy.ratio
    if rng is None:
        raise ValueError("dynamic compression needs an rng")
    return sample_ratio(dist or RatioDistribution(), rng)


def pooling_bins(input_len: int, output_len: int) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` row ranges averaged into each pooled row."""
    if not 1 <= output_len <= input_len:
        raise ValueError(f"target length must satisfy 1 <= {output_len} <= {input_len}")
    return [
        ((i * input_len) // output_len, -((-(i + 1) * input_len) // output_len))
        for i in range(output_len)
    ]


def pooling_matrix(input_len: int, output_len: int, dtype=np.float64) -> np.ndarray:
    """``[output_len, input_len]`` averaging matrix; ``P @ x`` pools the rows of ``x``."""
    mat = np.zeros((output_len, input_len), dtype=dtype)
    for i, (start, end) in enumerate(pooling_bins(input_len, output_len)):
        mat[i, start:end] = 1.0 / (end - start)
    return mat


def adaptive_avg_pool_1d(x: Tensor, target_len: int) -> Tensor:
    """Average-pool the rows of ``x`` (``[L_in, d]``) down to ``target_len`` rows."""
    if x.ndim != 2:
        raise DimensionError(f"expected a [L, d] tensor, got shape {x.shape}")
    mat = pooling_matrix(x.shape[0], target_len, dtype=x.dtype)
    return matmul(Tensor(mat), x)


@dataclass
class SwiGLUParams:
    gate: Tensor  # [d, h]
    up: Tensor  # [d, h]
    down: Tensor  # [h, d]

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> "SwiGLUParams":
        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        # every matrix uses the model-width bound
        return cls(uniform(d, (d, hidden)), uniform(d, (d, hidden)), uniform(d, (hidden, d)))

    def parameters(self) -> dict[str, Tensor]:
        return {"gate": self.gate, "up": self.up, "down": self.down}


def swiglu_transform(x: Tensor, params: SwiGLUParams) -> Tensor:
    """``down(silu(gate(x)) * up(x))`` applied along the last axis; no biases."""
    d = x.shape[-1]
    if params.gate.shape[0] != d or params.up.shape[0] != d or params.down.shape[1] != d:
        raise DimensionError(
            f"SwiGLU weights {params.gate.shape}/{params.up.shape}/{params.down.shape} "
            f"do not fit inputs of width {d}"
        )
    if params.gate.shape[1] != params.up.shape[1] or params.up.shape[1] != params.down.shape[0]:
        raise DimensionError("SwiGLU hidden sizes disagree")
    return matmul(silu(matmul(x, params.gate)) * matmul(x, params.up), params.down)


def compress(x: Tensor, policy: CompressionPolicy, params: SwiGLUParams,
             rng: np.random.Generator | None = None, ratio: float | None = None) -> Tensor:
    """Compress one ``[L, d]`` sequence.

    The SwiGLU transform always runs; pooling only happens when the sequence
    is longer than the threshold.  In dynamic mode a ratio is drawn from
    ``rng`` unless ``ratio`` is given.
    """
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected a non-empty [L, d] tensor, got shape {x.shape}")
    h = swiglu_transform(x, params)
    if ratio is None:
        ratio = resolve_ratio(policy, rng)
    tgt = target_length(x.shape[0], policy, ratio)
    if tgt is None:
        return h
    return adaptive_avg_pool_1d(h, tgt)


def attention_cost_fraction(input_len: int, policy: CompressionPolicy, ratio: float | None = None) -> float:
    """Quadratic attention cost after compression relative to the uncompressed sequence."""
    tgt = target_length(input_len, policy, ratio)
    kept = input_len if tgt is None else tgt
    return (kept / input_len) ** 2
