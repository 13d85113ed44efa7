"""Fast oracle checks run by ``tcembed selftest``.

Each check compares the library against a direct, independently written
evaluation and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import math

import numpy as np

from .compression import CompressionPolicy, RatioDistribution, adaptive_avg_pool_1d, sample_ratios, target_length
from .gradcheck import encoder_check, loss_suite
from .losses import ContrastiveBatch, contrastive_loss
from .teacher import TeacherFusionConfig, fuse
from .tensor import Tensor

CheckResult = tuple[str, bool, str]


def _target_length_direct(n: int, threshold: int, ratio: float) -> int | None:
    if n <= threshold:
        return None
    num, den = float(ratio).as_integer_ratio()
    return min(n, max(1, (threshold * den + (n - threshold) * num) // den))


def check_target_length(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        n, th = int(rng.integers(1, 4097)), int(rng.integers(1, 513))
        ratio = float(rng.uniform(1e-3, 1.0))
        if target_length(n, CompressionPolicy(th, ratio)) != _target_length_direct(n, th, ratio):
            bad += 1
    return "target_length", bad == 0, f"{bad} mismatches in {trials} triples"


def check_ratio_distribution(draws: int = 200_000, seed: int = 0) -> CheckResult:
    r = sample_ratios(RatioDistribution(), np.random.default_rng(seed), draws)
    fixed = float(np.mean(r == 0.33333))
    ok = abs(fixed - 0.4) < 0.01 and bool(np.all((r > 0.1) & (r <= 1.0)))
    return "ratio_distribution", ok, f"fixed-point mass {fixed:.4f}"


def check_pooling(max_len: int = 16) -> CheckResult:
    worst = 0.0
    for n in range(1, max_len + 1):
        x = np.arange(1.0, n + 1)[:, None] ** 1.5
        for m in range(1, n + 1):
            got = adaptive_avg_pool_1d(Tensor(x), m).data[:, 0]
            ref = [sum(x[math.floor(i * n / m):math.ceil((i + 1) * n / m), 0])
                   / (math.ceil((i + 1) * n / m) - math.floor(i * n / m)) for i in range(m)]
            worst = max(worst, float(np.max(np.abs(got - ref))))
    return "pooling", worst < 1e-12, f"max abs error {worst:.2e}"


def check_contrastive() -> CheckResult:
    tie = contrastive_loss(ContrastiveBatch(Tensor([[1.0, 0.0]]), Tensor([[0.6, 0.8]]),
                                            Tensor([[[0.6, -0.8]]]))).item()
    rng = np.random.default_rng(0)
    q, p, neg = (rng.normal(size=s) for s in ((3, 4), (3, 4), (3, 2, 4)))
    q, p, neg = (v / np.linalg.norm(v, axis=-1, keepdims=True) for v in (q, p, neg))
    docs = np.concatenate([p, neg.reshape(-1, 4)])
    total = 0.0
    for i in range(3):
        z = sum(math.exp(float(q[i] @ d) / 0.3) for d in docs)
        total -= math.log(math.exp(float(q[i] @ p[i]) / 0.3) / z)
    got = contrastive_loss(ContrastiveBatch(Tensor(q), Tensor(p), Tensor(neg), temperature=0.3)).item()
    err = abs(got - total / 3)
    ok = abs(tie - math.log(2)) < 1e-12 and err < 1e-10
    return "contrastive", ok, f"tie {tie:.6f}, enumeration error {err:.1e}"


def check_fusion() -> CheckResult:
    cfg = TeacherFusionConfig()
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=cfg.qwen_raw_dim), rng.normal(size=cfg.qzhou_raw_dim)
    out = fuse(a, b, cfg)
    half = cfg.qwen_truncate_dim
    errs = [abs(np.linalg.norm(out) - 1), abs(np.linalg.norm(out[:half]) - 2 ** -0.5),
            float(np.max(np.abs(fuse(3.0 * a, 0.5 * b, cfg) - out)))]
    return "fusion", max(errs) < 1e-9, f"max error {max(errs):.1e}"


def check_gradients(n_configs: int = 3) -> CheckResult:
    results = [r for i in range(n_configs) for r in loss_suite(i)]
    results += [encoder_check(i) for i in range(n_configs)]
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    return "gradients", not failed, f"worst rel. error {worst:.1e}" + (f"; failed {failed}" if failed else "")


def run_selftest() -> list[CheckResult]:
    return [check_target_length(), check_ratio_distribution(), check_pooling(),
            check_contrastive(), check_fusion(), check_gradients()]
