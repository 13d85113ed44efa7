"""Encoding latency as a function of input length and compression ratio."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .compression import CompressionPolicy
from .encoder import EncoderModel
from .tensor import no_grad

DEFAULT_LENGTHS = (128, 256, 512, 1024, 2048)
DEFAULT_RATIOS = (1.0, 0.5, 0.33, 0.2, 0.1)
CSV_COLUMNS = ("ratio", "input_length", "mean_latency_ms", "samples")


@dataclass(frozen=True)
class BenchResult:
    ratio: float
    input_length: int
    mean_latency_ms: float  # per sample
    samples: int


def parse_grid(spec: str) -> tuple[list[int], list[float]]:
    """``"lengths=128,256;ratios=1.0,0.5"``; either part may be omitted."""
    lengths, ratios = list(DEFAULT_LENGTHS), list(DEFAULT_RATIOS)
    if spec and spec != "default":
        for part in spec.split(";"):
            if not part.strip():
                continue
            key, sep, values = part.partition("=")
            if not sep:
                raise ValueError(f"bad grid component {part!r}; expected key=v1,v2,...")
            key = key.strip()
            items = [v.strip() for v in values.split(",") if v.strip()]
            if key == "lengths":
                lengths = [int(v) for v in items]
            elif key == "ratios":
                ratios = [float(v) for v in items]
            else:
                raise ValueError(f"unknown grid key {key!r}")
    if not lengths or not ratios:
        raise ValueError("grid needs at least one length and one ratio")
    return lengths, ratios


def bench_latency(model: EncoderModel, lengths: Sequence[int], ratios: Sequence[float], batch: int = 32,
                  reps: int = 50, warmup: int = 3, seed: int = 0, length_threshold: int = 80,
                  dtype=np.float32, max_attention_elems: int = 1 << 24) -> list[BenchResult]:
    """Mean per-sample encode time for every (ratio, length) cell.

    Each cell encodes ``warmup`` discarded batches and then ``reps`` timed
    batches of ``batch`` seeded random sequences of exactly ``length`` tokens.
    BLAS is pinned to one thread for the duration.
    """
    if batch < 1 or reps < 1 or warmup < 0:
        raise ValueError("batch and reps must be >= 1 and warmup >= 0")
    if batch * reps < 30:
        raise ValueError(f"batch * reps = {batch * reps} gives fewer than 30 timed samples")
    too_long = [n for n in lengths if n > model.config.max_seq_len or n < 1]
    if too_long:
        raise ValueError(f"lengths {too_long} outside [1, max_seq_len={model.config.max_seq_len}]")
    if not model.has_compressor:
        raise ValueError("model has no compression module; benchmark a stage-2 or later checkpoint")
    model = model.astype(dtype) if model.dtype != dtype else model
    rng = np.random.default_rng(seed)
    results = []
    with threadpool_limits(limits=1), no_grad():
        for ratio in sorted(ratios):
            policy = CompressionPolicy(length_threshold, ratio)
            for length in sorted(lengths):
                batches = [rng.integers(0, model.config.vocab_size, size=(batch, length)).tolist()
                           for _ in range(warmup + reps)]
                for ids in batches[:warmup]:
                    model.encode(ids, policy, ratio=ratio, max_attention_elems=max_attention_elems)
                start = time.perf_counter()
                for ids in batches[warmup:]:
                    model.encode(ids, policy, ratio=ratio, max_attention_elems=max_attention_elems)
                elapsed = time.perf_counter() - start
                results.append(BenchResult(ratio, length, 1000.0 * elapsed / (batch * reps), batch * reps))
    return results


def results_to_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in sorted(results, key=lambda r: (r.ratio, r.input_length)):
        writer.writerow([repr(r.ratio), r.input_length, f"{r.mean_latency_ms:.4f}", r.samples])
    return buf.getvalue()
