"""Fused two-teacher distillation targets.

The first teacher supports prefix truncation, so its embedding is cut to
its leading ``qwen_truncate_dim`` coordinates.  The second does not: its
leading ``qzhou_take_dim`` coordinates are split into equal segments that
are summed.  Both halves are L2-normalised, concatenated and normalised
again.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import DegenerateInputError, L2_EPS


@dataclass(frozen=True)
class TeacherFusionConfig:
    qwen_truncate_dim: int = 16
    qzhou_take_dim: int = 24
    qzhou_segment_dim: int = 8
    fused_dim: int = 24
    # raw widths produced by the synthetic teacher
    qwen_raw_dim: int = 32
    qzhou_raw_dim: int = 28

    def __post_init__(self):
        if self.qzhou_take_dim % self.qzhou_segment_dim:
            raise ValueError("qzhou_take_dim must be a multiple of qzhou_segment_dim")
        if self.fused_dim != self.qwen_truncate_dim + self.qzhou_segment_dim:
            raise ValueError("fused_dim must equal qwen_truncate_dim + qzhou_segment_dim")
        if self.qwen_truncate_dim > self.qwen_raw_dim or self.qzhou_take_dim > self.qzhou_raw_dim:
            raise ValueError("truncation widths exceed the raw teacher widths")

    @classmethod
    def for_output_dim(cls, output_dim: int) -> "TeacherFusionConfig":
        """Scaled-down layout producing ``output_dim``-wide targets.

        Keeps the full-size proportions: two equal halves, a 3-segment fold,
        and raw widths of 4x and 3.5x the half width.
        """
        if output_dim % 4:
            raise ValueError("output_dim must be divisible by 4")
        half = output_dim // 2
        return cls(
            qwen_truncate_dim=half,
            qzhou_take_dim=3 * half,
            qzhou_segment_dim=half,
            fused_dim=output_dim,
            qwen_raw_dim=4 * half,
            qzhou_raw_dim=3 * half + half // 2,
        )


@dataclass
class TeacherEmbeddingPair:
    e_qwen_raw: np.ndarray
    e_qzhou_raw: np.ndarray
    e_fused: np.ndarray


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < L2_EPS):
        raise DegenerateInputError("teacher vector has (near) zero norm")
    return v / norm


def mrl_truncate(e: np.ndarray, k: int) -> np.ndarray:
    """Leading ``k`` coordinates along the last axis."""
    e = np.asarray(e, dtype=np.float64)
    if not 1 <= k <= e.shape[-1]:
        raise ValueError(f"truncation width must satisfy 1 <= k <= {e.shape[-1]}, got {k}")
    return e[..., :k].copy()


def fold_sum(e: np.ndarray, take: int, seg: int) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if seg < 1 or take < seg or take % seg:
        raise ValueError(f"take={take} must be a positive multiple of seg={seg}")
    if take > e.shape[-1]:
        raise ValueError(f"take={take} exceeds vector width {e.shape[-1]}")
    prefix = e[..., :take]
    return prefix.reshape(*prefix.shape[:-1], take // seg, seg).sum(axis=-2)


def fuse(e_qwen: np.ndarray, e_qzhou: np.ndarray, cfg: TeacherFusionConfig) -> np.ndarray:
    """Fused unit-norm target; works on single vectors or ``[N, d]`` batches."""
    left = _normalize(mrl_truncate(e_qwen, cfg.qwen_truncate_dim))
    right = _normalize(fold_sum(e_qzhou, cfg.qzhou_take_dim, cfg.qzhou_segment_dim))
    return _normalize(np.concatenate([left, right], axis=-1))


class SyntheticTeacher:
    """Deterministic pseudo-teacher: fixed random projections of bag-of-token counts.

    Tokens first receive ``latent_dim``-wide random "meaning" vectors, which
    each teacher projects to its raw width; ``latent_dim=None`` gives
    independent full-rank projections instead.
    """

    def __init__(self, cfg: TeacherFusionConfig, vocab_size: int = 256, seed: int = 0,
                 latent_dim: int | None = 16):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.seed = seed
        self.latent_dim = latent_dim
        rng = np.random.default_rng(seed)
        if latent_dim is None:
            self.proj_qwen = rng.normal(size=(vocab_size, cfg.qwen_raw_dim))
            self.proj_qzhou = rng.normal(size=(vocab_size, cfg.qzhou_raw_dim))
        else:
            latent = rng.normal(size=(vocab_size, latent_dim))
            self.proj_qwen = latent @ rng.normal(size=(latent_dim, cfg.qwen_raw_dim))
            self.proj_qzhou = latent @ rng.normal(size=(latent_dim, cfg.qzhou_raw_dim))

    def counts(self, ids: Sequence[int]) -> np.ndarray:
        return np.bincount(np.asarray(ids, dtype=np.int64) % self.vocab_size,
                           minlength=self.vocab_size).astype(np.float64)

    def __call__(self, ids: Sequence[int]) -> TeacherEmbeddingPair:
        c = self.counts(ids)
        e_qwen = c @ self.proj_qwen
        e_qzhou = c @ self.proj_qzhou
        return TeacherEmbeddingPair(e_qwen, e_qzhou, fuse(e_qwen, e_qzhou, self.cfg))

    def fused(self, batch: Sequence[Sequence[int]]) -> np.ndarray:
        return np.stack([self(ids).e_fused for ids in batch])


def synthetic_teacher(tokens, seed: int, cfg: TeacherFusionConfig, vocab_size: int = 256,
                      latent_dim: int | None = 16) -> TeacherEmbeddingPair:
    ids = tokens.ids if hasattr(tokens, "ids") else tokens
    return SyntheticTeacher(cfg, vocab_size, seed, latent_dim)(ids)


# -- teacher embedding files -----------------------------------------------------

def load_teacher_file(path, cfg: TeacherFusionConfig) -> dict[str, TeacherEmbeddingPair]:
    """Read ``{"id", "e_qwen", "e_qzhou"}`` JSON lines and fuse each record."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"teacher file not found: {path}")
    out: dict[str, TeacherEmbeddingPair] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid = str(rec["id"])
                e_qwen = np.asarray(rec["e_qwen"], dtype=np.float64)
                e_qzhou = np.asarray(rec["e_qzhou"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed teacher record ({exc})") from exc
            if rid in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {rid!r}")
            out[rid] = TeacherEmbeddingPair(e_qwen, e_qzhou, fuse(e_qwen, e_qzhou, cfg))
    return out


def write_teacher_file(path, records: dict[str, TeacherEmbeddingPair]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rid, pair in records.items():
            fh.write(json.dumps({
                "id": rid,
                "e_qwen": [float(v) for v in pair.e_qwen_raw],
                "e_qzhou": [float(v) for v in pair.e_qzhou_raw],
            }) + "\n")
