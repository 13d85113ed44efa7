"""scikit-learn style wrappers around the encoder and the teacher fusion."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .compression import CompressionPolicy
from .encoder import EncoderConfig, EncoderModel, toy_tokenize
from .teacher import SyntheticTeacher, TeacherFusionConfig, fuse
from .training import TrainingExample, default_stage_config, run_stage


def _check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of strings, got a single string")
    texts = list(X)
    if not texts:
        raise ValueError("empty input")
    bad = [i for i, t in enumerate(texts) if not isinstance(t, str) or not t.strip()]
    if bad:
        raise ValueError(f"entry {bad[0]} is not a non-empty string")
    return texts


class TokenCompressionEmbedder(TransformerMixin, BaseEstimator):
    """Distil a toy compressed-token encoder and embed texts with it.

    ``fit`` runs the distillation stages in ``stages`` (a prefix of 1, 2, 3)
    against ``y`` when given (one target row per text, width ``output_dim``)
    or against a seeded synthetic teacher otherwise.  ``transform`` returns
    unit-norm embeddings computed at ``ratio``.
    """

    def __init__(self, d_model: int = 32, n_layers: int = 2, n_heads: int = 4, mlp_hidden: int = 64,
                 output_dim: int = 64, vocab_size: int = 256, max_seq_len: int = 2048,
                 length_threshold: int = 80, ratio: float = 0.33, stages: Sequence[int] = (1, 2, 3),
                 steps: int | None = None, tokenizer: str = "whitespace", teacher_seed: int = 0,
                 random_state: int = 42):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.mlp_hidden = mlp_hidden
        self.output_dim = output_dim
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len
        self.length_threshold = length_threshold
        self.ratio = ratio
        self.stages = stages
        self.steps = steps
        self.tokenizer = tokenizer
        self.teacher_seed = teacher_seed
        self.random_state = random_state

    def _tokenize(self, texts: list[str]) -> list[list[int]]:
        return [toy_tokenize(t, self.vocab_size, self.tokenizer, max_len=self.max_seq_len).ids for t in texts]

    def fit(self, X, y=None):
        texts = _check_texts(X)
        stages = tuple(self.stages)
        if not stages or stages != tuple(range(1, len(stages) + 1)) or len(stages) > 3:
            raise ValueError(f"stages must be a prefix of (1, 2, 3), got {stages}")
        ids = self._tokenize(texts)
        if y is None:
            teacher = SyntheticTeacher(TeacherFusionConfig.for_output_dim(self.output_dim), self.vocab_size,
                                       seed=self.teacher_seed)
            targets = teacher.fused(ids)
        else:
            targets = check_array(y, dtype=np.float64)
            if targets.shape != (len(texts), self.output_dim):
                raise ValueError(f"y must have shape ({len(texts)}, {self.output_dim}), got {targets.shape}")
            targets = targets / np.linalg.norm(targets, axis=1, keepdims=True)
        examples = [TrainingExample(str(i), seq) for i, seq in enumerate(ids)]
        lookup = {ex.id: row for ex, row in zip(examples, targets)}

        config = EncoderConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.mlp_hidden,
                               self.output_dim, self.max_seq_len)
        model = EncoderModel.init(config, seed=self.random_state)
        self.history_ = []
        for stage_id in stages:
            overrides = {"seed": self.random_state}
            if self.steps is not None:
                overrides["steps"] = self.steps
            stage = default_stage_config(stage_id, **overrides)
            if stage.compression is not None:
                stage = replace(stage, compression=replace(stage.compression,
                                                           length_threshold=self.length_threshold))
            result = run_stage(stage, examples, lambda rid, _ids: lookup[rid], model)
            self.history_.extend(result.metrics)
        self.model_ = model
        self.n_features_out_ = self.output_dim
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        ids = self._tokenize(_check_texts(X))
        policy = CompressionPolicy(self.length_threshold, self.ratio)
        return self.model_.embed_numpy(ids, policy, ratio=self.ratio)

    def score(self, X, y) -> float:
        """Mean cosine similarity between the embeddings of ``X`` and the rows of ``y``."""
        emb = self.transform(X)
        y = check_array(y, dtype=np.float64)
        if y.shape != emb.shape:
            raise ValueError(f"y must have shape {emb.shape}, got {y.shape}")
        y = y / np.linalg.norm(y, axis=1, keepdims=True)
        return float(np.mean(np.sum(emb * y, axis=1)))


class TeacherFusion(TransformerMixin, BaseEstimator):
    """Fuse two teachers' raw embeddings given side by side in one matrix.

    Columns ``[:qwen_dim]`` hold the truncatable teacher's vectors and the
    rest hold the second teacher's; ``transform`` returns the fused targets.
    """

    def __init__(self, qwen_dim: int = 32, truncate_dim: int = 16, take_dim: int = 24, segment_dim: int = 8):
        self.qwen_dim = qwen_dim
        self.truncate_dim = truncate_dim
        self.take_dim = take_dim
        self.segment_dim = segment_dim

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        cfg = TeacherFusionConfig(self.truncate_dim, self.take_dim, self.segment_dim,
                                  self.truncate_dim + self.segment_dim,
                                  qwen_raw_dim=self.qwen_dim, qzhou_raw_dim=X.shape[1] - self.qwen_dim)
        self.config_ = cfg
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return fuse(X[:, : self.qwen_dim], X[:, self.qwen_dim:], self.config_)
