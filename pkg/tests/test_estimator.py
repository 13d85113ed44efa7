import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tcembed.estimator import TeacherFusion, TokenCompressionEmbedder
from tcembed.synthetic import TopicTextGenerator
from tcembed.teacher import SyntheticTeacher, TeacherFusionConfig, fuse


def _texts(n, seed=0):
    gen = TopicTextGenerator(seed=seed, vocab_size=64)
    rng = np.random.default_rng(seed)
    return [gen.text(gen.sample_ids(rng, int(rng.integers(3, 100)))) for _ in range(n)]


def small(**kw):
    params = dict(vocab_size=64, d_model=16, n_layers=1, n_heads=2, mlp_hidden=16, output_dim=8, steps=3)
    params.update(kw)
    return TokenCompressionEmbedder(**params)


def test_params_round_trip():
    est = small(ratio=0.5)
    assert est.get_params()["ratio"] == 0.5
    assert clone(est).get_params() == est.get_params()
    est.set_params(ratio=0.2)
    assert est.ratio == 0.2


def test_fit_transform_synthetic_teacher():
    texts = _texts(12)
    est = small().fit(texts)
    emb = est.transform(texts)
    assert emb.shape == (12, 8)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    assert est.model_.stage == 3 and len(est.history_) == 9


def test_fit_with_explicit_targets():
    texts = _texts(6)
    y = np.random.default_rng(0).normal(size=(6, 8))
    est = small(stages=(1,)).fit(texts, y)
    assert -1 <= est.score(texts, y) <= 1
    with pytest.raises(ValueError):
        small().fit(texts, y[:, :4])


def test_fit_is_deterministic():
    texts = _texts(8)
    a = small(stages=(1,)).fit(texts).transform(texts)
    b = small(stages=(1,)).fit(texts).transform(texts)
    assert a.tobytes() == b.tobytes()


def test_input_validation():
    with pytest.raises(NotFittedError):
        small().transform(["hello"])
    with pytest.raises(TypeError):
        small().fit("a single string")
    with pytest.raises(ValueError):
        small().fit([])
    with pytest.raises(ValueError):
        small().fit(["ok", ""])
    with pytest.raises(ValueError):
        small(stages=(2, 3)).fit(["ok"])


def test_teacher_fusion_transformer():
    cfg = TeacherFusionConfig()
    t = SyntheticTeacher(cfg, seed=1)
    pairs = [t([i, i + 1, i + 2]) for i in range(5)]
    X = np.hstack([np.stack([p.e_qwen_raw for p in pairs]), np.stack([p.e_qzhou_raw for p in pairs])])
    fused = TeacherFusion().fit_transform(X)
    np.testing.assert_allclose(fused, np.stack([p.e_fused for p in pairs]), atol=1e-12)
    np.testing.assert_allclose(fused, fuse(X[:, :32], X[:, 32:], cfg), atol=0)
    with pytest.raises(ValueError):
        TeacherFusion().fit(X).transform(X[:, :50])
    with pytest.raises(NotFittedError):
        TeacherFusion().transform(X)
