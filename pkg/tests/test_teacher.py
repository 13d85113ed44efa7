import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cosine
from tcembed.encoder import TokenSequence
from tcembed.teacher import (
    SyntheticTeacher,
    TeacherFusionConfig,
    fold_sum,
    fuse,
    load_teacher_file,
    mrl_truncate,
    synthetic_teacher,
    write_teacher_file,
)
from tcembed.tensor import DegenerateInputError

CFG = TeacherFusionConfig()


def test_default_layout():
    assert (CFG.qwen_truncate_dim, CFG.qzhou_take_dim, CFG.qzhou_segment_dim, CFG.fused_dim) == (16, 24, 8, 24)


@pytest.mark.parametrize("kwargs", [
    {"qzhou_take_dim": 20},
    {"fused_dim": 30},
    {"qwen_truncate_dim": 40, "fused_dim": 48},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TeacherFusionConfig(**kwargs)


def test_scaled_layout():
    cfg = TeacherFusionConfig.for_output_dim(64)
    assert cfg.fused_dim == 64 and cfg.qzhou_take_dim == 3 * cfg.qzhou_segment_dim
    with pytest.raises(ValueError):
        TeacherFusionConfig.for_output_dim(30)


def test_mrl_truncate():
    assert mrl_truncate([1, 2, 3, 4], 2).tolist() == [1, 2]
    assert mrl_truncate([1, 2, 3, 4], 4).tolist() == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        mrl_truncate([1, 2, 3, 4], 0)
    with pytest.raises(ValueError):
        mrl_truncate([1, 2, 3, 4], 5)


def test_fold_sum():
    assert fold_sum([1, 2, 3, 4, 5, 6], 6, 2).tolist() == [9, 12]
    assert fold_sum([1, 2, 3, 4, 5, 6], 2, 2).tolist() == [1, 2]
    assert fold_sum(np.zeros(6), 6, 3).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        fold_sum([1, 2, 3, 4, 5, 6], 5, 2)
    with pytest.raises(ValueError):
        fold_sum([1, 2, 3, 4], 6, 2)


def _raw(seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=CFG.qwen_raw_dim), rng.normal(size=CFG.qzhou_raw_dim)


def test_fuse_norms():
    q, z = _raw(0)
    out = fuse(q, z, CFG)
    assert out.shape == (24,)
    assert abs(np.linalg.norm(out) - 1) < 1e-9
    assert abs(np.linalg.norm(out[:16]) - 2 ** -0.5) < 1e-9
    assert abs(np.linalg.norm(out[16:]) - 2 ** -0.5) < 1e-9


def test_fuse_symmetric_halves():
    cfg = TeacherFusionConfig(qwen_truncate_dim=4, qzhou_take_dim=8, qzhou_segment_dim=4, fused_dim=8,
                              qwen_raw_dim=4, qzhou_raw_dim=8)
    z = np.array([1.0, 2.0, 3.0, 4.0, 0.5, -1.0, 2.0, 0.0])
    out = fuse(fold_sum(z, 8, 4), z, cfg)
    np.testing.assert_array_equal(out[:4], out[4:])


def test_fuse_zero_half_is_an_error():
    q, z = _raw(1)
    with pytest.raises(DegenerateInputError):
        fuse(np.zeros_like(q), z, CFG)
    with pytest.raises(DegenerateInputError):
        fuse(q, np.zeros_like(z), CFG)


def test_fuse_batched_matches_rows():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(5, CFG.qwen_raw_dim))
    z = rng.normal(size=(5, CFG.qzhou_raw_dim))
    batch = fuse(q, z, CFG)
    for i in range(5):
        np.testing.assert_allclose(batch[i], fuse(q[i], z[i], CFG), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_fuse_scale_invariance(seed, a, b):
    q, z = _raw(seed)
    np.testing.assert_allclose(fuse(a * q, b * z, CFG), fuse(q, z, CFG), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fold_sum_linear(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 28))
    np.testing.assert_allclose(fold_sum(a + b, 24, 8), fold_sum(a, 24, 8) + fold_sum(b, 24, 8), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.data())
def test_truncation_composes(k1, data):
    k2 = data.draw(st.integers(1, k1))
    e = np.arange(12.0)
    np.testing.assert_array_equal(mrl_truncate(mrl_truncate(e, k1), k2), mrl_truncate(e, k2))


def test_synthetic_teacher_deterministic():
    tokens = TokenSequence([3, 5, 5, 9])
    a = synthetic_teacher(tokens, 42, CFG)
    b = synthetic_teacher(tokens, 42, CFG)
    assert a.e_fused.tobytes() == b.e_fused.tobytes()
    assert abs(np.linalg.norm(a.e_fused) - 1) < 1e-9
    assert synthetic_teacher(tokens, 43, CFG).e_fused.tobytes() != a.e_fused.tobytes()


def test_disjoint_texts_are_not_identical():
    t = SyntheticTeacher(CFG, seed=0)
    c = cosine(t([1, 2, 3]).e_fused, t([10, 11, 12]).e_fused)
    assert -1 < c < 1


def test_full_rank_variant():
    t = SyntheticTeacher(CFG, seed=0, latent_dim=None)
    assert t.proj_qwen.shape == (256, CFG.qwen_raw_dim)
    assert abs(np.linalg.norm(t([1, 2]).e_fused) - 1) < 1e-9


def test_teacher_file_round_trip(tmp_path):
    t = SyntheticTeacher(CFG, seed=0)
    records = {"a": t([1, 2, 3]), "b": t([4, 5])}
    path = tmp_path / "teacher.jsonl"
    write_teacher_file(path, records)
    loaded = load_teacher_file(path, CFG)
    assert list(loaded) == ["a", "b"]
    for key in records:
        assert loaded[key].e_fused.tobytes() == records[key].e_fused.tobytes()


def test_teacher_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_teacher_file(tmp_path / "missing.jsonl", CFG)
    rec = {"id": "x", "e_qwen": [1.0] * 32, "e_qzhou": [1.0] * 28}
    dup = tmp_path / "dup.jsonl"
    dup.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ValueError, match="'x'"):
        load_teacher_file(dup, CFG)
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(rec) + "\n{not json\n")
    with pytest.raises(ValueError, match=":2:"):
        load_teacher_file(bad, CFG)
