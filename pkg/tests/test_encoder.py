import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcembed.compression import CompressionPolicy
from tcembed.encoder import (
    EncoderConfig,
    EncoderModel,
    TokenSequence,
    attention_flops,
    load_checkpoint,
    mean_pool,
    save_checkpoint,
    toy_tokenize,
)
from tcembed.gradcheck import encoder_check
from tcembed.tensor import Tensor

SMALL = EncoderConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, mlp_hidden=24, output_dim=8,
                      max_seq_len=256)


@pytest.fixture(scope="module")
def model():
    return EncoderModel.init(SMALL, seed=3, with_compressor=True)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(output_dim=0)
    assert EncoderConfig().head_dim == 8


def test_tokenizer():
    a = toy_tokenize("a a")
    assert a.length == 2 and a.ids[0] == a.ids[1]
    assert toy_tokenize("hello world").length == 2
    assert toy_tokenize("hello world") == toy_tokenize("hello world")
    assert toy_tokenize("ab", mode="byte").ids == [97, 98]
    assert all(0 <= i < 7 for i in toy_tokenize("some words here", vocab_size=7).ids)
    with pytest.raises(ValueError):
        toy_tokenize("")
    with pytest.raises(ValueError):
        toy_tokenize("   ")


def test_token_sequence_validation():
    with pytest.raises(ValueError):
        TokenSequence([]).validate(SMALL)
    with pytest.raises(ValueError):
        TokenSequence([40]).validate(SMALL)
    TokenSequence([1, 2]).validate(SMALL)


def test_mean_pool_examples():
    np.testing.assert_array_equal(mean_pool(Tensor([[1.0, 1.0], [3.0, 3.0]]), 2).data, [2, 2])
    np.testing.assert_array_equal(mean_pool(Tensor([[4.0, 5.0]]), 1).data, [4, 5])
    np.testing.assert_array_equal(mean_pool(Tensor([[1.0, 1.0], [9.0, 9.0]]), 1).data, [1, 1])
    with pytest.raises(ValueError):
        mean_pool(Tensor([[1.0, 1.0]]), 0)


def test_output_rows_are_unit_norm(model, rng):
    batch = [rng.integers(0, 32, size=n).tolist() for n in (1, 5, 90, 200)]
    out = model.encode(batch, CompressionPolicy(80, 0.33), ratio=0.33)
    assert out.shape == (4, 8)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)


def test_ratio_one_matches_no_compression_below_threshold(model, rng):
    batch = [rng.integers(0, 32, size=40).tolist()]
    a = model.encode(batch, CompressionPolicy(80, 1.0), ratio=1.0).data
    b = model.encode(batch, None).data
    np.testing.assert_array_equal(a, b)


def test_padding_does_not_leak(model, rng):
    seqs = [rng.integers(0, 32, size=n).tolist() for n in (3, 17, 120)]
    policy = CompressionPolicy(80, 0.5)
    together = model.forward_ids(seqs, policy, 0.5).data
    for i, s in enumerate(seqs):
        alone = model.forward_ids([s], policy, 0.5).data[0]
        np.testing.assert_allclose(together[i], alone, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permuting_batch_permutes_rows(seed):
    model = EncoderModel.init(SMALL, seed=3, with_compressor=True)
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(0, 32, size=int(rng.integers(1, 150))).tolist() for _ in range(4)]
    perm = rng.permutation(4)
    policy = CompressionPolicy(80, 0.33)
    a = model.encode(seqs, policy, ratio=0.33).data
    b = model.encode([seqs[i] for i in perm], policy, ratio=0.33).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_bucketing_matches_single_batch(model, rng):
    seqs = [rng.integers(0, 32, size=n).tolist() for n in (2, 3, 50, 51, 200, 210)]
    policy = CompressionPolicy(80, 0.5)
    bucketed = model.encode(seqs, policy, ratio=0.5, max_attention_elems=20_000).data
    single = model.forward_ids(seqs, policy, 0.5).data
    np.testing.assert_allclose(bucketed, single, atol=1e-12)


def test_dynamic_policy_uses_rng(model, rng):
    seqs = [rng.integers(0, 32, size=200).tolist()]
    policy = CompressionPolicy(80, 0.33, "dynamic")
    a = model.encode(seqs, policy, rng=np.random.default_rng(0)).data
    b = model.encode(seqs, policy, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)


def test_length_limits(model):
    with pytest.raises(ValueError):
        model.encode([[1] * 257])
    with pytest.raises(ValueError):
        model.encode([[]])
    with pytest.raises(ValueError):
        model.encode([])


def test_compressed_lengths(model):
    assert model.compressed_lengths([50, 1030], CompressionPolicy(80, 0.33), 0.33) == [50, 393]
    plain = EncoderModel.init(SMALL, seed=0)
    assert plain.compressed_lengths([1030], CompressionPolicy(80, 0.33), 0.33) == [1030]


def test_compressor_matches_embedding_scale():
    m = EncoderModel.init(SMALL, seed=1)
    m.add_compressor(seed=2)
    from tcembed.compression import swiglu_transform
    table = m.params["embed"].data
    out = swiglu_transform(Tensor(table), m.compressor).data
    assert abs(np.sqrt(np.mean(out ** 2)) / np.sqrt(np.mean(table ** 2)) - 1) < 1e-9


def test_attention_cost_model():
    cfg = EncoderConfig()
    ratio = attention_flops(174, cfg) / attention_flops(1024, cfg)
    assert ratio == pytest.approx((174 / 1024) ** 2)


def test_checkpoint_round_trip(tmp_path, model, rng):
    model.stage = 2
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.stage == 2 and back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    seqs = [rng.integers(0, 32, size=100).tolist()]
    policy = CompressionPolicy(80, 0.5)
    assert (model.encode(seqs, policy, ratio=0.5).data.tobytes()
            == back.encode(seqs, policy, ratio=0.5).data.tobytes())
    # stable bytes across repeated saves
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none")
    bad = tmp_path / "bad"
    bad.write_text('{"format": "other"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_float32_path(model, rng):
    seqs = [rng.integers(0, 32, size=120).tolist()]
    policy = CompressionPolicy(80, 0.5)
    a = model.encode(seqs, policy, ratio=0.5).data
    b = model.astype(np.float32).encode(seqs, policy, ratio=0.5).data
    assert b.dtype == np.float32
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_encoder_gradients_small_config():
    cfg = EncoderConfig(vocab_size=16, d_model=16, n_layers=2, n_heads=2, mlp_hidden=16, output_dim=8,
                        max_seq_len=64)
    result = encoder_check(0, cfg, coords_per_param=10)
    assert result.passed, result


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradients_random_configs(seed):
    result = encoder_check(100 + seed)
    assert result.passed, result
