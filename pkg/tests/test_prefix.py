import numpy as np
import pytest

from zsslu import data
from zsslu.model import ModelConfig
from zsslu.prefix import PrefixBanks, PrefixConfig, inject, new_bank, new_banks, trainable_parameters
from zsslu.tensor import ShapeError, Tensor, attention

from conftest import tiny_model


def test_inject_prepends_rows_and_leaves_inputs_intact():
    rng = np.random.default_rng(0)
    k, v = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
    bank = new_bank("decoder-self", 2, 3, 8, 1.0, rng)
    k2, v2 = inject(k, v, bank, 1)
    np.testing.assert_array_equal(k2.data[:3], bank.keys[1].data)
    np.testing.assert_array_equal(v2.data[3:], v.data)
    kb, _ = inject(Tensor(np.stack([k.data] * 2)), Tensor(np.stack([v.data] * 2)), bank, 0)
    assert kb.shape == (2, 8, 8)


def test_inject_identity_without_prefixes():
    k, v = Tensor(np.ones((4, 8))), Tensor(np.zeros((4, 8)))
    assert inject(k, v, None, 0) == (k, v)
    assert inject(k, v, new_bank("decoder-self", 1, 0, 8), 0) == (k, v)


def test_inject_errors():
    k = Tensor(np.ones((4, 8)))
    with pytest.raises(IndexError):
        inject(k, k, new_bank("decoder-self", 1, 2, 8), 3)
    with pytest.raises(ShapeError):
        inject(k, k, new_bank("decoder-self", 1, 2, 6), 0)
    with pytest.raises(ValueError):
        new_bank("cross", 1, 2, 8)
    with pytest.raises(ValueError):
        new_bank("decoder-self", 1, -1, 8)


def test_attention_with_prefix_equals_weighted_mean_shift():
    """One query against a prefix row: output mixes the prefix value with the token values by softmax weight."""
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(1, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pk, pv = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    bank = new_bank("decoder-self", 1, 1, 4)
    bank.keys[0].data[:], bank.values[0].data[:] = pk, pv
    K, V = inject(Tensor(k), Tensor(v), bank, 0)
    out = attention(Tensor(q), K, V).data[0]
    s = np.r_[pk @ q[0], k @ q[0]] / 2.0
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(out, w[0] * pv[0] + w[1:] @ v, atol=1e-12)


def test_default_bank_sizes_and_parameter_count():
    cfg = ModelConfig(vocab_size=100)
    banks = new_banks(PrefixConfig(), cfg)
    assert banks.encoder.length == 10 and banks.decoder.length == 30
    assert banks.decoder.parameter_count() == 2 * 2 * 30 * 64 == 7680
    assert sum(t.data.size for t in trainable_parameters(None, banks)) == 7680 + 2 * 2 * 10 * 64


def test_trainable_fraction_is_small(spec, qset):
    from zsslu.training import foundation_vocabulary

    vocab = foundation_vocabulary(spec, qset)
    cfg = ModelConfig(vocab_size=len(vocab), d_feat=spec.d_feat)
    from zsslu.model import Transformer

    model = Transformer(cfg, vocab)
    banks = new_banks(PrefixConfig(), cfg)
    n = sum(t.data.size for t in trainable_parameters(model, banks))
    assert n / (n + model.parameter_count()) < 0.05
    ids = {id(t) for t in trainable_parameters(model, banks)}
    assert not ids & {id(t) for t in model.parameters()}


def test_init_scale_and_determinism():
    cfg = ModelConfig(vocab_size=10)
    z = new_banks(PrefixConfig(), cfg, init_scale=0.0)
    assert all(not t.data.any() for t in z.tensors())
    a = new_banks(PrefixConfig(), cfg, rng=np.random.default_rng(5))
    b = new_banks(PrefixConfig(), cfg, rng=np.random.default_rng(5))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))
    big = new_bank("decoder-self", 4, 50, 64, 0.02, np.random.default_rng(0))
    assert np.std(np.concatenate([t.data.ravel() for t in big.tensors()])) == pytest.approx(0.02, rel=0.05)


def test_task_masking_visibility():
    cfg = PrefixConfig(per_task_length=2, task_masking=True)
    bank = new_banks(cfg, ModelConfig(vocab_size=10)).decoder
    assert bank.visible("intent").tolist() == [True, True, True, True, False, False]
    assert bank.visible("slot").tolist() == [True, True, False, False, True, True]
    assert bank.visible("asr").tolist() == [True, True, False, False, False, False]
    shared = new_banks(PrefixConfig(per_task_length=2), ModelConfig(vocab_size=10)).decoder
    assert shared.visible("slot").all()


def test_masked_prefix_rows_have_no_effect(spec, qset, model):
    cfg = PrefixConfig(per_task_length=2, task_masking=True)
    banks = new_banks(cfg, model.config, 1.0, np.random.default_rng(0))
    ids = model.vocab.encode("play jazz")
    a, _ = model.decode_step(ids, None, None, banks.decoder, False, task="intent")
    for t in (banks.decoder.keys[0], banks.decoder.values[0]):
        t.data[4:] += 10.0  # slot block, hidden from the intent task
    b, _ = model.decode_step(ids, None, None, banks.decoder, False, task="intent")
    np.testing.assert_array_equal(a.data, b.data)


def test_encoder_prefix_disable(spec, qset, model):
    banks = new_banks(PrefixConfig(encoder_enabled=False), model.config)
    assert banks.active_encoder is None
    x = data.featurize("play jazz", spec, np.random.default_rng(0))
    np.testing.assert_array_equal(model.encode(x, banks.active_encoder).states.data, model.encode(x).states.data)


def test_prefixes_change_outputs(spec, qset, model):
    x = data.featurize("play jazz", spec, np.random.default_rng(0))
    banks = new_banks(PrefixConfig(), model.config, 1.0)
    assert not np.allclose(model.encode(x, banks.encoder).states.data, model.encode(x).states.data)


def test_trainable_parameters_forms():
    bank = new_bank("decoder-self", 1, 2, 4)
    assert trainable_parameters(None, None) == []
    assert trainable_parameters(None, [bank, None]) == bank.tensors()
    assert trainable_parameters(None, PrefixBanks(None, bank)) == bank.tensors()
