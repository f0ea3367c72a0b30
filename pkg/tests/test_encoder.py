from dataclasses import replace

import numpy as np
import pytest

from xlmp.data import CLS, pad_batch
from xlmp.diagnostics import model_grad_check
from xlmp.encoder import PRESETS, CapacityError, EncoderModel, preset
from xlmp.numerics import Tensor
from xlmp.prompt_pool import prompt_param_count

CFG = preset("tiny", vocab_size=40, dropout=0.0, attn_dropout=0.0)


def random_rows(rng, n, lo=2, hi=9, vocab=40):
    return [[CLS] + rng.integers(5, vocab, size=rng.integers(lo, hi)).tolist() for _ in range(n)]


@pytest.fixture(scope="module")
def model():
    return EncoderModel(CFG, np.random.default_rng(0))


def test_model_preset_shapes():
    assert (PRESETS["small"].num_layers, PRESETS["small"].hidden) == (4, 768)
    assert (PRESETS["base"].num_layers, PRESETS["base"].hidden) == (12, 768)
    assert (PRESETS["large"].num_layers, PRESETS["large"].hidden) == (24, 1024)
    for name in ("small", "base", "large"):
        cfg = PRESETS[name]
        assert cfg.dropout == 0.1 and cfg.mask_rate == 0.15 and not cfg.validate()
    base, large = PRESETS["base"], PRESETS["large"]
    assert prompt_param_count(base.pool_size, base.prompt_length, base.hidden) == 983_040
    assert prompt_param_count(large.pool_size, large.prompt_length, large.hidden) == 1_310_720


def test_tiny_preset():
    t = PRESETS["tiny"]
    assert (t.num_layers, t.hidden, t.heads, t.pool_size, t.prompt_length) == (2, 64, 2, 8, 2)


def test_config_validation_lists_problems():
    errs = replace(CFG, hidden=63, dropout=1.0, vocab_size=3).validate()
    assert len(errs) >= 3


def test_output_layout(model):
    rows = random_rows(np.random.default_rng(1), 3)
    b = pad_batch(rows)
    out = model.forward_with_prompts(b)
    assert out.hidden.shape == (3, b.shape[1] + 2, 64)
    assert out.prompt_len == 2
    assert out.token_states().shape == (3, b.shape[1], 64)
    assert out.retrieval.alpha.shape == (3, 8)


def test_capacity(model):
    rows = [[CLS] + [7] * (CFG.max_seq_len - 2)]
    with pytest.raises(CapacityError):
        model.forward_with_prompts(pad_batch(rows))
    model.forward_plain(pad_batch(rows))


def test_plug_out_is_bitwise(model):
    ref = EncoderModel(CFG, with_pool=False)
    ref.load_arrays({k: v for k, v in model.named_arrays() if not k.startswith("prompt.")})
    rng = np.random.default_rng(2)
    for _ in range(20):
        b = pad_batch(random_rows(rng, 4))
        a = model.forward_plain(b, collect_layers=True)
        r = ref.forward(b.input_ids, b.pad_mask, collect_layers=True)
        for x, y in zip(a.layers, r.layers):
            assert np.array_equal(x.data, y.data)


def test_same_init_without_pool_shares_weights():
    a = EncoderModel(CFG, np.random.default_rng(5))
    b = EncoderModel(CFG, np.random.default_rng(5), with_pool=False)
    for name, arr in b.named_arrays():
        assert np.array_equal(arr, a.parameters()[name].data)


def test_prompts_change_token_states(model):
    b = pad_batch(random_rows(np.random.default_rng(3), 1))
    plain = model.forward_plain(b).hidden.data
    prompted = model.forward_with_prompts(b).token_states().data
    assert not np.allclose(plain, prompted)


def test_singleton_pool_ignores_keys():
    cfg = replace(CFG, pool_size=1)
    m = EncoderModel(cfg, np.random.default_rng(4))
    b = pad_batch(random_rows(np.random.default_rng(4), 3))
    before = m.forward_with_prompts(b).hidden.data
    m.pool.keys.data = m.pool.keys.data * 100 + 3
    m.pool.query_proj.data = -m.pool.query_proj.data
    assert np.array_equal(before, m.forward_with_prompts(b).hidden.data)


def test_pad_positions_do_not_leak(model):
    rows = random_rows(np.random.default_rng(6), 2, 4, 6)
    short = pad_batch(rows)
    padded = pad_batch(rows + [[CLS] + [9] * 15])
    for use in (False, True):
        a = model.forward(short.input_ids, short.pad_mask, use_prompts=use).hidden.data
        c = model.forward(padded.input_ids, padded.pad_mask, use_prompts=use).hidden.data
        for i, r in enumerate(rows):
            n = len(r) + (2 if use else 0)
            np.testing.assert_allclose(a[i, :n], c[i, :n], atol=1e-5)


def test_attention_rows_are_distributions(model):
    b = pad_batch(random_rows(np.random.default_rng(7), 4))
    out = model.forward_with_prompts(b, collect_attention=True)
    pad_keys = ~out.full_mask[:, None, None, :]
    assert pad_keys.any()
    for probs in out.attention:
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
        assert (np.broadcast_to(pad_keys, probs.shape) <= (probs == 0)).all()


def test_positions_do_not_depend_on_prompts(model):
    b = pad_batch(random_rows(np.random.default_rng(8), 2))
    e = model.embed(b.input_ids).data
    out = model.forward_with_prompts(b, collect_layers=True)
    assert np.array_equal(out.layers[0].data[:, 2:], e)


def test_deterministic_without_dropout(model):
    b = pad_batch(random_rows(np.random.default_rng(9), 3))
    assert np.array_equal(model.forward_with_prompts(b).hidden.data, model.forward_with_prompts(b).hidden.data)


def test_layer_zero_and_last(model):
    b = pad_batch(random_rows(np.random.default_rng(10), 3))
    np.testing.assert_array_equal(model.hidden_states_at_layer(b, 0).data, model.embed(b.input_ids).data)
    last = model.hidden_states_at_layer(b, CFG.num_layers, with_prompts=True).data
    np.testing.assert_array_equal(last, model.forward_with_prompts(b).hidden.data)
    with pytest.raises(IndexError):
        model.hidden_states_at_layer(b, CFG.num_layers + 1)


def test_intermediate_layer_matches_truncated_model():
    cfg = replace(CFG, num_layers=3)
    full = EncoderModel(cfg, np.random.default_rng(11))
    short = EncoderModel(replace(cfg, num_layers=1))
    short.load_arrays(dict(full.named_arrays()), strict=False)
    assert np.array_equal(short.pool.values.data, full.pool.values.data)
    b = pad_batch(random_rows(np.random.default_rng(11), 4))
    for prompts in (False, True):
        np.testing.assert_array_equal(full.hidden_states_at_layer(b, 1, with_prompts=prompts).data,
                                      short.forward(b.input_ids, b.pad_mask, use_prompts=prompts).hidden.data)


def test_mlm_logits_shape_and_tied_weights(model):
    rows = [[CLS, 5, 6, 7]]
    b = pad_batch(rows)
    out = model.forward_with_prompts(b)
    logits = model.mlm_logits(out).data
    assert logits.shape == (1, 4, CFG.vocab_size)
    probe = model.copy()
    v = 30  # absent from the input, so only the output projection sees the change
    probe.params["embed.token"].data[v] += 0.5
    after = probe.mlm_logits(probe.forward_with_prompts(b)).data
    changed = np.abs(after - logits).max(axis=(0, 1)) > 0
    assert changed[v] and changed.sum() == 1
    sel = np.array([[False, True, False, True]])
    assert model.mlm_logits(out, positions=sel).shape == (2, CFG.vocab_size)


def test_model_gradient_small_sample():
    err, checked = model_grad_check("tiny", fraction=0.002, seed=3, vocab_size=50)
    assert checked > 0 and err < 1e-4


def test_without_pool_copy(model):
    ref = model.without_pool()
    assert not ref.has_pool and model.has_pool
    b = pad_batch(random_rows(np.random.default_rng(12), 2))
    assert np.array_equal(ref.forward(b.input_ids, b.pad_mask).hidden.data, model.forward_plain(b).hidden.data)


def test_float64_mode():
    m = EncoderModel(CFG, np.random.default_rng(0)).to_dtype(np.float64)
    b = pad_batch(random_rows(np.random.default_rng(13), 2))
    assert m.forward_with_prompts(b).hidden.dtype == np.float64
    assert isinstance(m.parameters()["prompt.keys"], Tensor)
