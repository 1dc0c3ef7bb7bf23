import numpy as np
import pytest
import torch

from conftest import encode, random_instance, randomize_parameters, toy_config
from modict.incontext import VisualSlotMap, collate
from modict.model import (
    DeepPromptAdapter, Embedding, ModelConfig, ModICTModel, MultiHeadAttention, adapter_forward,
    attention_with_prompts, embed_with_visual_prefix,
)
from modict.tensor import DimensionError


def test_visual_prefix_changes_exactly_l_positions_per_image():
    cfg = toy_config()
    emb = Embedding(cfg)
    torch.nn.init.normal_(emb.tokens)
    torch.nn.init.normal_(emb.img)
    ids = torch.tensor([7, 3, 3, 3, 8, 3, 3, 3, 9])
    slots = VisualSlotMap(torch.zeros(6, dtype=torch.long), torch.tensor([1, 2, 3, 5, 6, 7]),
                          torch.tensor([0, 0, 0, 1, 1, 1]), torch.tensor([0, 1, 2, 0, 1, 2]))
    prefixes = torch.randn(2, 3, cfg.d_model, dtype=torch.float64)
    plain = emb.lookup(ids)
    out = embed_with_visual_prefix(emb, ids, slots, prefixes)
    changed = (out != plain).any(-1).nonzero().flatten().tolist()
    assert changed == [1, 2, 3, 5, 6, 7]
    assert torch.allclose(out[6], plain[6] + prefixes[1, 1])
    # the <img> row comes from the dedicated parameter
    assert torch.equal(plain[1], emb.img[0])


def test_visual_prefix_validation():
    cfg = toy_config()
    emb = Embedding(cfg)
    slots = VisualSlotMap(torch.zeros(1, dtype=torch.long), torch.tensor([0]), torch.tensor([0]), torch.tensor([0]))
    with pytest.raises(ValueError, match="<img>"):
        embed_with_visual_prefix(emb, torch.tensor([5, 3]), slots, torch.zeros(1, 1, cfg.d_model))
    with pytest.raises(ValueError, match="prefixes"):
        embed_with_visual_prefix(emb, torch.tensor([3, 5]), slots, torch.zeros(2, 1, cfg.d_model))


def test_attention_causal_perturbation():
    torch.manual_seed(0)
    attn = MultiHeadAttention(16, 4)
    h = torch.randn(6, 16, dtype=torch.float64)
    prompts = torch.randn(3, 16, dtype=torch.float64)
    base = attention_with_prompts(attn, h, prompts, causal=True)
    h2 = h.clone()
    h2[4] += 1.0
    out = attention_with_prompts(attn, h2, prompts, causal=True)
    assert torch.equal(out[:4], base[:4]) and not torch.equal(out[4], base[4])
    assert base.shape == (6, 16)


def test_prompts_shift_attention_output():
    torch.manual_seed(0)
    attn = MultiHeadAttention(16, 4)
    h = torch.randn(2, 5, 16, dtype=torch.float64)
    plain = attention_with_prompts(attn, h, None, causal=False)
    assert torch.equal(plain, attention_with_prompts(attn, h, torch.zeros(0, 16, dtype=torch.float64), False))
    with_p = attention_with_prompts(attn, h, torch.randn(4, 16, dtype=torch.float64), False)
    assert with_p.shape == plain.shape and not torch.allclose(with_p, plain)
    with pytest.raises(DimensionError):
        attention_with_prompts(attn, h, torch.randn(4, 8, dtype=torch.float64), False)


@pytest.mark.parametrize("m,n", [(10, 4), (1, 1), (3, 2), (7, 6)])
def test_adapter_partition(m, n):
    ad = DeepPromptAdapter(n, m, 8)
    torch.nn.init.normal_(ad.fca.weight)
    flat = ad()
    per_layer = adapter_forward(ad, n)
    assert flat.shape == (m * n, 8) and len(per_layer) == n
    for layer, p in enumerate(per_layer):
        assert torch.equal(p, flat[layer * m: (layer + 1) * m])
    with pytest.raises(DimensionError):
        adapter_forward(ad, n + 1)


def test_adapter_initial_output_is_zero():
    model = ModICTModel(toy_config(), use_adapter=True, seed=0)
    assert all(bool((p == 0).all()) for p in model.prompts())


@pytest.mark.parametrize("arch", ["decoder-only", "encoder-decoder"])
def test_forward_shapes_and_determinism(arch, toy_tokenizer, rng):
    cfg = toy_config(arch)
    b = encode(random_instance(rng), toy_tokenizer, cfg)
    m1, m2 = ModICTModel(cfg, True, seed=5), ModICTModel(cfg, True, seed=5)
    out = m1(b)
    assert out.shape == (1, b.targets.shape[1], cfg.vocab_size)
    assert torch.equal(out, m2(b))
    assert not torch.equal(out, ModICTModel(cfg, True, seed=6)(b))


def test_decoder_only_target_logits_are_causal(toy_tokenizer, rng):
    cfg = toy_config()
    model = ModICTModel(cfg, True, seed=0)
    randomize_parameters(model)
    b = encode(random_instance(rng), toy_tokenizer, cfg)
    base = model(b)
    t = b.input_ids.shape[1] - 3
    b.input_ids[0, t + 1] = (b.input_ids[0, t + 1] + 1) % 150 + 5
    out = model(b)
    assert torch.equal(out[0, : t + 1], base[0, : t + 1])
    assert not torch.allclose(out[0, t + 1:], base[0, t + 1:])


@pytest.mark.parametrize("arch", ["decoder-only", "encoder-decoder"])
def test_padding_does_not_change_real_positions(arch, toy_tokenizer, rng):
    cfg = toy_config(arch)
    model = ModICTModel(cfg, True, seed=0)
    randomize_parameters(model)
    parts = [encode(random_instance(rng, shots=s, target_len=2 + 3 * s), toy_tokenizer, cfg) for s in (0, 2)]
    batched = model(collate(parts))
    for row, p in enumerate(parts):
        single = model(p)
        n = single.shape[1]
        assert torch.allclose(batched[row, :n], single[0], atol=1e-10)
        assert torch.allclose(model.loss(p), model.loss(collate([p])))


def test_image_feature_reaches_logits(toy_tokenizer, rng):
    cfg = toy_config()
    model = ModICTModel(cfg, False, seed=0)
    randomize_parameters(model)
    b = encode(random_instance(rng), toy_tokenizer, cfg)
    base = model(b)
    b.image_features = b.image_features + 1.0
    assert not torch.allclose(model(b), base)


def test_encoder_decoder_prompts_live_in_encoder_only(toy_tokenizer, rng):
    cfg = toy_config("encoder-decoder")
    model = ModICTModel(cfg, True, seed=0)
    randomize_parameters(model)
    b = encode(random_instance(rng), toy_tokenizer, cfg)
    loss = model.loss(b)
    loss.backward()
    assert model.adapter.base.grad is not None and model.adapter.base.grad.abs().sum() > 0
    with torch.no_grad():
        changed = model.adapter.base.clone()
        model.adapter.base.add_(1.0)
    mem_changed = model.encode_context(b, model.prompts())
    with torch.no_grad():
        model.adapter.base.copy_(changed)
    assert not torch.allclose(mem_changed, model.encode_context(b, model.prompts()))


def test_img_table_row_is_unused():
    cfg = toy_config()
    model = ModICTModel(cfg, seed=0)
    assert bool((model.lm.embed.tokens[cfg.img_token_id] == 0).all())
    ids = torch.tensor([[1, 3, 5]])
    before = model.lm.embed.lookup(ids)
    with torch.no_grad():
        model.lm.embed.tokens[cfg.img_token_id].fill_(9.0)
    assert torch.equal(model.lm.embed.lookup(ids), before)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(arch="rnn")
    assert ModelConfig().digest() == ModelConfig().digest() != ModelConfig(d_model=32).digest()


def test_arch_mismatch_rejected(toy_tokenizer, rng):
    b = encode(random_instance(rng), toy_tokenizer, toy_config())
    with pytest.raises(ValueError, match="encoded for"):
        ModICTModel(toy_config("encoder-decoder"))(b)


def test_empty_slots_and_zero_prefixes_are_plain_lookups():
    cfg = toy_config()
    emb = Embedding(cfg)
    ids = torch.tensor([5, 3, 3, 6])
    plain = emb.lookup(ids)
    assert torch.equal(embed_with_visual_prefix(emb, ids, VisualSlotMap.empty(), torch.zeros(0, 2, cfg.d_model)), plain)
    slots = VisualSlotMap(torch.zeros(2, dtype=torch.long), torch.tensor([1, 2]), torch.tensor([0, 0]),
                          torch.tensor([0, 1]))
    zeros = torch.zeros(1, 2, cfg.d_model, dtype=torch.float64)
    assert torch.equal(embed_with_visual_prefix(emb, ids, slots, zeros), plain)
