import dataclasses

import numpy as np
import pytest

from conftest import encode, random_instance, randomize_parameters, toy_config
from modict.decoding import GenConfig, generate, greedy_decode
from modict.peft import build_model
from modict.trainer import TrainConfig, Trainer


def context_of(inst, tok, cfg):
    return encode(dataclasses.replace(inst, target=None), tok, cfg)


@pytest.mark.parametrize("arch", ["decoder-only", "encoder-decoder"])
def test_overfit_single_sample_greedy_reproduces_target(arch, toy_tokenizer):
    cfg = toy_config(arch)
    inst = random_instance(np.random.default_rng(3), target_len=6)
    model = build_model(cfg, "full", seed=0)
    tc = TrainConfig(lr_peak=3e-3, warmup_steps=5, epochs=300, batch_size=1)
    Trainer(model, "full", tc).fit([encode(inst, toy_tokenizer, cfg)], max_steps=150)
    out = greedy_decode(model, context_of(inst, toy_tokenizer, cfg), max_new_tokens=20,
                        eos_id=toy_tokenizer.eos_id)
    assert toy_tokenizer.detokenize(out) == inst.target


@pytest.mark.parametrize("arch", ["decoder-only", "encoder-decoder"])
def test_beam_sample_is_seeded_and_respects_limits(arch, toy_tokenizer):
    cfg = toy_config(arch)
    model = build_model(cfg, "full", seed=0, with_adapter=True)
    randomize_parameters(model, std=0.2)
    ctx = context_of(random_instance(np.random.default_rng(0)), toy_tokenizer, cfg)
    gc = GenConfig(beam=3, samples=7, max_new_tokens=8, seed=11)
    a, b = generate(model, ctx, gc), generate(model, ctx, gc)
    assert a == b and len(a) <= 8
    assert not {0, 3} & set(a)
    outs = {tuple(generate(model, ctx, dataclasses.replace(gc, seed=s))) for s in range(6)}
    assert len(outs) > 1


def test_greedy_ignores_seed(toy_tokenizer):
    cfg = toy_config()
    model = build_model(cfg, "full", seed=0)
    randomize_parameters(model, std=0.2)
    ctx = context_of(random_instance(np.random.default_rng(0)), toy_tokenizer, cfg)
    g = GenConfig(beam=2, samples=4, max_new_tokens=6, temperature=0.0)
    assert generate(model, ctx, g) == generate(model, ctx, dataclasses.replace(g, seed=5))


def test_generation_stops_at_max_seq_len(toy_tokenizer):
    inst = random_instance(np.random.default_rng(0))
    cfg = toy_config(max_seq_len=60)
    ctx = context_of(inst, toy_tokenizer, cfg)
    model = build_model(cfg, "full", seed=0)
    out = generate(model, ctx, GenConfig(beam=1, samples=1, max_new_tokens=100, temperature=0.0))
    assert ctx.input_ids.shape[1] + len(out) <= 60


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(beam=4, samples=2)
    with pytest.raises(ValueError):
        GenConfig(temperature=-1)
    with pytest.raises(ValueError):
        GenConfig(beam=0)
