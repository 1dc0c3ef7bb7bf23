import pytest
import torch

from conftest import encode, random_instance, toy_config
from modict.peft import (
    AdamW, SGD, PLANS, apply_freeze_plan, build_model, get_plan, make_optimizer, optimizer_step_respecting_plan,
)


def test_half_encoder_partition():
    model = build_model(toy_config("encoder-decoder", n_layers=4), "seq2seq-half-encoder")
    rep = apply_freeze_plan(model, "seq2seq-half-encoder")
    blocks = {n.split(".")[3] for n in rep.trainable if n.startswith("lm.encoder.blocks.")}
    assert blocks == {"0", "1"}
    assert not any(n.startswith("lm.decoder") or n.startswith("lm.embed") for n in rep.trainable)
    assert any(n.startswith("feature_transformer") for n in rep.trainable)
    assert rep.total_count == sum(p.numel() for p in model.parameters())


def test_decoder_only_adapter_trains_nothing_inside_lm():
    model = build_model(toy_config(), "decoder-only-adapter")
    rep = apply_freeze_plan(model, "decoder-only-adapter")
    assert not any(n.startswith("lm.") for n in rep.trainable)
    assert {n.split(".")[0] for n in rep.trainable} == {"adapter", "feature_transformer"}


@pytest.mark.parametrize("name", sorted(PLANS))
def test_img_embedding_always_frozen(name):
    arch = "encoder-decoder" if name == "seq2seq-half-encoder" else "decoder-only"
    model = build_model(toy_config(arch), name)
    assert not model.lm.embed.img.requires_grad


def test_forced_shots_only_on_no_mict_plan():
    assert get_plan("no-adapter-no-mict").forced_shots == 0
    assert all(p.forced_shots is None for n, p in PLANS.items() if n != "no-adapter-no-mict")


def test_incompatible_plans_rejected():
    with pytest.raises(ValueError, match="requires arch"):
        build_model(toy_config(), "seq2seq-half-encoder")
    with pytest.raises(ValueError, match="even"):
        build_model(toy_config("encoder-decoder", n_layers=3), "seq2seq-half-encoder")
    with pytest.raises(ValueError, match="requires arch"):
        build_model(toy_config("encoder-decoder"), "decoder-only-adapter")
    with pytest.raises(ValueError, match="requires the adapter"):
        build_model(toy_config(), "decoder-only-adapter", with_adapter=False)
    with pytest.raises(ValueError, match="zero output"):
        build_model(toy_config(), "no-adapter", with_adapter=True)
    with pytest.raises(ValueError, match="unknown freeze plan"):
        get_plan("lora")
    assert build_model(toy_config(), "full", with_adapter=True).adapter is not None


def test_frozen_gradients_are_ignored_and_counted(toy_tokenizer, rng):
    cfg = toy_config()
    model = build_model(cfg, "decoder-only-adapter")
    frozen_before = model.lm.head.weight.detach().clone()
    grads = {n: torch.ones_like(p) for n, p in model.named_parameters()}
    stats = optimizer_step_respecting_plan(model, "decoder-only-adapter", SGD(0.1), grads=grads)
    assert torch.equal(model.lm.head.weight, frozen_before)
    n_frozen = sum(1 for n, _ in model.named_parameters() if not n.startswith(("adapter", "feature_transformer")))
    assert stats.ignored_frozen_grads == n_frozen
    assert stats.updated == len(grads) - n_frozen


def test_sgd_update_rule():
    model = build_model(toy_config(), "no-adapter")
    w = model.feature_transformer.fc1.weight
    before = w.detach().clone()
    g = torch.full_like(w, 0.5)
    optimizer_step_respecting_plan(model, "no-adapter", SGD(0.2), grads={"feature_transformer.fc1.weight": g})
    assert torch.allclose(w, before - 0.1)


def test_adamw_matches_torch_reference():
    torch.manual_seed(0)
    p_ours = torch.randn(5, dtype=torch.float64)
    p_ref = p_ours.clone().requires_grad_(True)
    ref = torch.optim.AdamW([p_ref], lr=0.01, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.1)
    ours = AdamW(0.01, betas=(0.9, 0.98), weight_decay=0.1)
    for step in range(5):
        g = torch.randn(5, dtype=torch.float64)
        ours.step_count += 1
        ours.update("p", p_ours, g, 0.01)
        p_ref.grad = g.clone()
        ref.step()
    assert torch.allclose(p_ours, p_ref.detach(), atol=1e-12)


def test_make_optimizer():
    assert isinstance(make_optimizer("adamw", 1e-3), AdamW)
    assert isinstance(make_optimizer("sgd", 1e-3), SGD)
    with pytest.raises(ValueError):
        make_optimizer("lion", 1e-3)
