import math

import numpy as np
import pytest
import torch

from conftest import encode, random_instance, toy_config
from modict.incontext import collate
from modict.peft import build_model
from modict.trainer import (
    CheckpointError, NonFiniteLoss, TrainConfig, Trainer, load_checkpoint, lr_at, read_checkpoint,
    save_checkpoint, total_steps, train_step,
)


def examples(cfg, tok, n, seed=0, shots=1):
    rng = np.random.default_rng(seed)
    return [encode(random_instance(rng, shots=shots), tok, cfg) for _ in range(n)]


def test_lr_schedule_values():
    cfg = TrainConfig(lr_peak=1e-4, warmup_steps=1000)
    assert lr_at(0, cfg, 5000) == 0.0
    assert lr_at(500, cfg, 5000) == pytest.approx(5e-5)
    assert lr_at(1000, cfg, 5000) == pytest.approx(1e-4)
    assert lr_at(3000, cfg, 5000) == pytest.approx(5e-5)
    assert lr_at(5000, cfg, 5000) == 0.0
    with pytest.raises(ValueError):
        lr_at(10, cfg, 500)
    with pytest.raises(ValueError):
        lr_at(6000, cfg, 5000)


def test_total_steps():
    assert total_steps(65, TrainConfig(batch_size=32, epochs=10)) == 30


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_peak=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_loss_decreases_on_small_set(toy_tokenizer):
    cfg = toy_config()
    model = build_model(cfg, "full", seed=0)
    tc = TrainConfig(lr_peak=3e-3, warmup_steps=10, epochs=50, batch_size=4, seed=0)
    st = Trainer(model, "full", tc).fit(examples(cfg, toy_tokenizer, 16), max_steps=200)
    losses = np.array(st.losses)
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert len(losses) == 200
    assert smooth[-1] < 0.5 * smooth[0]
    assert np.all(np.diff(smooth[::20]) < 0)


def test_frozen_decoder_bytes_unchanged(toy_tokenizer):
    cfg = toy_config("encoder-decoder")
    model = build_model(cfg, "seq2seq-half-encoder", seed=0)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    tc = TrainConfig(lr_peak=1e-2, warmup_steps=5, epochs=100, batch_size=2, weight_decay=0.1)
    Trainer(model, "seq2seq-half-encoder", tc).fit(examples(cfg, toy_tokenizer, 8), max_steps=100)
    params = dict(model.named_parameters())
    assert any(n.startswith("lm.decoder") for n in frozen)
    for n, before in frozen.items():
        assert params[n].detach().numpy().tobytes() == before.numpy().tobytes(), n


def test_non_finite_loss_raises(toy_tokenizer):
    cfg = toy_config()
    model = build_model(cfg, "full")
    with torch.no_grad():
        model.lm.head.bias.fill_(float("nan"))
    b = collate(examples(cfg, toy_tokenizer, 2))
    with pytest.raises(NonFiniteLoss):
        train_step(model, b, "full", Trainer(model, "full", TrainConfig()).opt, 1e-3)


def test_resume_is_bitwise_identical(tmp_path, toy_tokenizer):
    cfg = toy_config()
    data = examples(cfg, toy_tokenizer, 10)
    tc = TrainConfig(lr_peak=1e-3, warmup_steps=2, epochs=3, batch_size=4, seed=7)

    straight = build_model(cfg, "decoder-only-adapter", seed=1)
    Trainer(straight, "decoder-only-adapter", tc).fit(data)

    first = build_model(cfg, "decoder-only-adapter", seed=1)
    t1 = Trainer(first, "decoder-only-adapter", tc)
    t1.fit(data, max_steps=4)
    save_checkpoint(tmp_path / "c.ckpt", first, "decoder-only-adapter", t1.opt, t1.state)

    second = build_model(cfg, "decoder-only-adapter", seed=99)
    t2 = Trainer(second, "decoder-only-adapter", tc)
    t2.state = load_checkpoint(tmp_path / "c.ckpt", second, "decoder-only-adapter", t2.opt)
    assert t2.state.step == 4
    t2.fit(data)
    for (n, a), (_, b) in zip(straight.named_parameters(), second.named_parameters()):
        assert torch.equal(a, b), n


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    cfg = toy_config()
    model = build_model(cfg, "full", seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, "full", extra={"note": "x"})
    manifest, tensors = read_checkpoint(path)
    assert manifest["extra"] == {"note": "x"}
    other = build_model(cfg, "full", seed=4)
    load_checkpoint(path, other, "full")
    assert all(torch.equal(a, b) for a, b in zip(model.parameters(), other.parameters()))

    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "trunc.ckpt", other, "full")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt", other, "full")
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, build_model(toy_config(d_model=16), "full"), "full")
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, build_model(cfg, "no-adapter"), "no-adapter")
