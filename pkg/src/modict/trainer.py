"""Training loop: masked cross-entropy over the target description, linear
warmup/decay, plan-respecting updates and bitwise checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .incontext import EncodedBatch, collate
from .model import ModICTModel
from .peft import FreezePlan, Optimizer, get_plan, make_optimizer, optimizer_step_respecting_plan


@dataclass
class TrainConfig:
    lr_peak: float = 1e-4
    warmup_steps: int = 1000
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if self.warmup_steps < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("warmup_steps >= 0, epochs >= 1 and batch_size >= 1 required")


def total_steps(n_examples: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n_examples / cfg.batch_size)


def lr_at(step: int, cfg: TrainConfig, total: int) -> float:
    """Linear ramp 0 -> lr_peak over warmup, then linear decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if cfg.warmup_steps > total:
        raise ValueError(f"warmup_steps {cfg.warmup_steps} exceeds total steps {total}")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_peak * step / w
    if total == w:
        return cfg.lr_peak
    return cfg.lr_peak * (total - step) / (total - w)


class NonFiniteLoss(RuntimeError):
    pass


def train_step(model: ModICTModel, batch: EncodedBatch, plan: FreezePlan | str, opt: Optimizer,
               lr: float, grad_clip: Optional[float] = 1.0) -> float:
    """One forward/backward/update; returns the pre-update loss."""
    plan = get_plan(plan) if isinstance(plan, str) else plan
    model.zero_grad(set_to_none=True)
    loss = model.loss(batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value} on batch ids {batch.ids[:5]}")
    loss.backward()
    trainable = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(trainable, grad_clip)
    optimizer_step_respecting_plan(model, plan, opt, lr=lr)
    return value


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    losses: list[float] = field(default_factory=list)


class Trainer:
    """Seeded epoch loop over pre-encoded single-instance batches."""

    def __init__(self, model: ModICTModel, plan: FreezePlan | str, cfg: TrainConfig,
                 log: Optional[Callable[[dict], None]] = None):
        self.model = model
        self.plan = get_plan(plan) if isinstance(plan, str) else plan
        self.cfg = cfg
        self.opt = make_optimizer(cfg.optimizer, cfg.lr_peak, cfg.betas, cfg.weight_decay)
        self.state = TrainState()
        self.log = log

    def batches_for_epoch(self, examples: Sequence[EncodedBatch], epoch: int) -> list[EncodedBatch]:
        gen = torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + epoch)
        perm = torch.randperm(len(examples), generator=gen).tolist()
        bs = self.cfg.batch_size
        return [collate([examples[i] for i in perm[j: j + bs]]) for j in range(0, len(perm), bs)]

    def fit(self, examples: Sequence[EncodedBatch], max_steps: Optional[int] = None) -> TrainState:
        if not examples:
            raise ValueError("no training examples")
        total = total_steps(len(examples), self.cfg)
        lr_at(0, self.cfg, total)  # validates warmup against the budget
        st = self.state
        self.model.train()
        while st.epoch < self.cfg.epochs:
            batches = self.batches_for_epoch(examples, st.epoch)
            per_epoch = len(batches)
            for b in batches[st.step - st.epoch * per_epoch:]:
                if max_steps is not None and st.step >= max_steps:
                    return st
                lr = lr_at(st.step, self.cfg, total)
                loss = train_step(self.model, b, self.plan, self.opt, lr, self.cfg.grad_clip)
                st.losses.append(loss)
                st.step += 1
                if self.log:
                    self.log({"step": st.step, "epoch": st.epoch, "loss": loss, "lr": lr})
            st.epoch += 1
        return st


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"MDICTCKP"


class CheckpointError(ValueError):
    pass


def config_hash(model: ModICTModel, plan: FreezePlan | str) -> str:
    name = plan if isinstance(plan, str) else plan.name
    adapter = int(model.adapter is not None)
    return hashlib.sha256(f"{model.cfg.digest()}:{name}:{adapter}".encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: ModICTModel, plan: FreezePlan | str,
                    opt: Optional[Optimizer] = None, state: Optional[TrainState] = None,
                    extra: Optional[dict] = None) -> None:
    """Write ``magic | u64 manifest length | manifest JSON | tensor payload``.

    The manifest lists every tensor's name, shape, dtype, byte offset and a
    digest of the payload, so loads can reject truncated or altered files.
    """
    tensors: list[tuple[str, torch.Tensor]] = [(f"param/{n}", p.detach()) for n, p in model.named_parameters()]
    if opt is not None:
        tensors += [(f"opt/{k}", v) for k, v in opt.state_tensors().items()]
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        raw = t.contiguous().cpu().numpy().tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    st = state or TrainState()
    manifest = {
        "format": 1,
        "config_hash": config_hash(model, plan),
        "model_config": asdict(model.cfg),
        "plan": plan if isinstance(plan, str) else plan.name,
        "step": st.step,
        "epoch": st.epoch,
        "optimizer": None if opt is None else {"kind": opt.kind, "step_count": opt.step_count},
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", buf, 8)
    if 16 + n > len(buf):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[16: 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    payload = buf[16 + n:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload digest mismatch (truncated or corrupt)")
    tensors = {}
    for e in manifest["tensors"]:
        dtype = getattr(torch, e["dtype"])
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        t = torch.frombuffer(bytearray(raw), dtype=dtype) if raw else torch.empty(0, dtype=dtype)
        tensors[e["name"]] = t.reshape(e["shape"]).clone()
    return manifest, tensors


def load_checkpoint(path: str | Path, model: ModICTModel, plan: FreezePlan | str,
                    opt: Optional[Optimizer] = None) -> TrainState:
    """Restore parameters (and optimizer state) in place; nothing is touched on error."""
    manifest, tensors = read_checkpoint(path)
    expected = config_hash(model, plan)
    if manifest["config_hash"] != expected:
        raise CheckpointError(
            f"{path}: config hash {manifest['config_hash']} does not match model/plan hash {expected}"
        )
    params = dict(model.named_parameters())
    for name, p in params.items():
        t = tensors.get(f"param/{name}")
        if t is None:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if t.shape != p.shape or t.dtype != p.dtype:
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, model expects {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(tensors[f"param/{name}"])
    if opt is not None and manifest.get("optimizer"):
        opt_t = {k[len("opt/"):]: v for k, v in tensors.items() if k.startswith("opt/")}
        opt.load_state_tensors(opt_t, manifest["optimizer"]["step_count"])
    return TrainState(step=manifest["step"], epoch=manifest["epoch"])
