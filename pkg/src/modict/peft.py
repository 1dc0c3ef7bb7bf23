"""Freeze plans and a plan-respecting optimizer.

A plan classifies every parameter path as trainable or frozen. The ``<img>``
embedding (``lm.embed.img``) is frozen under every plan.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

from .model import ModelConfig, ModICTModel

log = logging.getLogger(__name__)

PLAN_NAMES = ("seq2seq-half-encoder", "decoder-only-adapter", "full", "no-adapter", "no-adapter-no-mict")
IMG_PARAM = "lm.embed.img"

_ENC_BLOCK = re.compile(r"^lm\.encoder\.blocks\.(\d+)\.")


@dataclass(frozen=True)
class FreezePlan:
    name: str
    uses_adapter: bool
    forced_shots: Optional[int]
    arch: Optional[str]  # None = either architecture
    predicate: Callable[[str, ModelConfig], bool] = field(compare=False, repr=False)

    def is_trainable(self, path: str, cfg: ModelConfig) -> bool:
        if path == IMG_PARAM:
            return False
        return self.predicate(path, cfg)


def _half_encoder(path: str, cfg: ModelConfig) -> bool:
    if path.startswith("feature_transformer."):
        return True
    m = _ENC_BLOCK.match(path)
    return bool(m) and int(m.group(1)) < cfg.n_layers // 2


def _adapter_only(path: str, cfg: ModelConfig) -> bool:
    return path.startswith("adapter.") or path.startswith("feature_transformer.")


def _everything(path: str, cfg: ModelConfig) -> bool:
    return True


def _ft_only(path: str, cfg: ModelConfig) -> bool:
    return path.startswith("feature_transformer.")


PLANS = {
    "seq2seq-half-encoder": FreezePlan("seq2seq-half-encoder", False, None, "encoder-decoder", _half_encoder),
    "decoder-only-adapter": FreezePlan("decoder-only-adapter", True, None, "decoder-only", _adapter_only),
    "full": FreezePlan("full", False, None, None, _everything),
    "no-adapter": FreezePlan("no-adapter", False, None, None, _ft_only),
    "no-adapter-no-mict": FreezePlan("no-adapter-no-mict", False, 0, None, _ft_only),
}


def get_plan(name: str) -> FreezePlan:
    try:
        return PLANS[name]
    except KeyError:
        raise ValueError(f"unknown freeze plan {name!r}; choose from {', '.join(PLAN_NAMES)}") from None


def check_compatible(plan: FreezePlan, cfg: ModelConfig) -> None:
    if plan.arch is not None and plan.arch != cfg.arch:
        raise ValueError(f"freeze plan {plan.name!r} requires arch {plan.arch!r}, got {cfg.arch!r}")
    if plan.name == "seq2seq-half-encoder" and cfg.n_layers % 2:
        raise ValueError(f"seq2seq-half-encoder needs an even encoder depth, got {cfg.n_layers}")
    if plan.uses_adapter and cfg.prompt_len < 1:
        raise ValueError(f"freeze plan {plan.name!r} needs prompt_len >= 1")


def build_model(cfg: ModelConfig, plan: FreezePlan | str, seed: int = 0,
                with_adapter: Optional[bool] = None) -> ModICTModel:
    """Instantiate a model for ``plan`` and apply it.

    The adapter is built when the plan needs one; ``with_adapter=True`` also
    attaches it under plans that train it alongside everything else.
    """
    plan = get_plan(plan) if isinstance(plan, str) else plan
    check_compatible(plan, cfg)
    use = plan.uses_adapter if with_adapter is None else with_adapter
    if plan.uses_adapter and not use:
        raise ValueError(f"freeze plan {plan.name!r} requires the adapter")
    if use and plan.name != "full" and not plan.uses_adapter:
        raise ValueError(f"freeze plan {plan.name!r} would leave the adapter frozen at its zero output")
    model = ModICTModel(cfg, use_adapter=use, seed=seed)
    apply_freeze_plan(model, plan)
    return model


@dataclass
class PartitionReport:
    plan: str
    trainable: list[str]
    frozen: list[str]
    trainable_count: int
    frozen_count: int

    @property
    def total_count(self) -> int:
        return self.trainable_count + self.frozen_count


def apply_freeze_plan(model: ModICTModel, plan: FreezePlan | str) -> PartitionReport:
    """Set ``requires_grad`` on every parameter according to ``plan``."""
    plan = get_plan(plan) if isinstance(plan, str) else plan
    check_compatible(plan, model.cfg)
    trainable, frozen = [], []
    n_train = n_frozen = 0
    for name, p in model.named_parameters():
        flag = plan.is_trainable(name, model.cfg)
        p.requires_grad_(flag)
        if flag:
            trainable.append(name)
            n_train += p.numel()
        else:
            frozen.append(name)
            n_frozen += p.numel()
    return PartitionReport(plan.name, trainable, frozen, n_train, n_frozen)


# ---------------------------------------------------------------- optimizer

class Optimizer:
    """Name-keyed optimizer state so checkpoints and plans can address it."""

    kind = "base"

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.state: dict[str, dict[str, torch.Tensor]] = {}

    def update(self, name: str, p: torch.Tensor, g: torch.Tensor, lr: float) -> None:
        raise NotImplementedError

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {f"{n}::{k}": v for n, d in sorted(self.state.items()) for k, v in sorted(d.items())}

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int) -> None:
        self.state = {}
        for key, v in tensors.items():
            name, k = key.split("::")
            self.state.setdefault(name, {})[k] = v.clone()
        self.step_count = step_count


class SGD(Optimizer):
    kind = "sgd"

    def update(self, name, p, g, lr):
        if self.weight_decay:
            g = g + self.weight_decay * p
        p.add_(g, alpha=-lr)


class AdamW(Optimizer):
    kind = "adamw"

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        super().__init__(lr, weight_decay)
        self.betas = tuple(betas)
        self.eps = eps

    def update(self, name, p, g, lr):
        b1, b2 = self.betas
        st = self.state.setdefault(name, {"m": torch.zeros_like(p), "v": torch.zeros_like(p)})
        st["m"].mul_(b1).add_(g, alpha=1 - b1)
        st["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
        t = self.step_count
        m_hat = st["m"] / (1 - b1 ** t)
        v_hat = st["v"] / (1 - b2 ** t)
        if self.weight_decay:
            p.mul_(1 - lr * self.weight_decay)
        p.addcdiv_(m_hat, v_hat.sqrt().add_(self.eps), value=-lr)


def make_optimizer(kind: str, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.01, eps: float = 1e-8) -> Optimizer:
    if kind in ("adamw", "adamw-style"):
        return AdamW(lr, betas=betas, eps=eps, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class StepStats:
    updated: int = 0
    ignored_frozen_grads: int = 0


@torch.no_grad()
def optimizer_step_respecting_plan(
    model: nn.Module,
    plan: FreezePlan | str,
    opt: Optimizer,
    lr: Optional[float] = None,
    grads: Optional[dict[str, torch.Tensor]] = None,
) -> StepStats:
    """Apply one optimizer update to the plan's trainable parameters only.

    Gradients default to each parameter's ``.grad``. A gradient found on a
    frozen parameter is skipped and counted, never applied.
    """
    plan = get_plan(plan) if isinstance(plan, str) else plan
    cfg = model.cfg
    lr = opt.lr if lr is None else lr
    stats = StepStats()
    opt.step_count += 1
    for name, p in model.named_parameters():
        g = grads.get(name) if grads is not None else p.grad
        if not plan.is_trainable(name, cfg):
            if g is not None and bool(g.abs().sum() > 0):
                stats.ignored_frozen_grads += 1
            continue
        if g is None:
            continue
        opt.update(name, p.data, g, lr)
        stats.updated += 1
    if stats.ignored_frozen_grads:
        log.warning("ignored gradients on %d frozen parameter(s)", stats.ignored_frozen_grads)
    return stats
