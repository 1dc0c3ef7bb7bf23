"""Dense tensor helpers and a central-difference gradient oracle.

Tensors are plain ``torch.Tensor`` objects in float64. Analytic gradients come
from torch autograd; :func:`finite_diff_grad` is the independent check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import torch

DEFAULT_DTYPE = torch.float64


class DimensionError(ValueError):
    pass


def as_tensor(data, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    return torch.as_tensor(data, dtype=dtype)


@dataclass
class ParamGroup:
    """A named parameter tensor with its trainable flag and gradient slot."""

    name: str
    tensor: torch.Tensor
    trainable: bool = True
    grad: Optional[torch.Tensor] = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = torch.zeros_like(self.tensor)
        if self.grad.shape != self.tensor.shape:
            raise DimensionError(
                f"grad shape {tuple(self.grad.shape)} != tensor shape {tuple(self.tensor.shape)} for {self.name}"
            )

    @property
    def numel(self) -> int:
        return self.tensor.numel()


def param_groups(module: torch.nn.Module) -> list[ParamGroup]:
    """Snapshot a module's parameters as ParamGroups (tensors are shared, not copied)."""
    groups = []
    for name, p in module.named_parameters():
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        groups.append(ParamGroup(name, p.data, p.requires_grad, grad))
    return groups


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    if x.dim() < 1:
        raise DimensionError("softmax_rows needs rank >= 1")
    if not torch.isfinite(x).all():
        raise ValueError("softmax_rows: non-finite input")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax_rows(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    return shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)


def cross_entropy_masked(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over the positions where ``mask`` is set.

    ``logits`` is ``[..., T, V]``; ``targets`` and ``mask`` are ``[..., T]``.
    Unmasked positions are dropped before any arithmetic, so their logits and
    targets cannot influence the result.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise DimensionError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, mask {tuple(mask.shape)} disagree"
        )
    mask = mask.bool()
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    sel_logits = logits[mask]
    sel_targets = targets[mask].long()
    logp = log_softmax_rows(sel_logits)
    nll = -logp.gather(-1, sel_targets.unsqueeze(-1)).squeeze(-1)
    return nll.sum() / n


def relative_error(a, b) -> torch.Tensor:
    a = torch.as_tensor(a, dtype=DEFAULT_DTYPE)
    b = torch.as_tensor(b, dtype=DEFAULT_DTYPE)
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, 1e-8))
    return (a - b).abs() / denom


def finite_diff_grad(
    f: Callable[[], float],
    theta: Sequence[ParamGroup] | Mapping[str, torch.Tensor],
    eps: float = 1e-4,
    indices: Optional[Mapping[str, Iterable[int]]] = None,
    stencil: int = 2,
) -> dict[str, torch.Tensor]:
    """Central-difference estimates ``(f(θ+eps) - f(θ-eps)) / (2 eps)``.

    ``stencil=4`` uses the fourth-order form
    ``(8(f(θ+eps) - f(θ-eps)) - (f(θ+2eps) - f(θ-2eps))) / (12 eps)``, whose
    truncation error is O(eps^4) and so tolerates a larger eps.

    ``f`` is called with no arguments and must read the tensors in ``theta``,
    which are perturbed in place and restored afterwards. With ``indices``,
    only the listed flat positions of each named tensor are probed; the rest of
    the returned estimate is NaN.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    if isinstance(theta, Mapping):
        items = list(theta.items())
    else:
        items = [(g.name, g.tensor) for g in theta]

    def _eval() -> float:
        v = float(f())
        if not math.isfinite(v):
            raise ValueError(f"finite_diff_grad: objective is non-finite ({v})")
        return v

    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, t in items:
            flat = t.view(-1)
            est = torch.full((flat.numel(),), float("nan"), dtype=DEFAULT_DTYPE)
            which = range(flat.numel()) if indices is None or name not in indices else indices[name]
            if indices is not None and name not in indices:
                out[name] = est.view(t.shape)
                continue
            for i in which:
                orig = flat[i].item()

                def at(h: float) -> float:
                    flat[i] = orig + h
                    return _eval()

                d1 = at(eps) - at(-eps)
                if stencil == 2:
                    est[i] = d1 / (2 * eps)
                else:
                    est[i] = (8 * d1 - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                flat[i] = orig
            out[name] = est.view(t.shape)
    return out
