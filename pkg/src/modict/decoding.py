"""Beam-sample generation: multinomial candidate expansion pruned to the best beams."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch

from .incontext import EncodedBatch
from .model import ModICTModel
from .tensor import log_softmax_rows


@dataclass
class GenConfig:
    beam: int = 4
    samples: int = 20
    max_new_tokens: int = 96
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.samples < self.beam:
            raise ValueError("samples must be >= beam")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False

    @property
    def score(self) -> float:
        return self.logprob / max(len(self.tokens), 1)


def _with_inputs(ctx: EncodedBatch, rows: list[list[int]]) -> EncodedBatch:
    """Replicate a single-context batch with new decoder inputs (equal lengths)."""
    b = len(rows)
    ids = torch.tensor(rows, dtype=torch.long)
    sm = ctx.slot_map
    n_img = ctx.image_features.shape[0]
    if ctx.arch == "decoder-only":
        slot_map = type(sm)(
            row=torch.arange(b).repeat_interleave(len(sm)),
            position=sm.position.repeat(b),
            image=(sm.image.unsqueeze(0) + n_img * torch.arange(b).unsqueeze(1)).reshape(-1),
            prefix_index=sm.prefix_index.repeat(b),
        )
        feats = ctx.image_features.repeat(b, 1)
    else:
        slot_map, feats = sm, ctx.image_features
    return replace(
        ctx,
        input_ids=ids,
        targets=torch.zeros_like(ids),
        loss_mask=torch.zeros_like(ids, dtype=torch.bool),
        pad_mask=torch.ones_like(ids, dtype=torch.bool),
        slot_map=slot_map,
        image_features=feats,
        segments=ctx.segments * b,
        ids=ctx.ids * b,
    )


@torch.no_grad()
def next_token_logprobs(model: ModICTModel, ctx: EncodedBatch, prefix_rows: list[list[int]], memory=None) -> torch.Tensor:
    batch = _with_inputs(ctx, prefix_rows)
    if memory is not None:
        memory = memory.expand(len(prefix_rows), *memory.shape[1:])
        pad = ctx.source_pad_mask.expand(len(prefix_rows), -1)
        logits = model.lm.decode(batch.input_ids, batch.pad_mask, memory, pad)
    else:
        logits = model(batch)
    return logits[:, -1, :]


def _banned(model: ModICTModel, pad_id: int) -> list[int]:
    return [pad_id, model.cfg.img_token_id]


@torch.no_grad()
def generate(model: ModICTModel, context: EncodedBatch, cfg: GenConfig, eos_id: int = 2,
             pad_id: int = 0) -> list[int]:
    """Decode one context (batch of size 1) and return the generated ids, without ``<eos>``."""
    if context.batch_size != 1:
        raise ValueError("generate expects a single context")
    model.eval()
    start = context.input_ids[0][context.pad_mask[0]].tolist()
    limit = model.cfg.max_seq_len
    if len(start) > limit or (context.source_ids is not None and context.source_ids.shape[1] > limit):
        raise ValueError(f"context length exceeds max_seq_len {limit}")
    memory = model.encode_context(context, model.prompts()) if model.cfg.arch == "encoder-decoder" else None
    gen = torch.Generator().manual_seed(cfg.seed)
    banned = _banned(model, pad_id)
    greedy = cfg.temperature == 0

    live = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(cfg.max_new_tokens):
        if len(start) + len(live[0].tokens) >= limit:
            break
        logp = next_token_logprobs(model, context, [start + h.tokens for h in live], memory)
        logp[:, banned] = float("-inf")
        logp = log_softmax_rows(logp)
        cands: dict[tuple[int, int], float] = {}
        per_beam = -(-cfg.samples // len(live))
        for i, h in enumerate(live):
            row = logp[i]
            if greedy:
                picks = torch.topk(row, min(per_beam, cfg.beam)).indices.tolist()
            else:
                probs = torch.softmax(row / cfg.temperature, dim=-1)
                support = int((probs > 0).sum())
                picks = torch.multinomial(probs, min(per_beam, support), replacement=False,
                                          generator=gen).tolist()
            for tok in picks:
                cands[(i, tok)] = h.logprob + float(row[tok])
        ranked = sorted(cands.items(), key=lambda kv: (-kv[1], kv[0]))
        nxt = []
        for (i, tok), lp in ranked[: cfg.beam]:
            h = Hypothesis(live[i].tokens + [tok], lp, finished=tok == eos_id)
            (finished if h.finished else nxt).append(h)
        live = nxt
        if not live or len(finished) >= cfg.beam:
            break
    pool = finished or live
    best = max(pool, key=lambda h: h.score)
    toks = best.tokens
    return toks[:-1] if toks and toks[-1] == eos_id else toks


def greedy_decode(model: ModICTModel, context: EncodedBatch, max_new_tokens: int = 96, eos_id: int = 2) -> list[int]:
    return generate(model, context, GenConfig(beam=1, samples=1, max_new_tokens=max_new_tokens, temperature=0.0),
                    eos_id=eos_id)
