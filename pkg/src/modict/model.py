"""Miniature transformer stacks with visual-prefix injection and per-layer
continuous prompts in self-attention."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .incontext import EncodedBatch, FeatureTransformer, VisualSlotMap
from .tensor import DEFAULT_DTYPE, DimensionError, cross_entropy_masked

ARCHS = ("encoder-decoder", "decoder-only")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "decoder-only"
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 256
    max_seq_len: int = 512
    visual_prefix_len: int = 5
    prompt_len: int = 10
    image_dim: int = 32
    img_token_id: int = 3

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len",
                     "visual_prefix_len", "image_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- attention

class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model, dtype=DEFAULT_DTYPE)
        # a key bias shifts every score in a row equally and cancels in softmax
        self.wk = nn.Linear(d_model, d_model, bias=False, dtype=DEFAULT_DTYPE)
        self.wv = nn.Linear(d_model, d_model, dtype=DEFAULT_DTYPE)
        self.wo = nn.Linear(d_model, d_model, dtype=DEFAULT_DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, query: torch.Tensor, memory: torch.Tensor, allowed: Optional[torch.Tensor]) -> torch.Tensor:
        """``allowed`` is a boolean ``[B or 1, Tq, Tk]`` mask (True = may attend)."""
        b, tq, d = query.shape
        q, k, v = self._split(self.wq(query)), self._split(self.wk(memory)), self._split(self.wv(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads)
        if allowed is not None:
            scores = scores.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, tq, d)
        return self.wo(out)


def attention_with_prompts(
    attn: MultiHeadAttention,
    hidden: torch.Tensor,
    layer_prompts: Optional[torch.Tensor],
    causal: bool,
    key_padding: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Self-attention where ``layer_prompts`` act as extra key/value positions.

    Keys and values are computed over ``[prompts ‖ hidden]`` with the layer's
    own projections, queries over ``hidden`` only, so the output keeps the
    input length. Under ``causal``, position t sees every prompt plus real
    positions <= t. Accepts ``[T, d]`` or ``[B, T, d]`` hidden states.
    """
    squeeze = hidden.dim() == 2
    if squeeze:
        hidden = hidden.unsqueeze(0)
        if key_padding is not None:
            key_padding = key_padding.unsqueeze(0)
    b, t, d = hidden.shape
    allowed = None
    if causal:
        allowed = torch.ones(t, t, dtype=torch.bool).tril().unsqueeze(0)
    if key_padding is not None:
        kp = key_padding.bool().unsqueeze(1)  # [B, 1, T]
        allowed = kp if allowed is None else allowed & kp
        # padded query rows would otherwise be empty under padding-only masks
        allowed = allowed | torch.eye(t, dtype=torch.bool).unsqueeze(0)

    m = 0 if layer_prompts is None else layer_prompts.shape[-2]
    if m == 0:
        out = attn(hidden, hidden, allowed)
    else:
        if layer_prompts.shape[-1] != d:
            raise DimensionError(f"prompt width {layer_prompts.shape[-1]} != hidden width {d}")
        prompts = layer_prompts.expand(b, m, d) if layer_prompts.dim() == 2 else layer_prompts
        memory = torch.cat([prompts, hidden], dim=1)
        if allowed is not None:
            allowed = torch.cat([torch.ones(allowed.shape[0], t, m, dtype=torch.bool), allowed], dim=-1)
        out = attn(hidden, memory, allowed)
    return out.squeeze(0) if squeeze else out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff, dtype=DEFAULT_DTYPE)
        self.fc2 = nn.Linear(d_ff, d_model, dtype=DEFAULT_DTYPE)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block; cross-attention only in seq2seq decoders."""

    def __init__(self, cfg: ModelConfig, cross: bool = False):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d, dtype=DEFAULT_DTYPE)
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        self.cross = None
        if cross:
            self.ln_cross = nn.LayerNorm(d, dtype=DEFAULT_DTYPE)
            self.cross = MultiHeadAttention(d, cfg.n_heads)
        self.ln2 = nn.LayerNorm(d, dtype=DEFAULT_DTYPE)
        self.ff = FeedForward(d, cfg.d_ff)

    def forward(self, x, prompts=None, causal=False, pad=None, memory=None, memory_pad=None):
        x = x + attention_with_prompts(self.attn, self.ln1(x), prompts, causal, pad)
        if self.cross is not None:
            allowed = None if memory_pad is None else memory_pad.bool().unsqueeze(1)
            x = x + self.cross(self.ln_cross(x), memory, allowed)
        return x + self.ff(self.ln2(x))


class Stack(nn.Module):
    def __init__(self, cfg: ModelConfig, cross: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg, cross) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model, dtype=DEFAULT_DTYPE)

    def forward(self, x, prompts=None, causal=False, pad=None, memory=None, memory_pad=None):
        for i, block in enumerate(self.blocks):
            x = block(x, None if prompts is None else prompts[i], causal, pad, memory, memory_pad)
        return self.norm(x)


# ---------------------------------------------------------------- embedding

class Embedding(nn.Module):
    """Token table, a separate ``<img>`` row and learned absolute positions.

    The ``<img>`` vector lives in its own parameter so freeze plans can hold
    it fixed while the rest of the table trains; the table's own row for that
    id is zero and never read.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.img_token_id = cfg.img_token_id
        self.tokens = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model, dtype=DEFAULT_DTYPE))
        self.img = nn.Parameter(torch.empty(1, cfg.d_model, dtype=DEFAULT_DTYPE))
        self.positions = nn.Parameter(torch.empty(cfg.max_seq_len, cfg.d_model, dtype=DEFAULT_DTYPE))
        with torch.no_grad():
            for p in (self.tokens, self.img, self.positions):
                p.normal_(0.0, 0.02)
            self.tokens[cfg.img_token_id].zero_()

    def lookup(self, ids: torch.Tensor) -> torch.Tensor:
        emb = F.embedding(ids, self.tokens)
        is_img = (ids == self.img_token_id).unsqueeze(-1)
        return torch.where(is_img, self.img.expand_as(emb), emb)


def embed_with_visual_prefix(
    embedding: Embedding,
    token_ids: torch.Tensor,
    slot_map: VisualSlotMap,
    prefixes: torch.Tensor,
) -> torch.Tensor:
    """Embedding lookup with prefix vector ``prefixes[image, j]`` added at each slot.

    ``token_ids`` is ``[T]`` or ``[B, T]``; ``prefixes`` is ``[n_images, L, d]``.
    """
    squeeze = token_ids.dim() == 1
    ids = token_ids.unsqueeze(0) if squeeze else token_ids
    emb = embedding.lookup(ids)
    if len(slot_map):
        if not bool((ids[slot_map.row, slot_map.position] == embedding.img_token_id).all()):
            raise ValueError("visual slot position does not hold the <img> token")
        if slot_map.n_images != prefixes.shape[0]:
            raise ValueError(f"slot map names {slot_map.n_images} images but {prefixes.shape[0]} prefixes given")
        vals = prefixes[slot_map.image, slot_map.prefix_index]
        emb = emb.index_put((slot_map.row, slot_map.position), vals, accumulate=True)
    return emb.squeeze(0) if squeeze else emb


# ------------------------------------------------------------------ adapter

class DeepPromptAdapter(nn.Module):
    """Shared two-layer ReLU perceptron over ``M*N`` learnable base vectors.

    Output row ``l*M + j`` is the j-th prompt of layer l.
    """

    def __init__(self, n_layers: int, prompt_len: int, d_model: int,
                 d_base: Optional[int] = None, d_hidden: Optional[int] = None):
        super().__init__()
        d_base = d_base or d_model
        d_hidden = d_hidden or 2 * d_model
        self.n_layers, self.prompt_len, self.d_model = n_layers, prompt_len, d_model
        self.base = nn.Parameter(torch.empty(n_layers * prompt_len, d_base, dtype=DEFAULT_DTYPE))
        self.fc1 = nn.Linear(d_base, d_hidden, dtype=DEFAULT_DTYPE)
        self.fca = nn.Linear(d_hidden, d_model, dtype=DEFAULT_DTYPE)
        with torch.no_grad():
            self.base.normal_(0.0, 1.0)
            self.fca.weight.zero_()
            self.fca.bias.zero_()

    def hidden(self) -> torch.Tensor:
        return F.relu(self.fc1(self.base))

    def forward(self) -> torch.Tensor:
        """All ``M*N`` prompt vectors, ``[M*N, d_model]``."""
        return self.fca(self.hidden())


def adapter_forward(adapter: DeepPromptAdapter, n_layers: int) -> list[torch.Tensor]:
    """Per-layer prompts: N tensors of shape ``[M, d_model]``."""
    if n_layers != adapter.n_layers:
        raise DimensionError(f"adapter built for {adapter.n_layers} layers, model has {n_layers}")
    flat = adapter()
    m = flat.shape[0] // n_layers
    return list(flat.view(n_layers, m, adapter.d_model).unbind(0))


# -------------------------------------------------------------------- model

class LanguageModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = Embedding(cfg)
        if cfg.arch == "encoder-decoder":
            self.encoder = Stack(cfg)
            self.decoder = Stack(cfg, cross=True)
        else:
            self.encoder = None
            self.decoder = Stack(cfg)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, dtype=DEFAULT_DTYPE)

    def _positions(self, t: int) -> torch.Tensor:
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        return self.embed.positions[:t]

    def encode(self, source_ids, slot_map, prefixes, source_pad=None, prompts=None):
        x = embed_with_visual_prefix(self.embed, source_ids, slot_map, prefixes)
        x = x + self._positions(source_ids.shape[-1])
        return self.encoder(x, prompts, causal=False, pad=source_pad)

    def decode(self, input_ids, pad=None, memory=None, memory_pad=None,
               slot_map=None, prefixes=None, prompts=None):
        if slot_map is not None and len(slot_map):
            x = embed_with_visual_prefix(self.embed, input_ids, slot_map, prefixes)
        else:
            x = self.embed.lookup(input_ids)
        x = x + self._positions(input_ids.shape[-1])
        h = self.decoder(x, prompts, causal=True, pad=pad, memory=memory, memory_pad=memory_pad)
        return self.head(h)


class ModICTModel(nn.Module):
    """Language model plus the learnable feature transformer and, optionally,
    the deep prompt adapter."""

    def __init__(self, cfg: ModelConfig, use_adapter: bool = False, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.lm = LanguageModel(cfg)
        self.feature_transformer = FeatureTransformer(cfg.image_dim, cfg.d_model, cfg.visual_prefix_len)
        self.adapter = None
        if use_adapter:
            if cfg.prompt_len < 1:
                raise ValueError("adapter requires prompt_len >= 1")
            self.adapter = DeepPromptAdapter(cfg.n_layers, cfg.prompt_len, cfg.d_model)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("adapter.fca"):
                p.zero_()
            elif name == "adapter.base":
                p.normal_(0.0, 1.0, generator=gen)
            elif ".ln" in name or name.endswith("norm.weight") or name.endswith("norm.bias"):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=gen)
        self.lm.embed.tokens[self.cfg.img_token_id].zero_()

    def prompts(self) -> Optional[list[torch.Tensor]]:
        if self.adapter is None:
            return None
        return adapter_forward(self.adapter, self.cfg.n_layers)

    def prefixes(self, batch: EncodedBatch) -> torch.Tensor:
        return self.feature_transformer(batch.image_features)

    def encode_context(self, batch: EncodedBatch, prompts=None):
        """Encoder memory for seq2seq models (None for decoder-only)."""
        if self.cfg.arch != "encoder-decoder":
            return None
        return self.lm.encode(batch.source_ids, batch.slot_map, self.prefixes(batch),
                              batch.source_pad_mask, prompts)

    def forward(self, batch: EncodedBatch, memory=None) -> torch.Tensor:
        """Logits ``[B, T, V]`` aligned with ``batch.targets``."""
        if batch.arch != self.cfg.arch:
            raise ValueError(f"batch encoded for {batch.arch}, model is {self.cfg.arch}")
        prompts = self.prompts()
        if self.cfg.arch == "encoder-decoder":
            if memory is None:
                memory = self.encode_context(batch, prompts)
            return self.lm.decode(batch.input_ids, batch.pad_mask, memory, batch.source_pad_mask)
        return self.lm.decode(batch.input_ids, batch.pad_mask, slot_map=batch.slot_map,
                              prefixes=self.prefixes(batch), prompts=prompts)

    def loss(self, batch: EncodedBatch) -> torch.Tensor:
        return cross_entropy_masked(self(batch), batch.targets, batch.loss_mask)


def forward(model: ModICTModel, batch: EncodedBatch) -> torch.Tensor:
    return model(batch)
