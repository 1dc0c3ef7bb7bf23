"""In-context reference construction: template text, tokenization, visual
prefixes and batch encoding with target-only loss masks."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .tensor import DEFAULT_DTYPE, DimensionError

PAD, BOS, EOS, IMG, UNK = "<pad>", "<bos>", "<eos>", "<img>", "<unk>"
SPECIALS = (PAD, BOS, EOS, IMG, UNK)

CLAUSE_PREFIX = "Input Image: <img> and Marketing Keywords: "
CLAUSE_MIDDLE = ", output description is "
KEYWORD_SEPARATOR = ", "

_TOKEN_RE = re.compile(r"<pad>|<bos>|<eos>|<img>|<unk>|\w+|[^\w\s]")


# --------------------------------------------------------------------- types

@dataclass
class Reference:
    keywords: list[str]
    description: str
    image: np.ndarray  # frozen-encoder global vector
    sample_id: str = ""


@dataclass
class InContextInstance:
    references: list[Reference]
    query_keywords: list[str]
    query_image: np.ndarray
    target: Optional[str] = None
    query_id: str = ""

    @property
    def shots(self) -> int:
        return len(self.references)


@dataclass
class VisualSlotMap:
    """Where visual prefix vectors land.

    Parallel 1-D tensors, one entry per slot: the sequence (row) in the batch,
    the token position, the image occurrence (row of ``image_features``), and
    which of the L prefix vectors goes there.
    """

    row: torch.Tensor
    position: torch.Tensor
    image: torch.Tensor
    prefix_index: torch.Tensor

    @classmethod
    def empty(cls) -> "VisualSlotMap":
        z = torch.zeros(0, dtype=torch.long)
        return cls(z, z.clone(), z.clone(), z.clone())

    def __len__(self) -> int:
        return int(self.position.numel())

    @property
    def n_images(self) -> int:
        return int(self.image.max()) + 1 if len(self) else 0


@dataclass
class EncodedBatch:
    """Token ids and masks for one or more in-context instances.

    ``input_ids``/``targets``/``loss_mask`` are ``[B, T]`` and align one-for-one:
    the logit at ``input_ids[b, t]`` predicts ``targets[b, t]``. For the
    encoder-decoder layout ``source_ids`` carries the template and the slot map
    indexes it; for decoder-only the template lives in ``input_ids``.
    """

    arch: str
    input_ids: torch.Tensor
    targets: torch.Tensor
    loss_mask: torch.Tensor
    pad_mask: torch.Tensor  # True on real tokens of input_ids
    slot_map: VisualSlotMap
    image_features: torch.Tensor  # [n_images, d_v]
    source_ids: Optional[torch.Tensor] = None
    source_pad_mask: Optional[torch.Tensor] = None
    segments: list[dict[str, tuple[int, int]]] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def context_ids(self) -> torch.Tensor:
        """The sequence carrying the visual slots."""
        return self.source_ids if self.arch == "encoder-decoder" else self.input_ids


# ----------------------------------------------------------------- template

def assemble_template(instance: InContextInstance, separator: str = KEYWORD_SEPARATOR) -> str:
    parts = []
    for ref in instance.references:
        parts.append(f"{CLAUSE_PREFIX}{separator.join(ref.keywords)}{CLAUSE_MIDDLE}{ref.description}\n")
    parts.append(f"{CLAUSE_PREFIX}{separator.join(instance.query_keywords)}{CLAUSE_MIDDLE}")
    return "".join(parts)


def _template_words() -> list[str]:
    return split_words(CLAUSE_PREFIX + CLAUSE_MIDDLE + KEYWORD_SEPARATOR)


# ---------------------------------------------------------------- tokenizer

def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Tokenizer:
    """Word-level tokenizer: words and single punctuation marks are tokens."""

    def __init__(self, vocab: Sequence[str]):
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate tokens in vocabulary")
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self.pad_id, self.bos_id, self.eos_id, self.img_id, self.unk_id = range(len(SPECIALS))

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Tokenizer":
        counts: dict[str, int] = {}
        for t in _template_words():
            counts[t] = min_count
        for text in texts:
            for w in split_words(text):
                counts[w] = counts.get(w, 0) + 1
        words = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIALS)
        return cls(list(SPECIALS) + words)

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[int(i)] for i in ids)

    @staticmethod
    def normalize(text: str) -> str:
        return " ".join(split_words(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.vocab), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# -------------------------------------------------------- feature transform

class FeatureTransformer(nn.Module):
    """Maps a frozen image feature to L prefix vectors in the LM's embedding space."""

    def __init__(self, d_v: int, d_model: int, prefix_len: int, d_hidden: Optional[int] = None):
        super().__init__()
        d_hidden = d_hidden or d_model
        self.d_v, self.d_model, self.prefix_len = d_v, d_model, prefix_len
        self.fc1 = nn.Linear(d_v, d_hidden, dtype=DEFAULT_DTYPE)
        self.fc2 = nn.Linear(d_hidden, prefix_len * d_model, dtype=DEFAULT_DTYPE)

    def hidden(self, g: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc1(g))

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        if g.shape[-1] != self.d_v:
            raise DimensionError(f"image feature dim {g.shape[-1]} != transformer input dim {self.d_v}")
        out = self.fc2(self.hidden(g))
        return out.reshape(*g.shape[:-1], self.prefix_len, self.d_model)


def transform_feature(g, ft: FeatureTransformer) -> torch.Tensor:
    """One image's visual prefix, shape ``[L, d_model]``."""
    g = torch.as_tensor(g, dtype=DEFAULT_DTYPE)
    if g.dim() != 1:
        raise DimensionError(f"expected a single feature vector, got shape {tuple(g.shape)}")
    return ft(g)


# ----------------------------------------------------------------- encoding

def _expand(ids: list[int], img_id: int, prefix_len: int):
    out: list[int] = []
    slots: list[tuple[int, int, int]] = []  # position, occurrence, prefix index
    occ = 0
    for t in ids:
        if t == img_id:
            for j in range(prefix_len):
                slots.append((len(out), occ, j))
                out.append(img_id)
            occ += 1
        else:
            out.append(t)
    return out, slots


def encode_instance(
    instance: InContextInstance,
    tokenizer: Tokenizer,
    arch: str,
    prefix_len: int,
    max_seq_len: int,
    separator: str = KEYWORD_SEPARATOR,
) -> EncodedBatch:
    """Encode one instance as a batch of size 1.

    Each ``<img>`` marker becomes ``prefix_len`` consecutive slot tokens. Only
    the query's target description and its terminal ``<eos>`` are supervised.
    Without a target, the result is a generation context.
    """
    if arch not in ("encoder-decoder", "decoder-only"):
        raise ValueError(f"unknown arch {arch!r}")
    tk = tokenizer

    # token spans per clause, computed on the unexpanded template
    pieces: list[tuple[str, list[int]]] = []
    for i, ref in enumerate(instance.references):
        pieces.append((f"ref{i}.head", tk.tokenize(CLAUSE_PREFIX)))
        pieces.append((f"ref{i}.keywords", tk.tokenize(separator.join(ref.keywords))))
        pieces.append((f"ref{i}.middle", tk.tokenize(CLAUSE_MIDDLE)))
        pieces.append((f"ref{i}.description", tk.tokenize(ref.description)))
    pieces.append(("query.head", tk.tokenize(CLAUSE_PREFIX)))
    pieces.append(("query.keywords", tk.tokenize(separator.join(instance.query_keywords))))
    pieces.append(("query.middle", tk.tokenize(CLAUSE_MIDDLE)))

    context: list[int] = []
    segments: dict[str, tuple[int, int]] = {}
    offset = 1 if arch == "decoder-only" else 0  # leading <bos>
    for name, ids in pieces:
        expanded, _ = _expand(ids, tk.img_id, prefix_len)
        start = offset + len(context)
        context.extend(expanded)
        segments[name] = (start, start + len(expanded))
    _, slot_list = _expand(
        [t for _, ids in pieces for t in ids], tk.img_id, prefix_len
    )

    target_ids = tk.tokenize(instance.target) if instance.target is not None else None
    n_images = instance.shots + 1
    images = torch.as_tensor(
        np.stack([np.asarray(r.image, dtype=np.float64) for r in instance.references]
                 + [np.asarray(instance.query_image, dtype=np.float64)]),
        dtype=DEFAULT_DTYPE,
    )
    assert len(slot_list) == n_images * prefix_len

    if arch == "decoder-only":
        seq = [tk.bos_id] + context
        ctx_len = len(seq)
        if target_ids is not None:
            seq = seq + target_ids + [tk.eos_id]
            segments["target"] = (ctx_len, len(seq))
            inputs, targets = seq[:-1], seq[1:]
            mask = [j + 1 >= ctx_len for j in range(len(targets))]
        else:
            inputs, targets, mask = seq, [tk.pad_id] * len(seq), [False] * len(seq)
        if len(inputs) > max_seq_len:
            raise ValueError(f"sequence length {len(inputs)} exceeds max_seq_len {max_seq_len}")
        positions = [1 + p for p, _, _ in slot_list]
        source = None
    else:
        if len(context) > max_seq_len:
            raise ValueError(f"source length {len(context)} exceeds max_seq_len {max_seq_len}")
        source = torch.tensor([context], dtype=torch.long)
        if target_ids is not None:
            inputs = [tk.bos_id] + target_ids
            targets = target_ids + [tk.eos_id]
            mask = [True] * len(targets)
            segments["target"] = (0, len(targets))
        else:
            inputs, targets, mask = [tk.bos_id], [tk.pad_id], [False]
        if len(inputs) > max_seq_len:
            raise ValueError(f"target length {len(inputs)} exceeds max_seq_len {max_seq_len}")
        positions = [p for p, _, _ in slot_list]

    slot_map = VisualSlotMap(
        row=torch.zeros(len(slot_list), dtype=torch.long),
        position=torch.tensor(positions, dtype=torch.long),
        image=torch.tensor([o for _, o, _ in slot_list], dtype=torch.long),
        prefix_index=torch.tensor([j for _, _, j in slot_list], dtype=torch.long),
    )
    input_ids = torch.tensor([inputs], dtype=torch.long)
    return EncodedBatch(
        arch=arch,
        input_ids=input_ids,
        targets=torch.tensor([targets], dtype=torch.long),
        loss_mask=torch.tensor([mask], dtype=torch.bool),
        pad_mask=torch.ones_like(input_ids, dtype=torch.bool),
        slot_map=slot_map,
        image_features=images,
        source_ids=source,
        source_pad_mask=None if source is None else torch.ones_like(source, dtype=torch.bool),
        segments=[segments],
        ids=[instance.query_id],
    )


def _pad_stack(rows: list[torch.Tensor], value) -> torch.Tensor:
    width = max(r.shape[-1] for r in rows)
    out = torch.full((len(rows), width), value, dtype=rows[0].dtype)
    for i, r in enumerate(rows):
        out[i, : r.shape[-1]] = r
    return out


def collate(batches: Sequence[EncodedBatch], pad_id: int = 0) -> EncodedBatch:
    """Right-pad single-instance batches into one batch."""
    if not batches:
        raise ValueError("nothing to collate")
    arch = batches[0].arch
    if any(b.arch != arch for b in batches):
        raise ValueError("cannot mix architectures in one batch")
    flat = [(b, i) for b in batches for i in range(b.batch_size)]

    def rows(attr):
        return [getattr(b, attr)[i] for b, i in flat]

    rows_, pos, img, pre = [], [], [], []
    feats = []
    img_offset = 0
    for new_row, (b, i) in enumerate(flat):
        sel = b.slot_map.row == i
        used = b.slot_map.image[sel]
        uniq = torch.unique(used)
        remap = {int(u): img_offset + k for k, u in enumerate(uniq)}
        feats.append(b.image_features[uniq])
        rows_.append(torch.full((int(sel.sum()),), new_row, dtype=torch.long))
        pos.append(b.slot_map.position[sel])
        img.append(torch.tensor([remap[int(u)] for u in used], dtype=torch.long))
        pre.append(b.slot_map.prefix_index[sel])
        img_offset += len(uniq)

    def trim(seq_rows, mask_rows):
        return [r[: int(m.sum())] for r, m in zip(seq_rows, mask_rows)]

    pad_rows = rows("pad_mask")
    src = src_mask = None
    if arch == "encoder-decoder":
        src_mask_rows = rows("source_pad_mask")
        src = _pad_stack(trim(rows("source_ids"), src_mask_rows), pad_id)
        src_mask = _pad_stack(trim(src_mask_rows, src_mask_rows), False)
    return EncodedBatch(
        arch=arch,
        input_ids=_pad_stack(trim(rows("input_ids"), pad_rows), pad_id),
        targets=_pad_stack(trim(rows("targets"), pad_rows), pad_id),
        loss_mask=_pad_stack(trim(rows("loss_mask"), pad_rows), False),
        pad_mask=_pad_stack(trim(pad_rows, pad_rows), False),
        slot_map=VisualSlotMap(torch.cat(rows_), torch.cat(pos), torch.cat(img), torch.cat(pre)),
        image_features=torch.cat(feats),
        source_ids=src,
        source_pad_mask=src_mask,
        segments=[b.segments[i] for b, i in flat],
        ids=[b.ids[i] for b, i in flat],
    )
