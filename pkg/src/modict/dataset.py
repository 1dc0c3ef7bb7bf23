"""Turn corpus samples into encoded in-context instances via retrieval."""
from __future__ import annotations

from typing import Mapping, Sequence

from .corpus import Sample
from .incontext import EncodedBatch, InContextInstance, Reference, Tokenizer, encode_instance
from .model import ModelConfig
from .retrieval import RetrievalIndex, retrieve_similar


def build_instances(
    queries: Sequence[Sample],
    pool: Mapping[str, Sample],
    index: RetrievalIndex,
    encoder,
    shots: int,
    exclude_self: bool = True,
    with_target: bool = True,
) -> list[InContextInstance]:
    """One instance per query with ``shots`` retrieved references, nearest last."""
    if shots < 0:
        raise ValueError("shots must be >= 0")
    out = []
    for q in queries:
        enc = encoder.encode(q)
        refs: list[Reference] = []
        if shots:
            ids = retrieve_similar(index, enc, shots, exclude_id=q.id if exclude_self else None)
            for rid in reversed(ids):
                r = pool[rid]
                if r.category != q.category:
                    raise ValueError(f"reference {rid} is not in query category {q.category}")
                refs.append(Reference(list(r.keywords), r.description, encoder.encode(r).global_, rid))
        out.append(InContextInstance(
            references=refs,
            query_keywords=list(q.keywords),
            query_image=enc.global_,
            target=q.description if with_target else None,
            query_id=q.id,
        ))
    return out


def encode_all(instances: Sequence[InContextInstance], tokenizer: Tokenizer, cfg: ModelConfig) -> list[EncodedBatch]:
    return [encode_instance(i, tokenizer, cfg.arch, cfg.visual_prefix_len, cfg.max_seq_len) for i in instances]


def corpus_tokenizer(samples: Sequence[Sample]) -> Tokenizer:
    texts = []
    for s in samples:
        texts.append(s.description)
        texts.extend(s.keywords)
    return Tokenizer.build(texts)
