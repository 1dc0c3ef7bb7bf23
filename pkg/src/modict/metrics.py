"""BLEU@n, ROUGE-1/L and corpus-level distinct-n (D-n), all on a 0-100 scale."""
from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

PUNCTUATION = frozenset(string.punctuation)


def tokens_of(text: str, mode: str = "word") -> list[str]:
    if mode == "word":
        return text.split()
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenization mode {mode!r}")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _check_pairs(candidates: Sequence[str], references: Sequence[str]) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty prediction set")


def bleu_n(candidates: Sequence[str], references: Sequence[str], n: int, mode: str = "word") -> float:
    """Corpus BLEU with orders 1..n uniformly weighted and a brevity penalty.

    Orders above 1 with zero matches use add-one smoothing.
    """
    _check_pairs(candidates, references)
    if n < 1:
        raise ValueError("n must be >= 1")
    matches = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = tokens_of(cand, mode), tokens_of(ref, mode)
        c_len += len(ct)
        r_len += len(rt)
        for k in range(1, n + 1):
            cg, rg = _ngrams(ct, k), _ngrams(rt, k)
            matches[k - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            totals[k - 1] += max(len(ct) - k + 1, 0)
    if c_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for k in range(n):
        m, t = matches[k], totals[k]
        if k > 0 and m == 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t) / n
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f1(overlap: float, c_len: int, r_len: int) -> float:
    if overlap == 0 or c_len == 0 or r_len == 0:
        return 0.0
    p, r = overlap / c_len, overlap / r_len
    return 2 * p * r / (p + r)


def rouge(candidates: Sequence[str], references: Sequence[str], variant: str | int = "L", mode: str = "word") -> float:
    """Pair-averaged ROUGE-1 (unigram overlap) or ROUGE-L (LCS) F1."""
    _check_pairs(candidates, references)
    variant = str(variant).upper()
    if variant not in ("1", "L"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    total = 0.0
    for cand, ref in zip(candidates, references):
        ct, rt = tokens_of(cand, mode), tokens_of(ref, mode)
        if variant == "1":
            cc, rc = Counter(ct), Counter(rt)
            overlap = sum(min(c, rc[w]) for w, c in cc.items())
        else:
            overlap = _lcs(ct, rt)
        total += _f1(overlap, len(ct), len(rt))
    return 100.0 * total / len(candidates)


def strip_punctuation(text: str, extra: Iterable[str] = ()) -> str:
    drop = PUNCTUATION | frozenset(extra)
    return "".join(ch for ch in text if ch not in drop)


def distinct_n_corpus(descriptions: Sequence[str], n: int, mode: str = "word",
                      extra_punctuation: Iterable[str] = ()) -> float:
    """Distinct n-grams of the whole concatenated corpus over its token count, x100.

    n-grams that straddle two descriptions count, since the corpus is one list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    joined = strip_punctuation(" ".join(descriptions), extra_punctuation)
    toks = tokens_of(joined, mode)
    if not toks:
        raise ValueError("no tokens left after removing punctuation")
    distinct = {tuple(toks[i: i + n]) for i in range(len(toks) - n + 1)}
    return 100.0 * len(distinct) / len(toks)


@dataclass
class MetricsReport:
    bleu1: float
    bleu2: float
    rouge1_f: float
    rougeL_f: float
    d2: float
    d3: float
    d4: float
    d5: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def table(self) -> str:
        names = ["B@1", "B@2", "R@1", "R@L", "D-2", "D-3", "D-4", "D-5"]
        vals = [f"{v:.2f}" for v in asdict(self).values()]
        widths = [max(len(a), len(b)) for a, b in zip(names, vals)]
        head = " | ".join(a.rjust(w) for a, w in zip(names, widths))
        row = " | ".join(b.rjust(w) for b, w in zip(vals, widths))
        return f"{head}\n{row}\n"


def _distinct_or_zero(texts: Sequence[str], n: int, mode: str) -> float:
    try:
        return distinct_n_corpus(texts, n, mode)
    except ValueError:
        return 0.0


def compute_report(candidates: Sequence[str], references: Sequence[str], mode: str = "word") -> MetricsReport:
    """All metrics for one prediction set; D-n is reported as 0 when every prediction is empty."""
    return MetricsReport(
        bleu1=bleu_n(candidates, references, 1, mode),
        bleu2=bleu_n(candidates, references, 2, mode),
        rouge1_f=rouge(candidates, references, "1", mode),
        rougeL_f=rouge(candidates, references, "L", mode),
        d2=_distinct_or_zero(candidates, 2, mode),
        d3=_distinct_or_zero(candidates, 3, mode),
        d4=_distinct_or_zero(candidates, 4, mode),
        d5=_distinct_or_zero(candidates, 5, mode),
    )


def read_records(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            key = str(rec["id"])
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {key!r}")
            out[key] = rec.get("text", rec.get("description", ""))
    return out


def evaluate_run(predictions: str | Path, references: str | Path, mode: str = "word") -> MetricsReport:
    preds, refs = read_records(predictions), read_records(references)
    missing = sorted(set(refs) - set(preds))
    extra = sorted(set(preds) - set(refs))
    if missing or extra:
        raise ValueError(f"id mismatch: missing predictions {missing[:10]}, unknown ids {extra[:10]}")
    ids = sorted(refs)
    return compute_report([preds[i] for i in ids], [refs[i] for i in ids], mode)
