"""Frozen image encoders and exhaustive cosine retrieval over a category pool.

Index file layout (little-endian)::

    magic      8 bytes  b"MDICTIDX"
    version    u32      1
    d_v        u32
    pool       u32
    cat_len    u32, then cat_len bytes of UTF-8 category
    pool x (id_len u32, id_len bytes UTF-8)
    pool x d_v float64 rows, row-major
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

MAGIC = b"MDICTIDX"
VERSION = 1


@dataclass
class ImageEncoding:
    global_: np.ndarray
    patches: Optional[np.ndarray] = None  # stored, never used for retrieval

    def __post_init__(self):
        n = float(np.linalg.norm(self.global_))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"global image vector must be unit norm, got {n}")


class FrozenEncoder(Protocol):
    dim: int

    def encode(self, sample) -> ImageEncoding: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


class SyntheticEncoder:
    """Seeded pseudo-random unit vector derived from the image reference bytes."""

    name = "synthetic"

    def __init__(self, dim: int = 32, seed: int = 0, n_patches: int = 0):
        self.dim, self.seed, self.n_patches = dim, seed, n_patches

    def encode_ref(self, image_ref: str) -> ImageEncoding:
        digest = hashlib.sha256(f"{self.seed}:{image_ref}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        g = _unit(rng.standard_normal(self.dim))
        patches = rng.standard_normal((self.n_patches, self.dim)) if self.n_patches else None
        return ImageEncoding(g, patches)

    def encode(self, sample) -> ImageEncoding:
        feat = getattr(sample, "image_feature", None)
        if feat is not None:
            return PrecomputedEncoder(self.dim).encode(sample)
        return self.encode_ref(sample.image_ref if hasattr(sample, "image_ref") else str(sample))


class PrecomputedEncoder:
    """Uses the feature vector stored on the sample, unit-normalized."""

    name = "precomputed"

    def __init__(self, dim: int):
        self.dim = dim

    def encode(self, sample) -> ImageEncoding:
        feat = getattr(sample, "image_feature", None)
        if feat is None:
            raise ValueError(f"sample {getattr(sample, 'id', '?')} has no precomputed image feature")
        feat = np.asarray(feat, dtype=np.float64)
        if feat.shape != (self.dim,):
            raise ValueError(f"image feature shape {feat.shape} != ({self.dim},)")
        return ImageEncoding(_unit(feat))


ENCODERS = {"synthetic": SyntheticEncoder, "precomputed": PrecomputedEncoder}


def make_encoder(name: str, dim: int, seed: int = 0) -> FrozenEncoder:
    if name == "synthetic":
        return SyntheticEncoder(dim, seed)
    if name == "precomputed":
        return PrecomputedEncoder(dim)
    raise ValueError(f"unknown encoder {name!r}")


def encode_image(image_ref, encoder) -> ImageEncoding:
    if encoder is None or not hasattr(encoder, "encode"):
        raise ValueError(f"unknown encoder {encoder!r}")
    if isinstance(image_ref, str) and hasattr(encoder, "encode_ref"):
        return encoder.encode_ref(image_ref)
    return encoder.encode(image_ref)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class RetrievalIndex:
    category: str
    ids: tuple[str, ...]
    globals_: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate sample ids in index")
        if self.globals_.shape[0] != len(self.ids):
            raise ValueError("row count does not match id count")
        rows = np.array(self.globals_, dtype=np.float64)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if rows.ndim != 2 or (norms == 0).any():
            raise ValueError("index rows must be non-zero vectors")
        # rescale only rows that are off unit norm, so save/load is bitwise stable
        off = np.abs(norms - 1.0) > 1e-12
        rows = np.where(off, rows / norms, rows)
        rows.setflags(write=False)
        object.__setattr__(self, "globals_", rows)
        object.__setattr__(self, "_order", np.argsort(np.array(self.ids, dtype=object), kind="stable"))
        object.__setattr__(self, "_position", {i: n for n, i in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return int(self.globals_.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str | Path) -> None:
        cat = self.category.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIII", VERSION, self.dim, len(self.ids), len(cat)))
            fh.write(cat)
            for i in self.ids:
                b = i.encode("utf-8")
                fh.write(struct.pack("<I", len(b)))
                fh.write(b)
            fh.write(np.ascontiguousarray(self.globals_, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise ValueError(f"{path}: not a retrieval index file")
        try:
            version, dim, pool, cat_len = struct.unpack_from("<IIII", buf, 8)
            if version != VERSION:
                raise ValueError(f"{path}: unsupported index version {version}")
            off = 24
            category = buf[off: off + cat_len].decode("utf-8")
            off += cat_len
            ids = []
            for _ in range(pool):
                (n,) = struct.unpack_from("<I", buf, off)
                off += 4
                ids.append(buf[off: off + n].decode("utf-8"))
                off += n
            need = pool * dim * 8
            if len(buf) - off != need:
                raise ValueError(f"{path}: expected {need} bytes of vectors, found {len(buf) - off}")
            rows = np.frombuffer(buf, dtype="<f8", count=pool * dim, offset=off).reshape(pool, dim).copy()
        except struct.error as exc:
            raise ValueError(f"{path}: truncated index file") from exc
        return cls(category, tuple(ids), rows)


def build_index(samples: Sequence, category: str, encoder) -> RetrievalIndex:
    if not samples:
        raise ValueError("cannot build an index from zero samples")
    bad = [s.id for s in samples if s.category != category]
    if bad:
        raise ValueError(f"samples outside category {category!r}: {bad[:5]}")
    rows = np.stack([encoder.encode(s).global_ for s in samples])
    return RetrievalIndex(category, tuple(s.id for s in samples), rows)


def retrieve_similar(index: RetrievalIndex, query, k: int, exclude_id: Optional[str] = None) -> list[str]:
    """Top-k ids by descending cosine similarity, ties broken by ascending id."""
    q = query.global_ if isinstance(query, ImageEncoding) else np.asarray(query, dtype=np.float64)
    q = _unit(q)
    if k < 1:
        raise ValueError("k must be positive")
    # row-wise reduction: identical rows get bitwise-identical scores, so exact ties stay ties
    scores = (index.globals_ * q).sum(axis=1)
    order = index._order  # ascending id
    keep = order
    if exclude_id is not None:
        pos = index._position.get(exclude_id)
        if pos is not None:
            keep = order[order != pos]
    if len(keep) == 0:
        raise ValueError("retrieval pool is empty after exclusion")
    if k > len(keep):
        raise ValueError(f"k={k} exceeds pool size {len(keep)}")
    # stable sort on -score over id-sorted candidates gives the tie-break
    ranked = keep[np.argsort(-scores[keep], kind="stable")]
    return [index.ids[i] for i in ranked[:k]]
