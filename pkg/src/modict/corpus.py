"""Product corpus construction: dictionary segmentation, marketing-keyword
selection, containment filtering, and a seeded synthetic catalog."""
from __future__ import annotations

import hashlib
import json
import math
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

DICT_NAMES = ("style", "brand", "material", "popular_element", "image_derivable")
MARKETING_DICTS = ("style", "popular_element", "brand", "material")


@dataclass
class Sample:
    id: str
    category: str
    image_ref: str = ""
    keywords: list[str] = field(default_factory=list)
    description: str = ""
    image_feature: Optional[np.ndarray] = None
    source_text: str = ""

    def to_record(self) -> dict:
        rec = {"id": self.id, "category": self.category, "image_ref": self.image_ref}
        if self.image_feature is not None:
            rec["image_feature"] = [float(x) for x in self.image_feature]
        rec["keywords"] = list(self.keywords)
        rec["description"] = self.description
        if self.source_text:
            rec["source_text"] = self.source_text
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        feat = rec.get("image_feature")
        return cls(
            id=str(rec["id"]),
            category=rec["category"],
            image_ref=rec.get("image_ref", ""),
            keywords=list(rec.get("keywords", [])),
            description=rec.get("description", ""),
            image_feature=None if feat is None else np.asarray(feat, dtype=np.float64),
            source_text=rec.get("source_text", ""),
        )


def write_corpus(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [Sample.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class AttributeDictionaries:
    style: frozenset[str]
    brand: frozenset[str]
    material: frozenset[str]
    popular_element: frozenset[str]
    image_derivable: frozenset[str]

    def __post_init__(self):
        marketing = self.style | self.brand | self.material | self.popular_element
        clash = sorted(marketing & self.image_derivable)
        if clash:
            raise ValueError(f"image-derivable entries overlap marketing dictionaries: {clash[:5]}")

    def marketing(self) -> frozenset[str]:
        return self.style | self.brand | self.material | self.popular_element

    def phrases(self) -> frozenset[str]:
        return self.marketing() | self.image_derivable

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in DICT_NAMES:
            entries = sorted(getattr(self, name))
            (d / f"{name}.txt").write_text("".join(e + "\n" for e in entries), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "AttributeDictionaries":
        d = Path(directory)
        if not d.is_dir():
            raise FileNotFoundError(f"dictionary directory not found: {d}")
        sets = {}
        for name in DICT_NAMES:
            path = d / f"{name}.txt"
            if not path.is_file():
                raise FileNotFoundError(f"missing dictionary file: {path}")
            sets[name] = frozenset(
                " ".join(line.split()) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()
            )
        return cls(**sets)


# ------------------------------------------------------------- segmentation

def segment_with_dictionaries(text: str, dicts: AttributeDictionaries) -> list[str]:
    """Whitespace split, then greedily merge the longest dictionary phrase at each position."""
    words = text.split()
    phrases = dicts.phrases()
    max_len = max((len(p.split()) for p in phrases), default=1)
    out: list[str] = []
    i = 0
    while i < len(words):
        for n in range(min(max_len, len(words) - i), 0, -1):
            cand = " ".join(words[i: i + n])
            if n == 1 or cand in phrases:
                out.append(cand)
                i += n
                break
    return out


def _is_punct(token: str) -> bool:
    return all(ch in string.punctuation for ch in token)


def extra_keyword_count(remaining: int) -> int:
    return math.floor(0.2 * remaining)


def keyword_candidates(tokens: Sequence[str], dicts: AttributeDictionaries) -> tuple[list[str], list[str]]:
    """Split the deduplicated word set into (marketing hits, other remaining words)."""
    seen: set[str] = set()
    hits, rest = [], []
    marketing = dicts.marketing()
    for t in tokens:
        if t in seen or _is_punct(t):
            continue
        seen.add(t)
        if t in dicts.image_derivable:
            continue
        (hits if t in marketing else rest).append(t)
    return hits, rest


def select_keywords(tokens: Sequence[str], dicts: AttributeDictionaries, rng: np.random.Generator) -> list[str]:
    """Marketing-dictionary hits plus floor(0.2 r) random picks from the r other words."""
    hits, rest = keyword_candidates(tokens, dicts)
    n_extra = extra_keyword_count(len(rest))
    picked = set(rng.choice(len(rest), size=n_extra, replace=False).tolist()) if n_extra else set()
    extras = [w for i, w in enumerate(rest) if i in picked]
    return hits + extras


def contains_phrase(description: str, keyword: str) -> bool:
    words = description.split()
    kw = keyword.split()
    n = len(kw)
    if n == 0:
        return False
    return any(words[i: i + n] == kw for i in range(len(words) - n + 1))


def filter_samples(samples: Iterable[Sample]) -> list[Sample]:
    """Keep samples whose description contains at least one keyword verbatim."""
    return [s for s in samples if any(contains_phrase(s.description, k) for k in s.keywords)]


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}/{sample_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def run_pipeline(samples: Sequence[Sample], dicts: AttributeDictionaries, seed: int) -> list[Sample]:
    """Segment each sample's source text, choose keywords, drop non-matching samples."""
    out = []
    for s in samples:
        tokens = segment_with_dictionaries(s.source_text, dicts)
        kws = select_keywords(tokens, dicts, sample_rng(seed, s.id))
        out.append(replace(s, keywords=kws))
    return filter_samples(out)


# -------------------------------------------------------- synthetic catalog

@dataclass(frozen=True)
class VocabSpec:
    noun: str
    style: tuple[str, ...]
    brand: tuple[str, ...]
    material: tuple[str, ...]
    popular_element: tuple[str, ...]
    color: tuple[str, ...]
    size: tuple[str, ...]
    shape: tuple[str, ...]
    filler: tuple[str, ...]
    scenes: tuple[str, ...]

    def validate(self) -> None:
        for name in ("style", "brand", "material", "color", "size", "shape", "scenes"):
            if not getattr(self, name):
                raise ValueError(f"vocab spec has an empty {name} list")
        if len(self.style) < 2 or len(self.popular_element) < 2:
            raise ValueError("vocab spec needs at least two styles and two popular elements")
        if len(self.filler) < 16:
            raise ValueError(f"vocab spec needs at least 16 filler words, got {len(self.filler)}")


CASES_BAGS = VocabSpec(
    noun="bag",
    style=("casual", "vintage", "minimalist", "business", "sporty", "elegant", "retro", "street style",
           "preppy", "bohemian", "classic", "urban"),
    brand=("aurelia", "novaline", "kestrel", "marlowe", "solenne", "vantor", "ellery", "quillon",
           "brisa", "tamsin"),
    material=("cow leather", "canvas", "nylon", "pu leather", "suede", "oxford cloth", "denim", "straw"),
    popular_element=("chain strap", "tassel", "rivet", "embroidery", "letter print", "metal buckle",
                     "quilted pattern", "bow", "patchwork", "contrast stitching"),
    color=("black", "white", "red", "navy blue", "khaki", "pink", "green", "brown", "grey", "beige"),
    size=("large", "small", "mini", "medium"),
    shape=("square", "round", "bucket", "saddle", "tote", "envelope"),
    filler=("zipper", "pocket", "shoulder", "crossbody", "daily", "commute", "capacity", "lining",
            "compartment", "handle", "lightweight", "durable", "spacious", "portable", "adjustable",
            "detachable", "magnetic", "clasp", "interior", "exterior", "travel", "weekend", "office",
            "campus", "dating", "shopping", "phone", "wallet", "keys", "cosmetics", "umbrella", "tablet"),
    scenes=("commuting to work", "weekend shopping", "a campus day", "a short trip", "an evening date",
            "a business meeting", "a city walk", "a family outing"),
)

CLOTHING = replace(
    CASES_BAGS,
    noun="dress",
    material=("cotton", "linen", "silk", "chiffon", "wool blend", "polyester", "knit", "lace fabric"),
    popular_element=("ruffle", "pleat", "floral print", "puff sleeve", "waist tie", "button placket",
                     "lace trim", "slit hem", "square neckline", "belted waist"),
    shape=("a line", "straight", "fitted", "loose", "wrap", "bodycon"),
    filler=("sleeve", "collar", "hem", "waist", "breathable", "soft", "comfortable", "slimming",
            "flowing", "stretchy", "skin friendly", "drape", "silhouette", "layering", "summer", "spring",
            "autumn", "office", "party", "vacation", "beach", "cardigan", "sneakers", "heels", "jacket",
            "belt", "pocket", "lining", "zipper", "tailoring", "stitching", "neckline"),
)

HOME_APPLIANCES = replace(
    CASES_BAGS,
    noun="kettle",
    style=("modern", "nordic", "retro", "minimalist", "industrial", "compact", "smart", "classic",
           "japanese style", "family style", "luxury", "practical"),
    material=("stainless steel", "glass", "ceramic", "food grade plastic", "aluminum", "borosilicate glass",
              "bamboo", "tempered glass"),
    popular_element=("touch panel", "led display", "auto shutoff", "keep warm", "timer", "one touch",
                     "child lock", "quiet mode", "rapid boil", "dual wall"),
    shape=("square", "round", "slim", "tall", "cylindrical", "curved"),
    filler=("capacity", "power", "heating", "kitchen", "energy", "saving", "safety", "cleaning", "handle",
            "lid", "base", "cord", "filter", "water", "tea", "coffee", "morning", "family", "dormitory",
            "office", "gift", "durable", "efficient", "quick", "insulated", "anti scald", "leak proof",
            "easy", "pour", "spout", "indicator", "warranty"),
)

CATEGORY_SPECS = {"cases_bags": CASES_BAGS, "clothing": CLOTHING, "home_appliances": HOME_APPLIANCES}

_SENTENCES = (
    "this {style} {noun} from {brand} is made of {material} , giving it a refined look and a {adj} touch .",
    "the {element} detail adds a playful accent and makes the whole {noun} stand out in any crowd .",
    "in a {color} tone , it pairs easily with your daily outfits and suits {scene} .",
    "the {shape} silhouette keeps things tidy while the {size} body offers {f1} and {f2} at once .",
    "thoughtful {f3} design keeps your {f4} in order , so you can grab what you need in seconds .",
    "{brand} pays close attention to every seam , so the {material} surface stays {adj} after long use .",
    "whether for {scene} or {scene2} , this {noun} brings a {style} mood to your look .",
    "the {f1} and {f5} are carefully finished , showing quality you can feel every day .",
    "a touch of {element} echoes current trends without losing its {style} character .",
    "it is a gift that is easy to love , practical , {adj} , and full of small surprises .",
)
_ADJ = ("soft", "smooth", "sturdy", "delicate", "comfortable", "textured", "premium", "gentle")


def _category_vectors(spec: VocabSpec, dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 7919])
    names = spec.color + spec.size + spec.shape + spec.style + spec.material
    return {n: rng.standard_normal(dim) for n in names}


def generate_synthetic_catalog(
    n_samples: int,
    category: str = "cases_bags",
    seed: int = 0,
    spec: Optional[VocabSpec] = None,
    image_dim: int = 32,
    n_sentences: tuple[int, int] = (4, 5),
) -> tuple[list[Sample], AttributeDictionaries]:
    """Raw samples (source text, description, inline image feature) plus dictionaries.

    Keywords are left empty; :func:`run_pipeline` fills them.
    """
    spec = spec or CATEGORY_SPECS.get(category)
    if spec is None:
        raise ValueError(f"no vocab spec for category {category!r}")
    spec.validate()
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    lo, hi = n_sentences
    if not 1 <= lo <= hi <= len(_SENTENCES):
        raise ValueError(f"n_sentences range must lie within [1, {len(_SENTENCES)}]")
    dicts = AttributeDictionaries(
        style=frozenset(spec.style),
        brand=frozenset(spec.brand),
        material=frozenset(spec.material),
        popular_element=frozenset(spec.popular_element),
        image_derivable=frozenset(spec.color + spec.size + spec.shape),
    )
    vectors = _category_vectors(spec, image_dim, seed)
    rng = np.random.default_rng([seed, 1])
    width = len(str(n_samples - 1))
    samples = []
    for i in range(n_samples):
        pick = lambda seq: seq[int(rng.integers(len(seq)))]
        styles = list(rng.choice(spec.style, size=int(rng.integers(1, 3)), replace=False))
        elements = list(rng.choice(spec.popular_element, size=int(rng.integers(0, 2)), replace=False))
        brand, material = pick(spec.brand), pick(spec.material)
        color, size, shape = pick(spec.color), pick(spec.size), pick(spec.shape)
        fill = list(rng.choice(spec.filler, size=int(rng.integers(6, 11)), replace=False))
        scenes = list(rng.choice(spec.scenes, size=2, replace=False))

        title = [brand, *styles, material, *elements, color, size, shape, spec.noun, *fill]
        source_text = " ".join(title)

        slots = {
            "style": styles[0], "noun": spec.noun, "brand": brand, "material": material,
            "element": elements[0] if elements else styles[-1], "color": color, "shape": shape,
            "size": size, "scene": scenes[0], "scene2": scenes[1], "adj": pick(_ADJ),
            "f1": fill[0], "f2": fill[1], "f3": fill[2], "f4": fill[3], "f5": fill[4],
        }
        n_sent = int(rng.integers(lo, hi + 1))
        order = [0] + sorted(rng.choice(np.arange(1, len(_SENTENCES)), size=n_sent - 1, replace=False).tolist())
        description = " ".join(_SENTENCES[j].format(**slots) for j in order)

        feature = sum(vectors[a] for a in (color, size, shape, styles[0], material))
        feature = feature + 0.5 * rng.standard_normal(image_dim)
        sid = f"{category}-{i:0{width}d}"
        samples.append(Sample(
            id=sid, category=category, image_ref=f"img/{category}/{sid}.jpg",
            description=description, image_feature=feature, source_text=source_text,
        ))
    return samples, dicts


def corpus_statistics(samples: Sequence[Sample]) -> dict[str, float]:
    if not samples:
        return {"count": 0, "mean_keywords": 0.0, "mean_keyword_tokens": 0.0, "mean_description_tokens": 0.0}
    return {
        "count": len(samples),
        "mean_keywords": float(np.mean([len(s.keywords) for s in samples])),
        "mean_keyword_tokens": float(np.mean([sum(len(k.split()) for k in s.keywords) for s in samples])),
        "mean_description_tokens": float(np.mean([len(s.description.split()) for s in samples])),
    }


def split_corpus(samples: Sequence[Sample], dev_frac: float = 0.05, test_frac: float = 0.05,
                 seed: int = 0) -> dict[str, list[Sample]]:
    rng = np.random.default_rng([seed, 2])
    perm = rng.permutation(len(samples))
    n_test = max(1, int(round(test_frac * len(samples))))
    n_dev = max(1, int(round(dev_frac * len(samples))))
    test = sorted(perm[:n_test].tolist())
    dev = sorted(perm[n_test: n_test + n_dev].tolist())
    train = sorted(perm[n_test + n_dev:].tolist())
    return {"train": [samples[i] for i in train], "dev": [samples[i] for i in dev],
            "test": [samples[i] for i in test]}
