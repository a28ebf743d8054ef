"""Item metadata encoding: categorical multi-hot blocks, TF-IDF weighted
synopsis vectors, and precomputed cover-art embeddings.

The categorical layout is fixed once the schema is built: genre (254
slots), cast (top 2000 by frequency), maturity (17), country (159),
release year and acquisition month (range-bounded, one out-of-range slot
each) and two discretized popularity channels.  Unknown values map to an
all-zero sub-vector, never to a wrong slot.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class EmptyCorpusError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass
class SchemaConfig:
    genre_slots: int = 254  # 227 subgenre + 27 genre
    cast_slots: int = 2000
    maturity_slots: int = 17
    country_slots: int = 159
    popularity_buckets: int = 10


@dataclass
class ItemMetadataRecord:
    item_id: str
    category: str  # "movie" | "series"
    genres: list[str] = field(default_factory=list)
    cast: list[str] = field(default_factory=list)
    maturity: str = ""
    country: str = ""
    release_year: int = 0
    acquisition_month: str = ""  # "YYYY-MM"
    view_count_long: int = 0
    view_count_recent: int = 0
    synopsis: str = ""
    coverart_vector: list[float] | None = None

    def __post_init__(self):
        if self.category not in ("movie", "series"):
            raise ValueError(f"item {self.item_id}: bad category {self.category!r}")
        if self.view_count_long < 0 or self.view_count_recent < 0:
            raise ValueError(f"item {self.item_id}: negative view count")


def _month_ordinal(ym: str) -> int | None:
    """'YYYY-MM' -> months since year 0, or None if unparsable."""
    m = re.fullmatch(r"(\d{4})-(\d{2})", ym or "")
    if not m:
        return None
    year, month = int(m.group(1)), int(m.group(2))
    if not 1 <= month <= 12:
        return None
    return year * 12 + (month - 1)


@dataclass
class CategoricalSchema:
    """Vocabulary-to-slot maps plus the fixed block layout."""

    config: SchemaConfig
    genre_index: dict[str, int]
    cast_index: dict[str, int]
    maturity_index: dict[str, int]
    country_index: dict[str, int]
    year_min: int
    year_max: int
    month_min: int
    month_max: int
    total_long_views: int
    total_recent_views: int

    @property
    def year_dim(self) -> int:
        return (self.year_max - self.year_min + 1) + 1  # +1 out-of-range slot

    @property
    def month_dim(self) -> int:
        return (self.month_max - self.month_min + 1) + 1

    def block_dims(self) -> list[tuple[str, int]]:
        c = self.config
        return [
            ("genre", c.genre_slots),
            ("cast", c.cast_slots),
            ("maturity", c.maturity_slots),
            ("country", c.country_slots),
            ("release_year", self.year_dim),
            ("acquisition_month", self.month_dim),
            ("popularity_long", c.popularity_buckets),
            ("popularity_recent", c.popularity_buckets),
        ]

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.block_dims())

    def block_range(self, name: str) -> tuple[int, int]:
        offset = 0
        for block, dim in self.block_dims():
            if block == name:
                return offset, offset + dim
            offset += dim
        raise KeyError(name)

    def digest(self) -> str:
        payload = {
            "genre": sorted(self.genre_index.items()),
            "cast": sorted(self.cast_index.items()),
            "maturity": sorted(self.maturity_index.items()),
            "country": sorted(self.country_index.items()),
            "years": [self.year_min, self.year_max],
            "months": [self.month_min, self.month_max],
            "totals": [self.total_long_views, self.total_recent_views],
            "buckets": self.config.popularity_buckets,
            "slots": [
                self.config.genre_slots,
                self.config.cast_slots,
                self.config.maturity_slots,
                self.config.country_slots,
            ],
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _top_vocab(counter: Counter, limit: int) -> dict[str, int]:
    """Most frequent values first, ties broken lexicographically."""
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]
    return {name: slot for slot, (name, _) in enumerate(ranked)}


def build_schema(
    corpus: list[ItemMetadataRecord], config: SchemaConfig | None = None
) -> CategoricalSchema:
    if not corpus:
        raise EmptyCorpusError("build_schema: empty corpus")
    config = config or SchemaConfig()

    genres, cast, maturity, country = Counter(), Counter(), Counter(), Counter()
    years, months = [], []
    total_long = total_recent = 0
    for rec in corpus:
        genres.update(rec.genres)
        cast.update(rec.cast)
        if rec.maturity:
            maturity[rec.maturity] += 1
        if rec.country:
            country[rec.country] += 1
        if rec.release_year:
            years.append(rec.release_year)
        mo = _month_ordinal(rec.acquisition_month)
        if mo is not None:
            months.append(mo)
        total_long += rec.view_count_long
        total_recent += rec.view_count_recent

    return CategoricalSchema(
        config=config,
        genre_index=_top_vocab(genres, config.genre_slots),
        cast_index=_top_vocab(cast, config.cast_slots),
        maturity_index=_top_vocab(maturity, config.maturity_slots),
        country_index=_top_vocab(country, config.country_slots),
        year_min=min(years) if years else 0,
        year_max=max(years) if years else 0,
        month_min=min(months) if months else 0,
        month_max=max(months) if months else 0,
        total_long_views=total_long,
        total_recent_views=total_recent,
    )


def discretize_popularity(views: int, total_views: int, buckets: int) -> int:
    """log-smoothed share of total views, uniformly bucketed."""
    if total_views <= 0:
        raise ValueError("discretize_popularity: total_views must be positive")
    if views < 0 or views > total_views:
        raise ValueError("discretize_popularity: need 0 <= views <= total_views")
    s = math.log1p(views) / math.log1p(total_views)
    return min(int(s * buckets), buckets - 1)


def encode_categorical(
    record: ItemMetadataRecord, schema: CategoricalSchema
) -> np.ndarray:
    """Multi-hot concatenation in fixed block order; unknowns stay zero."""
    vec = np.zeros(schema.total_dim, dtype=np.float64)

    lo, _ = schema.block_range("genre")
    for g in record.genres:
        slot = schema.genre_index.get(g)
        if slot is not None:
            vec[lo + slot] = 1.0

    lo, _ = schema.block_range("cast")
    for name in record.cast:
        slot = schema.cast_index.get(name)
        if slot is not None:
            vec[lo + slot] = 1.0

    lo, _ = schema.block_range("maturity")
    slot = schema.maturity_index.get(record.maturity)
    if slot is not None:
        vec[lo + slot] = 1.0

    lo, _ = schema.block_range("country")
    slot = schema.country_index.get(record.country)
    if slot is not None:
        vec[lo + slot] = 1.0

    lo, hi = schema.block_range("release_year")
    if schema.year_min <= record.release_year <= schema.year_max:
        vec[lo + (record.release_year - schema.year_min)] = 1.0
    else:
        vec[hi - 1] = 1.0  # out-of-range slot

    lo, hi = schema.block_range("acquisition_month")
    mo = _month_ordinal(record.acquisition_month)
    if mo is not None and schema.month_min <= mo <= schema.month_max:
        vec[lo + (mo - schema.month_min)] = 1.0
    else:
        vec[hi - 1] = 1.0

    buckets = schema.config.popularity_buckets
    lo, _ = schema.block_range("popularity_long")
    if schema.total_long_views > 0:
        b = discretize_popularity(
            min(record.view_count_long, schema.total_long_views),
            schema.total_long_views,
            buckets,
        )
    else:
        b = 0
    vec[lo + b] = 1.0

    lo, _ = schema.block_range("popularity_recent")
    if schema.total_recent_views > 0:
        b = discretize_popularity(
            min(record.view_count_recent, schema.total_recent_views),
            schema.total_recent_views,
            buckets,
        )
    else:
        b = 0
    vec[lo + b] = 1.0

    return vec


# --------------------------------------------------------------------------
# Synopsis text


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass
class WordVectorTable:
    """Pretrained word vectors plus corpus document frequencies for TF-IDF."""

    vectors: dict[str, np.ndarray]
    dim: int
    doc_freq: dict[str, int] = field(default_factory=dict)
    n_docs: int = 0

    @classmethod
    def load(cls, path) -> "WordVectorTable":
        vectors: dict[str, np.ndarray] = {}
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValueError(f"{path}: bad word-vector header")
            vocab_size, dim = int(header[0]), int(header[1])
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}: bad vector line for {parts[0]!r}")
                vectors[parts[0]] = np.array(parts[1:], dtype=np.float64)
        if len(vectors) != vocab_size:
            raise ValueError(
                f"{path}: header says {vocab_size} vectors, found {len(vectors)}"
            )
        return cls(vectors=vectors, dim=dim)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.vectors)} {self.dim}\n")
            for token, vec in self.vectors.items():
                vals = " ".join(repr(float(v)) for v in vec)
                fh.write(f"{token} {vals}\n")

    def fit_document_frequencies(self, documents: list[str]) -> None:
        df: Counter = Counter()
        for doc in documents:
            df.update(set(tokenize(doc)))
        self.doc_freq = dict(df)
        self.n_docs = len(documents)

    def tfidf(self, token: str, term_freq: int) -> float:
        df = self.doc_freq.get(token, 0)
        return term_freq * math.log(self.n_docs / (1 + df))


def encode_synopsis(text: str, table: WordVectorTable) -> np.ndarray:
    """TF-IDF weighted sum of word vectors over in-vocabulary tokens."""
    out = np.zeros(table.dim, dtype=np.float64)
    if table.n_docs == 0:
        return out
    counts = Counter(tokenize(text))
    for token, tf in counts.items():
        vec = table.vectors.get(token)
        if vec is None:
            continue
        out += table.tfidf(token, tf) * vec
    return out


# --------------------------------------------------------------------------
# Cover art


class CoverArtStore:
    """Precomputed cover-art vectors; missing items get the zero vector."""

    def __init__(self, dim: int = 512):
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}

    def ingest(self, item_id: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatchError(
                f"cover art for {item_id}: got {vec.shape[0] if vec.ndim == 1 else vec.shape} "
                f"values, expected {self.dim}"
            )
        self._vectors[item_id] = vec

    def get(self, item_id: str) -> tuple[np.ndarray, bool]:
        """Returns (vector, missing_flag)."""
        vec = self._vectors.get(item_id)
        if vec is None:
            return np.zeros(self.dim, dtype=np.float64), True
        return vec, False

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._vectors


def pseudo_coverart(item_id: str, dim: int) -> np.ndarray:
    """Deterministic stand-in embedding: seeded hash of the id -> unit vector."""
    seed = int.from_bytes(hashlib.sha256(item_id.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


# --------------------------------------------------------------------------
# Assembled per-item channels


@dataclass
class EncodedItemFeatures:
    """Per-channel dense encodings for one title."""

    item_id: str
    category: str
    h_categorical: np.ndarray
    h_synopsis: np.ndarray
    h_coverart: np.ndarray
    coverart_missing: bool
    id_index: int | None = None  # row in the ID embedding table; None = cold start


def encode_item(
    record: ItemMetadataRecord,
    schema: CategoricalSchema,
    word_table: WordVectorTable,
    coverart: CoverArtStore,
    id_index: int | None = None,
) -> EncodedItemFeatures:
    cov, missing = coverart.get(record.item_id)
    return EncodedItemFeatures(
        item_id=record.item_id,
        category=record.category,
        h_categorical=encode_categorical(record, schema),
        h_synopsis=encode_synopsis(record.synopsis, word_table),
        h_coverart=cov,
        coverart_missing=missing,
        id_index=id_index,
    )


def encode_user_country(country: str, schema: CategoricalSchema) -> np.ndarray:
    """One-hot over the catalog country vocabulary; unknown -> zeros."""
    vec = np.zeros(schema.config.country_slots, dtype=np.float64)
    slot = schema.country_index.get(country)
    if slot is not None:
        vec[slot] = 1.0
    return vec
