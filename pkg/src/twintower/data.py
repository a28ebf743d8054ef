"""Dataset ingestion and seeded synthetic corpus generation.

All files are UTF-8 JSON-lines except the word-vector table, which uses
the plain text word2vec format ("<vocab> <dim>" header, then one token
and its floats per line).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .features import (
    CoverArtStore,
    ItemMetadataRecord,
    WordVectorTable,
    pseudo_coverart,
)

log = logging.getLogger(__name__)

DAY = 86400

INTERACTIONS_FILE = "interactions.jsonl"
METADATA_FILE = "metadata.jsonl"
USERS_FILE = "users.jsonl"
WORDVEC_FILE = "wordvecs.txt"
COVERART_FILE = "coverart.jsonl"
MANIFEST_FILE = "manifest.json"


class IngestError(ValueError):
    """Malformed input file; message carries file and line number."""


@dataclass
class InteractionLog:
    """Timestamped (user, item) watch events."""

    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    timestamps: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if len(self.user_ids) != len(self.item_ids) or len(self.user_ids) != len(
            self.timestamps
        ):
            raise ValueError("InteractionLog: column lengths differ")
        if self.timestamps.size and self.timestamps.min() < 0:
            raise ValueError("InteractionLog: negative timestamp")

    def __len__(self) -> int:
        return len(self.user_ids)

    def subset(self, keep: np.ndarray) -> "InteractionLog":
        rows = np.flatnonzero(keep)
        return InteractionLog(
            user_ids=[self.user_ids[i] for i in rows],
            item_ids=[self.item_ids[i] for i in rows],
            timestamps=self.timestamps[rows],
        )

    def rows(self):
        return zip(self.user_ids, self.item_ids, self.timestamps)

    def density(self, n_users: int | None = None, n_items: int | None = None) -> float:
        """#watches / (#users * #items).

        Universe sizes default to the distinct ids present in the log but
        can be overridden with the catalog sizes.
        """
        if not self.user_ids:
            return 0.0
        nu = n_users if n_users is not None else len(set(self.user_ids))
        ni = n_items if n_items is not None else len(set(self.item_ids))
        return len(self.user_ids) / (nu * ni)


@dataclass
class UserInfo:
    user_id: str
    country: str = ""


@dataclass
class IngestReport:
    dropped_interactions_unknown_item: int = 0
    dropped_interactions_unknown_user: int = 0
    dropped_coverart_unknown_item: int = 0


@dataclass
class Dataset:
    interactions: InteractionLog
    users: list[UserInfo]
    items: list[ItemMetadataRecord]
    word_table: WordVectorTable
    coverart: CoverArtStore

    @property
    def item_by_id(self) -> dict[str, ItemMetadataRecord]:
        return {r.item_id: r for r in self.items}


def _read_jsonl(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def ingest(data_dir, coverart_dim: int | None = None) -> tuple[Dataset, IngestReport]:
    """Load and referentially join a dataset directory.

    Interactions referencing unknown users or items are dropped and
    counted in the returned report.
    """
    data_dir = Path(data_dir)
    report = IngestReport()

    items: list[ItemMetadataRecord] = []
    for lineno, obj in _read_jsonl(data_dir / METADATA_FILE):
        try:
            items.append(ItemMetadataRecord(**obj))
        except (TypeError, ValueError) as exc:
            raise IngestError(f"{data_dir / METADATA_FILE}:{lineno}: {exc}") from None
    item_ids = {r.item_id for r in items}

    users: list[UserInfo] = []
    for lineno, obj in _read_jsonl(data_dir / USERS_FILE):
        try:
            users.append(UserInfo(**obj))
        except TypeError as exc:
            raise IngestError(f"{data_dir / USERS_FILE}:{lineno}: {exc}") from None
    user_ids = {u.user_id for u in users}

    uu, ii, tt = [], [], []
    for lineno, obj in _read_jsonl(data_dir / INTERACTIONS_FILE):
        try:
            u, i, ts = obj["user_id"], obj["item_id"], int(obj["ts"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(
                f"{data_dir / INTERACTIONS_FILE}:{lineno}: {exc}"
            ) from None
        if i not in item_ids:
            report.dropped_interactions_unknown_item += 1
            continue
        if u not in user_ids:
            report.dropped_interactions_unknown_user += 1
            continue
        uu.append(u)
        ii.append(i)
        tt.append(ts)
    interactions = InteractionLog(uu, ii, np.array(tt, dtype=np.int64))

    word_table = WordVectorTable.load(data_dir / WORDVEC_FILE)
    word_table.fit_document_frequencies([r.synopsis for r in items])

    first_dim = coverart_dim
    coverart = None
    for lineno, obj in _read_jsonl(data_dir / COVERART_FILE):
        try:
            iid, vec = obj["item_id"], obj["vector"]
        except (KeyError, TypeError) as exc:
            raise IngestError(f"{data_dir / COVERART_FILE}:{lineno}: {exc}") from None
        if coverart is None:
            coverart = CoverArtStore(dim=first_dim if first_dim else len(vec))
        if iid not in item_ids:
            report.dropped_coverart_unknown_item += 1
            continue
        coverart.ingest(iid, vec)
    if coverart is None:
        coverart = CoverArtStore(dim=first_dim if first_dim else 512)

    if report.dropped_interactions_unknown_item or report.dropped_interactions_unknown_user:
        log.info("ingest: dropped %d/%d interactions with unresolved references",
                 report.dropped_interactions_unknown_item
                 + report.dropped_interactions_unknown_user,
                 len(uu)
                 + report.dropped_interactions_unknown_item
                 + report.dropped_interactions_unknown_user)

    return Dataset(interactions, users, items, word_table, coverart), report


def write_dataset(dataset: Dataset, out_dir) -> None:
    """Write a dataset back to disk in the standard file layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / METADATA_FILE, "w", encoding="utf-8") as fh:
        for rec in dataset.items:
            fh.write(json.dumps(asdict(rec)) + "\n")
    with open(out_dir / USERS_FILE, "w", encoding="utf-8") as fh:
        for u in dataset.users:
            fh.write(json.dumps(asdict(u)) + "\n")
    with open(out_dir / INTERACTIONS_FILE, "w", encoding="utf-8") as fh:
        for u, i, ts in dataset.interactions.rows():
            fh.write(json.dumps({"user_id": u, "item_id": i, "ts": int(ts)}) + "\n")
    dataset.word_table.save(out_dir / WORDVEC_FILE)
    with open(out_dir / COVERART_FILE, "w", encoding="utf-8") as fh:
        for rec in dataset.items:
            vec, missing = dataset.coverart.get(rec.item_id)
            if not missing:
                fh.write(
                    json.dumps({"item_id": rec.item_id, "vector": vec.tolist()}) + "\n"
                )


# --------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class SyntheticSpec:
    """Seeded generator settings for a desk-scale corpus with planted
    genre preferences.

    `noise_channel` destroys the planted signal in one metadata channel
    ("synopsis" scrambles synopsis words; "categorical" scrambles genres
    and cast).  Cover art is hash noise by construction.
    """

    n_users: int = 500
    n_items: int = 300
    n_genres: int = 6
    cold_fraction: float = 0.1
    movie_fraction: float = 0.7
    affinity: float = 0.8  # probability mass on the user's primary genre
    watches_train: int = 40  # per user inside X
    watches_label: int = 6  # per user inside Y
    watches_score_label: int = 6  # per user inside Y' (warm + cold mix)
    cold_watches_score_label: int = 3  # of which on cold items
    word_dim: int = 50
    coverart_dim: int = 32
    seed: int = 0
    noise_channel: str | None = None
    # window lengths in days; layout is X | Y | Y', with X' covering the
    # trailing 300 days before Y'
    x_days: int = 300
    y_days: int = 14
    xp_days: int = 300
    yp_days: int = 7


def _genre_of(spec: SyntheticSpec, item_row: int) -> int:
    return int(item_row % spec.n_genres)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write a deterministic synthetic dataset; returns a summary manifest.

    Each item carries one primary genre; users watch items in proportion
    to their genre affinity, so metadata-only models can recover the
    planted signal.  Cold items receive watches only inside Y'.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    genres = [f"genre{g:02d}" for g in range(spec.n_genres)]
    subgenres = {g: [f"{g}_sub{j}" for j in range(3)] for g in genres}
    cast_pool = {g: [f"{g}_actor{j}" for j in range(15)] for g in genres}
    genre_words = {g: [f"{g}w{j}" for j in range(25)] for g in genres}
    common_words = [f"common{j}" for j in range(60)]
    noise_words = [f"noise{j}" for j in range(120)]
    maturity_levels = [f"rating{j}" for j in range(6)]
    countries = [f"C{j}" for j in range(10)]

    n_cold = int(round(spec.n_items * spec.cold_fraction))
    cold_rows = set(range(spec.n_items - n_cold, spec.n_items))

    x_end = spec.x_days * DAY
    y_end = (spec.x_days + spec.y_days) * DAY
    yp_end = (spec.x_days + spec.y_days + spec.yp_days) * DAY

    scramble_syn = spec.noise_channel == "synopsis"
    scramble_cat = spec.noise_channel == "categorical"
    scramble_cov = spec.noise_channel == "coverart"

    items = []
    item_genre = np.empty(spec.n_items, dtype=np.intp)
    for row in range(spec.n_items):
        g = _genre_of(spec, row)
        item_genre[row] = g
        gname = genres[g]
        category = "movie" if rng.random() < spec.movie_fraction else "series"
        if scramble_cat:
            item_genres = list(rng.choice(genres, size=1))
            item_cast = list(rng.choice(noise_words, size=3, replace=False))
        else:
            item_genres = [gname, str(rng.choice(subgenres[gname]))]
            item_cast = list(rng.choice(cast_pool[gname], size=3, replace=False))
        if scramble_syn:
            # noise synopses repeat a few words to varying lengths so their
            # vector magnitude is heterogeneous across items, like real
            # boilerplate-vs-essay text
            pool = rng.choice(noise_words, size=3, replace=False)
            words = rng.choice(pool, size=int(rng.integers(2, 41)))
        else:
            n_sig = int(rng.binomial(10, 0.7))
            words = np.concatenate(
                [
                    rng.choice(genre_words[gname], size=n_sig),
                    rng.choice(common_words, size=10 - n_sig),
                ]
            )
            rng.shuffle(words)
        items.append(
            ItemMetadataRecord(
                item_id=f"item{row:05d}",
                category=category,
                genres=item_genres,
                cast=item_cast,
                maturity=str(rng.choice(maturity_levels)),
                country=str(rng.choice(countries)),
                release_year=int(rng.integers(1990, 2024)),
                acquisition_month=f"{int(rng.integers(2022, 2026)):04d}-"
                f"{int(rng.integers(1, 13)):02d}",
                synopsis=" ".join(words),
            )
        )

    users = [
        UserInfo(user_id=f"user{u:05d}", country=str(rng.choice(countries)))
        for u in range(spec.n_users)
    ]
    user_genre = rng.integers(0, spec.n_genres, size=spec.n_users)

    warm_rows = np.array([r for r in range(spec.n_items) if r not in cold_rows])
    cold_rows_arr = np.array(sorted(cold_rows), dtype=np.intp)

    def pick(rows: np.ndarray, primary: int, size: int) -> np.ndarray:
        """Sample item rows with probability tilted toward the primary genre."""
        weights = np.where(
            item_genre[rows] == primary,
            spec.affinity,
            (1.0 - spec.affinity) / max(spec.n_genres - 1, 1),
        )
        weights = weights / weights.sum()
        return rng.choice(rows, size=size, p=weights)

    uu, ii, tt = [], [], []

    def emit(user_row: int, rows: np.ndarray, lo: int, hi: int) -> None:
        for r in rows:
            uu.append(users[user_row].user_id)
            ii.append(items[r].item_id)
            tt.append(int(rng.integers(lo, hi)))

    for u in range(spec.n_users):
        g = int(user_genre[u])
        emit(u, pick(warm_rows, g, spec.watches_train), 0, x_end)
        emit(u, pick(warm_rows, g, spec.watches_label), x_end, y_end)
        n_cold_w = min(spec.cold_watches_score_label, len(cold_rows_arr))
        n_warm_w = spec.watches_score_label - n_cold_w
        if n_warm_w > 0:
            emit(u, pick(warm_rows, g, n_warm_w), y_end, yp_end)
        if n_cold_w > 0:
            emit(u, pick(cold_rows_arr, g, n_cold_w), y_end, yp_end)

    interactions = InteractionLog(uu, ii, np.array(tt, dtype=np.int64))

    # popularity counts derived from the generated training-window watches
    long_counts, recent_counts = {}, {}
    recent_lo = y_end - 60 * DAY
    for u, i, ts in interactions.rows():
        if ts < y_end:
            long_counts[i] = long_counts.get(i, 0) + 1
            if ts >= recent_lo:
                recent_counts[i] = recent_counts.get(i, 0) + 1
    for rec in items:
        rec.view_count_long = long_counts.get(rec.item_id, 0)
        rec.view_count_recent = recent_counts.get(rec.item_id, 0)

    vocab = sorted(
        set(common_words)
        | set(noise_words)
        | {w for ws in genre_words.values() for w in ws}
    )
    word_rng = np.random.default_rng(spec.seed + 1)
    table = WordVectorTable(
        vectors={w: word_rng.standard_normal(spec.word_dim) for w in vocab},
        dim=spec.word_dim,
    )

    coverart = CoverArtStore(dim=spec.coverart_dim)
    cov_rng = np.random.default_rng(spec.seed + 2)
    for row, rec in enumerate(items):
        if scramble_cov:
            vec = pseudo_coverart(rec.item_id, spec.coverart_dim)
        else:
            # unit vector tilted toward a per-genre anchor direction
            anchor = np.random.default_rng(1000 + int(item_genre[row])).standard_normal(
                spec.coverart_dim
            )
            vec = anchor + 1.5 * cov_rng.standard_normal(spec.coverart_dim)
            vec = vec / np.linalg.norm(vec)
        coverart.ingest(rec.item_id, vec)

    dataset = Dataset(interactions, users, items, table, coverart)
    write_dataset(dataset, out_dir)

    manifest = {
        "spec": asdict(spec),
        "n_interactions": len(interactions),
        "density": interactions.density(),
        "n_cold_items": n_cold,
        "windows_days": {
            "x": [0, spec.x_days],
            "y": [spec.x_days, spec.x_days + spec.y_days],
            "x_score": [
                spec.x_days + spec.y_days - spec.xp_days,
                spec.x_days + spec.y_days,
            ],
            "y_score": [
                spec.x_days + spec.y_days,
                spec.x_days + spec.y_days + spec.yp_days,
            ],
        },
    }
    with open(out_dir / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
