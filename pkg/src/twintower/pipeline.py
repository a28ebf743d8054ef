"""End-to-end glue: turn a raw dataset into training data, score users
against candidate sets, and produce evaluation reports, ablation grids
and attention-weight distributions.

Scoring runs tape-free against immutable parameters and is parallelized
across user chunks; the TWINTOWER_THREADS environment variable caps the
worker count.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .evaluation import (
    CategoryMetrics,
    EvalConfig,
    EvalReport,
    SplitConfig,
    cold_start_items,
    compute_metrics,
    lift,
    random_baseline,
    recommend_topk,
    temporal_split,
)
from .features import build_schema, encode_item
from .item_tower import (
    ATTENTION,
    CONCATENATION,
    FusionMode,
    ItemBatch,
    attention_weights,
    channel_embed,
)
from .training import TrainConfig, TrainingData, TwoTowerModel, train
from .user_tower import UserBatch, UserRecord

ABLATION_ROWS: dict[str, FusionMode] = {
    "synopsis": FusionMode(CONCATENATION, ("synopsis",)),
    "coverart": FusionMode(CONCATENATION, ("coverart",)),
    "categorical": FusionMode(CONCATENATION, ("categorical",)),
    "id": FusionMode(CONCATENATION, ("id",)),
    "con_no_id": FusionMode(CONCATENATION, ("categorical", "synopsis", "coverart")),
    "att_no_id": FusionMode(ATTENTION, ("categorical", "synopsis", "coverart")),
    "con_id": FusionMode(CONCATENATION, ("id", "categorical", "synopsis", "coverart")),
    "att_id": FusionMode(ATTENTION, ("id", "categorical", "synopsis", "coverart")),
}


def scoring_threads() -> int:
    raw = os.environ.get("TWINTOWER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_training_data(
    dataset: Dataset, split_cfg: SplitConfig, config: TrainConfig
) -> TrainingData:
    """Encode the warm catalog and assemble histories, positives and
    watched sets from the temporal split."""
    split = temporal_split(dataset.interactions, split_cfg)
    warm_ids = sorted(
        set(split.train_input.item_ids) | set(split.train_label.item_ids)
    )
    if not warm_ids:
        raise ValueError("build_training_data: no items in the training windows")
    item_index = {iid: row for row, iid in enumerate(warm_ids)}

    schema = build_schema(dataset.items)
    warm_synopses = [
        rec.synopsis for rec in dataset.items if rec.item_id in item_index
    ]
    dataset.word_table.fit_document_frequencies(warm_synopses)

    by_id = dataset.item_by_id
    feats = [
        encode_item(by_id[iid], schema, dataset.word_table, dataset.coverart,
                    id_index=row)
        for iid, row in item_index.items()
    ]
    item_batch = ItemBatch.from_features(feats)
    item_category = [by_id[iid].category for iid in warm_ids]

    user_index = {u.user_id: row for row, u in enumerate(dataset.users)}
    histories: dict[int, list[tuple[int, int]]] = {u: [] for u in range(len(dataset.users))}
    for u, i, ts in split.train_input.rows():
        urow = user_index.get(u)
        irow = item_index.get(i)
        if urow is not None and irow is not None:
            histories[urow].append((int(ts), irow))
    users = []
    for row, info in enumerate(dataset.users):
        ordered = [irow for _, irow in sorted(histories[row], key=lambda p: p[0])]
        users.append(
            UserRecord(
                user_id=info.user_id,
                history=ordered,
                features={"country": info.country},
            )
        )

    positives: dict[int, np.ndarray] = {}
    watched: dict[int, set[int]] = {}
    for u, i, _ in split.train_input.rows():
        urow, irow = user_index.get(u), item_index.get(i)
        if urow is not None and irow is not None:
            watched.setdefault(urow, set()).add(irow)
    pos_sets: dict[int, set[int]] = {}
    for u, i, _ in split.train_label.rows():
        urow, irow = user_index.get(u), item_index.get(i)
        if urow is not None and irow is not None:
            pos_sets.setdefault(urow, set()).add(irow)
            watched.setdefault(urow, set()).add(irow)
    for urow, rows in pos_sets.items():
        positives[urow] = np.array(sorted(rows), dtype=np.intp)

    raw_dims = {
        "categorical": schema.total_dim,
        "synopsis": dataset.word_table.dim,
        "coverart": dataset.coverart.dim,
        "country": schema.config.country_slots,
    }
    schema_hash = hashlib.sha256(
        (schema.digest() + f"|syn={raw_dims['synopsis']}|cov={raw_dims['coverart']}")
        .encode()
    ).hexdigest()

    return TrainingData(
        schema=schema,
        item_index=item_index,
        item_batch=item_batch,
        item_category=item_category,
        users=users,
        user_index=user_index,
        positives=positives,
        watched={u: np.array(sorted(s), dtype=np.intp) for u, s in watched.items()},
        schema_hash=schema_hash,
        raw_dims=raw_dims,
    )


def train_model(
    dataset: Dataset,
    split_cfg: SplitConfig,
    config: TrainConfig,
    mode: FusionMode,
) -> tuple[TwoTowerModel, list[float], TrainingData]:
    data = build_training_data(dataset, split_cfg, config)
    model, losses = train(data, config, mode)
    return model, losses, data


# --------------------------------------------------------------------------
# Scoring


def scoring_user_records(
    dataset: Dataset, split_cfg: SplitConfig, data: TrainingData
) -> list[UserRecord]:
    """User records with histories drawn from the scoring-input window."""
    split = temporal_split(dataset.interactions, split_cfg)
    histories: dict[int, list[tuple[int, int]]] = {
        u: [] for u in range(len(dataset.users))
    }
    for u, i, ts in split.score_input.rows():
        urow = data.user_index.get(u)
        irow = data.item_index.get(i)  # items unseen in training carry no row
        if urow is not None and irow is not None:
            histories[urow].append((int(ts), irow))
    out = []
    for row, info in enumerate(dataset.users):
        ordered = [irow for _, irow in sorted(histories[row], key=lambda p: p[0])]
        out.append(
            UserRecord(
                user_id=info.user_id,
                history=ordered,
                features={"country": info.country},
            )
        )
    return out


def compute_user_embeddings(
    model: TwoTowerModel,
    records: list[UserRecord],
    data: TrainingData,
    chunk: int = 128,
) -> np.ndarray:
    """Embed users in chunks; deterministic regardless of thread count."""
    encoder = data.country_encoder()
    L = model.config.history_len
    chunks = [records[i:i + chunk] for i in range(0, len(records), chunk)]

    def embed(recs: list[UserRecord]) -> np.ndarray:
        batch = UserBatch.build(recs, L, encoder)
        return model.user_matrix(batch).data

    threads = scoring_threads()
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(embed, chunks))
    else:
        parts = [embed(c) for c in chunks]
    return np.concatenate(parts) if parts else np.empty((0, model.config.embedding_dim))


@dataclass
class ScoringContext:
    """Everything needed to rank candidates for every user."""

    user_records: list[UserRecord]
    user_embeddings: np.ndarray  # (n_users, d)
    candidates: dict[str, list[str]]  # category -> candidate item ids
    candidate_embeddings: dict[str, np.ndarray]  # category -> (n_cand, d)
    labels: dict[str, dict[str, set[str]]]  # category -> user -> watched set
    density: float = 0.0
    meta: dict = field(default_factory=dict)


def build_scoring_context(
    model: TwoTowerModel,
    dataset: Dataset,
    split_cfg: SplitConfig,
    eval_cfg: EvalConfig,
    data: TrainingData,
    mode: str = "warm",
) -> ScoringContext:
    """Assemble candidates, their embeddings, and label sets per category.

    Warm mode ranks the training-watched items of each category; cold
    mode restricts candidates to the cold-start set (scored from metadata
    alone, ID embedding zero).
    """
    if mode not in ("warm", "cold"):
        raise ValueError(f"bad scoring mode {mode!r}")
    split = temporal_split(dataset.interactions, split_cfg)
    by_id = dataset.item_by_id

    candidates: dict[str, list[str]] = {c: [] for c in eval_cfg.categories}
    cand_emb: dict[str, np.ndarray] = {}
    if mode == "warm":
        item_matrix = model.item_matrix(data.item_batch).data
        for iid, row in data.item_index.items():
            cat = data.item_category[row]
            if cat in candidates:
                candidates[cat].append(iid)
        for cat in eval_cfg.categories:
            rows = [data.item_index[iid] for iid in candidates[cat]]
            cand_emb[cat] = item_matrix[rows] if rows else np.empty(
                (0, model.config.embedding_dim)
            )
    else:
        cold = sorted(cold_start_items(dataset.interactions, split_cfg))
        feats = [
            encode_item(by_id[iid], data.schema, dataset.word_table,
                        dataset.coverart, id_index=None)
            for iid in cold
            if iid in by_id
        ]
        for cat in eval_cfg.categories:
            cat_feats = [f for f in feats if f.category == cat]
            candidates[cat] = [f.item_id for f in cat_feats]
            if cat_feats:
                cand_emb[cat] = model.item_matrix(
                    ItemBatch.from_features(cat_feats)
                ).data
            else:
                cand_emb[cat] = np.empty((0, model.config.embedding_dim))

    labels: dict[str, dict[str, set[str]]] = {c: {} for c in eval_cfg.categories}
    cand_sets = {c: set(candidates[c]) for c in eval_cfg.categories}
    for u, i, _ in split.score_label.rows():
        rec = by_id.get(i)
        if rec is None or rec.category not in labels:
            continue
        if i in cand_sets[rec.category]:
            labels[rec.category].setdefault(u, set()).add(i)

    records = scoring_user_records(dataset, split_cfg, data)
    embeddings = compute_user_embeddings(model, records, data)
    return ScoringContext(
        user_records=records,
        user_embeddings=embeddings,
        candidates=candidates,
        candidate_embeddings=cand_emb,
        labels=labels,
        density=dataset.interactions.density(),
        meta={"mode": mode},
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def rank_all_users(ctx: ScoringContext, k: int) -> dict[str, dict[str, list[str]]]:
    """Top-K per user per category from the dot-product scores."""
    out: dict[str, dict[str, list[str]]] = {}
    for cat, cand_ids in ctx.candidates.items():
        per_user: dict[str, list[str]] = {}
        if cand_ids:
            scores = _sigmoid(ctx.user_embeddings @ ctx.candidate_embeddings[cat].T)
            for row, rec in enumerate(ctx.user_records):
                per_user[rec.user_id] = recommend_topk(
                    dict(zip(cand_ids, scores[row])), k
                )
        else:
            per_user = {rec.user_id: [] for rec in ctx.user_records}
        out[cat] = per_user
    return out


def evaluate_model(
    model: TwoTowerModel,
    dataset: Dataset,
    split_cfg: SplitConfig,
    eval_cfg: EvalConfig,
    data: TrainingData,
    mode: str = "warm",
    baseline_seed: int | None = None,
) -> tuple[EvalReport, EvalReport | None]:
    """Full offline evaluation; optionally also a seeded random baseline
    report plus lifts attached to the main report."""
    ctx = build_scoring_context(model, dataset, split_cfg, eval_cfg, data, mode)
    recs = rank_all_users(ctx, eval_cfg.k)
    per_category = {
        cat: compute_metrics(recs[cat], ctx.labels[cat], eval_cfg.k)
        for cat in eval_cfg.categories
    }
    report = EvalReport(
        per_category=per_category, k=eval_cfg.k, density=ctx.density, mode=mode
    )

    baseline_report = None
    if baseline_seed is not None:
        rng = np.random.default_rng(baseline_seed)
        base_cats: dict[str, CategoryMetrics] = {}
        user_ids = [r.user_id for r in ctx.user_records]
        for cat in eval_cfg.categories:
            if ctx.candidates[cat]:
                base_recs = random_baseline(
                    user_ids, ctx.candidates[cat], eval_cfg.k, rng
                )
            else:
                base_recs = {u: [] for u in user_ids}
            base_cats[cat] = compute_metrics(base_recs, ctx.labels[cat], eval_cfg.k)
        baseline_report = EvalReport(
            per_category=base_cats, k=eval_cfg.k, density=ctx.density,
            mode=f"{mode}-random-baseline",
        )
        report.lifts = lift(report, baseline_report)
    return report, baseline_report


# --------------------------------------------------------------------------
# Attention-weight export


def attention_histograms(
    model: TwoTowerModel,
    dataset: Dataset,
    data: TrainingData,
    bins: int = 20,
) -> dict:
    """Per-category, per-channel histogram of attention weights over the
    warm catalog: 20 uniform bins on [0, 1] plus mean and median."""
    if model.mode.fusion != ATTENTION:
        raise ValueError("attention export requires an attention-mode checkpoint")
    chans = channel_embed(data.item_batch, model.params, model.mode)
    alphas = attention_weights(chans, model.params, model.mode).data  # (T, M)
    edges = np.linspace(0.0, 1.0, bins + 1)
    out: dict = {"bins": bins, "bin_edges": edges.tolist(), "categories": {}}
    cats = sorted(set(data.item_category))
    for cat in cats:
        rows = np.array(
            [r for r, c in enumerate(data.item_category) if c == cat], dtype=np.intp
        )
        per_channel = {}
        for j, ch in enumerate(model.mode.channels):
            vals = alphas[rows, j]
            counts, _ = np.histogram(vals, bins=edges)
            per_channel[ch] = {
                "counts": counts.tolist(),
                "mean": float(np.mean(vals)) if vals.size else 0.0,
                "median": float(np.median(vals)) if vals.size else 0.0,
            }
        out["categories"][cat] = {
            "n_items": int(rows.size),
            "channels": per_channel,
        }
    return out


# --------------------------------------------------------------------------
# Ablation grid


def run_ablation(
    dataset: Dataset,
    split_cfg: SplitConfig,
    eval_cfg: EvalConfig,
    config: TrainConfig,
    rows: list[str] | None = None,
    baseline_row: str = "synopsis",
    mode: str = "warm",
) -> dict:
    """Train and evaluate each fusion-mode row with a shared seed; emit
    absolute metrics per row plus lifts against the designated baseline."""
    rows = rows or list(ABLATION_ROWS)
    for name in rows + [baseline_row]:
        if name not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {name!r}")
    reports: dict[str, EvalReport] = {}
    for name in rows:
        model, _, data = train_model(dataset, split_cfg, config, ABLATION_ROWS[name])
        report, _ = evaluate_model(model, dataset, split_cfg, eval_cfg, data, mode)
        reports[name] = report
    grid: dict = {
        "baseline_row": baseline_row,
        "mode": mode,
        "k": eval_cfg.k,
        "rows": {name: reports[name].to_dict() for name in rows},
    }
    if baseline_row in reports:
        grid["lifts"] = {
            name: lift(reports[name], reports[baseline_row])
            for name in rows
            if name != baseline_row
        }
    return grid
