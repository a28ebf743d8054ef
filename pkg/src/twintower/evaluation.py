"""Temporal splitting, Top-K ranking, the four offline metrics, cold-start
item-set construction, the random baseline, and percentage lifts.

Windows follow the X / Y / X' / Y' layout: train on X to predict Y, score
on X' to predict Y', with Y' disjoint from X and Y.  Precision/recall are
averaged only over users with at least one label-window watch in the
category; coverage counts recommendations to every scored user.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import DAY, InteractionLog

METRIC_NAMES = ("precision", "recall", "coverage", "converted_coverage")


@dataclass(frozen=True)
class SplitConfig:
    """Half-open timestamp windows [start, end) in seconds."""

    x: tuple[int, int] = (0, 300 * DAY)
    y: tuple[int, int] = (300 * DAY, 314 * DAY)
    x_score: tuple[int, int] = (14 * DAY, 314 * DAY)
    y_score: tuple[int, int] = (314 * DAY, 321 * DAY)

    def __post_init__(self):
        for name in ("x", "y", "x_score", "y_score"):
            lo, hi = getattr(self, name)
            if lo >= hi:
                raise ValueError(f"SplitConfig: empty window {name}")
        if self.y[0] != self.x[1]:
            raise ValueError("SplitConfig: Y must immediately follow X")
        if self.y_score[0] != self.x_score[1]:
            raise ValueError("SplitConfig: Y' must immediately follow X'")
        if self.y_score[0] < self.y[1] or self.y_score[0] < self.x[1]:
            raise ValueError("SplitConfig: Y' overlaps X or Y")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class EvalConfig:
    k: int = 6
    categories: tuple[str, ...] = ("movie", "series")

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("EvalConfig: K must be >= 1")


@dataclass
class SplitResult:
    train_input: InteractionLog
    train_label: InteractionLog
    score_input: InteractionLog
    score_label: InteractionLog


def temporal_split(log: InteractionLog, split: SplitConfig) -> SplitResult:
    """Partition interactions into the four windows by timestamp."""
    ts = log.timestamps

    def window(lo: int, hi: int) -> InteractionLog:
        return log.subset((ts >= lo) & (ts < hi))

    return SplitResult(
        train_input=window(*split.x),
        train_label=window(*split.y),
        score_input=window(*split.x_score),
        score_label=window(*split.y_score),
    )


def cold_start_items(log: InteractionLog, split: SplitConfig) -> set[str]:
    """Items with no watch in X, Y or X' and at least one watch in Y'."""
    ts = log.timestamps
    in_train_or_input = np.zeros(len(log), dtype=bool)
    for lo, hi in (split.x, split.y, split.x_score):
        in_train_or_input |= (ts >= lo) & (ts < hi)
    seen_before = {log.item_ids[i] for i in np.flatnonzero(in_train_or_input)}
    yp = (ts >= split.y_score[0]) & (ts < split.y_score[1])
    seen_label = {log.item_ids[i] for i in np.flatnonzero(yp)}
    return seen_label - seen_before


def recommend_topk(scores: dict[str, float], k: int) -> list[str]:
    """K highest-scoring items, ties broken by ascending item id."""
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [item for item, _ in ranked[:k]]


@dataclass
class CategoryMetrics:
    precision: float = 0.0
    recall: float = 0.0
    coverage: int = 0
    converted_coverage: int = 0
    n_users_scored: int = 0
    n_users_averaged: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(
    recommendations: dict[str, list[str]],
    watched: dict[str, set[str]],
    k: int,
) -> CategoryMetrics:
    """The four Top-K metrics for one category.

    `recommendations` maps every scored user to a list of <= K items;
    `watched` holds each user's label-window watch set in this category.
    Users with an empty watch set are excluded from the precision/recall
    averages but still contribute to coverage.
    """
    precisions, recalls = [], []
    all_recs: set[str] = set()
    converted: set[str] = set()
    for user, recs in recommendations.items():
        if len(recs) > k:
            raise ValueError(f"user {user}: {len(recs)} recommendations for K={k}")
        all_recs.update(recs)
        hits = set(recs) & watched.get(user, set())
        converted.update(hits)
        if watched.get(user):
            precisions.append(len(hits) / k)
            recalls.append(len(hits) / len(watched[user]))
    return CategoryMetrics(
        precision=float(np.mean(precisions)) if precisions else 0.0,
        recall=float(np.mean(recalls)) if recalls else 0.0,
        coverage=len(all_recs),
        converted_coverage=len(converted),
        n_users_scored=len(recommendations),
        n_users_averaged=len(precisions),
    )


@dataclass
class EvalReport:
    per_category: dict[str, CategoryMetrics]
    k: int
    density: float = 0.0
    mode: str = "warm"
    lifts: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mode": self.mode,
            "density": self.density,
            "per_category": {c: m.as_dict() for c, m in self.per_category.items()},
            "lifts": self.lifts,
            "meta": self.meta,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cats = {
            c: CategoryMetrics(**m) for c, m in d["per_category"].items()
        }
        return cls(
            per_category=cats,
            k=d["k"],
            density=d.get("density", 0.0),
            mode=d.get("mode", "warm"),
            lifts=d.get("lifts"),
            meta=d.get("meta", {}),
        )

    def to_text_table(self) -> str:
        header = f"{'category':<10}" + "".join(f"{m:>20}" for m in METRIC_NAMES)
        lines = [f"K={self.k} mode={self.mode} density={self.density:.6g}", header]
        for cat, m in sorted(self.per_category.items()):
            lines.append(
                f"{cat:<10}{m.precision:>20.6f}{m.recall:>20.6f}"
                f"{m.coverage:>20d}{m.converted_coverage:>20d}"
            )
        return "\n".join(lines)


def random_baseline(
    user_ids: list[str],
    candidates: list[str],
    k: int,
    rng: np.random.Generator,
) -> dict[str, list[str]]:
    """Uniform K-subset of the candidates for every user, seeded."""
    if not candidates:
        raise ValueError("random_baseline: no candidates")
    pool = sorted(candidates)
    out = {}
    for user in user_ids:
        if len(pool) <= k:
            out[user] = list(pool)
        else:
            picks = rng.choice(len(pool), size=k, replace=False)
            out[user] = [pool[i] for i in picks]
    return out


def lift(report: EvalReport, baseline: EvalReport) -> dict:
    """Percentage lifts per metric per category; None where baseline is 0."""
    if report.k != baseline.k:
        raise ValueError("lift: reports use different K")
    out: dict[str, dict[str, float | None]] = {}
    for cat, m in report.per_category.items():
        if cat not in baseline.per_category:
            raise ValueError(f"lift: category {cat!r} missing from baseline")
        b = baseline.per_category[cat]
        cells = {}
        for name in METRIC_NAMES:
            val, base = getattr(m, name), getattr(b, name)
            cells[name] = None if base == 0 else 100.0 * (val - base) / base
        out[cat] = cells
    return out
