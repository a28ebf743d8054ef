"""User tower: position-aware attention pooling over the watch history,
a user-feature perceptron, and three residual blocks.

History items are embedded from the (optionally shared) item ID table,
summed with positional embeddings, pooled with a single learned query,
and concatenated with the embedded user features.  Padding positions are
masked out of the softmax; an empty history pools to the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

N_RESIDUAL_BLOCKS = 3


@dataclass
class UserRecord:
    """Watch history (training-item indices, most recent last) plus features."""

    user_id: str
    history: list[int] = field(default_factory=list)
    features: dict[str, str] = field(default_factory=dict)


@dataclass
class UserBatch:
    """Padded history matrix plus one-hot user features for a user batch."""

    user_ids: list[str]
    hist_idx: np.ndarray  # (B, L) intp, 0 where padded
    hist_mask: np.ndarray  # (B, L) float64, 1 real / 0 pad
    country: np.ndarray  # (B, C) one-hot

    @classmethod
    def build(
        cls,
        records: list[UserRecord],
        history_len: int,
        country_encoder,
    ) -> "UserBatch":
        B, L = len(records), history_len
        idx = np.zeros((B, L), dtype=np.intp)
        mask = np.zeros((B, L), dtype=np.float64)
        country_rows = []
        for b, rec in enumerate(records):
            hist = rec.history[-L:]  # most recent L kept
            if hist:
                idx[b, -len(hist):] = hist  # aligned to the end
                mask[b, -len(hist):] = 1.0
            country_rows.append(country_encoder(rec.features.get("country", "")))
        return cls(
            user_ids=[r.user_id for r in records],
            hist_idx=idx,
            hist_mask=mask,
            country=np.stack(country_rows),
        )

    def __len__(self) -> int:
        return len(self.user_ids)


def init_user_params(
    rng: np.random.Generator,
    num_items: int,
    history_len: int,
    att_width: int,
    out_dim: int,
    country_dim: int,
    shared_item_table: Tensor | None = None,
    init_scale: float = 0.05,
) -> dict[str, Tensor]:
    """Create user-tower parameters; the history table may be tied to the
    item-tower ID table."""

    def uni(*shape):
        return Tensor(rng.uniform(-init_scale, init_scale, shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    if shared_item_table is None:
        params["hist_table"] = uni(num_items, att_width)
    params["pos_table"] = uni(history_len, att_width)
    params["hist_query"] = uni(att_width)
    params["ufeat_w"] = uni(country_dim, att_width)
    params["ufeat_b"] = uni(att_width)
    params["user_in_w"] = uni(2 * att_width, out_dim)
    params["user_in_b"] = uni(out_dim)
    for i in range(N_RESIDUAL_BLOCKS):
        params[f"res{i}_w1"] = uni(out_dim, out_dim)
        params[f"res{i}_b1"] = uni(out_dim)
        params[f"res{i}_w2"] = uni(out_dim, out_dim)
        params[f"res{i}_b2"] = uni(out_dim)
    return params


def _hist_table(params: dict[str, Tensor]) -> Tensor:
    return params["hist_table"] if "hist_table" in params else params["item_id_table"]


def encode_history(batch: UserBatch, params: dict[str, Tensor]) -> Tensor:
    """Attention-pooled history embedding, (B, att_width)."""
    B, L = batch.hist_idx.shape
    flat_idx = batch.hist_idx.reshape(-1)
    positions = np.tile(np.arange(L, dtype=np.intp), B)
    e = nm.add(
        nm.embedding_lookup(_hist_table(params), flat_idx),
        nm.embedding_lookup(params["pos_table"], positions),
    )  # (B*L, w)
    scores = nm.matmul(nm.tanh(e), params["hist_query"])  # (B*L,)
    scores = nm.reshape(scores, (B, L))
    scores = nm.add(scores, Tensor((batch.hist_mask - 1.0) * 1e9))  # pads -> -1e9
    weights = nm.softmax(scores)
    # a fully-padded row softmaxes to uniform garbage; the mask zeroes it
    weights = nm.multiply(weights, Tensor(batch.hist_mask))
    w_flat = nm.reshape(weights, (B * L, 1))
    weighted = nm.multiply(w_flat, e)
    groups = np.kron(np.eye(B), np.ones((1, L)))  # (B, B*L) segment indicator
    return nm.matmul(Tensor(groups), weighted)


def user_embed(batch: UserBatch, params: dict[str, Tensor]) -> Tensor:
    """Full user tower for a batch: (B, out_dim)."""
    hist = encode_history(batch, params)
    feat = nm.tanh(
        nm.add(nm.matmul(Tensor(batch.country), params["ufeat_w"]), params["ufeat_b"])
    )
    x = nm.concat([hist, feat])
    x = nm.add(nm.matmul(x, params["user_in_w"]), params["user_in_b"])
    for i in range(N_RESIDUAL_BLOCKS):
        inner = nm.tanh(
            nm.add(nm.matmul(x, params[f"res{i}_w1"]), params[f"res{i}_b1"])
        )
        x = nm.add(
            nm.add(x, nm.matmul(inner, params[f"res{i}_w2"])), params[f"res{i}_b2"]
        )
    return x


def user_embedding(
    record: UserRecord,
    params: dict[str, Tensor],
    history_len: int,
    country_encoder,
) -> np.ndarray:
    """Single-user convenience wrapper around :func:`user_embed`."""
    batch = UserBatch.build([record], history_len, country_encoder)
    return user_embed(batch, params).data[0]
