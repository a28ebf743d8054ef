"""Item tower: per-channel embeddings, softmax attention over channels,
and a one-layer perceptron down to the shared embedding size.

Channel pre-scores follow o = q . tanh(W h + b) with one shared W, b, q
across channels; the attention weight per channel is the softmax over
those pre-scores.  Concatenation mode is the same pipeline with every
weight forced to 1.

All functions operate on batches of items (row per item); single-item
helpers wrap the batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .features import EncodedItemFeatures
from .numerics import Tensor

CHANNEL_ORDER = ("id", "categorical", "synopsis", "coverart")

ATTENTION = "attention"
CONCATENATION = "concatenation"


@dataclass(frozen=True)
class FusionMode:
    """Fusion flavour plus the subset of metadata channels in play."""

    fusion: str = ATTENTION
    channels: tuple[str, ...] = CHANNEL_ORDER

    def __post_init__(self):
        if self.fusion not in (ATTENTION, CONCATENATION):
            raise ValueError(f"bad fusion mode {self.fusion!r}")
        if not self.channels:
            raise ValueError("FusionMode needs at least one channel")
        for ch in self.channels:
            if ch not in CHANNEL_ORDER:
                raise ValueError(f"unknown channel {ch!r}")
        # keep the canonical channel order regardless of input order
        ordered = tuple(c for c in CHANNEL_ORDER if c in self.channels)
        object.__setattr__(self, "channels", ordered)

    @property
    def with_id(self) -> bool:
        return "id" in self.channels

    def to_dict(self) -> dict:
        return {"fusion": self.fusion, "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionMode":
        return cls(fusion=d["fusion"], channels=tuple(d["channels"]))


@dataclass
class ItemBatch:
    """Stacked raw channels for a batch of items; id index -1 marks cold start."""

    item_ids: list[str]
    categorical: np.ndarray  # (B, Dc)
    synopsis: np.ndarray  # (B, Ds)
    coverart: np.ndarray  # (B, Dv)
    id_indices: np.ndarray  # (B,) intp, -1 for cold-start items

    @classmethod
    def from_features(cls, feats: list[EncodedItemFeatures]) -> "ItemBatch":
        return cls(
            item_ids=[f.item_id for f in feats],
            categorical=np.stack([f.h_categorical for f in feats]),
            synopsis=np.stack([f.h_synopsis for f in feats]),
            coverart=np.stack([f.h_coverart for f in feats]),
            id_indices=np.array(
                [-1 if f.id_index is None else f.id_index for f in feats],
                dtype=np.intp,
            ),
        )

    def __len__(self) -> int:
        return len(self.item_ids)

    def subset(self, rows: np.ndarray) -> "ItemBatch":
        return ItemBatch(
            item_ids=[self.item_ids[r] for r in rows],
            categorical=self.categorical[rows],
            synopsis=self.synopsis[rows],
            coverart=self.coverart[rows],
            id_indices=self.id_indices[rows],
        )


def init_fusion_params(
    rng: np.random.Generator,
    mode: FusionMode,
    raw_dims: dict[str, int],
    num_items: int,
    att_width: int,
    out_dim: int,
    init_scale: float = 0.05,
) -> dict[str, Tensor]:
    """Create all item-tower parameters with seeded uniform init.

    Attention parameters are created in both fusion modes so that Con and
    Att checkpoints stay shape-compatible.
    """

    def uni(*shape):
        return Tensor(rng.uniform(-init_scale, init_scale, shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    if "id" in mode.channels:
        params["item_id_table"] = uni(num_items, att_width)
    for ch in ("categorical", "synopsis", "coverart"):
        if ch in mode.channels:
            params[f"item_{ch}_w"] = uni(raw_dims[ch], att_width)
            params[f"item_{ch}_b"] = uni(att_width)
    params["att_proj"] = uni(att_width, att_width)  # W, stored transposed
    params["att_bias"] = uni(att_width)
    params["att_query"] = uni(att_width)  # the transform vector
    params["fuse_w"] = uni(len(mode.channels) * att_width, out_dim)
    params["fuse_b"] = uni(out_dim)
    return params


def channel_embed(
    batch: ItemBatch, params: dict[str, Tensor], mode: FusionMode
) -> dict[str, Tensor]:
    """Map raw channels to the common attention width, one row per item.

    Cold-start items (id index -1) get an exact zero ID channel; the
    resulting values are bitwise identical to looking up an all-zero row.
    """
    out: dict[str, Tensor] = {}
    for ch in mode.channels:
        if ch == "id":
            idx = batch.id_indices
            if (idx < 0).any():
                mask = (idx >= 0).astype(np.float64)[:, None]
                looked = nm.embedding_lookup(
                    params["item_id_table"], np.where(idx < 0, 0, idx)
                )
                # + 0.0 normalizes any -0.0 the mask multiply produced
                out[ch] = nm.add(nm.multiply(looked, Tensor(mask)), Tensor(0.0))
            else:
                out[ch] = nm.embedding_lookup(params["item_id_table"], idx)
        else:
            raw = Tensor(getattr(batch, ch))
            out[ch] = nm.add(
                nm.matmul(raw, params[f"item_{ch}_w"]), params[f"item_{ch}_b"]
            )
    return out


def attention_weights(
    channels: dict[str, Tensor], params: dict[str, Tensor], mode: FusionMode
) -> Tensor:
    """Softmax attention over the channel pre-scores; shape (B, n_channels)."""
    cols = []
    for ch in mode.channels:
        h = channels[ch]
        pre = nm.tanh(nm.add(nm.matmul(h, params["att_proj"]), params["att_bias"]))
        score = nm.matmul(pre, params["att_query"])  # (B,)
        cols.append(nm.reshape(score, (h.shape[0], 1)))
    return nm.softmax(nm.concat(cols))


def fuse(
    channels: dict[str, Tensor],
    alphas: Tensor | None,
    params: dict[str, Tensor],
    mode: FusionMode,
) -> Tensor:
    """Weight, concatenate and project the channels to the item embedding.

    `alphas=None` means concatenation semantics (every weight 1).
    """
    if alphas is None:
        weighted = [channels[ch] for ch in mode.channels]
    else:
        cols = nm.split(alphas, [1] * len(mode.channels))
        weighted = [
            nm.multiply(channels[ch], col) for ch, col in zip(mode.channels, cols)
        ]
    fused = weighted[0] if len(weighted) == 1 else nm.concat(weighted)
    return nm.tanh(nm.add(nm.matmul(fused, params["fuse_w"]), params["fuse_b"]))


def item_embeddings(
    batch: ItemBatch,
    params: dict[str, Tensor],
    mode: FusionMode,
    force_alpha_ones: bool = False,
) -> Tensor:
    """Full item tower for a batch: (B, out_dim).

    `force_alpha_ones` runs an attention-mode model with every attention
    weight pinned to 1, which is definitionally the concatenation path.
    """
    chans = channel_embed(batch, params, mode)
    if mode.fusion == ATTENTION and not force_alpha_ones:
        alphas = attention_weights(chans, params, mode)
    else:
        alphas = None
    return fuse(chans, alphas, params, mode)


def attention_weight_map(
    features: EncodedItemFeatures, params: dict[str, Tensor], mode: FusionMode
) -> dict[str, float]:
    """Attention weights for a single item, keyed by channel name."""
    batch = ItemBatch.from_features([features])
    chans = channel_embed(batch, params, mode)
    alphas = attention_weights(chans, params, mode)
    return {ch: float(alphas.data[0, k]) for k, ch in enumerate(mode.channels)}


def item_embedding(
    features: EncodedItemFeatures,
    params: dict[str, Tensor],
    mode: FusionMode,
    force_alpha_ones: bool = False,
) -> np.ndarray:
    """Single-item convenience wrapper around :func:`item_embeddings`."""
    batch = ItemBatch.from_features([features])
    return item_embeddings(batch, params, mode, force_alpha_ones).data[0]
