"""Preference prediction, loss, negative sampling, Adam optimization, the
epoch loop, and checkpoint persistence.

Training is deterministic given the seed: parameter init, negative
sampling and batch shuffling all derive from one seed sequence, and the
numerics are plain float64, so identical runs produce bitwise-identical
checkpoints.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .features import CategoricalSchema, EncodedItemFeatures, encode_user_country
from .item_tower import FusionMode, ItemBatch, init_fusion_params, item_embeddings
from .numerics import ShapeMismatchError, Tape, Tensor, backward
from .user_tower import UserBatch, UserRecord, init_user_params, user_embed

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TTWR1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    negative_rate: int = 20
    embedding_dim: int = 512
    attention_width: int = 128
    history_len: int = 50
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 5
    seed: int = 0
    tied_history_table: bool = True
    init_scale: float = 0.05

    def __post_init__(self):
        if self.negative_rate < 1:
            raise ValueError("TrainConfig: negative_rate must be >= 1")
        if self.embedding_dim <= 0 or self.attention_width <= 0:
            raise ValueError("TrainConfig: dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainingExample:
    user_id: str
    item_id: str
    label: int


@dataclass
class TrainingData:
    """Encoded dataset ready for the training loop.

    Item rows cover the warm set (items watched in the training windows);
    user histories hold training-item row indices, oldest first.
    """

    schema: CategoricalSchema
    item_index: dict[str, int]  # warm item id -> row
    item_batch: ItemBatch  # all warm items, id_indices == own row
    item_category: list[str]
    users: list[UserRecord]  # history from the train-input window
    user_index: dict[str, int]
    positives: dict[int, np.ndarray]  # user row -> warm item rows from Y
    watched: dict[int, np.ndarray]  # user row -> sorted warm rows from X u Y
    schema_hash: str = ""
    raw_dims: dict[str, int] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.item_batch)

    def country_encoder(self):
        schema = self.schema
        return lambda c: encode_user_country(c, schema)


def predict(u: np.ndarray, i: np.ndarray) -> float:
    """Preference score: sigmoid of the embedding dot product."""
    u = np.asarray(u, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    if u.shape != i.shape or u.ndim != 1:
        raise ShapeMismatchError("predict", u.shape, i.shape)
    return float(nm.sigmoid(Tensor(np.dot(u, i))).data)


def example_loss(p: float, y: int) -> float:
    """Cross-entropy for one prediction, with the standard clamp."""
    pc = min(max(p, 1e-12), 1.0 - 1e-12)
    return -(y * math.log(pc) + (1 - y) * math.log(1.0 - pc))


def sample_negatives(
    watched: np.ndarray,
    n_items: int,
    rate: int,
    rng: np.random.Generator,
    n_positives: int = 1,
) -> np.ndarray:
    """`rate` unwatched item rows per positive, without replacement.

    Falls back to sampling with replacement (and logs a warning) when the
    user has watched so much that the pool is smaller than the rate.
    """
    pool = np.setdiff1d(np.arange(n_items, dtype=np.intp), watched)
    if pool.size == 0:
        raise ValueError("sample_negatives: user watched the entire catalog")
    out = np.empty((n_positives, rate), dtype=np.intp)
    if pool.size >= rate:
        for r in range(n_positives):
            out[r] = rng.choice(pool, size=rate, replace=False)
    else:
        log.warning(
            "sample_negatives: pool of %d smaller than rate %d, sampling with "
            "replacement",
            pool.size,
            rate,
        )
        for r in range(n_positives):
            out[r] = rng.choice(pool, size=rate, replace=True)
    return out


class Adam:
    """Per-tensor Adam with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float,
                 beta2: float, eps: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class TwoTowerModel:
    """Trainable parameters for both towers plus the fusion mode."""

    def __init__(
        self,
        params: dict[str, Tensor],
        mode: FusionMode,
        config: TrainConfig,
        raw_dims: dict[str, int],
        num_items: int,
        schema_hash: str = "",
    ):
        self.params = params
        self.mode = mode
        self.config = config
        self.raw_dims = raw_dims
        self.num_items = num_items
        self.schema_hash = schema_hash

    def item_matrix(self, batch: ItemBatch, force_alpha_ones: bool = False) -> Tensor:
        return item_embeddings(batch, self.params, self.mode, force_alpha_ones)

    def user_matrix(self, batch: UserBatch) -> Tensor:
        return user_embed(batch, self.params)


def init_model(
    config: TrainConfig,
    mode: FusionMode,
    raw_dims: dict[str, int],
    num_items: int,
    schema_hash: str = "",
    rng: np.random.Generator | None = None,
) -> TwoTowerModel:
    """Seeded uniform(-init_scale, init_scale) initialization of all weights."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params = init_fusion_params(
        rng,
        mode,
        raw_dims,
        num_items,
        config.attention_width,
        config.embedding_dim,
        config.init_scale,
    )
    shared = (
        params["item_id_table"]
        if (config.tied_history_table and mode.with_id)
        else None
    )
    params.update(
        init_user_params(
            rng,
            num_items,
            config.history_len,
            config.attention_width,
            config.embedding_dim,
            raw_dims["country"],
            shared_item_table=shared,
            init_scale=config.init_scale,
        )
    )
    return TwoTowerModel(params, mode, config, raw_dims, num_items, schema_hash)


def train(
    data: TrainingData,
    config: TrainConfig,
    mode: FusionMode,
) -> tuple[TwoTowerModel, list[float]]:
    """Minibatch Adam over shuffled positives plus resampled negatives.

    Returns the trained model and the per-epoch mean loss trace.
    """
    master = np.random.default_rng(config.seed)
    init_rng, sample_rng, shuffle_rng = master.spawn(3)
    model = init_model(
        config, mode, data.raw_dims, data.n_items, data.schema_hash, init_rng
    )
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2,
               config.eps)
    encoder = data.country_encoder()
    active = np.array(sorted(u for u, pos in data.positives.items() if pos.size > 0))
    if active.size == 0:
        raise ValueError("train: no positive examples in the label window")
    ones_col = Tensor(np.ones((config.embedding_dim, 1)))

    losses: list[float] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(active)
        loss_sum = 0.0
        n_examples = 0
        batch_users: list[int] = []
        batch_count = 0
        batch_no = 0

        def flush():
            nonlocal loss_sum, n_examples, batch_no
            if not batch_users:
                return
            ex_user, ex_item, labels = [], [], []
            for local, u in enumerate(batch_users):
                pos = data.positives[u]
                negs = sample_negatives(
                    data.watched[u], data.n_items, config.negative_rate,
                    sample_rng, n_positives=pos.size,
                )
                ex_user.extend([local] * (pos.size + negs.size))
                ex_item.extend(pos.tolist())
                ex_item.extend(negs.ravel().tolist())
                labels.extend([1.0] * pos.size)
                labels.extend([0.0] * negs.size)
            ex_user = np.array(ex_user, dtype=np.intp)
            ex_item = np.array(ex_item, dtype=np.intp)
            labels = np.array(labels, dtype=np.float64)
            uniq, ex_item_local = np.unique(ex_item, return_inverse=True)

            with Tape() as tape:
                items = model.item_matrix(data.item_batch.subset(uniq))
                ubatch = UserBatch.build(
                    [data.users[u] for u in batch_users],
                    config.history_len,
                    encoder,
                )
                users = model.user_matrix(ubatch)
                u_rows = nm.embedding_lookup(users, ex_user)
                i_rows = nm.embedding_lookup(items, ex_item_local)
                scores = nm.reshape(
                    nm.matmul(nm.multiply(u_rows, i_rows), ones_col),
                    (labels.size,),
                )
                probs = nm.sigmoid(scores)
                loss = nm.binary_cross_entropy(probs, labels)
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(
                        f"non-finite loss in epoch {epoch}, batch {batch_no}"
                    )
                backward(loss, tape)
            opt.step()
            opt.zero_grad()
            loss_sum += float(loss.data) * labels.size
            n_examples += labels.size
            batch_no += 1
            batch_users.clear()

        for u in order:
            batch_users.append(int(u))
            batch_count += data.positives[int(u)].size * (1 + config.negative_rate)
            if batch_count >= config.batch_size:
                flush()
                batch_count = 0
        flush()
        losses.append(loss_sum / n_examples)
    return model, losses


# --------------------------------------------------------------------------
# Checkpoint persistence


def save_checkpoint(model: TwoTowerModel, path) -> None:
    """Versioned container: magic, JSON header, raw little-endian f64 arrays."""
    names = sorted(model.params)
    header = {
        "format": CHECKPOINT_MAGIC.decode(),
        "names": names,
        "shapes": {k: list(model.params[k].data.shape) for k in names},
        "schema_hash": model.schema_hash,
        "config": model.config.to_dict(),
        "mode": model.mode.to_dict(),
        "raw_dims": model.raw_dims,
        "num_items": model.num_items,
        "tied": "hist_table" not in model.params,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> TwoTowerModel:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        params: dict[str, Tensor] = {}
        for name in header["names"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            params[name] = Tensor(arr.copy(), requires_grad=True)
    config = TrainConfig.from_dict(header["config"])
    mode = FusionMode.from_dict(header["mode"])
    model = TwoTowerModel(
        params,
        mode,
        config,
        header["raw_dims"],
        header["num_items"],
        header["schema_hash"],
    )
    return model


def build_examples(data: TrainingData) -> list[TrainingExample]:
    """Positive training examples (label 1) from the label window."""
    out = []
    item_ids = data.item_batch.item_ids
    for u, pos in sorted(data.positives.items()):
        for row in pos:
            out.append(TrainingExample(data.users[u].user_id, item_ids[row], 1))
    return out
