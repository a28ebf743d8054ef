"""Acceptance suite: one test per top-level correctness or behaviour
guarantee, each printing a single summary line.

The heavier checks train real models on a seeded 500-user / 300-item
synthetic corpus with planted genre preferences and 10% cold-start items.
"""

import time

import numpy as np
import pytest

import twintower.numerics as nm
from twintower.data import SyntheticSpec, generate_synthetic, ingest
from twintower.evaluation import (
    EvalConfig,
    SplitConfig,
    cold_start_items,
    compute_metrics,
    temporal_split,
)
from twintower.item_tower import (
    ATTENTION,
    CHANNEL_ORDER,
    CONCATENATION,
    FusionMode,
    ItemBatch,
    attention_weights,
    channel_embed,
    init_fusion_params,
    item_embeddings,
)
from twintower.numerics import Tape, Tensor, backward
from twintower.pipeline import (
    build_training_data,
    evaluate_model,
    train_model,
)
from twintower.training import (
    TrainConfig,
    TwoTowerModel,
    sample_negatives,
    save_checkpoint,
    load_checkpoint,
    train,
)
from twintower.user_tower import UserBatch, user_embed
from tests.test_evaluation import random_log

ACCEPT_SPEC = SyntheticSpec(seed=11, affinity=0.9)
NOISE_SPEC = SyntheticSpec(seed=11, affinity=0.9, noise_channel="synopsis")

ACCEPT_TRAIN = TrainConfig(
    embedding_dim=64,
    attention_width=32,
    history_len=50,
    epochs=5,
    batch_size=512,
    negative_rate=20,
    learning_rate=0.001,
    seed=0,
)


@pytest.fixture(scope="session")
def clean_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_clean")
    generate_synthetic(ACCEPT_SPEC, out)
    dataset, _ = ingest(out)
    return dataset


@pytest.fixture(scope="session")
def noise_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_noise")
    generate_synthetic(NOISE_SPEC, out)
    dataset, _ = ingest(out)
    return dataset


def weighted_precision(report) -> float:
    """User-weighted precision across categories."""
    num = sum(
        m.precision * m.n_users_averaged for m in report.per_category.values()
    )
    den = sum(m.n_users_averaged for m in report.per_category.values())
    return num / den if den else 0.0


# --------------------------------------------------------------------------
# 1. Gradient correctness


def _micro_graph(rng, w, v, table):
    idx = rng.integers(0, table.data.shape[0], size=3)
    x = Tensor(rng.normal(size=(3, w.data.shape[0])))
    h = nm.tanh(nm.add(nm.matmul(x, w), v))
    e = nm.embedding_lookup(table, idx)
    joined = nm.concat(h, e)
    weights = nm.softmax(joined)
    probs = nm.sigmoid(
        nm.matmul(nm.multiply(weights, joined), Tensor(np.ones(joined.shape[-1])))
    )
    labels = (rng.random(3) > 0.5).astype(float)
    return nm.binary_cross_entropy(nm.scale(probs, 0.9), labels)


def test_gradient_correctness():
    """Analytic gradients match central finite differences on 200 random
    micro-graphs (1e-4) and on the full two-tower loss (1e-3)."""
    start = time.time()
    rng = np.random.default_rng(100)

    # --- 200 random micro-graphs
    worst_micro = 0.0
    for trial in range(200):
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        v = Tensor(rng.normal(size=5), requires_grad=True)
        table = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        state = rng.bit_generator.state
        with Tape() as tape:
            loss = _micro_graph(rng, w, v, table)
            backward(loss, tape)

        def value():
            rng.bit_generator.state = state
            return float(_micro_graph(rng, w, v, table).data)

        probe_rng = np.random.default_rng(trial)
        for p in (w, v, table):
            flat = p.data.reshape(-1)
            for j in probe_rng.integers(0, flat.size, size=2):
                eps = 1e-5
                old = flat[j]
                flat[j] = old + eps
                fp = value()
                flat[j] = old - eps
                fm = value()
                flat[j] = old
                fd = (fp - fm) / (2 * eps)
                auto = p.grad.reshape(-1)[j]
                err = abs(auto - fd) / max(abs(auto), abs(fd), 1e-3)
                worst_micro = max(worst_micro, err)
                assert err < 1e-4
        rng.bit_generator.state = state
        _micro_graph(rng, w, v, table)

    # --- full two-tower loss on a 5-user / 8-item dataset
    spec = SyntheticSpec(
        n_users=5, n_items=8, n_genres=2, cold_fraction=0.0,
        cold_watches_score_label=0, watches_train=4, watches_label=2,
        watches_score_label=2, word_dim=4, coverart_dim=3, seed=21,
    )
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        generate_synthetic(spec, d)
        dataset, _ = ingest(d)
    cfg = TrainConfig(
        embedding_dim=6, attention_width=4, history_len=4,
        epochs=1, batch_size=8, negative_rate=3, seed=0,
    )
    data = build_training_data(dataset, SplitConfig(), cfg)
    from twintower.training import init_model

    model = init_model(cfg, FusionMode(ATTENTION), data.raw_dims, data.n_items,
                       data.schema_hash)
    encoder = data.country_encoder()
    neg_rng = np.random.default_rng(5)
    users = sorted(data.positives)
    examples = []
    for local, u in enumerate(users):
        for row in data.positives[u]:
            examples.append((local, int(row), 1.0))
        negs = sample_negatives(
            data.watched[u], data.n_items, cfg.negative_rate, neg_rng,
            n_positives=data.positives[u].size,
        )
        for row in negs.ravel():
            examples.append((local, int(row), 0.0))
    ex_user = np.array([e[0] for e in examples], dtype=np.intp)
    ex_item = np.array([e[1] for e in examples], dtype=np.intp)
    labels = np.array([e[2] for e in examples])
    ubatch = UserBatch.build([data.users[u] for u in users], cfg.history_len,
                             encoder)
    ones_col = Tensor(np.ones((cfg.embedding_dim, 1)))

    def full_loss():
        items = item_embeddings(data.item_batch, model.params, model.mode)
        us = user_embed(ubatch, model.params)
        u_rows = nm.embedding_lookup(us, ex_user)
        i_rows = nm.embedding_lookup(items, ex_item)
        scores = nm.reshape(
            nm.matmul(nm.multiply(u_rows, i_rows), ones_col), (labels.size,)
        )
        return nm.binary_cross_entropy(nm.sigmoid(scores), labels)

    with Tape() as tape:
        loss = full_loss()
        backward(loss, tape)
    worst_full = 0.0
    probe_rng = np.random.default_rng(9)
    for name, p in sorted(model.params.items()):
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
        for j in probe_rng.integers(0, flat.size, size=2):
            eps = 1e-5
            old = flat[j]
            flat[j] = old + eps
            fp = float(full_loss().data)
            flat[j] = old - eps
            fm = float(full_loss().data)
            flat[j] = old
            fd = (fp - fm) / (2 * eps)
            err = abs(grad[j] - fd) / max(abs(grad[j]), abs(fd), 1e-3)
            worst_full = max(worst_full, err)
            assert err < 1e-3, name
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(
        f"PASS gradient correctness: micro max rel err {worst_micro:.2e}, "
        f"full-model max rel err {worst_full:.2e}, {elapsed:.1f}s"
    )


# --------------------------------------------------------------------------
# 2. Attention invariants


def test_attention_invariants():
    """For 10k random items the attention weights are positive, sum to
    1 +- 1e-9 and are invariant to uniform pre-score shifts; a single
    channel always gets weight exactly 1."""
    rng = np.random.default_rng(200)
    raw_dims = {"categorical": 7, "synopsis": 5, "coverart": 6}
    mode = FusionMode(ATTENTION, ("categorical", "synopsis", "coverart"))
    params = init_fusion_params(rng, mode, raw_dims, num_items=1, att_width=8,
                                out_dim=4)
    n = 10_000
    from twintower.features import EncodedItemFeatures

    feats = [
        EncodedItemFeatures(
            item_id=f"i{b}", category="movie",
            h_categorical=rng.normal(size=7) * 3,
            h_synopsis=rng.normal(size=5) * 3,
            h_coverart=rng.normal(size=6) * 3,
            coverart_missing=False, id_index=0,
        )
        for b in range(n)
    ]
    batch = ItemBatch.from_features(feats)
    chans = channel_embed(batch, params, mode)
    alphas = attention_weights(chans, params, mode).data
    assert alphas.shape == (n, 3)
    assert (alphas > 0).all()
    assert np.abs(alphas.sum(axis=1) - 1.0).max() < 1e-9

    # shift invariance at the pre-score level
    scores = np.stack(
        [
            np.tanh(chans[ch].data @ params["att_proj"].data
                    + params["att_bias"].data) @ params["att_query"].data
            for ch in mode.channels
        ],
        axis=1,
    )
    for c in (1.0, -250.0, 1e4):
        shifted = scores + c
        e = np.exp(shifted - shifted.max(axis=1, keepdims=True))
        assert np.abs(e / e.sum(axis=1, keepdims=True) - alphas).max() < 1e-9

    single_mode = FusionMode(ATTENTION, ("synopsis",))
    single = attention_weights(
        {"synopsis": chans["synopsis"]}, params, single_mode
    ).data
    assert np.array_equal(single, np.ones((n, 1)))
    print("PASS attention invariants: 10k items, sums within 1e-9, "
          "single-channel weight exactly 1")


# --------------------------------------------------------------------------
# 3. Metric oracle equivalence


def test_metric_oracle_equivalence():
    """The four top-6 metrics equal brute-force set arithmetic exactly on
    100 random 20-user instances."""
    rng = np.random.default_rng(300)
    items = [f"i{j}" for j in range(15)]
    k = 6
    for _ in range(100):
        recs, watched = {}, {}
        for u in range(20):
            uid = f"u{u}"
            recs[uid] = list(
                rng.choice(items, size=int(rng.integers(0, k + 1)), replace=False)
            )
            watched[uid] = set(
                rng.choice(items, size=int(rng.integers(0, 8)), replace=False)
            )
        got = compute_metrics(recs, watched, k)
        precisions, recalls = [], []
        cov, conv = set(), set()
        for uid, rl in recs.items():
            cov |= set(rl)
            hits = set(rl) & watched[uid]
            conv |= hits
            if watched[uid]:
                precisions.append(len(hits) / k)
                recalls.append(len(hits) / len(watched[uid]))
        assert got.precision == (np.mean(precisions) if precisions else 0.0)
        assert got.recall == (np.mean(recalls) if recalls else 0.0)
        assert got.coverage == len(cov)
        assert got.converted_coverage == len(conv)
    print("PASS metric oracle equivalence: 100 random 20-user instances exact")


# --------------------------------------------------------------------------
# 4. Leakage property


def test_leakage_and_cold_scan():
    """Over 100 random logs no score-label interaction lands in a training
    subset, and the cold-start set equals a brute-force window scan."""
    rng = np.random.default_rng(400)
    cfg = SplitConfig()
    for _ in range(100):
        log = random_log(rng, n=150)
        split = temporal_split(log, cfg)
        label_rows = {
            (u, i, int(ts)) for u, i, ts in split.score_label.rows()
        }
        for part in (split.train_input, split.train_label):
            assert not label_rows & {
                (u, i, int(ts)) for u, i, ts in part.rows()
            }
        # every label timestamp is outside both training windows
        if len(split.score_label):
            ts = split.score_label.timestamps
            assert ts.min() >= cfg.y_score[0]
            assert cfg.y_score[0] >= cfg.y[1] and cfg.y_score[0] >= cfg.x[1]

        got = cold_start_items(log, cfg)
        expected = set()
        for item in set(log.item_ids):
            stamps = [t for i, t in zip(log.item_ids, log.timestamps) if i == item]
            before = any(
                lo <= t < hi
                for t in stamps
                for lo, hi in (cfg.x, cfg.y, cfg.x_score)
            )
            in_label = any(cfg.y_score[0] <= t < cfg.y_score[1] for t in stamps)
            if in_label and not before:
                expected.add(item)
        assert got == expected
    print("PASS leakage property: 100 random logs, no leakage, cold scan exact")


# --------------------------------------------------------------------------
# 5. Cold-start pathway


def test_cold_start_zero_id_pathway():
    """Embedding a cold item equals embedding it against an explicit zero
    ID row, bitwise, for 1000 random items."""
    rng = np.random.default_rng(500)
    raw_dims = {"categorical": 9, "synopsis": 6, "coverart": 5}
    mode = FusionMode(ATTENTION, CHANNEL_ORDER)
    n_items = 50
    params = init_fusion_params(rng, mode, raw_dims, num_items=n_items,
                                att_width=8, out_dim=12)
    from twintower.features import EncodedItemFeatures

    n = 1000
    feats = [
        EncodedItemFeatures(
            item_id=f"i{b}", category="movie",
            h_categorical=rng.normal(size=9),
            h_synopsis=rng.normal(size=6),
            h_coverart=rng.normal(size=5),
            coverart_missing=False, id_index=None,
        )
        for b in range(n)
    ]
    cold_batch = ItemBatch.from_features(feats)
    cold_out = item_embeddings(cold_batch, params, mode).data

    zero_row = n_items
    aug = dict(params)
    aug["item_id_table"] = Tensor(
        np.vstack([params["item_id_table"].data, np.zeros((1, 8))])
    )
    explicit = ItemBatch(
        item_ids=cold_batch.item_ids,
        categorical=cold_batch.categorical,
        synopsis=cold_batch.synopsis,
        coverart=cold_batch.coverart,
        id_indices=np.full(n, zero_row, dtype=np.intp),
    )
    explicit_out = item_embeddings(explicit, aug, mode).data
    assert np.array_equal(cold_out, explicit_out)

    # the scores downstream are then bitwise identical too
    u = rng.normal(size=12)
    assert np.array_equal(cold_out @ u, explicit_out @ u)
    print("PASS cold-start pathway: 1000 items bitwise equal to zero ID row")


# --------------------------------------------------------------------------
# 6. Synthetic signal recovery (cold start)


def test_synthetic_cold_signal_recovery(clean_corpus):
    """A metadata-only attention model beats the random baseline by at
    least 2x on cold-start movie precision, within the runtime budget."""
    start = time.time()
    mode = FusionMode(ATTENTION, ("categorical", "synopsis", "coverart"))
    model, _, data = train_model(clean_corpus, SplitConfig(), ACCEPT_TRAIN, mode)
    report, baseline = evaluate_model(
        model, clean_corpus, SplitConfig(), EvalConfig(), data,
        mode="cold", baseline_seed=0,
    )
    elapsed = time.time() - start
    model_p = report.per_category["movie"].precision
    base_p = baseline.per_category["movie"].precision
    assert base_p > 0.0
    ratio = model_p / base_p
    assert ratio >= 2.0
    assert elapsed < 300.0
    print(
        f"PASS cold-start signal recovery: movie P@6 {model_p:.4f} vs random "
        f"{base_p:.4f} (x{ratio:.2f} >= 2), {elapsed:.1f}s"
    )


# --------------------------------------------------------------------------
# 7. Warm-start fusion direction under a noise channel


def test_noise_channel_fusion_direction(noise_corpus):
    """With the synopsis channel replaced by pure noise, attention fusion
    matches or beats concatenation on warm P@6 in at least 4 of 5 seeds."""
    start = time.time()
    wins = 0
    results = []
    for seed in range(5):
        cfg = TrainConfig(
            embedding_dim=64, attention_width=32, history_len=50,
            epochs=12, batch_size=512, negative_rate=20,
            learning_rate=0.003, seed=seed,
        )
        scores = {}
        for fusion in (ATTENTION, CONCATENATION):
            mode = FusionMode(fusion, CHANNEL_ORDER)
            model, _, data = train_model(noise_corpus, SplitConfig(), cfg, mode)
            report, _ = evaluate_model(
                model, noise_corpus, SplitConfig(), EvalConfig(), data, mode="warm"
            )
            scores[fusion] = weighted_precision(report)
        results.append((seed, scores[ATTENTION], scores[CONCATENATION]))
        if scores[ATTENTION] >= scores[CONCATENATION]:
            wins += 1
    elapsed = time.time() - start
    detail = ", ".join(
        f"s{seed}: att {a:.4f} vs con {c:.4f}" for seed, a, c in results
    )
    assert wins >= 4, detail
    print(
        f"PASS warm fusion direction: attention wins {wins}/5 seeds "
        f"({detail}), {elapsed:.1f}s"
    )


# --------------------------------------------------------------------------
# 8. Determinism and persistence


def test_determinism_and_persistence(micro_training_data, micro_dataset,
                                     tmp_path):
    """Same seed gives bitwise-identical checkpoints, round-trips are
    bitwise exact, and concatenation equals attention with weights forced
    to 1 on every metric."""
    from tests.conftest import MICRO_TRAIN

    mode = FusionMode(ATTENTION)
    model_a, _ = train(micro_training_data, MICRO_TRAIN, mode)
    model_b, _ = train(micro_training_data, MICRO_TRAIN, mode)
    pa, pb = tmp_path / "a.ttwr", tmp_path / "b.ttwr"
    save_checkpoint(model_a, pa)
    save_checkpoint(model_b, pb)
    assert pa.read_bytes() == pb.read_bytes()

    loaded = load_checkpoint(pa)
    for name, tensor in model_a.params.items():
        assert np.array_equal(loaded.params[name].data, tensor.data), name
    rt = tmp_path / "rt.ttwr"
    save_checkpoint(loaded, rt)
    assert rt.read_bytes() == pa.read_bytes()

    class ForcedOnes(TwoTowerModel):
        def item_matrix(self, batch, force_alpha_ones=False):
            return super().item_matrix(batch, force_alpha_ones=True)

    forced = ForcedOnes(model_a.params, model_a.mode, model_a.config,
                        model_a.raw_dims, model_a.num_items, model_a.schema_hash)
    con = TwoTowerModel(
        model_a.params, FusionMode(CONCATENATION, model_a.mode.channels),
        model_a.config, model_a.raw_dims, model_a.num_items, model_a.schema_hash,
    )
    rep_forced, _ = evaluate_model(
        forced, micro_dataset, SplitConfig(), EvalConfig(),
        micro_training_data, mode="warm",
    )
    rep_con, _ = evaluate_model(
        con, micro_dataset, SplitConfig(), EvalConfig(),
        micro_training_data, mode="warm",
    )
    assert rep_forced.to_dict() == rep_con.to_dict()
    print("PASS determinism and persistence: bitwise checkpoints, exact "
          "round-trip, forced-alpha equivalence metric-for-metric")


# --------------------------------------------------------------------------
# 9. Training sanity


def test_training_loss_decreases(clean_corpus):
    """Per-epoch mean loss is strictly decreasing over the first three
    epochs at the default configuration (d scaled to 64 for speed)."""
    cfg = TrainConfig(
        embedding_dim=64, attention_width=32, history_len=50,
        epochs=3, negative_rate=20, learning_rate=0.001, seed=0,
    )
    _, losses, _ = train_model(
        clean_corpus, SplitConfig(), cfg, FusionMode(ATTENTION)
    )
    assert len(losses) == 3
    assert losses[0] > losses[1] > losses[2], losses
    print(
        "PASS training sanity: epoch losses strictly decreasing "
        + " > ".join(f"{l:.4f}" for l in losses)
    )
