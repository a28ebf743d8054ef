"""Shared fixtures: a micro synthetic dataset small enough that a full
train/evaluate cycle takes well under a second."""

import numpy as np
import pytest

from twintower.data import SyntheticSpec, generate_synthetic, ingest
from twintower.evaluation import SplitConfig
from twintower.item_tower import ATTENTION, FusionMode
from twintower.pipeline import build_training_data, train_model
from twintower.training import TrainConfig

MICRO_SPEC = SyntheticSpec(
    n_users=30,
    n_items=40,
    n_genres=4,
    cold_fraction=0.1,
    watches_train=8,
    watches_label=3,
    watches_score_label=3,
    cold_watches_score_label=1,
    word_dim=8,
    coverart_dim=6,
    seed=5,
)

MICRO_TRAIN = TrainConfig(
    embedding_dim=16,
    attention_width=8,
    history_len=10,
    epochs=2,
    batch_size=64,
    negative_rate=5,
    seed=0,
)


@pytest.fixture(scope="session")
def micro_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_corpus")
    generate_synthetic(MICRO_SPEC, out)
    return out


@pytest.fixture(scope="session")
def micro_dataset(micro_data_dir):
    dataset, _ = ingest(micro_data_dir)
    return dataset


@pytest.fixture(scope="session")
def micro_training_data(micro_dataset):
    return build_training_data(micro_dataset, SplitConfig(), MICRO_TRAIN)


@pytest.fixture(scope="session")
def micro_model(micro_dataset):
    model, losses, data = train_model(
        micro_dataset, SplitConfig(), MICRO_TRAIN, FusionMode(ATTENTION)
    )
    return model, losses, data


@pytest.fixture
def rng():
    return np.random.default_rng(0)
