"""Shared fixtures: tiny worlds for fast tests and session-scoped trained
runs reused by the training-invariant and acceptance tests."""

import numpy as np
import pytest

from crn.config import DataConfig, RunConfig, TrainConfig, WorldConfig
from crn import captioner as cap
from crn import synthworld as sw
from crn.embeddings import EmbeddingTable, build_vocabulary


def tiny_world_config() -> WorldConfig:
    return WorldConfig(n_classes=24, n_categories=6, d_v=24, d_e=16, d_image=24,
                       embed_noise=0.06, proto_noise=0.15)


def tiny_data_config() -> DataConfig:
    return DataConfig(n_train=200, n_val=20, n_test=80, novel_count=4,
                      pseudo_count=8)


@pytest.fixture(scope="session")
def tiny_dataset():
    world = sw.gen_world(tiny_world_config(), 11)
    return sw.gen_dataset(world, tiny_data_config(), 11)


@pytest.fixture(scope="session")
def tiny_detections(tiny_dataset):
    return {
        split: sw.simulate_split_detectors(tiny_dataset, split, 11)
        for split in ("train", "test")
    }


@pytest.fixture(scope="session")
def tiny_trained(tiny_dataset, tiny_detections):
    """A briefly trained small model; enough structure for pipeline tests."""
    config = TrainConfig(epochs=8, hidden=48, lr=2e-3)
    params, history = cap.train(tiny_dataset, tiny_detections["train"], config, 11)
    return params, history


def small_vocab(n_words: int = 5, n_novel: int = 0, n_sources: int = 0,
                dim: int = 8, seed: int = 0):
    """Vocabulary of wNNN words plus an aligned random embedding table.

    Fixed-length names cannot be stem-related, so nearest-neighbour scans
    only exercise the cosine ordering.
    """
    words = [f"w{i:03d}" for i in range(n_words)]
    novel = words[:n_novel]
    in_domain = words[n_novel:]
    sources = in_domain[:n_sources]
    vocab = build_vocabulary(in_domain, novel, sources)
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((len(vocab.words), dim)).astype(np.float32)
    table = EmbeddingTable(list(vocab.words), vectors)
    return vocab, table
