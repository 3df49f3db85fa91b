"""Tiny random episodes and the finite-difference gradient suite."""
from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, finite_diff_report
from .config import TrainConfig
from .encoder import Vocab
from .episodes import Episode, EpisodeItem
from .model import RelationNetwork


def random_episode(rng: np.random.Generator, n_way: int = 3, k_shot: int = 1, n_query: int = 2,
                   vocab_size: int = 12, length: tuple[int, int] = (2, 5),
                   multi_label_rate: float = 0.3) -> tuple[Episode, Vocab]:
    """Episode over tokens ``w0..w{vocab_size-1}`` with random multi-label sets.

    Every class gets ``k_shot`` supports that name it as their sampled class,
    so the support matrix always covers each class at least K times.
    """
    vocab = Vocab(f"w{i}" for i in range(vocab_size))
    words = vocab.itos[len(Vocab.reserved):]

    def utterance():
        n = int(rng.integers(length[0], length[1] + 1))
        return tuple(words[i] for i in rng.integers(0, len(words), n))

    def labels(primary):
        y = np.zeros(n_way, dtype=np.int8)
        y[primary] = 1
        if n_way > 1 and rng.random() < multi_label_rate:
            y[(primary + 1 + rng.integers(n_way - 1)) % n_way] = 1
        return y

    classes = [f"c{k}" for k in range(n_way)]
    descriptions = [utterance() for _ in classes]
    support = [EpisodeItem(-1, utterance(), labels(k), k) for k in range(n_way) for _ in range(k_shot)]
    query = [EpisodeItem(-1, utterance(), labels(int(rng.integers(n_way)))) for _ in range(n_query)]
    return Episode(classes, descriptions, support, query), vocab


def tiny_config(**overrides) -> TrainConfig:
    base = dict(hidden_size=8, attention_size=8, attention_rows=1, n_layers=2,
                n_way=3, k_shot=1, n_query=2, embedding_std=0.5)
    base.update(overrides)
    return TrainConfig(**base)


def gradcheck(config: TrainConfig, seed: int = 0, step: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the total loss over every parameter entry."""
    rng = np.random.default_rng(seed)
    episode, vocab = random_episode(rng, config.n_way, config.k_shot, config.n_query)
    model = RelationNetwork(vocab, config, rng)
    return finite_diff_report(lambda: model.loss(episode), model.parameters(), step)
