"""scikit-learn style front end for the instance relation network."""
from __future__ import annotations

from dataclasses import fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .encoder import describe_label, tokenize
from .episodes import Dataset, DomainSplit, Episode, EpisodeItem, LabeledUtterance
from .exceptions import ContractError
from .metrics import AggregateMetrics
from . import training

_CONFIG_FIELDS = tuple(f.name for f in fields(TrainConfig))


def _check_texts(X, name: str) -> list[str]:
    if isinstance(X, str) or not isinstance(X, Sequence) and not hasattr(X, "__iter__"):
        raise ContractError(f"{name} must be a sequence of strings")
    texts = list(X)
    if not texts:
        raise ContractError(f"{name} is empty")
    for t in texts:
        if not isinstance(t, str) or not tokenize(t):
            raise ContractError(f"{name} contains an empty or non-string utterance: {t!r}")
    return texts


def _check_label_sets(y, n: int, name: str) -> list[tuple[str, ...]]:
    sets = [tuple(dict.fromkeys([lab] if isinstance(lab, str) else lab)) for lab in y]
    if len(sets) != n:
        raise ContractError(f"{name}: {len(sets)} label sets for {n} utterances")
    if any(not s for s in sets):
        raise ContractError(f"{name}: every utterance needs at least one label")
    return sets


def build_episode(support_texts: Sequence[str], support_labels, query_texts: Sequence[str],
                  classes: Sequence[str] | None = None, descriptions: dict[str, str] | None = None,
                  query_labels=None) -> Episode:
    """Assemble an ad hoc episode from raw utterances and label names.

    Each support utterance represents its first label (the class whose
    description it is encoded with).
    """
    s_texts = _check_texts(support_texts, "support_texts")
    q_texts = _check_texts(query_texts, "query_texts")
    s_sets = _check_label_sets(support_labels, len(s_texts), "support_labels")
    classes = list(classes) if classes is not None else list(dict.fromkeys(l for s in s_sets for l in s))
    index = {c: k for k, c in enumerate(classes)}
    if len(classes) < 2:
        raise ContractError("an episode needs at least two classes")

    def vec(labels):
        y = np.zeros(len(classes), dtype=np.int8)
        for lab in labels:
            if lab not in index:
                raise ContractError(f"label {lab!r} is not one of the episode classes")
            y[index[lab]] = 1
        return y

    descriptions = descriptions or {}
    desc = [tuple(tokenize(descriptions.get(c, describe_label(c)))) or (c,) for c in classes]
    support = [EpisodeItem(-1, tuple(tokenize(t)), vec(s), index[s[0]]) for t, s in zip(s_texts, s_sets)]
    if query_labels is None:
        # labels unknown at inference; the first class stands in so shapes stay valid
        q_sets = [(classes[0],)] * len(q_texts)
    else:
        q_sets = _check_label_sets(query_labels, len(q_texts), "query_labels")
    query = [EpisodeItem(-1, tuple(tokenize(t)), vec(s)) for t, s in zip(q_texts, q_sets)]
    return Episode(classes, desc, support, query)


class InstanceRelationClassifier(BaseEstimator):
    """Few-shot multi-label intent classifier trained episodically.

    Constructor arguments mirror :class:`~irnet.config.TrainConfig`.
    ``fit`` trains on a :class:`~irnet.episodes.Dataset` (or raw texts,
    label sets and domains); prediction is per episode, since every
    prediction is conditioned on a labeled support set.
    """

    def __init__(self, alpha=0.1, beta=1.0, n_layers=2, hidden_size=64, attention_size=64,
                 attention_rows=1, embedding_std=0.3, freeze_embeddings=False,
                 rotate_embeddings=True, init_scheme="near-identity", lr=1e-3, warmup_proportion=0.05,
                 weight_decay=0.01, beta1=0.9, beta2=0.999, adam_eps=1e-8, epochs=30,
                 tasks_per_epoch=100, eval_episodes=100, n_way=5, k_shot=1, n_query=16, seed=0,
                 aggregation="masked-softmax", target_mode="exact", vote_mode="all-labels",
                 edge_mode="pairwise-logits", use_class_descriptions=True, force_top1=False):
        self.alpha = alpha
        self.beta = beta
        self.n_layers = n_layers
        self.hidden_size = hidden_size
        self.attention_size = attention_size
        self.attention_rows = attention_rows
        self.embedding_std = embedding_std
        self.freeze_embeddings = freeze_embeddings
        self.rotate_embeddings = rotate_embeddings
        self.init_scheme = init_scheme
        self.lr = lr
        self.warmup_proportion = warmup_proportion
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.epochs = epochs
        self.tasks_per_epoch = tasks_per_epoch
        self.eval_episodes = eval_episodes
        self.n_way = n_way
        self.k_shot = k_shot
        self.n_query = n_query
        self.seed = seed
        self.aggregation = aggregation
        self.target_mode = target_mode
        self.vote_mode = vote_mode
        self.edge_mode = edge_mode
        self.use_class_descriptions = use_class_descriptions
        self.force_top1 = force_top1

    def get_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in _CONFIG_FIELDS})

    def _as_dataset(self, X, y, domains, catalog) -> Dataset:
        if isinstance(X, Dataset):
            return X
        texts = _check_texts(X, "X")
        if y is None:
            raise ContractError("y (label sets) is required when X is raw text")
        sets = _check_label_sets(y, len(texts), "y")
        doms = ["default"] * len(texts) if domains is None else list(domains)
        if len(doms) != len(texts):
            raise ContractError(f"{len(doms)} domains for {len(texts)} utterances")
        if catalog is None:
            catalog = {lab: describe_label(lab) for s in sets for lab in s}
        utts = [LabeledUtterance(t, s, d, i) for i, (t, s, d) in enumerate(zip(texts, sets, doms))]
        return Dataset(utts, dict(catalog))

    def fit(self, X, y=None, domains=None, catalog=None, split: DomainSplit | None = None,
            checkpoint_dir=None):
        """Episodic training.

        With ``split`` the best-validation parameters are kept and the test
        domains are scored into ``test_metrics_``.
        """
        config = self.get_config()
        dataset = self._as_dataset(X, y, domains, catalog)
        streams = training.rng_streams(config.seed)
        self.model_ = training.build_model(dataset, config, streams["init"])
        self.optimizer_ = training.make_optimizer(self.model_)
        result = training.fit(self.model_, dataset, split, self.optimizer_, checkpoint_dir, streams)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.validation_metrics_ = result.best_val
        self.test_metrics_ = result.test
        self.classes_seen_ = sorted(dataset.catalog)
        return self

    def decision_function(self, episode: Episode) -> np.ndarray:
        """Edge-vote class scores, one row per query and one column per episode class."""
        check_is_fitted(self, "model_")
        return self.model_.forward(episode, compute_loss=False).scores.data.copy()

    def predict(self, episode: Episode) -> np.ndarray:
        """Binary label matrix; a class is predicted when its score is positive."""
        check_is_fitted(self, "model_")
        return self.model_.forward(episode, compute_loss=False).predictions

    def predict_labels(self, support_texts, support_labels, query_texts, descriptions=None):
        """Label names predicted for each query utterance given a labeled support set."""
        episode = build_episode(support_texts, support_labels, query_texts, descriptions=descriptions)
        pred = self.predict(episode)
        return [[c for c, flag in zip(episode.classes, row) if flag] for row in pred]

    def evaluate(self, dataset: Dataset, domains: Sequence[str], n_episodes: int | None = None,
                 seed: int | None = None) -> AggregateMetrics:
        check_is_fitted(self, "model_")
        rng = None if seed is None else np.random.default_rng(seed)
        return training.evaluate(self.model_, dataset, domains, episodes=n_episodes, seed=rng)[0]

    def score(self, dataset: Dataset, domains: Sequence[str], n_episodes: int | None = None) -> float:
        """Mean per-episode Macro-F1 over sampled episodes from ``domains``."""
        return self.evaluate(dataset, domains, n_episodes).macro_f1_mean

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.optimizer_)

    @classmethod
    def load(cls, path) -> "InstanceRelationClassifier":
        model, optimizer, header = load_checkpoint(path)
        est = cls(**header["config"])
        est.model_, est.optimizer_ = model, optimizer
        return est
