"""The instance relation network: encoder, relation graph and losses wired together."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .config import TrainConfig
from .encoder import EncoderParams, Vocab, encode_query, encode_support
from .episodes import Episode
from .exceptions import ContractError
from .graph import EpisodeGraph, GraphLayerParams, propagate
from .autodiff import Parameter, Tensor


@dataclass
class ForwardResult:
    graph: EpisodeGraph
    scores: Tensor
    predictions: np.ndarray
    losses: losses.LossBreakdown | None = None


class RelationNetwork:
    def __init__(self, vocab: Vocab, config: TrainConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.vocab = vocab
        self.config = config or TrainConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.encoder = EncoderParams.initialize(len(vocab), cfg.hidden_size, cfg.attention_size,
                                                cfg.attention_rows, rng,
                                                embedding_std=cfg.embedding_std)
        self.layers = [GraphLayerParams.initialize(l, cfg.hidden_size, rng)
                       for l in range(cfg.n_layers + 1)]
        if cfg.init_scheme == "near-identity":
            self._near_identity()

    def _near_identity(self) -> None:
        # support and query features start in the same coordinates and node
        # updates start close to the identity; W_k / W_q stay random
        d, r = self.config.hidden_size, self.config.attention_rows
        self.encoder.W3.data[...] = np.tile(np.eye(d), (1, r)) / r
        for layer in self.layers[1:]:
            layer.W4.data[...] = np.eye(d)
            layer.mlp_W2.data *= 0.1

    def parameters(self) -> list[Parameter]:
        params = self.encoder.parameters()
        for layer in self.layers:
            params += layer.parameters()
        return params

    def trainable_parameters(self) -> list[Parameter]:
        frozen = {id(self.encoder.embedding)} if self.config.freeze_embeddings else set()
        return [p for p in self.parameters() if id(p) not in frozen]

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise ContractError("duplicate parameter names")
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _indices(self, tokens) -> list[int]:
        return self.vocab.encode(tokens)

    def encode(self, episode: Episode, rotation: np.ndarray | None = None):
        desc = [self._indices(d) for d in episode.descriptions]
        use_desc = self.config.use_class_descriptions
        support = [encode_support(self._indices(s.tokens), desc[s.sampled_class] if use_desc else None,
                                  self.encoder, rotation)
                   for s in episode.support]
        query = [encode_query(self._indices(q.tokens), self.encoder, rotation) for q in episode.query]
        return support, query

    def forward(self, episode: Episode, compute_loss: bool = True,
                rotation: np.ndarray | None = None) -> ForwardResult:
        cfg = self.config
        support, query = self.encode(episode, rotation)
        graph = propagate(support, query, self.layers, cfg.n_layers, cfg.aggregation, cfg.edge_mode)
        votes = losses.vote_matrix(episode.support_labels, episode.sampled_classes, cfg.vote_mode)
        scores = losses.class_scores(graph.edges[-1], votes, graph.support_mask)
        result = ForwardResult(graph, scores, losses.predict(scores, cfg.force_top1))
        if compute_loss:
            targets = losses.relation_targets(episode.support_labels, episode.query_labels,
                                              cfg.target_mode)
            l_s = losses.support_loss(graph.edges, targets, graph.support_mask)
            l_q = losses.query_loss(scores, episode.query_labels)
            result.losses = losses.total_loss(l_s, l_q, cfg.alpha, cfg.beta)
        return result

    def loss(self, episode: Episode) -> Tensor:
        return self.forward(episode).losses.total

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        if missing:
            raise ContractError(f"state is missing parameter(s) {sorted(missing)}")
        for name, p in named.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractError(f"parameter {name!r}: shape {value.shape} does not match {p.shape}")
        for name, p in named.items():
            p.data[...] = arrays[name]
