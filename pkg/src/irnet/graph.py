"""Instance relation graph and label knowledge propagation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import _fan_uniform
from .exceptions import ContractError, DimensionError, NumericWarning

AGGREGATION_MODES = ("masked-softmax", "raw-sum")
EDGE_MODES = ("pairwise-logits", "cosine")
DENOMINATOR_GUARD = 1e-8


@dataclass
class GraphLayerParams:
    """Weights of one propagation layer; layer 0 only has the key/query maps."""

    W_k: Parameter
    W_q: Parameter
    mlp_W1: Parameter | None = None
    mlp_b1: Parameter | None = None
    mlp_W2: Parameter | None = None
    mlp_b2: Parameter | None = None
    W4: Parameter | None = None
    b4: Parameter | None = None

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.W_k, self.W_q, self.mlp_W1, self.mlp_b1, self.mlp_W2,
                            self.mlp_b2, self.W4, self.b4) if p is not None]

    @classmethod
    def initialize(cls, layer: int, d: int, rng: np.random.Generator) -> "GraphLayerParams":
        pre = f"graph.{layer}"
        params = cls(W_k=Parameter(f"{pre}.W_k", _fan_uniform(rng, d, d)),
                     W_q=Parameter(f"{pre}.W_q", _fan_uniform(rng, d, d)))
        if layer > 0:
            params.mlp_W1 = Parameter(f"{pre}.mlp_W1", _fan_uniform(rng, d, d))
            params.mlp_b1 = Parameter(f"{pre}.mlp_b1", np.zeros(d))
            params.mlp_W2 = Parameter(f"{pre}.mlp_W2", _fan_uniform(rng, d, d))
            params.mlp_b2 = Parameter(f"{pre}.mlp_b2", np.zeros(d))
            params.W4 = Parameter(f"{pre}.W4", _fan_uniform(rng, d, d))
            params.b4 = Parameter(f"{pre}.b4", np.zeros(d))
        return params


@dataclass
class EpisodeGraph:
    nodes: list[Tensor]
    edges: list[Tensor]
    support_mask: np.ndarray
    guarded_rows: list[np.ndarray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.nodes) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.support_mask)

    @property
    def n_support(self) -> int:
        return int(self.support_mask.sum())


def _stack(vectors: Sequence[Tensor]) -> Tensor:
    return ad.concat([ad.reshape(v, (1, v.size)) for v in vectors], axis=0)


def init_nodes(support_features: Sequence[Tensor],
               query_features: Sequence[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Stack features into ``V^(0)`` (support block first) and build the support mask."""
    if not support_features:
        raise ContractError("episode graph needs at least one support node")
    if not query_features:
        raise ContractError("episode graph needs at least one query node")
    feats = list(support_features) + list(query_features)
    dims = {f.size for f in feats}
    if len(dims) != 1 or any(f.ndim != 1 for f in feats):
        raise ContractError(f"node features must be vectors of one dimension, got {sorted(dims)}")
    mask = np.zeros(len(feats), dtype=bool)
    mask[: len(support_features)] = True
    return _stack(feats), mask


def init_nodes_flagged(features: Sequence[Tensor], is_support: Sequence[bool]):
    """Same as :func:`init_nodes` for a mixed list flagged per feature."""
    if len(features) != len(is_support):
        raise ContractError("one support flag per feature is required")
    support = [f for f, s in zip(features, is_support) if s]
    query = [f for f, s in zip(features, is_support) if not s]
    return init_nodes(support, query)


def pairwise_logits(V: Tensor, layer: GraphLayerParams) -> Tensor:
    """``R[i, j] = (W_q v_i) . (W_k v_j)``; asymmetric in general."""
    if V.ndim != 2 or V.shape[1] != layer.W_k.shape[1]:
        raise DimensionError(f"pairwise_logits: node matrix {V.shape} vs W_k {layer.W_k.shape}")
    queries = V @ layer.W_q.T
    keys = V @ layer.W_k.T
    return queries @ keys.T


def cosine_logits(V: Tensor) -> Tensor:
    """Cosine similarity of node features; ablation replacement for pairwise logits."""
    norms = ad.sqrt(ad.sum(V * V, axis=1))
    unit = V / ad.reshape(norms, (V.shape[0], 1))
    return unit @ unit.T


def edge_logits(V: Tensor, layer: GraphLayerParams, edge_mode: str = "pairwise-logits") -> Tensor:
    if edge_mode == "pairwise-logits":
        return pairwise_logits(V, layer)
    if edge_mode == "cosine":
        return cosine_logits(V)
    raise ContractError(f"unknown edge mode {edge_mode!r}; expected one of {EDGE_MODES}")


def support_pair_mask(support_mask: np.ndarray) -> np.ndarray:
    support_mask = np.asarray(support_mask, dtype=bool)
    return np.outer(support_mask, support_mask)


def init_edges(R: Tensor, support_mask: np.ndarray) -> Tensor:
    """Keep support-support entries of ``R``; every query-incident entry becomes 0."""
    keep = support_pair_mask(support_mask)
    if R.shape != keep.shape:
        raise DimensionError(f"init_edges: logits {R.shape} vs mask for {len(support_mask)} nodes")
    return R * keep.astype(np.float64)


def structural_mask(layer: int, support_mask: np.ndarray) -> np.ndarray:
    """Edges present in ``E^(layer)``: support pairs at layer 0, everything later."""
    if layer == 0:
        return support_pair_mask(support_mask)
    n = len(support_mask)
    return np.ones((n, n), dtype=bool)


def _affine(X: Tensor, W: Parameter, b: Parameter) -> Tensor:
    return X @ W.T + b


def aggregation_weights(E: Tensor, present: np.ndarray, mode: str = "masked-softmax"):
    """Row-normalized neighbour weights; returns ``(weights, guarded_rows)``."""
    if mode == "masked-softmax":
        return ad.masked_softmax(E, present, axis=1), np.zeros(E.shape[0], dtype=bool)
    if mode == "raw-sum":
        denom, small = ad.guard_denominator(ad.sum(E, axis=1), DENOMINATOR_GUARD)
        nonzero = np.any(E.data != 0, axis=1)
        if np.any(small & nonzero):
            warnings.warn(f"edge-sum denominator below {DENOMINATOR_GUARD} for rows "
                          f"{np.flatnonzero(small & nonzero).tolist()}; guarded value used",
                          NumericWarning, stacklevel=3)
        return E / ad.reshape(denom, (E.shape[0], 1)), small & nonzero
    raise ContractError(f"unknown aggregation mode {mode!r}; expected one of {AGGREGATION_MODES}")


def aggregate_and_update_nodes(V_prev: Tensor, E_prev: Tensor, layer: GraphLayerParams,
                               present: np.ndarray, mode: str = "masked-softmax"):
    """One node update: neighbour aggregation, MLP, residual, relu, affine.

    ``present`` marks the structurally existing edges of ``E_prev``.
    Returns ``(V_next, guarded_rows)``.
    """
    if layer.W4 is None:
        raise ContractError("layer 0 parameters cannot update nodes")
    weights, guarded = aggregation_weights(E_prev, present, mode)
    agg = weights @ V_prev
    hidden = _affine(ad.relu(_affine(agg, layer.mlp_W1, layer.mlp_b1)), layer.mlp_W2, layer.mlp_b2)
    return _affine(ad.relu(hidden + V_prev), layer.W4, layer.b4), guarded


def propagate(support_features: Sequence[Tensor], query_features: Sequence[Tensor],
              layers: Sequence[GraphLayerParams], n_layers: int | None = None,
              mode: str = "masked-softmax", edge_mode: str = "pairwise-logits") -> EpisodeGraph:
    """Build the graph and run ``n_layers`` rounds of node and edge updates."""
    n_layers = len(layers) - 1 if n_layers is None else n_layers
    if n_layers < 1:
        raise ContractError(f"need at least one propagation layer, got {n_layers}")
    if len(layers) < n_layers + 1:
        raise ContractError(f"{n_layers} layers need {n_layers + 1} parameter sets, got {len(layers)}")
    V, mask = init_nodes(support_features, query_features)
    E = init_edges(edge_logits(V, layers[0], edge_mode), mask)
    graph = EpisodeGraph(nodes=[V], edges=[E], support_mask=mask)
    for l in range(1, n_layers + 1):
        V, guarded = aggregate_and_update_nodes(V, E, layers[l], structural_mask(l - 1, mask), mode)
        E = edge_logits(V, layers[l], edge_mode)
        graph.nodes.append(V)
        graph.edges.append(E)
        graph.guarded_rows.append(guarded)
    return graph
