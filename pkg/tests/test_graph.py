import warnings

import numpy as np
import pytest

from irnet.autodiff import Tensor
from irnet.exceptions import ContractError, DimensionError, NumericWarning
from irnet.graph import (GraphLayerParams, aggregate_and_update_nodes, aggregation_weights,
                         cosine_logits, init_edges, init_nodes, init_nodes_flagged, pairwise_logits,
                         propagate, structural_mask)


def layers(d, n, seed=0):
    rng = np.random.default_rng(seed)
    return [GraphLayerParams.initialize(l, d, rng) for l in range(n + 1)]


def feats(rng, n, d):
    return [Tensor(rng.normal(size=d)) for _ in range(n)]


def naive_relu(x):
    return [max(v, 0.0) for v in x]


def naive_affine(W, x, b):
    return [sum(W[i, j] * x[j] for j in range(len(x))) + b[i] for i in range(W.shape[0])]


def naive_propagate(S, Q, Ls, n_layers, mode):
    """Node/edge recursion written with explicit loops over node pairs."""
    V = [list(v) for v in S + Q]
    n_s, m = len(S), len(S) + len(Q)

    def logits(V, L):
        Wq, Wk = L.W_q.data, L.W_k.data
        q = [Wq @ np.array(v) for v in V]
        k = [Wk @ np.array(v) for v in V]
        return [[float(q[i] @ k[j]) for j in range(m)] for i in range(m)]

    R = logits(V, Ls[0])
    E = [[R[i][j] if i < n_s and j < n_s else 0.0 for j in range(m)] for i in range(m)]
    out = [E]
    for l in range(1, n_layers + 1):
        L = Ls[l]
        newV = []
        for i in range(m):
            if mode == "masked-softmax":
                present = [(j < n_s and i < n_s) if l == 1 else True for j in range(m)]
                vals = [E[i][j] for j in range(m) if present[j]]
                top = max(vals) if vals else 0.0
                w = [np.exp(E[i][j] - top) if present[j] else 0.0 for j in range(m)]
                s = sum(w)
                w = [x / s if s > 0 else 0.0 for x in w]
            else:
                s = sum(E[i])
                s = s if abs(s) >= 1e-8 else (-1e-8 if s < 0 else 1e-8)
                w = [E[i][j] / s for j in range(m)]
            agg = [sum(w[j] * V[j][c] for j in range(m)) for c in range(len(V[0]))]
            h = naive_affine(L.mlp_W2.data, naive_relu(naive_affine(L.mlp_W1.data, agg, L.mlp_b1.data)),
                             L.mlp_b2.data)
            newV.append(naive_affine(L.W4.data, naive_relu([a + b for a, b in zip(h, V[i])]), L.b4.data))
        V = newV
        E = logits(V, L)
        out.append(E)
    return out


@pytest.mark.parametrize("mode", ["masked-softmax", "raw-sum"])
def test_propagate_matches_naive(mode):
    rng = np.random.default_rng(4)
    d, Ls = 5, layers(5, 2, seed=4)
    S, Q = feats(rng, 4, d), feats(rng, 3, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericWarning)
        graph = propagate(S, Q, Ls, 2, mode)
    ref = naive_propagate([s.data for s in S], [q.data for q in Q], Ls, 2, mode)
    for got, want in zip(graph.edges, ref):
        assert np.allclose(got.data, np.array(want), rtol=1e-10, atol=1e-10)


def test_init_edges_mask_queries_exactly():
    rng = np.random.default_rng(0)
    Ls = layers(4, 1)
    S, Q = feats(rng, 3, 4), feats(rng, 2, 4)
    g = propagate(S, Q, Ls, 1)
    E0 = g.edges[0].data
    assert (E0[3:, :] == 0).all() and (E0[:, 3:] == 0).all()
    assert (E0[:3, :3] != 0).all()
    assert (g.edges[1].data[:3, 3:] != 0).any()


def test_pairwise_logits_directed():
    rng = np.random.default_rng(1)
    L = layers(4, 0)[0]
    V = Tensor(rng.normal(size=(3, 4)))
    R = pairwise_logits(V, L).data
    i, j = 0, 2
    assert np.isclose(R[i, j], (L.W_q.data @ V.data[i]) @ (L.W_k.data @ V.data[j]))
    assert not np.allclose(R, R.T)


def test_cosine_logits():
    V = Tensor(np.array([[3.0, 4.0], [4.0, -3.0], [6.0, 8.0]]))
    C = cosine_logits(V).data
    assert np.allclose(C, [[1, 0, 1], [0, 1, 0], [1, 0, 1]])


def test_structural_mask_and_init_nodes():
    rng = np.random.default_rng(0)
    V, mask = init_nodes(feats(rng, 2, 3), feats(rng, 1, 3))
    assert V.shape == (3, 3) and mask.tolist() == [True, True, False]
    assert structural_mask(0, mask).sum() == 4 and structural_mask(1, mask).all()
    V2, mask2 = init_nodes_flagged([Tensor(np.ones(3)), Tensor(np.zeros(3))], [False, True])
    assert mask2.tolist() == [True, False] and V2.data[0].sum() == 0


def test_graph_input_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        init_nodes([], feats(rng, 1, 3))
    with pytest.raises(ContractError):
        init_nodes(feats(rng, 1, 3), [])
    with pytest.raises(ContractError):
        init_nodes(feats(rng, 1, 3), feats(rng, 1, 4))
    with pytest.raises(DimensionError):
        init_edges(Tensor(np.zeros((2, 2))), np.array([True, True, False]))
    with pytest.raises(DimensionError):
        pairwise_logits(Tensor(np.zeros((2, 5))), layers(4, 0)[0])
    with pytest.raises(ContractError):
        propagate(feats(rng, 1, 4), feats(rng, 1, 4), layers(4, 1), 2)
    with pytest.raises(ContractError):
        aggregate_and_update_nodes(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 2))),
                                   layers(4, 0)[0], np.ones((2, 2), bool))


def test_raw_sum_guard_warns_and_flags():
    E = Tensor(np.array([[1.0, -1.0], [0.0, 0.0]]))
    with pytest.warns(NumericWarning):
        W, guarded = aggregation_weights(E, np.ones((2, 2), bool), "raw-sum")
    assert guarded.tolist() == [True, False]
    assert np.allclose(W.data[0], [1e8, -1e8])
    assert not W.data[1].any()


def test_masked_softmax_rows_of_queries_are_empty_at_layer_zero():
    E = Tensor(np.array([[0.0, 2.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    present = structural_mask(0, np.array([True, True, False]))
    W, _ = aggregation_weights(E, present)
    assert np.allclose(W.data[:2].sum(axis=1), 1.0)
    assert not W.data[2].any()
    with pytest.raises(ContractError):
        aggregation_weights(E, present, "mean")
