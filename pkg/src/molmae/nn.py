"""Network building blocks: positions, message passing, attention, and the
GNN-attention block whose queries, keys and values each come from a GNN.

Parameters live in a flat ``dict[str, Tensor]``; every function takes the
dict plus the name prefix of its own sub-module.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .batch import Graph
from .tensor import Tensor

Params = dict[str, Tensor]


class OddDimension(ValueError):
    pass


def positional_encoding(positions, d: int, dtype=None) -> np.ndarray:
    """Sinusoidal table: sin at even slots, cos at odd slots."""
    if d % 2:
        raise OddDimension(f"positional encoding needs an even size, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    out = np.empty((len(pos), d))
    out[:, 0::2] = np.sin(pos / freq)
    out[:, 1::2] = np.cos(pos / freq)
    return out.astype(dtype or T.get_dtype())


# ---------------------------------------------------------------------------
# initialisation


def init_linear(p: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(n_in)
    p[f"{name}.W"] = T.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}.W")
    if bias:
        p[f"{name}.b"] = T.parameter(np.zeros(n_out), f"{name}.b")


def init_layer_norm(p: Params, name: str, d: int) -> None:
    p[f"{name}.gamma"] = T.parameter(np.ones(d), f"{name}.gamma")
    p[f"{name}.beta"] = T.parameter(np.zeros(d), f"{name}.beta")


def linear(x: Tensor, p: Params, name: str) -> Tensor:
    y = T.matmul(x, p[f"{name}.W"])
    b = p.get(f"{name}.b")
    return T.add(y, b) if b is not None else y


def layer_norm(x: Tensor, p: Params, name: str) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def init_gnn(p: Params, name: str, d: int, f_edge: int, depth: int, rng) -> None:
    """One ``W^(k), b^(k)`` per step acting on summed ``[h_u ; e_uv]`` messages."""
    if depth < 1:
        raise ValueError("GNN depth must be >= 1")
    for k in range(depth):
        init_linear(p, f"{name}.{k}", d + f_edge, d, rng)


def init_attention(p: Params, name: str, d: int, heads: int, rng) -> None:
    if d % heads:
        raise ValueError(f"hidden size {d} not divisible by {heads} heads")
    dk = d // heads
    for i in range(heads):
        for w in ("q", "k", "v"):
            init_linear(p, f"{name}.{w}{i}", d, dk, rng, bias=False)
    init_linear(p, f"{name}.o", d, d, rng, bias=False)


def init_feed_forward(p: Params, name: str, d_in: int, d_hidden: int, d_out: int, rng) -> None:
    init_linear(p, f"{name}.0", d_in, d_hidden, rng)
    init_linear(p, f"{name}.1", d_hidden, d_out, rng)


def feed_forward(x: Tensor, p: Params, name: str) -> Tensor:
    return linear(T.relu(linear(x, p, f"{name}.0")), p, f"{name}.1")


def init_block(p: Params, name: str, d: int, f_edge: int, depth: int, heads: int, rng) -> None:
    for which in ("gq", "gk", "gv"):
        init_gnn(p, f"{name}.{which}", d, f_edge, depth, rng)
    init_attention(p, f"{name}.attn", d, heads, rng)
    init_layer_norm(p, f"{name}.ln1", d)
    init_feed_forward(p, f"{name}.ffn", d, 4 * d, d, rng)
    init_layer_norm(p, f"{name}.ln2", d)


# ---------------------------------------------------------------------------
# forward


def gnn_forward(H: Tensor, graph: Graph, p: Params, name: str, depth: int,
                edge_attr: Tensor | None = None) -> Tensor:
    """``depth`` rounds of ``h_v <- h_v + relu(W (sum_u [h_u ; e_uv]) + b)``.

    The residual keeps a node's own state in the update; a node without
    neighbours receives ``relu(b)`` on top of its current state.
    """
    if H.shape[0] != graph.n:
        raise T.ShapeMismatch(f"gnn_forward: {H.shape[0]} states for {graph.n} nodes")
    e = edge_attr if edge_attr is not None else T.constant(graph.edge_attr, H.data.dtype)
    for k in range(depth):
        msg = T.concat([T.gather_rows(H, graph.src), e], axis=1)
        m = T.scatter_add(msg, graph.dst, graph.n)
        H = T.add(H, T.relu(linear(m, p, f"{name}.{k}")))
    return H


def multi_head_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None, p: Params,
                         name: str, heads: int, return_weights: bool = False):
    """Scaled dot-product attention per head, heads concatenated, then ``W^O``.

    ``mask`` is an additive ``(n, n)`` array (0 allowed, -inf blocked).
    """
    n = Q.shape[0]
    if K.shape[0] != n or V.shape[0] != n:
        raise T.ShapeMismatch(f"multi_head_attention: rows {Q.shape}, {K.shape}, {V.shape}")
    mask_t = T.constant(mask, Q.data.dtype) if mask is not None else None
    outs, weights = [], []
    for i in range(heads):
        q = T.matmul(Q, p[f"{name}.q{i}.W"])
        k = T.matmul(K, p[f"{name}.k{i}.W"])
        v = T.matmul(V, p[f"{name}.v{i}.W"])
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
        if mask_t is not None:
            scores = T.add(scores, mask_t)
        a = T.softmax(scores, axis=1)
        weights.append(a)
        outs.append(T.matmul(a, v))
    out = T.matmul(T.concat(outs, axis=1), p[f"{name}.o.W"])
    return (out, weights) if return_weights else out


def gnn_attention_block(H: Tensor, graph: Graph, p: Params, name: str, depth: int, heads: int,
                        dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    e = T.constant(graph.edge_attr, H.data.dtype)
    Q = gnn_forward(H, graph, p, f"{name}.gq", depth, e)
    K = gnn_forward(H, graph, p, f"{name}.gk", depth, e)
    V = gnn_forward(H, graph, p, f"{name}.gv", depth, e)
    A = multi_head_attention(Q, K, V, graph.attention_mask, p, f"{name}.attn", heads)
    X = layer_norm(T.add(H, A), p, f"{name}.ln1")
    Y = layer_norm(T.add(X, feed_forward(X, p, f"{name}.ffn")), p, f"{name}.ln2")
    return T.dropout(Y, dropout, rng)
