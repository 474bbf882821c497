"""Message graphs and their block-diagonal packing.

Both branches reduce to the same shape of input: tokens with features, a list
of directed message edges ``src -> dst`` with edge attributes, the original
position of each token inside its molecule, and the molecule it belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .molgraph import DualGraph, NodeGraph


@dataclass
class Graph:
    x: np.ndarray  # (n, F) token features
    src: np.ndarray  # (E,) message source token
    dst: np.ndarray  # (E,) message target token
    edge_attr: np.ndarray  # (E, F_e)
    positions: np.ndarray  # (n,) index of each token in its original molecule ordering
    graph_of: np.ndarray = field(default=None)  # (n,) molecule id within a batch
    offsets: np.ndarray = field(default=None)  # (B + 1,) token offsets per molecule

    def __post_init__(self):
        n = len(self.x)
        if self.graph_of is None:
            self.graph_of = np.zeros(n, dtype=np.int64)
        if self.offsets is None:
            self.offsets = np.array([0, n], dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def n_graphs(self) -> int:
        return len(self.offsets) - 1

    @cached_property
    def attention_mask(self) -> np.ndarray:
        """Additive mask: 0 inside a molecule's block, -inf across molecules."""
        same = self.graph_of[:, None] == self.graph_of[None, :]
        return np.where(same, 0.0, -np.inf)


def from_node_graph(g: NodeGraph) -> Graph:
    e = g.directed_edges
    return Graph(
        x=g.node_features,
        src=e[:, 0].copy(),
        dst=e[:, 1].copy(),
        edge_attr=g.edge_features,
        positions=np.arange(g.n_nodes),
    )


def from_dual_graph(dg: DualGraph) -> Graph:
    e = dg.dual_edges
    return Graph(
        x=dg.dual_node_features,
        src=e[:, 0].copy(),
        dst=e[:, 1].copy(),
        edge_attr=dg.dual_edge_features,
        positions=np.arange(dg.n_dual_nodes),
    )


def pack(graphs: Sequence[Graph]) -> Graph:
    """Concatenate graphs into one block-diagonal graph."""
    sizes = np.array([g.n for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    shift = [np.full(len(g.src), off, dtype=np.int64) for g, off in zip(graphs, offsets[:-1])]
    f = graphs[0].x.shape[1]
    fe = graphs[0].edge_attr.shape[1]
    return Graph(
        x=np.concatenate([g.x for g in graphs]).reshape(-1, f),
        src=np.concatenate([g.src + s for g, s in zip(graphs, shift)]).astype(np.int64),
        dst=np.concatenate([g.dst + s for g, s in zip(graphs, shift)]).astype(np.int64),
        edge_attr=np.concatenate([g.edge_attr for g in graphs]).reshape(-1, fe),
        positions=np.concatenate([g.positions for g in graphs]).astype(np.int64),
        graph_of=np.repeat(np.arange(len(graphs)), sizes),
        offsets=offsets,
    )
