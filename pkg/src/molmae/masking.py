"""Seeded masking of nodes / directed edges and feature reordering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .batch import Graph
from .molgraph import DualGraph, NodeGraph
from .nn import positional_encoding
from .tensor import Tensor


class TooFewItems(ValueError):
    pass


class RatioOutOfRange(ValueError):
    pass


class PlanMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    n_items: int
    ratio: float
    masked: np.ndarray
    visible: np.ndarray
    seed: int

    @property
    def is_masked(self) -> np.ndarray:
        out = np.zeros(self.n_items, dtype=bool)
        out[self.masked] = True
        return out


def mask_count(n_items: int, ratio: float) -> int:
    return min(max(math.floor(ratio * n_items), 1), n_items - 1)


def sample_mask_plan(n_items: int, ratio: float, seed: int) -> MaskPlan:
    """Uniformly choose ``clamp(floor(ratio * n), 1, n - 1)`` items to mask.

    Uses a Philox counter-based generator keyed by ``seed``.
    """
    if n_items < 2:
        raise TooFewItems(f"need at least 2 items to mask, got {n_items}")
    if not 0.0 < ratio < 1.0:
        raise RatioOutOfRange(f"mask ratio must be in (0, 1), got {ratio}")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    k = mask_count(n_items, ratio)
    chosen = rng.choice(n_items, size=k, replace=False)
    masked = np.sort(chosen).astype(np.int64)
    visible = np.setdiff1d(np.arange(n_items), masked).astype(np.int64)
    return MaskPlan(n_items, float(ratio), masked, visible, int(seed))


def derive_seed(run_seed: int, *key: int) -> int:
    """Independent 64-bit seed for a (run, branch, step, item, ...) key."""
    ss = np.random.SeedSequence(entropy=int(run_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def _induced(x, src, dst, edge_attr, keep_nodes: np.ndarray, n: int) -> Graph:
    remap = np.full(n, -1, dtype=np.int64)
    remap[keep_nodes] = np.arange(len(keep_nodes))
    keep_edges = (remap[src] >= 0) & (remap[dst] >= 0)
    return Graph(
        x=x[keep_nodes],
        src=remap[src[keep_edges]],
        dst=remap[dst[keep_edges]],
        edge_attr=edge_attr[keep_edges],
        positions=keep_nodes.copy(),
    )


def extract_visible_node_graph(g: NodeGraph, plan: MaskPlan) -> tuple[Graph, np.ndarray]:
    """Induced subgraph on visible atoms plus the original index of each survivor."""
    if plan.n_items != g.n_nodes:
        raise PlanMismatch(f"plan covers {plan.n_items} items, graph has {g.n_nodes} nodes")
    e = g.directed_edges
    sub = _induced(g.node_features, e[:, 0], e[:, 1], g.edge_features, plan.visible, g.n_nodes)
    return sub, plan.visible.copy()


def extract_visible_dual_graph(dg: DualGraph, plan: MaskPlan) -> tuple[Graph, np.ndarray]:
    """Induced dual subgraph on visible directed edges.

    Masking ``u -> v`` leaves ``v -> u`` untouched.
    """
    if plan.n_items != dg.n_dual_nodes:
        raise PlanMismatch(f"plan covers {plan.n_items} items, dual graph has {dg.n_dual_nodes}")
    e = dg.dual_edges
    sub = _induced(dg.dual_node_features, e[:, 0], e[:, 1], dg.dual_edge_features,
                   plan.visible, dg.n_dual_nodes)
    return sub, plan.visible.copy()


def reorder_with_mask_tokens(encoder_out: Tensor, visible: np.ndarray, n_full: int,
                             mask_token: Tensor, add_positions: bool = True,
                             positions: np.ndarray | None = None) -> Tensor:
    """Place encoder rows at their original positions and mask tokens elsewhere.

    ``visible`` holds the full-graph row of each encoder row. Sinusoidal
    position embeddings of the full ordering are added afterwards;
    ``positions`` overrides the per-row position index (used for packed
    batches, where row order and in-molecule position differ).
    """
    visible = np.asarray(visible, dtype=np.int64)
    if encoder_out.shape[0] != len(visible):
        raise PlanMismatch(f"{encoder_out.shape[0]} encoder rows for {len(visible)} visible items")
    d = encoder_out.shape[1]
    if mask_token.shape != (d,):
        raise T.ShapeMismatch(f"mask token shape {mask_token.shape} != ({d},)")
    is_vis = np.zeros(n_full, dtype=bool)
    is_vis[visible] = True
    hidden = np.flatnonzero(~is_vis)
    # source rows: encoder rows first, then copies of the mask token
    stacked = T.concat([encoder_out, T.reshape(mask_token, (1, d))], axis=0)
    order = np.empty(n_full, dtype=np.int64)
    order[visible] = np.arange(len(visible))
    order[hidden] = len(visible)
    out = T.gather_rows(stacked, order)
    if add_positions:
        pos = np.arange(n_full) if positions is None else positions
        out = T.add(out, T.constant(positional_encoding(pos, d), encoder_out.data.dtype))
    return out
