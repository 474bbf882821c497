"""The bi-branch masked autoencoder.

Each branch (``node`` over atoms, ``edge`` over directed bonds) has an input
projection, ``N`` encoder blocks, an aggregation tail with a long-range
residual, a mask token, ``M`` decoder blocks and a reconstruction head.
Fine-tuning adds a shared self-attentive readout and one prediction
feed-forward per branch.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .batch import Graph
from .masking import reorder_with_mask_tokens
from .molgraph import EDGE_GROUPS, F_DUAL, F_EDGE, F_NODE, N_DESCRIPTORS, NODE_GROUPS
from .tensor import Tensor

log = logging.getLogger(__name__)

BRANCHES = ("node", "edge")

# the head-atom part of a dual-node target reuses the atom groups, shifted
DUAL_GROUPS = EDGE_GROUPS + tuple(
    (f"head_{name}", a + F_EDGE, b + F_EDGE, kind) for name, a, b, kind in NODE_GROUPS
)
GROUPS = {"node": NODE_GROUPS, "edge": DUAL_GROUPS}


class ConfigError(ValueError):
    pass


class EmptyMaskSet(ValueError):
    pass


class AllLabelsMissing(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 100
    n_encoder: int = 6
    n_decoder: int = 2
    heads: int = 2
    gnn_depth: int = 3
    mask_ratio: float = 0.6
    f_node: int = F_NODE
    f_edge: int = F_EDGE
    f_dual: int = F_DUAL
    attn_hidden: int = 128
    attn_out: int = 4
    pred_hidden: int = 100
    n_tasks: int = 1
    use_descriptors: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_decoder < 1:
            raise ConfigError("n_decoder must be >= 1")
        if self.n_decoder >= self.n_encoder:
            raise ConfigError("decoder must be shallower than encoder (n_decoder < n_encoder)")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError("d must be even for sinusoidal positions")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.gnn_depth < 1 or self.heads < 1:
            raise ConfigError("gnn_depth and heads must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def in_features(self, branch: str) -> int:
        return self.f_node if branch == "node" else self.f_dual

    def message_features(self, branch: str) -> int:
        # node graph messages carry bond features, dual graph messages carry atom features
        return self.f_edge if branch == "node" else self.f_node


def init_params(config: ModelConfig, seed: int = 0) -> OrderedDict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: OrderedDict[str, Tensor] = OrderedDict()
    d = config.d
    for br in BRANCHES:
        f_in, f_msg = config.in_features(br), config.message_features(br)
        nn.init_linear(p, f"{br}.in", f_in, d, rng)
        for i in range(config.n_encoder):
            nn.init_block(p, f"{br}.enc.{i}", d, f_msg, config.gnn_depth, config.heads, rng)
        nn.init_feed_forward(p, f"{br}.tail.ffn", 2 * d, d, d, rng)
        nn.init_layer_norm(p, f"{br}.tail.ln", d)
        p[f"{br}.dec.mask_token"] = T.parameter(np.zeros(d), f"{br}.dec.mask_token")
        for j in range(config.n_decoder):
            nn.init_block(p, f"{br}.dec.{j}", d, f_msg, config.gnn_depth, config.heads, rng)
        nn.init_linear(p, f"{br}.dec.head", d, f_in, rng)
    init_finetune_heads(p, config, rng)
    return p


def init_finetune_heads(p, config: ModelConfig, rng) -> None:
    nn.init_linear(p, "readout.W1", config.d, config.attn_hidden, rng, bias=False)
    nn.init_linear(p, "readout.W2", config.attn_hidden, config.attn_out, rng, bias=False)
    g_dim = config.attn_out * config.d + (N_DESCRIPTORS if config.use_descriptors else 0)
    for br in BRANCHES:
        nn.init_feed_forward(p, f"{br}.pred", g_dim, config.pred_hidden, config.n_tasks, rng)


def _block_count(d: int, f_msg: int, depth: int) -> int:
    gnn = 3 * depth * ((d + f_msg) * d + d)
    attn = 4 * d * d
    ffn = d * 4 * d + 4 * d + 4 * d * d + d
    return gnn + attn + ffn + 4 * d


def count_parameters(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Exact learnable-scalar count with a per-sub-module breakdown.

    Computed in closed form from the config; tests check it against the
    arrays :func:`init_params` produces.
    """
    d = config.d
    out: dict[str, int] = {}
    for br in BRANCHES:
        f_in, f_msg = config.in_features(br), config.message_features(br)
        block = _block_count(d, f_msg, config.gnn_depth)
        out[f"{br}.encoder"] = (
            f_in * d + d + config.n_encoder * block + (2 * d * d + d + d * d + d) + 2 * d
        )
        out[f"{br}.decoder"] = d + config.n_decoder * block + d * f_in + f_in
    g_dim = config.attn_out * d + (N_DESCRIPTORS if config.use_descriptors else 0)
    out["readout"] = d * config.attn_hidden + config.attn_hidden * config.attn_out
    pred = g_dim * config.pred_hidden + config.pred_hidden + config.pred_hidden * config.n_tasks + config.n_tasks
    out["node.pred"] = out["edge.pred"] = pred
    total = sum(out.values())
    for k, v in out.items():
        log.info("parameters %-14s %10d", k, v)
    log.info("parameters %-14s %10d", "total", total)
    return total, out


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class BranchOutput:
    tokens: Tensor  # encoder block output, one row per input token
    projected: Tensor  # input projection before positions (long-range residual source)
    aggregated: Tensor | None = None
    final: Tensor | None = None


def _tail(m: Tensor, residual: Tensor, p, br: str) -> Tensor:
    h = nn.feed_forward(T.concat([m, residual], axis=1), p, f"{br}.tail.ffn")
    return nn.layer_norm(h, p, f"{br}.tail.ln")


def encode_branch(graph: Graph, p, branch: str, config: ModelConfig, positions: bool = True,
                  rng: np.random.Generator | None = None, tail: bool = True) -> BranchOutput:
    """Project, add positions of the original indices, run the encoder
    blocks, then aggregate over in-neighbours and apply the tail."""
    dtype = p[f"{branch}.in.W"].data.dtype
    P = nn.linear(T.constant(graph.x, dtype), p, f"{branch}.in")
    H = P
    if positions:
        H = T.add(P, T.constant(nn.positional_encoding(graph.positions, config.d), dtype))
    for i in range(config.n_encoder):
        H = nn.gnn_attention_block(H, graph, p, f"{branch}.enc.{i}", config.gnn_depth,
                                   config.heads, config.dropout, rng)
    out = BranchOutput(tokens=H, projected=P)
    if tail:
        out.aggregated = T.scatter_add(T.gather_rows(H, graph.src), graph.dst, graph.n)
        out.final = _tail(out.aggregated, P, p, branch)
    return out


def decode_branch(full_tokens: Tensor, graph: Graph, p, branch: str, config: ModelConfig,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Decoder blocks over the full (unmasked) topology, then the linear head."""
    if full_tokens.shape[0] != graph.n:
        raise T.ShapeMismatch(f"decoder got {full_tokens.shape[0]} tokens for {graph.n} nodes")
    H = full_tokens
    for j in range(config.n_decoder):
        H = nn.gnn_attention_block(H, graph, p, f"{branch}.dec.{j}", config.gnn_depth,
                                   config.heads, config.dropout, rng)
    return nn.linear(H, p, f"{branch}.dec.head")


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class MaskedBranchInput:
    """Packed visible graph, packed full graph, and where the visible rows live."""

    visible: Graph
    full: Graph
    visible_rows: np.ndarray  # row in ``full`` of every row of ``visible``
    masked_rows: np.ndarray  # rows of ``full`` that were removed


def pretrain_forward(inputs: dict[str, MaskedBranchInput], p, config: ModelConfig,
                     rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    logits = {}
    for br, inp in inputs.items():
        enc = encode_branch(inp.visible, p, br, config, rng=rng)
        full = reorder_with_mask_tokens(enc.final, inp.visible_rows, inp.full.n,
                                        p[f"{br}.dec.mask_token"], positions=inp.full.positions)
        logits[br] = decode_branch(full, inp.full, p, br, config, rng)
    return logits


def group_loss(logits: Tensor, targets: np.ndarray, groups) -> tuple[Tensor, dict[str, tuple[int, int]]]:
    """Summed grouped cross-entropy over rows: softmax CE per categorical
    group plus binary CE per flag. Also returns (correct, total) per group."""
    dtype = logits.data.dtype
    total = None
    stats = {}
    for name, a, b, kind in groups:
        z = T.cols(logits, a, b)
        y = targets[:, a:b]
        if kind == "categorical":
            term = T.scale(T.sum(T.mul(T.log_softmax(z, axis=1), T.constant(y, dtype))), -1.0)
            correct = int((z.data.argmax(axis=1) == y.argmax(axis=1)).sum())
        else:
            yt = T.constant(y, dtype)
            term = T.sub(T.sum(T.softplus(z)), T.sum(T.mul(yt, z)))
            correct = int(((z.data > 0) == (y > 0.5)).sum())
        stats[name] = (correct, len(y))
        total = term if total is None else T.add(total, term)
    return total, stats


def pretrain_loss(node_logits: Tensor, node_targets: np.ndarray, node_masked,
                  edge_logits: Tensor, edge_targets: np.ndarray, edge_masked):
    """``L = L_node + L_edge``, each summed over masked items only.

    Visible rows are never read. ``*_masked`` is an index array or a
    :class:`~molmae.masking.MaskPlan`. Returns ``(loss, metrics)`` where
    metrics holds the two branch losses and per-group masked accuracy.
    """
    metrics: dict[str, float] = {}
    parts = []
    for br, z, y, masked in (("node", node_logits, node_targets, node_masked),
                             ("edge", edge_logits, edge_targets, edge_masked)):
        rows = np.asarray(getattr(masked, "masked", masked), dtype=np.int64)
        if rows.size == 0:
            raise EmptyMaskSet(f"{br} branch has no masked items")
        if z.shape != y.shape:
            raise T.ShapeMismatch(f"{br}: logits {z.shape} vs targets {y.shape}")
        loss, stats = group_loss(T.gather_rows(z, rows), y[rows], GROUPS[br])
        parts.append(loss)
        metrics[f"{br}_loss"] = float(loss.data)
        for name, (c, n) in stats.items():
            metrics[f"{br}_{name}_acc"] = c / n
        metrics[f"{br}_masked"] = float(rows.size)
    loss = T.add(parts[0], parts[1])
    metrics["loss"] = float(loss.data)
    return loss, metrics


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneInput:
    node: Graph  # packed full node graphs
    dual: Graph  # packed full dual graphs
    dual_tails: np.ndarray  # atom row (in ``node``) each dual row points into
    descriptors: np.ndarray | None = None  # (B, 24)


def self_attentive_readout(H: Tensor, graph_of: np.ndarray, n_graphs: int, p,
                           config: ModelConfig, return_weights: bool = False):
    """``S = softmax(W2 tanh(W1 H^T))`` per graph, ``g = Flatten(S H)``."""
    A = T.tanh(T.matmul(H, p["readout.W1.W"]))
    Z = T.transpose(T.matmul(A, p["readout.W2.W"]))  # (a_out, n)
    a_out = config.attn_out
    rows = T.gather_rows(Z, np.tile(np.arange(a_out), n_graphs))
    owner = np.repeat(np.arange(n_graphs), a_out)
    mask = np.where(owner[:, None] == np.asarray(graph_of)[None, :], 0.0, -np.inf)
    S = T.softmax(T.add(rows, T.constant(mask, H.data.dtype)), axis=1)
    g = T.reshape(T.matmul(S, H), (n_graphs, a_out * config.d))
    return (g, S) if return_weights else g


def finetune_embeddings(inp: FinetuneInput, p, config: ModelConfig, positions: bool = True,
                        rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Per-atom embeddings from each branch on complete molecules."""
    node = encode_branch(inp.node, p, "node", config, positions, rng)
    edge = encode_branch(inp.dual, p, "edge", config, positions, rng, tail=False)
    n_atoms = inp.node.n
    m_edge = T.scatter_add(edge.tokens, inp.dual_tails, n_atoms)
    r_edge = T.scatter_add(edge.projected, inp.dual_tails, n_atoms)
    return {"node": node.final, "edge": _tail(m_edge, r_edge, p, "edge")}


def finetune_forward(inp: FinetuneInput, p, config: ModelConfig, positions: bool = True,
                     rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Logits of both branches plus the averaged probability ``final``."""
    emb = finetune_embeddings(inp, p, config, positions, rng)
    n_graphs = inp.node.n_graphs
    out = {}
    for br in BRANCHES:
        g = self_attentive_readout(emb[br], inp.node.graph_of, n_graphs, p, config)
        if config.use_descriptors:
            if inp.descriptors is None:
                raise T.ShapeMismatch("model expects descriptors but none were given")
            g = T.concat([g, T.constant(np.log1p(np.maximum(inp.descriptors, 0.0)), g.data.dtype)],
                         axis=1)
        out[br] = nn.feed_forward(g, p, f"{br}.pred")
    out["final"] = T.scale(T.add(T.sigmoid(out["node"]), T.sigmoid(out["edge"])), 0.5)
    return out


def disagreement(p_node: Tensor, p_edge: Tensor) -> Tensor:
    """Per-molecule L2 distance between the two branch probability vectors."""
    return T.l2_norm(T.sub(p_node, p_edge), axis=1)


def finetune_loss(node_logits: Tensor, edge_logits: Tensor, y: np.ndarray, present: np.ndarray):
    """Supervised BCE of both branches over present labels plus disagreement.

    Each branch's BCE is averaged over the present labels; the disagreement
    is averaged over molecules. Returns ``(loss, parts)``.
    """
    present = np.asarray(present, dtype=bool)
    if not present.any():
        raise AllLabelsMissing("no labels present in batch")
    dtype = node_logits.data.dtype
    w = T.constant(present / present.sum(), dtype)
    yt = T.constant(np.where(present, y, 0.0), dtype)
    sup = []
    for z in (node_logits, edge_logits):
        bce = T.sub(T.softplus(z), T.mul(yt, z))
        sup.append(T.sum(T.mul(bce, w)))
    diss = T.mean(disagreement(T.sigmoid(node_logits), T.sigmoid(edge_logits)))
    loss = T.add(T.add(sup[0], sup[1]), diss)
    return loss, {"sup_node": float(sup[0].data), "sup_edge": float(sup[1].data),
                  "disagreement": float(diss.data), "loss": float(loss.data)}


def encoder_param_names(p: Sequence[str]) -> list[str]:
    """Names of parameters that carry over from pre-training to fine-tuning."""
    keep = []
    for name in p:
        br, _, rest = name.partition(".")
        if br in BRANCHES and rest.split(".")[0] in ("in", "enc", "tail"):
            keep.append(name)
    return keep
