"""Optimisation, batching, data splits, metrics and the train loops."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .batch import Graph, from_dual_graph, from_node_graph, pack
from .masking import (derive_seed, extract_visible_dual_graph, extract_visible_node_graph,
                      sample_mask_plan)
from .model import (FinetuneInput, MaskedBranchInput, ModelConfig, encoder_param_names,
                    finetune_forward, finetune_loss, init_finetune_heads, init_params,
                    pretrain_forward, pretrain_loss)
from .molgraph import (DualGraph, Molecule, NodeGraph, build_dual_graph, build_node_graph,
                       compute_descriptors, parse_smiles)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP = 5.0

NODE_BRANCH_KEY = 1
EDGE_BRANCH_KEY = 2


class NonPositiveStep(ValueError):
    pass


class TooFewItems(ValueError):
    pass


class SingleClass(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimiser


def noam_lr(step: int, d: int, warmup: int, factor: float = 1.0) -> float:
    """``factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise NonPositiveStep(f"step must be >= 1, got {step}")
    return factor * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeMismatch(f"adam_step: grad {g.shape} for param {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = GRAD_CLIP) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ---------------------------------------------------------------------------
# data


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {self.ratios}")


def split_dataset(items: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous train/valid/test cuts."""
    n = len(items)
    if n < 3:
        raise TooFewItems(f"need at least 3 items to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(math.floor(spec.ratios[0] * n + 1e-9))
    n_valid = int(math.floor(spec.ratios[1] * n + 1e-9))
    pick = [items[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_valid], pick[n_train + n_valid:]


@dataclass
class MolRecord:
    mol: Molecule
    node_graph: NodeGraph
    dual_graph: DualGraph
    node: Graph
    dual: Graph
    descriptors: np.ndarray

    @property
    def smiles(self) -> str:
        return self.mol.source_text


def make_record(smiles: str) -> MolRecord:
    mol = parse_smiles(smiles)
    g = build_node_graph(mol)
    dg = build_dual_graph(g)
    return MolRecord(mol, g, dg, from_node_graph(g), from_dual_graph(dg), compute_descriptors(mol))


def records_from_smiles(smiles: Iterable[str], strict: bool = False) -> tuple[list[MolRecord], list[tuple[int, str]]]:
    """Parse a corpus; returns records and ``(index, error)`` for rejects."""
    out, bad = [], []
    for i, s in enumerate(smiles):
        try:
            out.append(make_record(s))
        except ValueError as exc:
            if strict:
                raise
            bad.append((i, str(exc)))
    if bad:
        log.warning("skipped %d unparseable molecules", len(bad))
    return out, bad


def maskable(rec: MolRecord) -> bool:
    return rec.mol.n_atoms >= 2 and rec.dual_graph.n_dual_nodes >= 2


def pretrain_batch(records: Sequence[MolRecord], ratio: float, run_seed: int, step: int,
                   ids: Sequence[int]) -> dict[str, MaskedBranchInput]:
    """Per-molecule masks (independent seeds per branch), packed per branch.

    ``ids`` are the corpus indices of ``records`` so masks depend only on
    (seed, step, molecule), never on batch composition.
    """
    out = {}
    for br, key in (("node", NODE_BRANCH_KEY), ("edge", EDGE_BRANCH_KEY)):
        vis, full, vis_rows, masked_rows = [], [], [], []
        offset = 0
        for rec, mid in zip(records, ids):
            g_full = rec.node if br == "node" else rec.dual
            n = g_full.n
            plan = sample_mask_plan(n, ratio, derive_seed(run_seed, key, step, mid))
            if br == "node":
                sub, keep = extract_visible_node_graph(rec.node_graph, plan)
            else:
                sub, keep = extract_visible_dual_graph(rec.dual_graph, plan)
            vis.append(sub)
            full.append(g_full)
            vis_rows.append(keep + offset)
            masked_rows.append(plan.masked + offset)
            offset += n
        out[br] = MaskedBranchInput(pack(vis), pack(full), np.concatenate(vis_rows),
                                    np.concatenate(masked_rows))
    return out


def finetune_batch(records: Sequence[MolRecord]) -> FinetuneInput:
    node = pack([r.node for r in records])
    dual = pack([r.dual for r in records])
    tails = np.concatenate([r.dual_graph.tails + off
                            for r, off in zip(records, node.offsets[:-1])]).astype(np.int64)
    return FinetuneInput(node, dual, tails, np.stack([r.descriptors for r in records]))


# ---------------------------------------------------------------------------
# metrics


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of ROC-AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("roc_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multitask_auc(probs: np.ndarray, y: np.ndarray, present: np.ndarray) -> tuple[float, list[float | None]]:
    """Mean AUC over tasks that have both classes; skipped tasks give None."""
    per = []
    for t in range(y.shape[1]):
        m = present[:, t].astype(bool)
        try:
            per.append(roc_auc(probs[m, t], y[m, t]))
        except SingleClass:
            log.warning("task %d has a single class among present labels; skipped", t)
            per.append(None)
    ok = [a for a in per if a is not None]
    return (float(np.mean(ok)) if ok else float("nan")), per


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    steps: int = 1000
    epochs: int = 30
    warmup: int = 4000
    lr_factor: float = 1.0
    grad_clip: float = GRAD_CLIP
    checkpoint_every: int = 0
    log_every: int = 50


def _params_grads(params) -> dict[str, np.ndarray]:
    return {k: v.grad for k, v in params.items() if v.grad is not None}


def _zero(params) -> None:
    for v in params.values():
        v.grad = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield order[s:s + batch_size]


def pretrain_step(params, records: Sequence[MolRecord], ids: Sequence[int], model: ModelConfig,
                  seed: int, step: int, rng: np.random.Generator | None = None):
    """Forward + backward on one batch; returns (loss tensor, metrics).

    The optimised loss is the masked reconstruction loss summed over masked
    items and averaged over molecules in the batch.
    """
    batch = pretrain_batch(records, model.mask_ratio, seed, step, ids)
    with T.recording() as tape:
        logits = pretrain_forward(batch, params, model, rng)
        loss, metrics = pretrain_loss(
            logits["node"], batch["node"].full.x, batch["node"].masked_rows,
            logits["edge"], batch["edge"].full.x, batch["edge"].masked_rows)
        scaled = T.scale(loss, 1.0 / len(records))
        T.backward(scaled, tape, leaves=params.values())
    metrics["loss_per_mol"] = float(scaled.data)
    return scaled, metrics


@dataclass
class PretrainResult:
    params: dict
    trace: list[dict]
    checkpoints: list[int]


def pretrain_loop(records: Sequence[MolRecord], model: ModelConfig, train: TrainConfig,
                  params=None, on_step: Callable[[int, dict], None] | None = None,
                  on_checkpoint: Callable[[int, dict], None] | None = None) -> PretrainResult:
    """Masked reconstruction pre-training with Adam + Noam.

    Raises :class:`NumericFailure` on a non-finite loss.
    """
    records = [r for r in records if maskable(r)]
    if not records:
        raise ValueError("no molecule in the corpus has >= 2 atoms and >= 1 bond")
    params = params if params is not None else init_params(model, train.seed)
    state = AdamState()
    rng = np.random.default_rng(derive_seed(train.seed, 7))
    drop_rng = np.random.default_rng(derive_seed(train.seed, 8)) if model.dropout > 0 else None
    batches = _batches(len(records), train.batch_size, rng)
    trace, ckpts = [], []
    t0 = time.perf_counter()
    for step in range(1, train.steps + 1):
        ids = next(batches)
        _zero(params)
        loss, m = pretrain_step(params, [records[i] for i in ids], ids, model, train.seed, step,
                                drop_rng)
        if not np.isfinite(loss.data):
            raise NumericFailure(f"non-finite loss {loss.data} at step {step}; metrics {m}")
        grads = _params_grads(params)
        gnorm = clip_grad_norm(grads, train.grad_clip)
        lr = noam_lr(step, model.d, train.warmup, train.lr_factor)
        adam_step(params, grads, state, lr)
        row = {**m, "step": step, "loss": m["loss_per_mol"], "batch_loss": m["loss"],
               "node_acc": m["node_element_acc"], "edge_acc": m["edge_bond_order_acc"], "lr": lr,
               "grad_norm": gnorm}
        trace.append(row)
        if on_step:
            on_step(step, row)
        if train.log_every and step % train.log_every == 0:
            log.info("step %d loss %.4f node_acc %.3f edge_acc %.3f (%.1fs)", step, row["loss"],
                     row["node_acc"], row["edge_acc"], time.perf_counter() - t0)
        if on_checkpoint and train.checkpoint_every and step % train.checkpoint_every == 0:
            on_checkpoint(step, params)
            ckpts.append(step)
    _zero(params)
    return PretrainResult(params, trace, ckpts)


def evaluate_reconstruction(params, records: Sequence[MolRecord], model: ModelConfig, seed: int,
                            batch_size: int = 64) -> dict[str, float]:
    """Masked reconstruction metrics on fixed masks, plus majority baselines."""
    from .molgraph import NODE_GROUPS

    records = [r for r in records if maskable(r)]
    correct = total = 0
    loss = 0.0
    counts = np.zeros(NODE_GROUPS[0][2] - NODE_GROUPS[0][1])
    edge_correct = edge_total = 0
    with T.no_grad():
        for s in range(0, len(records), batch_size):
            chunk = records[s:s + batch_size]
            ids = list(range(s, s + len(chunk)))
            batch = pretrain_batch(chunk, model.mask_ratio, seed, 0, ids)
            logits = pretrain_forward(batch, params, model)
            l, m = pretrain_loss(logits["node"], batch["node"].full.x, batch["node"].masked_rows,
                                 logits["edge"], batch["edge"].full.x, batch["edge"].masked_rows)
            loss += float(l.data)
            n_mask = int(m["node_masked"])
            correct += round(m["node_element_acc"] * n_mask)
            total += n_mask
            y = batch["node"].full.x[batch["node"].masked_rows]
            counts += y[:, 0:10].sum(axis=0)
            ne = int(m["edge_masked"])
            edge_correct += round(m["edge_bond_order_acc"] * ne)
            edge_total += ne
    return {
        "loss_per_mol": loss / len(records),
        "node_element_acc": correct / total,
        "node_element_majority": float(counts.max() / counts.sum()),
        "edge_bond_order_acc": edge_correct / edge_total,
    }


def transfer_encoder(pretrained: dict, model: ModelConfig, seed: int):
    """Fresh parameter set with encoder weights copied from ``pretrained``."""
    params = init_params(model, seed)
    for name in encoder_param_names(params):
        if name not in pretrained:
            raise ConfigMismatch(f"pretrained checkpoint lacks {name}")
        src = pretrained[name].data
        if src.shape != params[name].data.shape:
            raise ConfigMismatch(f"{name}: pretrained shape {src.shape} != {params[name].data.shape}")
        params[name].data = src.astype(params[name].data.dtype).copy()
    return params


@dataclass
class LabeledSet:
    records: list[MolRecord]
    y: np.ndarray  # (n, tasks), missing entries arbitrary
    present: np.ndarray  # (n, tasks) bool


def subset(ds: LabeledSet, idx: Sequence[int]) -> LabeledSet:
    idx = list(idx)
    return LabeledSet([ds.records[i] for i in idx], ds.y[idx], ds.present[idx])


def predict(params, ds: LabeledSet, model: ModelConfig, batch_size: int = 64) -> dict[str, np.ndarray]:
    outs = {"node": [], "edge": [], "final": []}
    with T.no_grad():
        for s in range(0, len(ds.records), batch_size):
            o = finetune_forward(finetune_batch(ds.records[s:s + batch_size]), params, model)
            outs["node"].append(T._sigmoid(o["node"].data.astype(np.float64)))
            outs["edge"].append(T._sigmoid(o["edge"].data.astype(np.float64)))
            outs["final"].append(o["final"].data.astype(np.float64))
    return {k: np.concatenate(v) for k, v in outs.items()}


def evaluate_auc(params, ds: LabeledSet, model: ModelConfig) -> tuple[float, list[float | None]]:
    probs = predict(params, ds, model)["final"]
    return multitask_auc(probs, ds.y, ds.present)


@dataclass
class FinetuneResult:
    params: dict
    trace: list[dict]
    best_epoch: int
    best_valid_auc: float
    test_auc: float
    per_task_test_auc: list


def finetune_loop(train_set: LabeledSet, valid_set: LabeledSet, test_set: LabeledSet,
                  model: ModelConfig, train: TrainConfig, params,
                  on_epoch: Callable[[int, dict], None] | None = None) -> FinetuneResult:
    """End-to-end fine-tuning; keeps the epoch with best validation AUC."""
    state = AdamState()
    rng = np.random.default_rng(derive_seed(train.seed, 11))
    drop_rng = np.random.default_rng(derive_seed(train.seed, 12)) if model.dropout > 0 else None
    n = len(train_set.records)
    step = 0
    trace = []
    best = (-1.0, 0, None)
    init_diss = None
    for epoch in range(1, train.epochs + 1):
        order = rng.permutation(n)
        losses, diss = [], []
        for s in range(0, n, train.batch_size):
            ids = order[s:s + train.batch_size]
            present = train_set.present[ids]
            if not present.any():
                continue
            step += 1
            _zero(params)
            with T.recording() as tape:
                out = finetune_forward(finetune_batch([train_set.records[i] for i in ids]),
                                       params, model, rng=drop_rng)
                loss, parts = finetune_loss(out["node"], out["edge"], train_set.y[ids], present)
                T.backward(loss, tape, leaves=params.values())
            if not np.isfinite(loss.data):
                raise NumericFailure(f"non-finite fine-tune loss at epoch {epoch} step {step}")
            if init_diss is None:
                init_diss = parts["disagreement"]
            grads = _params_grads(params)
            clip_grad_norm(grads, train.grad_clip)
            adam_step(params, grads, state, noam_lr(step, model.d, train.warmup, train.lr_factor))
            losses.append(parts["loss"])
            diss.append(parts["disagreement"])
        _zero(params)
        valid_auc = evaluate_auc(params, valid_set, model)[0]
        test_auc = evaluate_auc(params, test_set, model)[0]
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_auc": valid_auc,
               "test_auc": test_auc, "disagreement": float(np.mean(diss)),
               "initial_disagreement": init_diss}
        trace.append(row)
        if on_epoch:
            on_epoch(epoch, row)
        log.info("epoch %d loss %.4f valid_auc %.4f test_auc %.4f", epoch, row["train_loss"],
                 valid_auc, test_auc)
        if np.isfinite(valid_auc) and valid_auc > best[0]:
            best = (valid_auc, epoch, {k: v.data.copy() for k, v in params.items()})
    if best[2] is not None:
        for k, v in params.items():
            v.data = best[2][k]
    test_auc, per_task = evaluate_auc(params, test_set, model)
    return FinetuneResult(params, trace, best[1], best[0], test_auc, per_task)


# ---------------------------------------------------------------------------
# mask-ratio ablation


@dataclass
class AblationRow:
    ratio: float
    pretrain_loss: float
    node_element_acc: float
    edge_bond_order_acc: float
    downstream_auc: float


def ablate_mask_ratio(records: Sequence[MolRecord], labels: LabeledSet, ratios: Sequence[float],
                      model: ModelConfig, pretrain: TrainConfig, finetune: TrainConfig,
                      split: SplitSpec = SplitSpec()) -> list[AblationRow]:
    """Pre-train at each ratio with shared seeds, then fine-tune and score.

    Every ratio uses the same initial weights, batch order and split.
    """
    n = len(labels.records)
    train_idx, valid_idx, test_idx = split_dataset(list(range(n)), split)
    rows = []
    for r in ratios:
        cfg = dataclasses.replace(model, mask_ratio=float(r))
        res = pretrain_loop(records, cfg, pretrain)
        ev = evaluate_reconstruction(res.params, records, cfg, pretrain.seed + 1)
        params = transfer_encoder(res.params, cfg, finetune.seed)
        ft = finetune_loop(subset(labels, train_idx), subset(labels, valid_idx),
                           subset(labels, test_idx), cfg, finetune, params)
        rows.append(AblationRow(float(r), res.trace[-1]["loss"], ev["node_element_acc"],
                                ev["edge_bond_order_acc"], ft.test_auc))
    return rows
