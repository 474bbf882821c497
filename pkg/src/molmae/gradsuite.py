"""Finite-difference checks for every tensor op and for the whole model.

Op checks probe every coordinate on several random points. The end-to-end
checks run a tiny model on one small molecule and probe a seeded sample of
coordinates from every parameter tensor, so the full suite stays well inside
two minutes on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

OP_TOL = 1e-6
MODEL_TOL = 1e-5
# near the optimum (machine eps)^(1/3) for central differences in float64
EPS = 1e-5
MODEL_PASS_FRACTION = 0.99


@dataclass
class SuiteResult:
    name: str
    report: T.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _weighted(op: Callable, shape_out_rng):
    """Wrap ``op`` as ``sum(op(x...) * R)`` with a fixed random ``R``."""
    cache = {}

    def f(*xs):
        y = op(*xs)
        if "R" not in cache:
            cache["R"] = shape_out_rng.normal(size=y.shape)
        return T.sum(T.mul(y, T.constant(cache["R"], np.float64)))

    return f


def _op_cases(rng: np.random.Generator):
    """(name, f, input shapes) for each registered op."""
    idx = rng.integers(0, 4, size=7)
    groups = np.array([0, 2, 2, 1, 0, 3])
    rows = np.array([True, False, True, True])
    keep = (rng.random((4, 3)) > 0.3) / 0.7
    return [
        ("add", lambda a, b: T.add(a, b), [(4, 3), (4, 3)]),
        ("add_row_bias", lambda a, b: T.add(a, b), [(4, 3), (3,)]),
        ("sub", lambda a, b: T.sub(a, b), [(4, 3), (4, 3)]),
        ("mul", lambda a, b: T.mul(a, b), [(4, 3), (4, 3)]),
        ("scale", lambda a: T.scale(a, -1.7), [(4, 3)]),
        ("matmul", lambda a, b: T.matmul(a, b), [(4, 3), (3, 5)]),
        ("transpose", lambda a: T.transpose(a), [(4, 3)]),
        ("reshape", lambda a: T.reshape(a, (2, 6)), [(4, 3)]),
        ("concat_rows", lambda a, b: T.concat([a, b], axis=0), [(2, 3), (4, 3)]),
        ("concat_cols", lambda a, b: T.concat([a, b], axis=1), [(4, 2), (4, 3)]),
        ("cols", lambda a: T.cols(a, 1, 4), [(3, 5)]),
        ("gather_rows", lambda a: T.gather_rows(a, idx), [(4, 3)]),
        ("scatter_add", lambda a: T.scatter_add(a, groups, 4), [(6, 3)]),
        ("select_rows", lambda a: T.select_rows(a, rows), [(4, 3)]),
        ("softmax", lambda a: T.softmax(a, axis=1), [(4, 5)]),
        ("log_softmax", lambda a: T.log_softmax(a, axis=1), [(4, 5)]),
        ("tanh", lambda a: T.tanh(a), [(4, 3)]),
        ("relu", lambda a: T.relu(a), [(4, 3)]),
        ("sigmoid", lambda a: T.sigmoid(a), [(4, 3)]),
        ("softplus", lambda a: T.softplus(a), [(4, 3)]),
        ("layer_norm", lambda a: T.layer_norm(a), [(4, 6)]),
        ("layer_norm_affine", lambda a, g, b: T.layer_norm(a, g, b), [(4, 6), (6,), (6,)]),
        ("mul_rows", lambda a, v: T.mul_rows(a, v), [(4, 3), (3,)]),
        ("sum", lambda a: T.sum(a), [(4, 3)]),
        ("sum_axis0", lambda a: T.sum(a, axis=0), [(4, 3)]),
        ("mean", lambda a: T.mean(a), [(4, 3)]),
        ("l2_norm", lambda a: T.l2_norm(a, axis=1), [(4, 3)]),
        ("dropout_fixed_mask", lambda a: T.mul(a, T.constant(keep, np.float64)), [(4, 3)]),
    ]


def check_ops(n_points: int = 5, seed: int = 0, tol: float = OP_TOL, eps: float = EPS) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    out = []
    with T.precision(64):
        for name, op, shapes in _op_cases(rng):
            f = _weighted(op, rng)
            t0 = time.perf_counter()
            reports = []
            for _ in range(n_points):
                pts = [T.parameter(rng.normal(size=s)) for s in shapes]
                if name == "relu":
                    # keep probes away from the kink
                    for p in pts:
                        p.data += np.sign(p.data) * 0.05
                reports.append(T.grad_check(f, pts, eps=eps, tol=tol))
            merged = T.GradCheckReport(
                np.concatenate([r.analytic for r in reports]),
                np.concatenate([r.numeric for r in reports]),
                np.concatenate([r.rel_error for r in reports]), tol)
            out.append(SuiteResult(f"op:{name}", merged, time.perf_counter() - t0))
    return out


TINY_SMILES = "CC(=O)NO"  # five heavy atoms, four bonds, eight dual nodes


def _tiny_setup(seed: int):
    from .model import ModelConfig, init_params
    from .training import make_record

    cfg = ModelConfig(d=8, n_encoder=2, n_decoder=1, heads=2, gnn_depth=2, attn_hidden=6,
                      attn_out=2, pred_hidden=5, n_tasks=2)
    params = init_params(cfg, seed)
    jitter = np.random.default_rng(seed + 1)
    # move biases, gains and the mask token off their round initial values
    for v in params.values():
        v.data += jitter.normal(0.0, 0.1, v.data.shape)
    return cfg, params, make_record(TINY_SMILES)


def _sample_coords(tensors, per_tensor: int, rng) -> dict[int, np.ndarray]:
    coords = {}
    for k, t in enumerate(tensors):
        n = t.data.size
        coords[k] = np.arange(n) if n <= per_tensor else np.sort(rng.choice(n, per_tensor, replace=False))
    return coords


def check_model(seed: int = 0, per_tensor: int = 8, eps: float = EPS,
                tol: float = MODEL_TOL) -> list[SuiteResult]:
    """Pre-training and fine-tuning objectives of the tiny model."""
    from .model import finetune_forward, finetune_loss, pretrain_forward, pretrain_loss
    from .training import finetune_batch, pretrain_batch

    out = []
    with T.precision(64):
        cfg, params, rec = _tiny_setup(seed)
        batch = pretrain_batch([rec], cfg.mask_ratio, seed, 1, [0])

        def pre(*_):
            lg = pretrain_forward(batch, params, cfg)
            return pretrain_loss(lg["node"], batch["node"].full.x, batch["node"].masked_rows,
                                 lg["edge"], batch["edge"].full.x, batch["edge"].masked_rows)[0]

        ft_in = finetune_batch([rec, rec])
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        present = np.array([[True, True], [True, False]])

        def fine(*_):
            o = finetune_forward(ft_in, params, cfg, positions=True)
            return finetune_loss(o["node"], o["edge"], y, present)[0]

        pre_names = [n for n in params if not n.startswith(("readout", "node.pred", "edge.pred"))]
        fine_names = [n for n in params if ".dec." not in n]
        rng = np.random.default_rng(seed + 2)
        for label, f, names in (("model:pretrain", pre, pre_names), ("model:finetune", fine, fine_names)):
            pts = [params[n] for n in names]
            t0 = time.perf_counter()
            rep = T.grad_check(f, pts, eps=eps, tol=tol, min_pass_fraction=MODEL_PASS_FRACTION,
                               coords=_sample_coords(pts, per_tensor, rng))
            out.append(SuiteResult(label, rep, time.perf_counter() - t0))
    return out


def run_suite(seed: int = 0) -> list[SuiteResult]:
    return check_ops(seed=seed) + check_model(seed=seed)
