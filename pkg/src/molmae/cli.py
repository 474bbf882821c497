"""``molmae`` command line.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 data error,
4 numeric failure. Every failure prints exactly one ``error: <kind>: <msg>``
line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, tensor as T
from .config import RunConfig, describe_keys, load_config
from .model import ConfigError, ModelConfig
from .molgraph import SmilesError, dump_dual, read_smiles_file

log = logging.getLogger("molmae")

EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ARCH_KEYS = ("d", "n_encoder", "heads", "gnn_depth", "f_node", "f_edge", "f_dual")


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# file handling


def read_corpus(path: str | Path, strict: bool = False):
    """Parse a SMILES file into records; rejects are logged with line numbers."""
    from .training import make_record

    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    recs, bad = [], []
    for lineno, smi in read_smiles_file(path):
        try:
            recs.append(make_record(smi))
        except (SmilesError, ValueError) as exc:
            bad.append(lineno)
            if strict:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            log.warning("%s:%d: skipped: %s", path, lineno, exc)
    if bad:
        log.warning("skipped %d unparseable lines: %s", len(bad), ",".join(map(str, bad)))
    if not recs:
        raise DataError(f"no parseable molecules in {path}")
    return recs


def read_label_csv(path: str | Path, strict: bool = False):
    """``smiles,task1[,task2...]``; labels 0/1, empty cell means missing.

    Returns (LabeledSet, task names).
    """
    from .training import LabeledSet, make_record

    path = Path(path)
    if not path.is_file():
        raise DataError(f"label file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0].strip().lower() != "smiles":
        raise DataError(f"{path}:1: header must be 'smiles,task1[,task2,...]'")
    tasks = [t.strip() for t in rows[0][1:]]
    recs, ys, present = [], [], []
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != len(tasks) + 1:
            raise DataError(f"{path}:{lineno}: expected {len(tasks) + 1} columns, got {len(row)}")
        y, m = [], []
        for cell in row[1:]:
            cell = cell.strip()
            if cell == "":
                y.append(0.0)
                m.append(False)
            elif cell in ("0", "1"):
                y.append(float(cell))
                m.append(True)
            else:
                raise DataError(f"{path}:{lineno}: label must be 0, 1 or empty, got {cell!r}")
        try:
            rec = make_record(row[0])
        except (SmilesError, ValueError) as exc:
            if strict:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            log.warning("%s:%d: skipped: %s", path, lineno, exc)
            continue
        recs.append(rec)
        ys.append(y)
        present.append(m)
    if not recs:
        raise DataError(f"no usable rows in {path}")
    return LabeledSet(recs, np.asarray(ys), np.asarray(present, dtype=bool)), tasks


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(v) for v in r) + "\n")
    os.replace(tmp, path)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cap_threads(deterministic: bool):
    """Limit BLAS threads: 1 in deterministic mode, else ``MOLMAE_THREADS`` if set."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("MOLMAE_THREADS")
    n = 1 if deterministic else (int(raw) if raw else None)
    return threadpool_limits(limits=n) if n else contextlib.nullcontext()


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    if getattr(args, "strict", False):
        changes["strict"] = True
    return cfg.replace(**changes) if changes else cfg


def _model_from_manifest(manifest: dict) -> ModelConfig:
    return ModelConfig.from_dict(manifest["config"]["model"])


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    from .training import pretrain_loop

    cfg = _run_config(args)
    T.set_precision(cfg.precision)
    model = cfg.model()
    recs = read_corpus(args.data, cfg.strict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"run": cfg.to_dict(), "model": model.to_dict(), "kind": "pretrain"}

    def on_checkpoint(step, params):
        checkpoint.save(out / f"step_{step:06d}", params, echo, {"step": step})

    with _cap_threads(cfg.deterministic):
        res = pretrain_loop(recs, model, cfg.train(), on_checkpoint=on_checkpoint)
    _write_tsv(out / "trace.tsv", ["step", "loss", "node_acc", "edge_acc"],
               [[r["step"], r["loss"], r["node_acc"], r["edge_acc"]] for r in res.trace])
    checkpoint.save(out / "checkpoint", res.params, echo, {"step": cfg.steps})
    print(json.dumps({"steps": cfg.steps, "first_loss": res.trace[0]["loss"],
                      "last_loss": res.trace[-1]["loss"], "checkpoint": str(out / "checkpoint")}))
    return 0


def _check_compatible(model: ModelConfig, pre_model: ModelConfig) -> None:
    from .training import ConfigMismatch

    diff = [k for k in ARCH_KEYS if getattr(model, k) != getattr(pre_model, k)]
    if diff:
        raise ConfigMismatch("pretrained checkpoint differs in " + ", ".join(
            f"{k}={getattr(pre_model, k)} (config {getattr(model, k)})" for k in diff))


def cmd_finetune(args) -> int:
    from .training import SplitSpec, finetune_loop, split_dataset, subset, transfer_encoder

    cfg = _run_config(args)
    T.set_precision(cfg.precision)
    ds, tasks = read_label_csv(args.data, cfg.strict)
    model = cfg.model(n_tasks=len(tasks))
    if args.pretrained:
        pre, manifest = checkpoint.load(args.pretrained)
        _check_compatible(model, _model_from_manifest(manifest))
        params = transfer_encoder(pre, model, cfg.seed)
    else:
        from .model import init_params

        params = init_params(model, cfg.seed)
    tr, va, te = split_dataset(list(range(len(ds.records))), SplitSpec(seed=cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _cap_threads(cfg.deterministic):
        res = finetune_loop(subset(ds, tr), subset(ds, va), subset(ds, te), model, cfg.train(), params)
    _write_tsv(out / "trace.tsv", ["epoch", "train_loss", "valid_auc", "test_auc"],
               [[r["epoch"], r["train_loss"], r["valid_auc"], r["test_auc"]] for r in res.trace])
    echo = {"run": cfg.to_dict(), "model": model.to_dict(), "kind": "finetune", "tasks": tasks}
    checkpoint.save(out / "checkpoint", res.params, echo,
                    {"best_epoch": res.best_epoch, "best_valid_auc": res.best_valid_auc})
    print(json.dumps({"best_epoch": res.best_epoch, "valid_auc": res.best_valid_auc,
                      "test_auc": res.test_auc, "per_task_test_auc": dict(zip(tasks, res.per_task_test_auc)),
                      "checkpoint": str(out / "checkpoint")}))
    return 0


def cmd_eval(args) -> int:
    from .training import multitask_auc, predict

    params, manifest = checkpoint.load(args.checkpoint)
    model = _model_from_manifest(manifest)
    T.set_precision(manifest["config"]["run"].get("precision", 32))
    ds, tasks = read_label_csv(args.data, args.strict)
    if len(tasks) != model.n_tasks:
        raise ConfigError(f"checkpoint predicts {model.n_tasks} tasks, {args.data} has {len(tasks)}")
    probs = predict(params, ds, model)["final"]
    mean, per = multitask_auc(probs, ds.y, ds.present)
    print(json.dumps({"mean_auc": None if np.isnan(mean) else mean, "per_task_auc": dict(zip(tasks, per)),
                      "n": len(ds.records)}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed or 0)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\tpass_fraction={r.report.pass_fraction:.4f}"
              f"\tmax_rel_error={r.report.max_rel_error:.2e}\tcoords={r.report.rel_error.size}"
              f"\t{r.seconds:.1f}s")
    return 0 if ok else EXIT_CHECK


def cmd_dump_dual(args) -> int:
    print(dump_dual(args.smiles), end="")
    return 0


def _parse_ratios(text: str) -> list[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--ratios must be comma-separated numbers, got {text!r}") from None
    if not out or any(not 0.0 < r < 1.0 for r in out):
        raise ConfigError("every mask ratio must lie in (0, 1)")
    return out


def cmd_ablate(args) -> int:
    from .data import contains_oxygen
    from .training import LabeledSet, SplitSpec, ablate_mask_ratio

    ratios = _parse_ratios(args.ratios)
    cfg = _run_config(args)
    T.set_precision(cfg.precision)
    recs = read_corpus(args.data, cfg.strict)
    if args.labels:
        labels, tasks = read_label_csv(args.labels, cfg.strict)
    else:
        # default probe task: does the molecule contain oxygen
        sub = recs[: args.probe_size]
        y = np.array([[contains_oxygen(r.smiles)] for r in sub], dtype=float)
        labels, tasks = LabeledSet(sub, y, np.ones_like(y, dtype=bool)), ["contains_oxygen"]
    model = cfg.model(n_tasks=len(tasks))
    with _cap_threads(cfg.deterministic):
        rows = ablate_mask_ratio(recs, labels, ratios, model, cfg.train(),
                                 cfg.replace(warmup=args.finetune_warmup or cfg.warmup).train(),
                                 SplitSpec(seed=cfg.seed))
    table = [[r.ratio, r.pretrain_loss, r.node_element_acc, r.edge_bond_order_acc, r.downstream_auc]
             for r in rows]
    header = ["ratio", "pretrain_loss", "node_element_acc", "edge_bond_order_acc", "downstream_auc"]
    if args.out:
        _write_tsv(Path(args.out), header, table)
    sys.stdout.write("\t".join(header) + "\n")
    for r in table:
        sys.stdout.write("\t".join(_fmt(v) for v in r) + "\n")
    return 0


def cmd_generate(args) -> int:
    from .data import contains_oxygen, desk_corpus, generate_corpus, write_label_csv

    smiles = desk_corpus(args.n, args.seed) if args.with_sample else generate_corpus(args.n, args.seed)
    out = Path(args.out)
    out.write_text("".join(s + "\n" for s in smiles))
    if args.oxygen_labels:
        write_label_csv(args.oxygen_labels, smiles, [[contains_oxygen(s)] for s in smiles],
                        ["contains_oxygen"])
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="molmae",
        description="Bi-branch masked graph autoencoder for molecules.",
        epilog="config file keys (one 'key = value' per line):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, fixed-order reduction")
        p.add_argument("--strict", action="store_true", help="unparseable SMILES are fatal")
        if data:
            p.add_argument("--data", required=True)

    p = sub.add_parser("pretrain", help="masked reconstruction pre-training")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on a label CSV")
    common(p)
    p.add_argument("--pretrained", help="pre-trained checkpoint directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="AUC of a fine-tuned checkpoint on a label CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-dual", help="print the directed line graph of a molecule")
    p.add_argument("--smiles", required=True)
    p.set_defaults(func=cmd_dump_dual)

    p = sub.add_parser("ablate", help="mask-ratio sweep: pre-train, fine-tune and score each ratio")
    common(p)
    p.add_argument("--ratios", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--labels", help="label CSV for the downstream probe")
    p.add_argument("--probe-size", type=int, default=500,
                   help="molecules in the default contains-oxygen probe")
    p.add_argument("--finetune-warmup", type=int, help="warmup for the probe fine-tune")
    p.add_argument("--out", help="write the table as TSV")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("generate", help="write a synthetic SMILES corpus")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-sample", action="store_true", help="start from the bundled sample file")
    p.add_argument("--oxygen-labels", help="also write a contains-oxygen label CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return ap


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .training import ConfigMismatch, NumericFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatch) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, SmilesError, CheckpointError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (NumericFailure, FloatingPointError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
