import json

import numpy as np
import pytest

from molmae import checkpoint
from molmae.cli import EXIT_CONFIG, EXIT_DATA, main
from molmae.config import RunConfig
from molmae.data import contains_oxygen, generate_corpus, write_label_csv
from molmae.model import init_params

TINY_CFG = """
d = 8
n_encoder = 2
n_decoder = 1
heads = 2
gnn_depth = 2
attn_hidden = 6
attn_out = 2
pred_hidden = 5
steps = 4
batch_size = 4
warmup = 2
epochs = 1
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    smiles = generate_corpus(24, seed=6)
    (tmp_path / "mols.smi").write_text("\n".join(smiles) + "\n")
    write_label_csv(tmp_path / "labels.csv", smiles, [[contains_oxygen(s)] for s in smiles],
                    ["contains_oxygen"])
    return tmp_path


def _err_lines(capsys):
    return [l for l in capsys.readouterr().err.splitlines() if l.startswith("error:")]


def test_dump_dual(capsys):
    assert main(["dump-dual", "--smiles", "CCO"]) == 0
    out = capsys.readouterr().out
    assert "dual_nodes\t4" in out and "dual_edges\t2" in out


def test_missing_data_file(tmp_path, capsys):
    code = main(["pretrain", "--data", str(tmp_path / "none.smi"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: data:")


def test_bad_config(workdir, capsys):
    (workdir / "bad.cfg").write_text("n_decoder = 7\n")
    code = main(["pretrain", "--config", str(workdir / "bad.cfg"), "--data", str(workdir / "mols.smi"),
                 "--out", str(workdir / "o")])
    assert code == EXIT_CONFIG
    assert len(_err_lines(capsys)) == 1


def test_pretrain_deterministic_twice(workdir, capsys):
    runs = []
    for name in ("a", "b"):
        out = workdir / name
        assert main(["pretrain", "--config", str(workdir / "tiny.cfg"), "--deterministic",
                     "--data", str(workdir / "mols.smi"), "--out", str(out)]) == 0
        runs.append(((out / "trace.tsv").read_bytes(),
                     (out / "checkpoint" / checkpoint.BLOB).read_bytes()))
    assert runs[0] == runs[1]
    header = runs[0][0].decode().splitlines()[0]
    assert header == "step\tloss\tnode_acc\tedge_acc"
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 4


def test_checkpoint_every(workdir):
    cfg = workdir / "ck.cfg"
    cfg.write_text(TINY_CFG + "checkpoint_every = 2\n")
    out = workdir / "o"
    assert main(["pretrain", "--config", str(cfg), "--data", str(workdir / "mols.smi"),
                 "--out", str(out)]) == 0
    assert (out / "step_000002").is_dir() and (out / "step_000004").is_dir()


def test_finetune_and_eval(workdir, capsys):
    cfg, data = str(workdir / "tiny.cfg"), str(workdir / "mols.smi")
    assert main(["pretrain", "--config", cfg, "--data", data, "--out", str(workdir / "pre")]) == 0
    assert main(["finetune", "--config", cfg, "--data", str(workdir / "labels.csv"),
                 "--pretrained", str(workdir / "pre" / "checkpoint"), "--out", str(workdir / "ft")]) == 0
    assert main(["eval", "--checkpoint", str(workdir / "ft" / "checkpoint"),
                 "--data", str(workdir / "labels.csv")]) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert res["n"] == 24 and 0.0 <= res["mean_auc"] <= 1.0


def test_finetune_architecture_mismatch(workdir, capsys):
    cfg, data = str(workdir / "tiny.cfg"), str(workdir / "mols.smi")
    assert main(["pretrain", "--config", cfg, "--data", data, "--out", str(workdir / "pre")]) == 0
    wide = workdir / "wide.cfg"
    wide.write_text(TINY_CFG.replace("d = 8", "d = 12"))
    code = main(["finetune", "--config", str(wide), "--data", str(workdir / "labels.csv"),
                 "--pretrained", str(workdir / "pre" / "checkpoint"), "--out", str(workdir / "ft")])
    assert code == EXIT_CONFIG
    (line,) = _err_lines(capsys)
    assert "d=8" in line and "config 12" in line


def test_eval_untrained_on_random_labels_is_chance(tmp_path, capsys):
    cfg = RunConfig(d=8, n_encoder=2, n_decoder=1, heads=2, gnn_depth=2, attn_hidden=6, attn_out=2,
                    pred_hidden=5)
    model = cfg.model()
    checkpoint.save(tmp_path / "ck", init_params(model, 0), {"run": cfg.to_dict(), "model": model.to_dict()})
    smiles = generate_corpus(400, seed=12)
    labels = np.random.default_rng(0).permutation([0] * 200 + [1] * 200)
    write_label_csv(tmp_path / "r.csv", smiles, [[int(v)] for v in labels], ["random"])
    assert main(["eval", "--checkpoint", str(tmp_path / "ck"), "--data", str(tmp_path / "r.csv")]) == 0
    auc = json.loads(capsys.readouterr().out)["mean_auc"]
    assert abs(auc - 0.5) <= 0.1


def test_all_missing_task_is_skipped(tmp_path, capsys, caplog):
    cfg = RunConfig(d=8, n_encoder=2, n_decoder=1, heads=2, gnn_depth=2, attn_hidden=6, attn_out=2,
                    pred_hidden=5)
    model = cfg.model(n_tasks=2)
    checkpoint.save(tmp_path / "ck", init_params(model, 0), {"run": cfg.to_dict(), "model": model.to_dict()})
    smiles = generate_corpus(20, seed=3)
    write_label_csv(tmp_path / "m.csv", smiles, [[i % 2, None] for i in range(20)], ["a", "empty"])
    with caplog.at_level("WARNING"):
        assert main(["eval", "--checkpoint", str(tmp_path / "ck"), "--data", str(tmp_path / "m.csv")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["per_task_auc"]["empty"] is None and res["per_task_auc"]["a"] is not None
    assert "task 1" in caplog.text


def test_unparseable_lines_reported(workdir, capsys, caplog):
    bad = workdir / "bad.smi"
    bad.write_text("CCO\nC1CC\nc1ccccc1\nCXC\n")
    out = workdir / "o"
    with caplog.at_level("WARNING"):
        assert main(["pretrain", "--config", str(workdir / "tiny.cfg"), "--data", str(bad),
                     "--out", str(out)]) == 0
    assert "bad.smi:2" in caplog.text and "bad.smi:4" in caplog.text
    code = main(["pretrain", "--config", str(workdir / "tiny.cfg"), "--strict", "--data", str(bad),
                 "--out", str(out)])
    assert code == EXIT_DATA
    (line,) = _err_lines(capsys)
    assert "bad.smi:2" in line


def test_bad_label_value(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("smiles,t\nCCO,2\n")
    code = main(["finetune", "--data", str(tmp_path / "l.csv"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert "l.csv:2" in _err_lines(capsys)[0]


def test_generate(tmp_path):
    assert main(["generate", "--n", "30", "--seed", "1", "--out", str(tmp_path / "g.smi"),
                 "--oxygen-labels", str(tmp_path / "g.csv")]) == 0
    lines = (tmp_path / "g.smi").read_text().splitlines()
    assert lines == generate_corpus(30, seed=1)
    assert (tmp_path / "g.csv").read_text().startswith("smiles,contains_oxygen")


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    assert "mask_ratio" in out and "deterministic" in out
