import csv
import math
from pathlib import Path

import numpy as np
import pytest

from influence_loo.bnn import build_bnn
from influence_loo.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from influence_loo.cli import main
from influence_loo.config import ConfigError, load_config, parse_config
from influence_loo.linalg import RngStream
from influence_loo.mlp import ArchSpec, build_mlp

from conftest import IRIS, ROOT

TINY = f"""
[experiment]
name = tiny
seed = 5

[data]
dataset = iris
path = {IRIS}

[model]
widths = 3, 4
depths = 1

[arms]
arms = weight_decay

[train]
epochs = 150

[protocol]
k = 5
finetune_epochs = 20
repetitions = 2

[eigen]
max_iters = 200
"""


def _write(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _no_bad_literals(path):
    text = Path(path).read_text().lower()
    assert "nan" not in text and "inf" not in text.replace("influence", "")


@pytest.mark.parametrize("name", sorted(p.name for p in (ROOT / "configs").glob("*.ini")))
def test_shipped_configs_round_trip(name):
    cfg = load_config(ROOT / "configs" / name)
    assert parse_config(cfg.to_ini(), ROOT / "configs") == cfg


def test_sweep_cells():
    cfg = parse_config(TINY)
    assert [(c.arm, c.depth, c.width) for c in cfg.cells()] == [("weight_decay", 1, 3), ("weight_decay", 1, 4)]
    d0 = parse_config(TINY.replace("depths = 1", "depths = 0"))
    assert [c.width for c in d0.cells()] == [0]


def test_all_problems_reported(tmp_path):
    bad = TINY.replace("epochs = 150", "epochs = 150\nlr = -1").replace("k = 5", "k = 0\nbogus = 1")
    bad = bad.replace(str(IRIS), str(tmp_path / "nope.csv"))
    with pytest.raises(ConfigError) as exc:
        parse_config(bad)
    text = "\n".join(exc.value.problems)
    for needle in ("train.lr", "protocol.k", "protocol.bogus: unknown key", "nope.csv"):
        assert needle in text


def test_checkpoint_round_trip(tmp_path):
    m = build_mlp(ArchSpec(4, 2, 3, 3, "selu"), RngStream(0))
    save_checkpoint(tmp_path / "m.ckpt", m, 1e-5)
    back, lr = load_checkpoint(tmp_path / "m.ckpt")
    assert back.arch == m.arch and np.array_equal(back.theta, m.theta) and lr == 1e-5
    b = build_bnn(ArchSpec(4, 1, 5, 3), RngStream(1), kl_weight=0.25)
    back, lr = decode(encode(b))
    assert back.kind == "bnn" and np.array_equal(back.theta, b.theta) and back.kl_weight == 0.25 and lr is None
    with pytest.raises(CheckpointError):
        decode(b"NOTACKPT" + encode(m)[8:])
    with pytest.raises(CheckpointError):
        decode(encode(m)[:-3])


def test_missing_config_and_dataset(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2
    p = _write(tmp_path, TINY.replace(str(IRIS), str(tmp_path / "gone.csv")))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "runs")]) == 2
    assert "gone.csv" in capsys.readouterr().err


def test_quadratic_config_rejects_validate(tmp_path):
    assert main(["validate", "--config", str(ROOT / "configs" / "quadratic.ini"), "--out", str(tmp_path)]) == 2


def test_train_writes_checkpoints_and_no_clobber(tmp_path):
    p = _write(tmp_path, TINY.replace("widths = 3, 4", "widths = 3").replace("repetitions = 2", "repetitions = 1"))
    out = tmp_path / "runs"
    assert main(["train", "--config", str(p), "--out", str(out)]) == 0
    assert main(["train", "--config", str(p), "--out", str(out)]) == 0
    runs = sorted(d.name for d in out.iterdir())
    assert runs == ["tiny-001", "tiny-002"]
    for r in runs:
        cell = out / r / "cells" / "weight_decay-d1-w3" / "rep-000"
        assert (cell / "model.ckpt").exists()
        assert _rows(cell / "trainlog.csv")[0].keys() == {"epoch", "loss", "lr"}


def test_divergence_exit_code(tmp_path):
    p = _write(tmp_path, TINY.replace("epochs = 150", "epochs = 5\noptimizer = gd\nlr = 1e300").replace("widths = 3, 4", "widths = 3"))
    with np.errstate(over="ignore", invalid="ignore"):
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "runs")]) == 3


def test_full_pipeline(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    out = tmp_path / "runs"
    assert main(["validate", "--config", str(p), "--out", str(out)]) == 0
    run = out / "tiny-001"
    summary = _rows(run / "summary.csv")
    assert [(r["width"], r["rep"], r["seed"]) for r in summary] == [("3", "0", "5"), ("3", "1", "6"), ("4", "0", "5"), ("4", "1", "6")]
    assert all(-1 <= float(r["spearman"]) <= 1 for r in summary)
    rep_dir = run / "cells" / "weight_decay-d1-w3" / "rep-000"
    assert len(_rows(rep_dir / "influence.csv")) == 120
    assert len(list((rep_dir / "trajectories").glob("removal_*.csv"))) == 5

    capsys.readouterr()
    assert main(["report", str(run)]) == 4
    assert "eigen.csv" in capsys.readouterr().err

    assert main(["eigen", "--run", str(run)]) == 0
    eig = _rows(run / "eigen.csv")
    assert len(eig) == 4 and all(float(r["lambda_max"]) > 0 for r in eig)

    assert main(["report", str(run)]) == 0
    rep = run / "report"
    for name in ("fig1.csv", "fig3.csv", "fig4.csv", "fig5.csv", "anova.csv", ):
        assert (rep / name).exists()
        _no_bad_literals(rep / name)
    fig4 = _rows(rep / "fig4.csv")
    assert len(fig4) == 4 * 5
    first = [abs(float(r["approx_diff"])) for r in fig4 if (r["width"], r["rep"]) == ("3", "0")]
    assert first == sorted(first, reverse=True)
    fig5 = _rows(rep / "fig5.csv")
    assert {r["rep"] for r in fig5} == {"0"} and len(fig5) == 2 * 5 * 21
    anova = _rows(rep / "anova.csv")
    size_rows = [r for r in anova if r["factor"] == "size"]
    assert {r["metric"] for r in size_rows} == {"spearman", "lambda_max"}
    assert all(0 <= float(r["p_value"]) <= 1 for r in size_rows)


def test_summary_deterministic(tmp_path):
    p = _write(tmp_path, TINY.replace("widths = 3, 4", "widths = 3"))
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["validate", "--config", str(p), "--out", str(a)]) == 0
    assert main(["validate", "--config", str(p), "--out", str(b), "--workers", "2"]) == 0
    assert (a / "tiny-001" / "summary.csv").read_bytes() == (b / "tiny-001" / "summary.csv").read_bytes()


def test_single_rep_degenerate_interval(tmp_path):
    p = _write(tmp_path, TINY.replace("widths = 3, 4", "widths = 3").replace("repetitions = 2", "repetitions = 1"))
    out = tmp_path / "runs"
    assert main(["validate", "--config", str(p), "--out", str(out)]) == 0
    run = out / "tiny-001"
    assert main(["eigen", "--run", str(run)]) == 0
    assert main(["report", "--run", str(run)]) == 0
    (row,) = _rows(run / "report" / "fig1.csv")
    assert row["lo95"] == row["hi95"] == row["spearman_median"]


def test_quadratic_eigen(tmp_path):
    out = tmp_path / "runs"
    assert main(["eigen", "--config", str(ROOT / "configs" / "quadratic.ini"), "--out", str(out)]) == 0
    rows = _rows(out / "quadratic-001" / "eigen.csv")
    assert len(rows) == 3
    assert all(abs(float(r["lambda_max"]) - 10.0) < 1e-2 and r["converged"] == "true" for r in rows)
    assert main(["report", str(out / "quadratic-001")]) == 0


def test_nonconverged_row_retained(tmp_path):
    text = (ROOT / "configs" / "quadratic.ini").read_text().replace("max_iters = 5000", "max_iters = 2").replace("1.0, 2.0, 10.0", "1.0, 9.99, 10.0")
    p = _write(tmp_path, text)
    assert main(["eigen", "--config", str(p), "--out", str(tmp_path / "runs")]) == 0
    rows = _rows(tmp_path / "runs" / "quadratic-001" / "eigen.csv")
    assert len(rows) == 3 and all(r["converged"] == "false" for r in rows)
    assert all(math.isfinite(float(r["lambda_max"])) for r in rows)


def test_report_on_non_run(tmp_path):
    assert main(["report", str(tmp_path)]) == 4
