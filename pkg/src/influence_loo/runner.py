"""Sweep execution and run-directory artifacts behind the command line."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .config import DataSection, ExperimentConfig, SweepCell, parse_config, resolve_path
from .data import Dataset, load_idx, load_iris, standardize, synth_blobs
from .influence import HessianOperator, INFLUENCE_CSV_FIELDS, top_eigenvalue
from .linalg import RngStream
from .loo import IncompleteReport, ValidationReport, prepare_split, validation_run
from .stats import anova_oneway, interval95
from .training import TrainingDiverged, train

__all__ = [
    "RunContext",
    "new_run_dir",
    "load_run",
    "run_stage",
    "write_report",
    "missing_artifacts",
    "SUMMARY_FIELDS",
    "EIGEN_FIELDS",
]

EIGEN_KEY = 3
SUMMARY_FIELDS = ["arm", "width", "depth", "rep", "seed", "spearman", "pearson", "n_records", "n_excluded", "reason"]
EIGEN_FIELDS = ["arm", "width", "depth", "rep", "lambda_max", "converged", "iterations", "reason"]


def _csv_text(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in header})
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("refusing to write a non-finite value")
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunContext:
    cfg: ExperimentConfig
    run_dir: Path
    config_dir: Path

    def rep_dir(self, cell: SweepCell, rep: int) -> Path:
        return self.run_dir / "cells" / cell.label / f"rep-{rep:03d}"

    def jobs(self) -> list[tuple[SweepCell, int]]:
        return [(c, r) for c in self.cfg.cells() for r in range(self.cfg.protocol.repetitions)]


def new_run_dir(out: Path, name: str) -> Path:
    """``out/name-001``, ``out/name-002``, ...: never reuses an existing directory."""
    out.mkdir(parents=True, exist_ok=True)
    i = 1
    while True:
        d = out / f"{name}-{i:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            i += 1


def load_run(run_dir: Path) -> RunContext:
    text = (run_dir / "config.ini").read_text()
    meta = json.loads((run_dir / "run.json").read_text())
    cfg = parse_config(text, Path(meta["config_dir"]), check_files=False)
    return RunContext(cfg, run_dir, Path(meta["config_dir"]))


def create_run(cfg: ExperimentConfig, config_dir: Path) -> RunContext:
    run_dir = new_run_dir(Path(cfg.experiment.output), cfg.experiment.name)
    atomic_write_text(run_dir / "config.ini", cfg.to_ini())
    atomic_write_text(run_dir / "run.json", json.dumps({"config_dir": str(config_dir)}, indent=2) + "\n")
    return RunContext(cfg, run_dir, config_dir)


@lru_cache(maxsize=8)
def _base_data(d: DataSection, config_dir: Path, seed: int):
    """Full dataset, or a fixed ``(train, test)`` pair for sources with a held-out file."""
    if d.dataset == "iris":
        return load_iris(resolve_path(d.path, config_dir))
    if d.dataset == "blobs":
        return synth_blobs(d.blob_n, d.blob_d, d.blob_k, d.blob_spread, RngStream(seed).split(0xB10B))
    if d.dataset == "mnist":
        tr = load_idx(resolve_path(d.images, config_dir), resolve_path(d.labels, config_dir), d.limit, "mnist-train")
        te = load_idx(resolve_path(d.test_images, config_dir), resolve_path(d.test_labels, config_dir), d.test_limit, "mnist-test")
        return tr, te
    raise ValueError(f"dataset {d.dataset!r} has no training data")


def split_for(ctx: RunContext, rep: int) -> tuple[Dataset, Dataset]:
    """Training and test sets for repetition ``rep``; splits are redrawn per repetition."""
    cfg = ctx.cfg
    base = _base_data(cfg.data, ctx.config_dir, cfg.experiment.seed)
    if isinstance(base, tuple):
        tr, te = base
        if cfg.data.standardize:
            tr, (te,), _ = standardize(tr, [te])
        return tr, te
    return prepare_split(base, cfg.data.test_fraction, cfg.experiment.seed + rep, cfg.data.standardize)


def _trained(ctx: RunContext, cell: SweepCell, rep: int, tr: Dataset):
    """Load the cell's checkpoint, training and saving it first if absent."""
    d = ctx.rep_dir(cell, rep)
    ckpt = d / "model.ckpt"
    if ckpt.exists():
        return load_checkpoint(ckpt)
    seed = ctx.cfg.experiment.seed + rep
    spec = ctx.cfg.model_spec(cell)
    model = spec.build(tr.n_features, tr.n_classes, len(tr), seed)
    model, log = train(model, tr, spec.train_config(seed))
    atomic_write_text(d / "trainlog.csv", log.csv_text())
    save_checkpoint(ckpt, model, log.final_lr)
    return model, log.final_lr


def _job(args) -> dict:
    stage, run_dir, cell, rep = args
    ctx = load_run(Path(run_dir))
    seed = ctx.cfg.experiment.seed + rep
    base = {"arm": cell.arm, "width": cell.width, "depth": cell.depth, "rep": rep}
    if ctx.cfg.data.dataset == "quadratic":
        return _quadratic_eigen(ctx, cell, rep, {**base, "arm": "quadratic"})
    tr, te = split_for(ctx, rep)
    try:
        model, final_lr = _trained(ctx, cell, rep, tr)
    except TrainingDiverged as exc:
        return {**base, "seed": seed, "status": "diverged", "reason": str(exc)}
    if stage == "train":
        return {**base, "seed": seed, "status": "ok"}
    if stage == "eigen":
        spec = ctx.cfg.model_spec(cell)
        op = HessianOperator.for_model(model, tr, 0.0, ctx.cfg.eigen.scope, l2=spec.l2)
        res = top_eigenvalue(op, ctx.cfg.eigen.max_iters, ctx.cfg.eigen.tol, RngStream(seed).split(EIGEN_KEY))
        return {**base, "lambda_max": res.value, "converged": res.converged, "iterations": res.iterations, "status": "ok"}
    spec = ctx.cfg.model_spec(cell)
    protocol = ctx.cfg.loo_protocol()
    d = ctx.rep_dir(cell, rep)
    try:
        report = validation_run(protocol, spec, tr, te, seed, trained=(model, final_lr))
    except IncompleteReport as exc:
        return {**base, "seed": seed, "status": "diverged", "reason": str(exc)}
    atomic_write_text(d / "report.json", report.to_json() + "\n")
    atomic_write_text(d / "influence.csv", _csv_text(INFLUENCE_CSV_FIELDS, [r.row() for r in report.influences]))
    report.write_trajectories(d / "trajectories")
    excluded = report.excluded
    return {
        **base,
        "seed": seed,
        "spearman": report.spearman,
        "pearson": report.pearson,
        "n_records": len(report.records),
        "n_excluded": len(excluded),
        "reason": report.correlation_error or ("; ".join(f"{r.train_index}: {r.reason}" for r in excluded) or None),
        "status": "ok",
    }


def _quadratic_eigen(ctx: RunContext, cell: SweepCell, rep: int, base: dict) -> dict:
    eig = np.asarray(ctx.cfg.data.eigenvalues, dtype=np.float64)
    stream = RngStream(ctx.cfg.experiment.seed + rep)
    q, _ = np.linalg.qr(stream.split(1).normal(len(eig) * len(eig)).reshape(len(eig), len(eig)))
    op = HessianOperator.for_quadratic((q * eig) @ q.T)
    res = top_eigenvalue(op, ctx.cfg.eigen.max_iters, ctx.cfg.eigen.tol, stream.split(EIGEN_KEY))
    return {**base, "lambda_max": res.value, "converged": res.converged, "iterations": res.iterations, "status": "ok"}


def run_stage(ctx: RunContext, stage: str) -> list[dict]:
    """Run one stage over every cell and repetition; results come back in job order."""
    jobs = [(stage, str(ctx.run_dir), c, r) for c, r in ctx.jobs()]
    if ctx.cfg.experiment.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ctx.cfg.experiment.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    if stage == "validate":
        atomic_write_text(ctx.run_dir / "summary.csv", _csv_text(SUMMARY_FIELDS, results))
    elif stage == "eigen":
        atomic_write_text(ctx.run_dir / "eigen.csv", _csv_text(EIGEN_FIELDS, results))
    return results


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def missing_artifacts(ctx: RunContext) -> list[str]:
    missing = []
    for name in ("summary.csv", "eigen.csv"):
        if not (ctx.run_dir / name).exists():
            missing.append(name)
    if ctx.cfg.data.dataset == "quadratic":
        return [m for m in missing if m != "summary.csv"]
    for cell, rep in ctx.jobs():
        d = ctx.rep_dir(cell, rep)
        if not (d / "report.json").exists():
            missing.append(str((d / "report.json").relative_to(ctx.run_dir)))
    return missing


def _size_axis(cfg: ExperimentConfig) -> str:
    return "depth" if len(cfg.model.depths) > 1 and len(cfg.model.widths) == 1 else "width"


def _aggregate(rows: list[dict], value: str, axis: str) -> tuple[list[dict], dict]:
    groups: dict[tuple[str, int], list[float]] = {}
    order = []
    for r in rows:
        key = (r["arm"], int(r[axis]))
        if key not in groups:
            groups[key] = []
            order.append(key)
        if r.get(value) not in ("", None):
            groups[key].append(float(r[value]))
    out = []
    for arm, size in order:
        vals = groups[(arm, size)]
        row = {"arm": arm, "size": size, "n": len(vals)}
        if vals:
            row["median"] = float(np.median(vals))
            if len(vals) >= 2:
                iv = interval95(vals)
                row["lo95"], row["hi95"] = iv.low, iv.high
            else:
                row["lo95"] = row["hi95"] = vals[0]
        out.append(row)
    return out, groups


def _anova_rows(groups: dict, metric: str) -> list[dict]:
    rows = []
    arms = sorted({a for a, _ in groups})
    sizes = sorted({s for _, s in groups})
    slices = [("size", a, [groups[(a, s)] for s in sizes if (a, s) in groups]) for a in arms]
    slices += [("arm", str(s), [groups[(a, s)] for a in arms if (a, s) in groups]) for s in sizes]
    for factor, level, gs in slices:
        row = {"metric": metric, "factor": factor, "level": level, "groups": len(gs)}
        if len(gs) < 2 or any(len(g) < 2 for g in gs):
            row["reason"] = "needs at least two groups of two samples"
        else:
            res = anova_oneway(gs)
            row.update(df_between=res.df_between, df_within=res.df_within, p_value=res.p_value, degenerate=res.degenerate)
            if math.isfinite(res.f_stat):
                row["f_stat"] = res.f_stat
            else:
                row["reason"] = "zero within-group variance"
        rows.append(row)
    return rows


def write_report(ctx: RunContext, fig5_removals: int = 5) -> list[Path]:
    """Plot-ready CSVs from a completed run; see the README for the columns."""
    out = ctx.run_dir / "report"
    out.mkdir(exist_ok=True)
    axis = _size_axis(ctx.cfg)
    written = []
    anova = []
    eig_rows = _read_csv(ctx.run_dir / "eigen.csv")
    fig3, eig_groups = _aggregate(eig_rows, "lambda_max", axis)
    anova += _anova_rows(eig_groups, "lambda_max")
    fig3_rows = [{"arm": r["arm"], "size": r["size"], "lambda_max_median": r.get("median"), "lo95": r.get("lo95"), "hi95": r.get("hi95"), "n": r["n"]} for r in fig3]
    written.append(_write(out / "fig3.csv", ["arm", "size", "lambda_max_median", "lo95", "hi95", "n"], fig3_rows))

    if ctx.cfg.data.dataset != "quadratic":
        summary = _read_csv(ctx.run_dir / "summary.csv")
        fig1, sp_groups = _aggregate(summary, "spearman", axis)
        anova += _anova_rows(sp_groups, "spearman")
        fig1_rows = [{"arm": r["arm"], "size": r["size"], "spearman_median": r.get("median"), "lo95": r.get("lo95"), "hi95": r.get("hi95"), "n": r["n"]} for r in fig1]
        written.append(_write(out / "fig1.csv", ["arm", "size", "spearman_median", "lo95", "hi95", "n"], fig1_rows))

        fig4, fig5 = [], []
        for cell, rep in ctx.jobs():
            d = ctx.rep_dir(cell, rep)
            report = ValidationReport.from_json((d / "report.json").read_text())
            ranked = sorted(report.records, key=lambda r: (-abs(r.approx_loss_diff), r.train_index))
            tag = {"arm": cell.arm, "width": cell.width, "depth": cell.depth, "rep": rep}
            for rank, r in enumerate(ranked, 1):
                fig4.append({**tag, "rank": rank, "train_index": r.train_index, "approx_diff": r.approx_loss_diff, "true_diff": r.true_loss_diff, "reason": r.reason})
            if rep == 0:
                for r in ranked[:fig5_removals]:
                    p = d / "trajectories" / f"removal_{r.train_index:05d}.csv"
                    if p.exists():
                        for row in _read_csv(p):
                            fig5.append({**tag, "train_index": r.train_index, "epoch": int(row["epoch"]), "test_loss": float(row["test_loss"])})
        written.append(_write(out / "fig4.csv", ["arm", "width", "depth", "rep", "rank", "train_index", "approx_diff", "true_diff", "reason"], fig4))
        written.append(_write(out / "fig5.csv", ["arm", "width", "depth", "rep", "train_index", "epoch", "test_loss"], fig5))
    written.append(_write(out / "anova.csv", ["metric", "factor", "level", "groups", "f_stat", "p_value", "df_between", "df_within", "degenerate", "reason"], anova))
    return written


def _write(path: Path, header: list[str], rows: list[dict]) -> Path:
    atomic_write_text(path, _csv_text(header, rows))
    return path
