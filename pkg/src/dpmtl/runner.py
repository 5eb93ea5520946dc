"""Experiment grids: lambda sweeps, sparsity ablations and their reports.

A sweep trains one model per grid cell (dataset, family, sparsity, seed,
lambda, dim, layers), stores each cell's result as JSON under
``cells/<hash>.json`` and then aggregates.  Cells already on disk are
skipped, which makes an interrupted sweep resumable.  Aggregation reads
cells in a fixed order, so reports depend only on the config.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .ingestion import SplitSpec, apply_sparsity_mask, load_dataset, split_dataset, split_users
from .metrics import PAPER_LAMBDAS, IncompleteTable, RankTable, overall_rank, rank_average
from .models import FAMILIES, build_model
from .score_prediction import sp_evaluate
from .synthgen import GenConfig, generate_dataset
from .training import TrainConfig, evaluate, train

PAPER_DIMS = (1, 4, 8, 16, 32, 64)
PAPER_LAYERS = (1, 2, 3, 4)
ABLATION_SPARSITY = tuple(round(0.1 * k, 1) for k in range(8))
OUTPUT_ROOT_ENV = "DPMTL_OUTPUT_ROOT"

# task -> (result column, higher is better)
TASKS = {"KT": ("kt_auc", True), "OT": ("ot_acc", True), "SP": ("sp_mae", False)}

RESULT_COLUMNS = [
    "dataset", "model", "sparsity", "seed", "lambda", "dim", "layers",
    "val_loss", "val_kt_auc", "val_ot_acc", "val_sp_mae",
    "test_kt_auc", "test_ot_acc", "test_sp_mae", "best_epoch", "status",
]


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


def resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


@dataclass(frozen=True)
class DataSource:
    """Either CSV files or a synthetic generator config."""

    name: str
    interactions: str | None = None
    scores: str | None = None
    synth: dict | None = None

    def __post_init__(self):
        if (self.interactions is None) == (self.synth is None):
            raise ConfigError(f"dataset {self.name!r} needs exactly one of 'interactions' or 'synth'")

    def load(self) -> Dataset:
        if self.synth is not None:
            cfg = dict(self.synth)
            if isinstance(cfg.get("options"), list):
                cfg["options"] = tuple(cfg["options"])
            if cfg.get("score_weights") is not None:
                cfg["score_weights"] = tuple(cfg["score_weights"])
            return generate_dataset(GenConfig(**cfg))[0]
        return load_dataset(self.interactions, self.scores)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        if self.synth is not None:
            h.update(json.dumps(self.synth, sort_keys=True).encode())
        else:
            for p in (self.interactions, self.scores):
                if p is not None:
                    h.update(Path(p).read_bytes())
                h.update(b"\0")
        return h.hexdigest()


@dataclass(frozen=True)
class SweepConfig:
    datasets: tuple[DataSource, ...]
    families: tuple[str, ...] = ("irt",)
    lambdas: tuple[float, ...] = PAPER_LAMBDAS
    dims: tuple[int, ...] = PAPER_DIMS
    layers: tuple[int, ...] = PAPER_LAYERS
    sparsity: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    sp_split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    train: dict = field(default_factory=dict)
    output: str = "runs/sweep"
    workers: int = 1
    reproduction: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "datasets" not in d or not d["datasets"]:
            raise ConfigError("config needs a non-empty 'datasets' list")
        try:
            kw = dict(d)
            kw["datasets"] = tuple(DataSource(**x) for x in d["datasets"])
            for k in ("families", "lambdas", "dims", "layers", "sparsity", "seeds", "split", "sp_split"):
                if k in kw:
                    kw[k] = tuple(kw[k])
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(x) for x in self.datasets]
        return d

    def validate(self) -> None:
        for name in ("families", "lambdas", "dims", "layers", "sparsity", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"grid {name!r} is empty")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown model families {bad}; choose from {list(FAMILIES)}")
        if any(not 0 <= lam <= 1 for lam in self.lambdas):
            raise ConfigError("lambda values must lie in [0, 1]")
        if any(int(d) != d or d < 1 for d in self.dims):
            raise ConfigError("dims must be positive integers")
        if any(int(x) != x or not 1 <= x <= 4 for x in self.layers):
            raise ConfigError("layers must be integers in 1..4")
        if any(not 0 <= s < 1 for s in self.sparsity):
            raise ConfigError("sparsity ratios must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for name in ("split", "sp_split"):
            try:
                SplitSpec(*getattr(self, name))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        try:
            TrainConfig(**self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None
        if "lam" in self.train or "seed" in self.train:
            raise ConfigError("train.lam and train.seed are set by the grid")
        if self.reproduction:
            if not set(self.lambdas) <= set(PAPER_LAMBDAS):
                raise ConfigError("reproduction mode: lambdas must come from the paper grid")
            if not set(self.dims) <= set(PAPER_DIMS):
                raise ConfigError(f"reproduction mode: dims must come from {PAPER_DIMS}")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        for src in self.datasets:
            for p in (src.interactions, src.scores):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"cannot read {p}")
            if src.synth is not None:
                try:
                    GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in src.synth.items()})
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"dataset {src.name!r}: {exc}") from None


@dataclass(frozen=True)
class Cell:
    dataset: str
    family: str
    sparsity: float
    seed: int
    lam: float
    dim: int
    layers: int

    def key(self) -> tuple:
        return (self.dataset, self.family, self.sparsity, self.seed)


def _cells(cfg: SweepConfig) -> list[Cell]:
    out = []
    for src in cfg.datasets:
        for fam in cfg.families:
            # layers only matter for the networked families
            layer_grid = (1,) if fam == "irt" else cfg.layers
            for s in cfg.sparsity:
                for seed in cfg.seeds:
                    for lam in cfg.lambdas:
                        for d in cfg.dims:
                            for L in layer_grid:
                                out.append(Cell(src.name, fam, float(s), int(seed), float(lam), int(d), int(L)))
    return out


def _cell_hash(cfg: SweepConfig, cell: Cell, fingerprint: str) -> str:
    payload = {
        "cell": asdict(cell),
        "data": fingerprint,
        "split": list(cfg.split),
        "sp_split": list(cfg.sp_split),
        "train": cfg.train,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:20]


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    sp_users: tuple[np.ndarray, np.ndarray, np.ndarray] | None


def prepare(data: Dataset, cfg: SweepConfig, sparsity: float, seed: int) -> PreparedData:
    """Split once per seed, then mask the training part only.

    Validation and test parts are fixed before masking, so every sparsity
    level is selected and scored on the same held-out interactions.
    """
    split = split_dataset(data, SplitSpec(*cfg.split, seed=seed))
    train_part = apply_sparsity_mask(split.train, sparsity, seed)
    val_part = split.val
    sp_users = None
    if data.scores:
        scored = np.array(sorted(data.scores), dtype=np.int64)
        sp_users = split_users(scored, SplitSpec(*cfg.sp_split, seed=seed))
    return PreparedData(train_part, val_part, split.test, sp_users)


def run_cell(cfg: SweepConfig, cell: Cell, data: Dataset) -> dict:
    prep = prepare(data, cfg, cell.sparsity, cell.seed)
    tcfg = TrainConfig(lam=cell.lam, seed=cell.seed, **cfg.train)
    model = build_model(cell.family, data, dim=cell.dim, layers=cell.layers, seed=cell.seed)
    report = train(model, prep.train, prep.val, tcfg)
    out = {"cell": asdict(cell), "best_epoch": report.best_epoch, "epochs": len(report.train_loss),
           "train_loss": report.train_loss, "val_loss_curve": report.val_loss}
    for name, part in (("val", prep.val), ("test", prep.test)):
        if len(part):
            res = evaluate(model, part, cell.lam)
            out[f"{name}_loss"] = res.loss
            out[f"{name}_kt_auc"] = res.kt_auc
            out[f"{name}_ot_acc"] = res.ot_acc
        else:
            out[f"{name}_loss"] = out[f"{name}_kt_auc"] = out[f"{name}_ot_acc"] = None
    out["val_sp_mae"] = out["test_sp_mae"] = None
    if prep.sp_users is not None:
        theta = model.user_representations()
        tr, va, te = prep.sp_users
        if len(va):
            out["val_sp_mae"] = sp_evaluate(theta, data.scores, tr, va)
        if len(te):
            out["test_sp_mae"] = sp_evaluate(theta, data.scores, tr, te)
    return out


def _run_one(args) -> tuple[str, dict]:
    cfg, cell, src, path = args
    result = run_cell(cfg, cell, src.load())
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(result, sort_keys=True))
    tmp.replace(path)
    return str(path), result


def execute(cfg: SweepConfig, progress=None) -> tuple[Path, list[dict]]:
    """Train every missing cell and return the output directory and all results in grid order."""
    cfg.validate()
    out = resolve_output(cfg.output)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    sources = {s.name: s for s in cfg.datasets}
    try:
        prints = {s.name: s.fingerprint() for s in cfg.datasets}
        for s in cfg.datasets:
            s.load()
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load data: {exc}") from exc

    cells = _cells(cfg)
    paths = [cells_dir / f"{_cell_hash(cfg, c, prints[c.dataset])}.json" for c in cells]
    todo = [(cfg, c, sources[c.dataset], p) for c, p in zip(cells, paths) if not p.exists()]
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for k, _ in enumerate(pool.map(_run_one, todo)):
                if progress:
                    progress(k + 1, len(todo))
    else:
        for k, job in enumerate(todo):
            _run_one(job)
            if progress:
                progress(k + 1, len(todo))
    results = [json.loads(p.read_text()) for p in paths]
    return out, results


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def select_cells(results: list[dict]) -> list[dict]:
    """Per (dataset, model, sparsity, seed, lambda) keep the (dim, layers) cell with the lowest val loss."""
    best: dict[tuple, dict] = {}
    for r in results:
        c = r["cell"]
        key = (c["dataset"], c["family"], c["sparsity"], c["seed"], c["lam"])
        score = r["val_loss"] if r["val_loss"] is not None else r["train_loss"][r["best_epoch"]]
        if key not in best or score < best[key][0]:
            best[key] = (score, r)
    return [r for _, r in best.values()]


def result_rows(results: list[dict]) -> list[dict]:
    rows = []
    for r in results:
        c = r["cell"]
        row = {
            "dataset": c["dataset"], "model": c["family"], "sparsity": c["sparsity"], "seed": c["seed"],
            "lambda": c["lam"], "dim": c["dim"], "layers": c["layers"], "best_epoch": r["best_epoch"],
        }
        for k in ("val_loss", "val_kt_auc", "val_ot_acc", "val_sp_mae", "test_kt_auc", "test_ot_acc", "test_sp_mae"):
            row[k] = r.get(k)
        row["status"] = "complete"
        rows.append(row)
    return rows


def rank_table(rows: list[dict], lambdas) -> RankTable:
    t = RankTable(lambdas=tuple(lambdas))
    for r in rows:
        for task, (col, hb) in TASKS.items():
            v = r.get(f"test_{col}")
            if v is not None:
                t.set((task, r["dataset"], r["model"], r["sparsity"], r["seed"]), r["lambda"], v, hb)
    return t


def best_lambdas(rows: list[dict]) -> list[dict]:
    """Per configuration and task, the lambda with the best validation metric and its test value."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["model"], r["sparsity"], r["seed"]), []).append(r)
    out = []
    for key, grp in groups.items():
        for task, (col, hb) in TASKS.items():
            cands = [r for r in grp if r.get(f"val_{col}") is not None]
            if not cands:
                continue
            # earliest lambda wins ties so the choice is deterministic
            pick = sorted(cands, key=lambda r: ((-1 if hb else 1) * r[f"val_{col}"], r["lambda"]))[0]
            out.append({
                "dataset": key[0], "model": key[1], "sparsity": key[2], "seed": key[3], "task": task,
                "best_lambda": pick["lambda"], "val_metric": pick[f"val_{col}"],
                "test_metric": pick.get(f"test_{col}"),
            })
    return out


def emit_report(out_dir, results: list[dict], lambdas, expected: int | None = None) -> dict[str, Path]:
    """Write results.csv, results.json, best_lambda.csv, rank_series.csv and auc_series.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = result_rows(select_cells(results)) if results else []
    rows.sort(key=lambda r: (r["dataset"], r["model"], r["sparsity"], r["seed"], r["lambda"]))
    incomplete = expected is not None and len(results) < expected
    if incomplete:
        for r in rows:
            r["status"] = "incomplete"
    files = {}

    def write(name, text):
        p = out_dir / name
        p.write_text(text)
        files[name] = p

    write("results.csv", _csv_text(RESULT_COLUMNS, rows))
    write("results.json", json.dumps({"rows": rows, "cells": results, "incomplete": incomplete},
                                     indent=1, sort_keys=True))
    best_cols = ["dataset", "model", "sparsity", "seed", "task", "best_lambda", "val_metric", "test_metric"]
    write("best_lambda.csv", _csv_text(best_cols, best_lambdas(rows)))

    table = rank_table(rows, lambdas)
    rank_cols = ["lambda", "rank_KT", "rank_OT", "rank_SP", "rank_avg"]
    series = []
    try:
        per_task = rank_average(table) if table.rows else {}
        overall = overall_rank(table) if table.rows else None
    except IncompleteTable:
        per_task, overall = {}, None
    if overall is not None:
        for k, lam in enumerate(table.lambdas):
            row = {"lambda": float(lam), "rank_avg": float(overall[k])}
            for task in TASKS:
                if task in per_task:
                    row[f"rank_{task}"] = float(per_task[task][k])
            series.append(row)
    write("rank_series.csv", _csv_text(rank_cols, series))

    auc_cols = ["dataset", "model", "sparsity", "lambda", "test_kt_auc", "test_ot_acc", "test_sp_mae"]
    agg: dict[tuple, list[dict]] = {}
    for r in rows:
        agg.setdefault((r["dataset"], r["model"], r["sparsity"], r["lambda"]), []).append(r)
    auc_rows = []
    for (ds, mdl, sp, lam), grp in sorted(agg.items()):
        row = {"dataset": ds, "model": mdl, "sparsity": sp, "lambda": lam}
        for c in ("test_kt_auc", "test_ot_acc", "test_sp_mae"):
            vals = [g[c] for g in grp if g.get(c) is not None]
            row[c] = float(np.mean(vals)) if vals else None
        auc_rows.append(row)
    write("auc_series.csv", _csv_text(auc_cols, auc_rows))
    return files


def run_sweep(cfg: SweepConfig, progress=None) -> Path:
    out, results = execute(cfg, progress)
    emit_report(out, results, cfg.lambdas, expected=len(_cells(cfg)))
    return out


def sparsity_table(rows: list[dict]) -> list[dict]:
    """Table 3 shape: per dataset, sparsity and model the best-lambda test metrics (mean over seeds)."""
    picks = best_lambdas(rows)
    groups: dict[tuple, dict[str, list]] = {}
    for p in picks:
        g = groups.setdefault((p["dataset"], p["sparsity"], p["model"]), {})
        g.setdefault(p["task"], []).append(p)
    out = []
    for (ds, sp, mdl), tasks in sorted(groups.items()):
        row = {"dataset": ds, "sparsity": sp, "model": mdl}
        for task, (col, _) in TASKS.items():
            ps = tasks.get(task, [])
            vals = [p["test_metric"] for p in ps if p["test_metric"] is not None]
            row[col] = float(np.mean(vals)) if vals else None
            lams = sorted({p["best_lambda"] for p in ps})
            row[f"best_lambda_{task}"] = " ".join(f"{x:.1f}" for x in lams)
        out.append(row)
    return out


def run_sparsity_ablation(cfg: SweepConfig, progress=None) -> Path:
    if cfg.sparsity == (0.0,):
        cfg = replace(cfg, sparsity=ABLATION_SPARSITY)
    out, results = execute(cfg, progress)
    emit_report(out, results, cfg.lambdas, expected=len(_cells(cfg)))
    rows = result_rows(select_cells(results))
    cols = ["dataset", "sparsity", "model", "sp_mae", "kt_auc", "ot_acc", "best_lambda_SP", "best_lambda_KT",
            "best_lambda_OT"]
    (out / "sparsity_table.csv").write_text(_csv_text(cols, sparsity_table(rows)))
    return out
