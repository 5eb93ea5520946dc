"""Command-line entry point: ``dpmtl <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .ingestion import (
    DatasetValidationError,
    FilterError,
    ParseError,
    SplitSpec,
    apply_sparsity_mask,
    load_dataset,
    split_dataset,
    split_users,
    top_n_filter,
    write_interactions,
    write_scores,
)
from .models import FAMILIES, build_model, load_model
from .runner import ConfigError, SweepConfig, resolve_output, run_sparsity_ablation, run_sweep
from .score_prediction import sp_predictions
from .metrics import mae
from .synthgen import GenConfig, bayes_optimal_metrics, generate_dataset
from .training import TrainConfig, evaluate, train

log = logging.getLogger("dpmtl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _train_config(base: dict, args) -> TrainConfig:
    cfg = {k: v for k, v in base.items() if k in {f.name for f in fields(TrainConfig)}}
    for name in ("lam", "lr", "batch_size", "seq_batch_size", "max_epochs", "patience", "seed", "selection"):
        v = getattr(args, name, None)
        if v is not None:
            cfg[name] = v
    try:
        return TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seq-batch-size", dest="seq_batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--selection", choices=["loss", "auc", "acc"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    d = load_dataset(args.interactions, args.scores)
    if args.top_items is not None or args.top_users is not None:
        d = top_n_filter(d, args.top_items or 1.0, args.top_users or 1.0)
    if args.sparsity:
        d = apply_sparsity_mask(d, args.sparsity, args.seed)
    summary = {
        "users": d.num_users,
        "items": d.num_items,
        "interactions": len(d),
        "sparsity": d.sparsity,
        "correct_rate": float(d.labels.mean()) if len(d) else None,
        "options": {str(k): int(v) for k, v in zip(*np.unique(d.options_per_item, return_counts=True))},
        "scored_users": len(d.scores or {}),
    }
    if args.out:
        out = resolve_output(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "interactions.csv", "w", newline="") as f:
            write_interactions(d, f)
        if d.scores:
            with open(out / "scores.csv", "w", newline="") as f:
                write_scores(d.scores, f)
        summary["written"] = str(out)
    _print(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    base = _load_json(args.config)
    family = args.family or base.get("family", "irt")
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    dim = args.dim or base.get("dim", 8)
    layers = args.layers or base.get("layers", 1)
    cfg = _train_config(base, args)
    split = SplitSpec(*(args.split or base.get("split", (0.8, 0.1, 0.1))), seed=cfg.seed)
    d = load_dataset(args.interactions, args.scores)
    parts = split_dataset(d, split)
    model = build_model(family, d, dim=dim, layers=layers, seed=cfg.seed,
                        **({"bias": base["bias"]} if "bias" in base else {}))
    report = train(model, parts.train, parts.val, cfg,
                   log=lambda e, a, b: log.info("epoch %d train %.4f val %.4f", e, a, b))
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz")
    (out / "report.json").write_text(report.to_json())
    metrics = {}
    for name, part in (("val", parts.val), ("test", parts.test)):
        if len(part):
            metrics[name] = evaluate(model, part, cfg.lam).as_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    # sequence models need the training history back when evaluated later
    with open(out / "history.csv", "w", newline="") as f:
        write_interactions(parts.train, f)
    _print({"out": str(out), "best_epoch": report.best_epoch, **metrics})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.checkpoint)
    part = load_dataset(args.interactions)
    history = load_dataset(args.history) if args.history else None
    if model.sequence:
        if history is None:
            raise ConfigError("DP-BiDKT checkpoints need --history (the training interactions)")
        model.set_context(history)
    if part.num_items > model.num_items or part.num_users > model.num_users:
        raise ConfigError("evaluation data has users or items outside the checkpoint's index space")
    part = _reindex(part, model)
    _print(evaluate(model, part, args.lam).as_dict())
    return EXIT_OK


def _reindex(part, model):
    """Widen ``part``'s index space to the model's (CSV inference only sees indices present)."""
    from .data import Dataset

    opts = np.array(model.layout.options_per_item)
    seen = part.options_per_item
    if np.any(seen > opts[: len(seen)]):
        raise ConfigError("evaluation data has more options than the checkpoint for some item")
    return Dataset(model.num_users, model.num_items, opts, part.users, part.items, part.chosen,
                   part.correct, part.positions, part.scores, part.name)


def cmd_sweep(args, ablate: bool = False) -> int:
    base = _load_json(args.config)
    for flag, key, conv in (
        ("families", "families", _strs), ("lambdas", "lambdas", _floats), ("dims", "dims", _ints),
        ("layers", "layers", _ints), ("seeds", "seeds", _ints), ("sparsity", "sparsity", _floats),
    ):
        v = getattr(args, flag)
        if v is not None:
            base[key] = conv(v)
    if args.out:
        base["output"] = args.out
    if args.workers:
        base["workers"] = args.workers
    if args.max_epochs:
        base.setdefault("train", {})["max_epochs"] = args.max_epochs
    if args.interactions:
        base["datasets"] = [{"name": Path(args.interactions).stem, "interactions": args.interactions,
                             "scores": args.scores}]
    try:
        cfg = SweepConfig.from_dict(base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    progress = lambda k, n: log.info("cell %d/%d", k, n)  # noqa: E731
    out = run_sparsity_ablation(cfg, progress) if ablate else run_sweep(cfg, progress)
    _print({"out": str(out)})
    return EXIT_OK


def cmd_sp(args) -> int:
    model = load_model(args.checkpoint)
    if model.sequence:
        if not args.history:
            raise ConfigError("DP-BiDKT checkpoints need --history")
        model.set_context(_reindex(load_dataset(args.history), model))
    from .ingestion import parse_scores

    with open(args.scores, "rb") as f:
        scores = parse_scores(f)
    users = np.array(sorted(u for u in scores if u < model.num_users), dtype=np.int64)
    if len(users) < len(scores):
        raise ConfigError("score file has users outside the checkpoint's index space")
    test_frac = 1.0 - args.train_frac
    tr, _, te = split_users(users, SplitSpec(args.train_frac, 0.0, test_frac, seed=args.seed))
    theta = model.user_representations()
    sp_model, pred, actual = sp_predictions(theta, scores, tr, te)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sp_model.json").write_text(sp_model.to_json())
    with open(out / "sp_predictions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user", "predicted", "actual"])
        for u, p, a in zip(te, np.atleast_1d(pred), actual):
            w.writerow([int(u), f"{p:.4f}", f"{a:.4f}"])
    result = {"test_mae": mae(np.atleast_1d(pred), actual), "train_users": len(tr), "test_users": len(te),
              "rank_deficient": sp_model.rank_deficient}
    _print(result)
    return EXIT_OK


def cmd_synth(args) -> int:
    base = _load_json(args.config)
    for f in fields(GenConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    if isinstance(base.get("options"), list):
        base["options"] = tuple(base["options"])
    if base.get("score_weights") is not None:
        base["score_weights"] = tuple(base["score_weights"])
    try:
        g = GenConfig(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    d, truth = generate_dataset(g)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.csv", "w", newline="") as f:
        write_interactions(d, f)
    with open(out / "scores.csv", "w", newline="") as f:
        write_scores(d.scores, f)
    np.savez(out / "truth.npz", correct=truth.correct, score_weights=truth.score_weights,
             **{f"p_{k}": v for k, v in truth.params.items()})
    auc, acc = bayes_optimal_metrics(d, truth)
    summary = {"config": g.to_dict(), "interactions": len(d), "bayes_kt_auc": auc, "bayes_ot_acc": acc,
               "out": str(out)}
    (out / "synth.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _print(summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    cases = run_gradchecks(_strs(args.families), range(args.seeds), max_coords=args.max_coords)
    worst = {}
    for c in cases:
        if c.family not in worst or c.error > worst[c.family].error:
            worst[c.family] = c
    _print({f: asdict(c) for f, c in worst.items()})
    return EXIT_OK if all(c.error < args.tol for c in cases) else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmtl", description="Dichotomous-polytomous multi-task learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate and summarize an interaction file")
    s.add_argument("interactions")
    s.add_argument("--scores")
    s.add_argument("--top-items", dest="top_items", type=float)
    s.add_argument("--top-users", dest="top_users", type=float)
    s.add_argument("--sparsity", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("interactions")
    s.add_argument("--scores")
    s.add_argument("--config")
    s.add_argument("--family", choices=FAMILIES)
    s.add_argument("--dim", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--split", type=_floats)
    s.add_argument("--out", default="runs/train")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="KT-AUC, OT-ACC and loss of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("interactions")
    s.add_argument("--history")
    s.add_argument("--lam", type=float, default=0.5)
    s.set_defaults(func=cmd_evaluate)

    for name, ablate in (("sweep", False), ("ablate", True)):
        s = sub.add_parser(name, help="lambda sweep" if not ablate else "sparsity ablation")
        s.add_argument("--config")
        s.add_argument("--interactions")
        s.add_argument("--scores")
        s.add_argument("--families")
        s.add_argument("--lambdas")
        s.add_argument("--dims")
        s.add_argument("--layers")
        s.add_argument("--seeds")
        s.add_argument("--sparsity")
        s.add_argument("--workers", type=int)
        s.add_argument("--max-epochs", dest="max_epochs", type=int)
        s.add_argument("--out")
        s.set_defaults(func=lambda a, ablate=ablate: cmd_sweep(a, ablate))

    s = sub.add_parser("sp", help="score prediction from a checkpoint's user representations")
    s.add_argument("checkpoint")
    s.add_argument("scores")
    s.add_argument("--history")
    s.add_argument("--train-frac", dest="train_frac", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="runs/sp")
    s.set_defaults(func=cmd_sp)

    s = sub.add_parser("synth", help="generate a synthetic dataset with known parameters")
    s.add_argument("--config")
    s.add_argument("--num-users", dest="num_users", type=int)
    s.add_argument("--num-items", dest="num_items", type=int)
    s.add_argument("--options", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--discrimination", type=float)
    s.add_argument("--temperature", type=float)
    s.add_argument("--distractor-scale", dest="distractor_scale", type=float)
    s.add_argument("--density", type=float)
    s.add_argument("--score-noise", dest="score_noise", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs/synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gradcheck", help="finite-difference check of every model")
    s.add_argument("--families", default=",".join(FAMILIES))
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--max-coords", dest="max_coords", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DatasetValidationError, FilterError, FileNotFoundError) as exc:
        # unusable inputs are configuration problems, caught before training
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
