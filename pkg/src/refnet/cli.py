"""Command-line entry point: ``refnet <subcommand> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ExperimentConfig
from .data import write_splits
from .errors import RefNetError
from .graph import theorem_sweep
from .losses import LossConfig
from .model import ReFNetModel, checkpoint_json, load_checkpoint
from .trainer import TrainState, evaluate_model, mask_labels, pretrain, train, write_log_csv

VARIANTS = ("baseline", "ReFNet", "ReFNet_MS")
METRIC_COLUMNS = ("accuracy", "micro_f1", "macro_f1", "auroc", "silhouette")


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _out_dir(args) -> Path:
    out = Path(os.environ.get("REFNET_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- training runs

def run_training(cfg: ExperimentConfig, loss_cfg: LossConfig, label_fraction: float, seed: int,
                 state: TrainState | None = None, stop_at: int | None = None,
                 pretrain_history: list | None = None) -> dict:
    """Data → mask → (pretrain) → train → test evaluation for one seed."""
    splits = cfg.splits(seed)
    tr = splits["train"]
    if label_fraction < 1:
        tr = mask_labels(tr, label_fraction, seed)
    spec = cfg.model_spec(splits)
    model = ReFNetModel(spec, seed=seed)
    tcfg = replace(cfg.train, seed=seed)
    if state is None:
        pretrain_history = []
        if loss_cfg.uses_refiner:
            pretrain(model, tr, tcfg, loss_cfg, history=pretrain_history)
    state = train(model, tr, splits["val"], tcfg, loss_cfg, state=state, stop_at=stop_at)
    finished = state.stopped or state.step >= tcfg.total_updates(tr.n)
    if state.best_params is not None:
        model.load_params(state.best_params)
    report = evaluate_model(model, splits["test"], with_embeddings=True) if finished else None
    return {"model": model, "state": state, "pretrain_history": pretrain_history or [], "test": report,
            "num_labeled": tr.num_labeled, "finished": finished}


def variant_loss(cfg: ExperimentConfig, variant: str, num_modalities: int) -> LossConfig:
    g = cfg.ablation.gamma
    if variant == "baseline":
        return replace(cfg.loss, gamma=(0.0,) * num_modalities, zeta=0.0)
    if variant == "ReFNet":
        return replace(cfg.loss, gamma=(g,) * num_modalities, zeta=0.0)
    return replace(cfg.loss, gamma=(g,) * num_modalities, zeta=cfg.ablation.zeta)


def ablation_cell(doc: dict, fraction: float, seed: int, variant: str) -> dict:
    cfg = ExperimentConfig.from_dict(doc)
    logging.disable(logging.WARNING)
    warnings.simplefilter("ignore")
    num_modalities = len(cfg.splits(seed)["train"].dims)
    res = run_training(cfg, variant_loss(cfg, variant, num_modalities), fraction, seed)
    row = {"label_fraction": fraction, "seed": seed, "variant": variant,
           "best_step": res["state"].best_step, "steps": res["state"].step}
    for m in METRIC_COLUMNS:
        row[m] = res["test"].metrics.get(m)
    return row


def run_ablation(cfg: ExperimentConfig) -> dict:
    doc = cfg.to_dict()
    cells = [(f, s, v) for f in sorted(cfg.ablation.label_fractions) for s in sorted(cfg.ablation.seeds)
             for v in VARIANTS]
    if cfg.ablation.workers > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(cfg.ablation.workers, mp_context=ctx) as pool:
            rows = list(pool.map(ablation_cell, *zip(*[(doc, *c) for c in cells])))
    else:
        rows = [ablation_cell(doc, *c) for c in cells]
    order = {v: i for i, v in enumerate(VARIANTS)}
    rows.sort(key=lambda r: (r["label_fraction"], r["seed"], order[r["variant"]]))
    return {"rows": rows, "summary": summarize(rows), "directional": directional(rows, cfg.ablation.metric)}


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for fraction in sorted({r["label_fraction"] for r in rows}):
        for variant in VARIANTS:
            cell = [r for r in rows if r["label_fraction"] == fraction and r["variant"] == variant]
            entry = {"label_fraction": fraction, "variant": variant, "n": len(cell)}
            for m in METRIC_COLUMNS:
                vals = np.array([r[m] for r in cell if r[m] is not None], dtype=np.float64)
                entry[f"{m}_mean"] = float(vals.mean()) if vals.size else None
                entry[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None)
            out.append(entry)
    return out


def directional(rows: list[dict], metric: str) -> list[dict]:
    """Per fraction: how many seeds each refiner variant matched or beat the baseline on ``metric``."""
    out = []
    for fraction in sorted({r["label_fraction"] for r in rows}):
        by = {(r["seed"], r["variant"]): r.get(metric) for r in rows if r["label_fraction"] == fraction}
        seeds = sorted({s for s, _ in by})
        entry = {"label_fraction": fraction, "metric": metric, "seeds": len(seeds)}
        for variant in VARIANTS[1:]:
            entry[f"{variant}_ge_baseline"] = sum(
                by[(s, variant)] is not None and by[(s, "baseline")] is not None
                and by[(s, variant)] >= by[(s, "baseline")] for s in seeds)
        sil = [_silhouettes(rows, fraction, s) for s in seeds]
        entry["silhouette_ordered"] = sum(
            all(v is not None for v in t) and t[2] >= t[1] >= t[0] for t in sil)
        out.append(entry)
    return out


def _silhouettes(rows, fraction, seed):
    vals = {r["variant"]: r["silhouette"] for r in rows if r["label_fraction"] == fraction and r["seed"] == seed}
    return tuple(vals.get(v) for v in VARIANTS)


# ---------------------------------------------------------------- subcommands

def cmd_generate(cfg: ExperimentConfig, out: Path, args) -> int:
    if cfg.data.source != "synthetic":
        raise RefNetError("generate needs data.source = 'synthetic'")
    splits = cfg.splits()
    paths = write_splits(out, splits)
    _write_json(out / "generate.json", {
        "command": "generate", "config": cfg.to_dict(), "seed": cfg.seed,
        "files": [p.name for p in paths], "sizes": {k: v.n for k, v in splits.items()},
    })
    return 0


def cmd_grad_check(cfg: ExperimentConfig, out: Path, args) -> int:
    report = gradcheck.run_all(seed=cfg.seed)
    _write_json(out / "grad_check.json", {"command": "grad-check", "config": cfg.to_dict(), "seed": cfg.seed,
                                           **report})
    for c in report["checks"]:
        if not c["pass"]:
            print(f"FAIL {c['name']}: relative error {c['rel_error']:.3e}", file=sys.stderr)
    return 0 if report["pass"] else 1


def theorem_summary(rows: list[dict]) -> list[dict]:
    keys = sorted({(r["m"], r["k"], r["noise"], r["fit_mode"]) for r in rows})
    out = []
    for m, k, noise, mode in keys:
        cell = [r for r in rows if (r["m"], r["k"], r["noise"], r["fit_mode"]) == (m, k, noise, mode)]
        rec = [r["support_recovery_rate"] for r in cell if r["support_recovery_rate"] is not None]
        inv = [r["inverse_max_error"] for r in cell if r["inverse_max_error"] is not None]
        out.append({
            "m": m, "k": k, "noise": noise, "fit_mode": mode, "instances": len(cell),
            "pass_rate": sum(r["pass"] for r in cell) / len(cell),
            "max_residual": max(r["residual"] for r in cell),
            "max_off_diagonal_ratio": max(r["off_diagonal_ratio"] for r in cell),
            "mean_support_recovery": float(np.mean(rec)) if rec else None,
            "max_inverse_error": max(inv) if inv else None,
        })
    return out


def cmd_theorem(cfg: ExperimentConfig, out: Path, args) -> int:
    rows = theorem_sweep(cfg.theorem, seed=cfg.seed)
    clean = [r for r in rows if r["noise"] == 0]
    ok = all(r["pass"] for r in clean)
    _write_json(out / "theorem.json", {
        "command": "theorem", "config": cfg.to_dict(), "seed": cfg.seed,
        "pass": ok, "summary": theorem_summary(rows), "instances": rows,
    })
    return 0 if ok else 1


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    state, pre = None, None
    if args.resume:
        doc = json.loads(Path(args.resume).read_text())
        state, pre = TrainState.from_json(doc["train_state"]), doc["pretrain_history"]
    res = run_training(cfg, cfg.loss, cfg.data.label_fraction, cfg.seed, state=state, stop_at=args.stop_at,
                       pretrain_history=pre)
    st = res["state"]
    if not res["finished"]:
        _write_json(out / "train_state.json", {"config": cfg.to_dict(), "seed": cfg.seed,
                                              "train_state": st.to_json(),
                                              "pretrain_history": res["pretrain_history"]})
        return 0
    write_log_csv(out / "train_log.csv", st.history)
    if res["pretrain_history"]:
        write_log_csv(out / "pretrain_log.csv", res["pretrain_history"])
    (out / "checkpoint.json").write_text(checkpoint_json(res["model"].params()))
    _write_json(out / "report.json", {
        "command": "train", "config": cfg.to_dict(), "seed": cfg.seed,
        "model_spec": res["model"].spec.to_dict(), "num_labeled": res["num_labeled"],
        "pretrain_steps": len(res["pretrain_history"]), "steps": st.step, "early_stopped": st.stopped,
        "best_step": st.best_step, "best_val_metric": st.best_metric, "evals": st.evals,
        "test": res["test"].to_dict(),
    })
    return 0


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> int:
    result = run_ablation(cfg)
    header = ["label_fraction", "seed", "variant", "best_step", "steps", *METRIC_COLUMNS]
    _write_csv(out / "ablation.csv", header, [[_cell(r[h]) for h in header] for r in result["rows"]])
    sheader = list(result["summary"][0])
    _write_csv(out / "ablation_summary.csv", sheader, [[_cell(r[h]) for h in sheader] for r in result["summary"]])
    _write_json(out / "ablation.json", {"command": "ablate", "config": cfg.to_dict(), "seed": cfg.seed, **result})
    return 0


def _cell(v):
    return "" if v is None else v


def _label_text(y, labelled: bool) -> str:
    if not labelled:
        return ""
    if np.ndim(y):
        return ";".join(str(i) for i in np.flatnonzero(y))
    return str(int(y))


def cmd_export_embeddings(cfg: ExperimentConfig, out: Path, args) -> int:
    splits = cfg.splits()
    model = ReFNetModel(cfg.model_spec(splits), params=load_checkpoint(args.checkpoint or out / "checkpoint.json"))
    batch = splits[args.split]
    emb = model.embed(batch).data
    header = ["id", "label", *[f"e{j + 1}" for j in range(emb.shape[1])]]
    rows = []
    for i in range(batch.n):
        labelled = batch.labels is not None and bool(batch.label_mask[i])
        y = batch.labels[i] if labelled else None
        rows.append([batch.sample_ids[i], _label_text(y, labelled), *emb[i].tolist()])
    _write_csv(out / f"embeddings_{args.split}.csv", header, rows)
    _write_json(out / f"embeddings_{args.split}.json", {
        "command": "export-embeddings", "config": cfg.to_dict(), "seed": cfg.seed, "split": args.split,
        "checkpoint": str(args.checkpoint or out / "checkpoint.json"), "n": batch.n, "k": int(emb.shape[1]),
    })
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "grad-check": cmd_grad_check,
    "theorem": cmd_theorem,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refnet", description="Refiner fusion network experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="refnet-out", help="output directory (REFNET_OUT overrides)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--stop-at", type=int, help="interrupt after N updates and save train_state.json")
            p.add_argument("--resume", help="continue from a saved train_state.json")
        if name == "export-embeddings":
            p.add_argument("--checkpoint", help="checkpoint JSON (default OUT/checkpoint.json)")
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, args.seed)
        return COMMANDS[args.command](cfg, _out_dir(args), args)
    except (RefNetError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"refnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
