"""Command-line entry point.

Subcommands: gen, train, eval, ablate, report. All randomness flows from a
single --seed through named substreams (data / init / train / eval), so each
stage is independently reproducible. Every train run writes a manifest.json
that is sufficient to reproduce its artifacts bit for bit
(``train --from-manifest``).

Exit codes: 0 success, 2 config error, 3 numerical/degenerate error, 4 IO or
file-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import fewshot, report as report_mod, trainer as trainer_mod
from .config import RunConfig, apply_entries, config_entries, load_config
from .data import DatasetSplit, generate_synthetic, hierarchy_from_samples, load_split, save_hierarchy, save_split
from .errors import ConfigError, DataFormatError, NumericsError
from .fewshot import EvalConfig, combine_cascade, combine_concat, combine_ensemble, evaluate, sample_episode
from .model import load_checkpoint, save_checkpoint
from .rng import substream
from .trainer import TrainConfig, load_train_state, save_train_state, train, write_metrics_csv

COMBINATORS = ("ensemble", "cascade", "concat")


def _hash_files(paths: list[str]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def _dataset_hash(data_dir: str) -> str:
    return _hash_files([os.path.join(data_dir, f"{n}.csv") for n in ("train", "val", "test")])


def _ensure_dataset(cfg: RunConfig, data_dir: str | None, out_dir: str) -> tuple[DatasetSplit, str]:
    """Load the dataset from data_dir, or generate it under out_dir/data."""
    if data_dir:
        return load_split(data_dir), data_dir
    gen_dir = os.path.join(out_dir, "data")
    os.makedirs(gen_dir, exist_ok=True)
    split, hierarchy = generate_synthetic(cfg.data)
    save_split(split, gen_dir)
    save_hierarchy(hierarchy, os.path.join(gen_dir, "hierarchy.json"))
    return split, gen_dir


def _collect_overrides(args) -> dict[str, str]:
    entries: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        entries[key.strip()] = value.strip()
    if getattr(args, "preset", None):
        entries["train.preset"] = args.preset
    if getattr(args, "epochs", None) is not None:
        entries["train.epochs"] = str(args.epochs)
    if getattr(args, "mode", None):
        entries["eval.mode"] = args.mode
    if getattr(args, "episodes", None) is not None:
        entries["eval.episodes"] = str(args.episodes)
    if getattr(args, "shot", None) is not None:
        entries["eval.shot"] = str(args.shot)
    if args.seed is not None:
        entries["train.seed"] = str(args.seed)
        entries["data.seed"] = str(args.seed)
    return entries


def _write_manifest(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    os.makedirs(args.out_dir, exist_ok=True)
    split, hierarchy = generate_synthetic(cfg.data)
    paths = save_split(split, args.out_dir)
    save_hierarchy(hierarchy, os.path.join(args.out_dir, "hierarchy.json"))
    print(f"wrote {', '.join(sorted(paths.values()))} and hierarchy.json")
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    if args.from_manifest:
        with open(args.from_manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        entries = {k: str(v) for k, v in manifest["config"].items()}
        cfg = apply_entries(RunConfig(), entries)
        data_dir = args.data or manifest["data_dir"]
    else:
        cfg = load_config(args.config, _collect_overrides(args))
        data_dir = args.data
    os.makedirs(args.out_dir, exist_ok=True)
    split, data_dir = _ensure_dataset(cfg, data_dir, args.out_dir)

    ckpt_path = os.path.join(args.out_dir, "checkpoint.ckpt")
    state_path = os.path.join(args.out_dir, "train_state.ckpt")
    metrics_path = os.path.join(args.out_dir, "metrics.csv")

    resume_state = resume_model = None
    if args.resume:
        if not (os.path.exists(ckpt_path) and os.path.exists(state_path)):
            raise DataFormatError(f"--resume needs {ckpt_path} and {state_path}")
        resume_model = load_checkpoint(ckpt_path)
        tcfg = trainer_mod.apply_preset_defaults(cfg.train)
        n_classes = resume_model.n_classes
        resume_state = load_train_state(state_path, resume_model, tcfg, n_classes)

    result = train(split, cfg.train, resume=resume_state, resume_model=resume_model)
    save_checkpoint(result.model, ckpt_path)
    save_train_state(result.state, state_path)
    if args.resume and os.path.exists(metrics_path):
        with open(metrics_path, "a", encoding="utf-8", newline="\n") as fh:
            for r in result.history:
                fh.write(
                    f"{r.epoch},{r.step},{r.lr:.10g},{r.loss_ce:.10g},"
                    f"{r.loss_cont:.10g},{r.loss_total:.10g},{r.coarse_acc:.6g}\n"
                )
    else:
        write_metrics_csv(result.history, metrics_path)

    manifest = {
        "command": "train",
        "seed": cfg.train.seed,
        "config": config_entries(cfg),
        "data_dir": os.path.abspath(data_dir),
        "dataset_hash": _dataset_hash(data_dir),
        "checkpoint": os.path.abspath(ckpt_path),
        "train_state": os.path.abspath(state_path),
        "metrics": os.path.abspath(metrics_path),
        "eval_reports": [],
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), manifest)
    if result.history:
        last = result.history[-1]
        print(
            f"trained preset={cfg.train.preset} epochs={cfg.train.epochs} "
            f"final loss={last.loss_total:.4f} acc={last.coarse_acc:.3f}"
        )
    else:
        print(f"epochs={cfg.train.epochs}; model initialized and saved unchanged")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _eval_combined(args, cfg: RunConfig, model, split: DatasetSplit, rng) -> fewshot.EvalReport:
    second = load_checkpoint(args.second)
    hierarchy = hierarchy_from_samples(split.test)
    accs = []
    streams = rng.spawn(cfg.eval.episodes)
    for ep_rng in streams:
        episode = sample_episode(split.test, hierarchy, cfg.eval.mode, cfg.eval.shot, ep_rng)
        if args.combine == "ensemble":
            accs.append(combine_ensemble(model, second, episode, cfg.eval.head))
        elif args.combine == "cascade":
            accs.append(combine_cascade(model, second, episode, hierarchy, cfg.eval.head))
        else:
            accs.append(combine_concat(model, second, episode, cfg.eval.head))
    mean = float(np.mean(accs))
    ci = float(1.96 * np.std(accs) / np.sqrt(len(accs)))
    echo = cfg.eval.echo()
    echo["combine"] = args.combine
    return fewshot.EvalReport(cfg.eval.mode, mean, ci, accs, echo)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    ckpt_path = args.checkpoint or os.path.join(args.out_dir, "checkpoint.ckpt")
    model = load_checkpoint(ckpt_path)
    data_dir = args.data or os.path.join(args.out_dir, "data")
    split = load_split(data_dir)
    seed = args.seed if args.seed is not None else cfg.train.seed
    rng = substream(seed, "eval", cfg.eval.mode)
    if args.combine:
        if not args.second:
            raise ConfigError(f"--combine {args.combine} requires --second <checkpoint>")
        rep = _eval_combined(args, cfg, model, split, rng)
        stem = f"eval_{args.combine}_{cfg.eval.mode}"
    else:
        rep = evaluate(model, split.test, cfg.eval, rng)
        stem = f"eval_{cfg.eval.mode}"
    os.makedirs(args.out_dir, exist_ok=True)
    md_path = os.path.join(args.out_dir, stem + ".md")
    csv_path = os.path.join(args.out_dir, stem + ".csv")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write(rep.to_markdown())
    fewshot.write_eval_csv(rep, csv_path)
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        entry = {"mode": cfg.eval.mode, "files": [md_path, csv_path], "mean": rep.mean_accuracy, "ci95": rep.ci95}
        manifest.setdefault("eval_reports", []).append(entry)
        _write_manifest(manifest_path, manifest)
    print(f"{cfg.eval.mode}: mean accuracy {rep.mean_accuracy:.4f} ± {rep.ci95:.4f} over {cfg.eval.episodes} episodes")
    return 0


def ablation_rows(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """The 6 architecture grid cells plus the 7 baseline presets."""
    rows: list[tuple[str, RunConfig]] = []
    for variant in ("seq", "fork"):
        for queue in ("multi", "single"):
            for ang in (True, False):
                if ang and variant == "fork":
                    continue  # fork classifier dim != embedding dim
                label = f"{variant}/{queue}/{'angular' if ang else 'no-angular'}"
                entries = {
                    "train.preset": "ancor",
                    "train.variant": variant,
                    "train.contrastive.queue_mode": queue,
                    "train.contrastive.angular_enabled": str(ang),
                }
                rows.append((label, apply_entries(base, entries)))
    for preset in ("coarse", "coarse-plus", "contrastive-only", "naive-combo", "supcon", "fine", "fine-plus"):
        rows.append((preset, apply_entries(base, {"train.preset": preset})))
    return rows


def _run_ablation_cell(payload: dict) -> dict:
    """Train one configuration and evaluate it in all four episode modes.

    Top-level so ablation cells can run in worker processes.
    """
    cfg = apply_entries(RunConfig(), {k: str(v) for k, v in payload["config"].items()})
    label = payload["label"]
    try:
        split = load_split(payload["data_dir"])
        result = train(split, cfg.train)
        cell_dir = payload.get("cell_dir")
        if cell_dir:
            os.makedirs(cell_dir, exist_ok=True)
            save_checkpoint(result.model, os.path.join(cell_dir, "checkpoint.ckpt"))
            write_metrics_csv(result.history, os.path.join(cell_dir, "metrics.csv"))
        cells = {}
        for mode in report_mod.ABLATION_COLUMNS:
            ecfg = EvalConfig(
                episodes=cfg.eval.episodes,
                mode=mode,
                shot=cfg.eval.shot,
                head=cfg.eval.head,
                support_copies=cfg.eval.support_copies,
                include_original=cfg.eval.include_original,
                augment=cfg.eval.augment,
            )
            rng = substream(cfg.train.seed, "eval", mode)
            rep = evaluate(result.model, split.test, ecfg, rng)
            cells[mode] = (rep.mean_accuracy, rep.ci95)
        return {"label": label, "cells": cells, "error": None}
    except Exception as exc:  # cell failures are recorded in-row, sweep continues
        return {"label": label, "cells": {}, "error": f"{type(exc).__name__}: {exc}"}


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    os.makedirs(args.out_dir, exist_ok=True)
    _, data_dir = _ensure_dataset(cfg, args.data, args.out_dir)
    rows_spec = ablation_rows(cfg)
    payloads = [
        {
            "label": label,
            "config": config_entries(row_cfg),
            "data_dir": data_dir,
            "cell_dir": os.path.join(args.out_dir, "cells", label.replace("/", "_")),
        }
        for label, row_cfg in rows_spec
    ]
    if args.threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(_run_ablation_cell, payloads))
    else:
        results = [_run_ablation_cell(p) for p in payloads]

    table = report_mod.ablation_markdown(results)
    with open(os.path.join(args.out_dir, "ablation.md"), "w", encoding="utf-8") as fh:
        fh.write(table)
    report_mod.ablation_csv(results, os.path.join(args.out_dir, "ablation.csv"))
    print(table)

    if args.epochs_sweep:
        sweep_epochs = [int(p) for p in args.epochs_sweep.split(",") if p.strip()]
        sweep_rows = []
        for n_epochs in sweep_epochs:
            sweep_cfg = apply_entries(cfg, {"train.epochs": str(n_epochs)})
            split = load_split(data_dir)
            result = train(split, sweep_cfg.train)
            ecfg = EvalConfig(episodes=cfg.eval.episodes, mode="all-way", shot=cfg.eval.shot,
                              head=cfg.eval.head, augment=cfg.eval.augment)
            rep = evaluate(result.model, split.test, ecfg, substream(sweep_cfg.train.seed, "eval", "all-way"))
            sweep_rows.append({"label": cfg.train.preset, "epochs": n_epochs, "accuracy": rep.mean_accuracy})
        with open(os.path.join(args.out_dir, "epochs_sweep.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("label,epochs,accuracy\n")
            for r in sweep_rows:
                fh.write(f"{r['label']},{r['epochs']},{r['accuracy']:.6g}\n")
        report_mod.plot_epochs_sweep(sweep_rows, args.out_dir)
    return 0


def cmd_report(args) -> int:
    run_dir = args.run or args.out_dir
    out = report_mod.write_run_report(run_dir)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ancorlab", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="master seed for all substreams")
    parser.add_argument("--config", default=None, help="nested key-value config file")
    parser.add_argument("--out-dir", default="runs/latest", help="artifact directory")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for ablation cells")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic dataset CSVs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a preset and write checkpoint/metrics/manifest")
    p.add_argument("--data", default=None, help="dataset directory (default: generate)")
    p.add_argument("--preset", choices=trainer_mod.PRESETS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue from out-dir's checkpoint/state")
    p.add_argument("--from-manifest", default=None, help="reproduce a run from its manifest")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--mode", choices=fewshot.MODES, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--shot", type=int, default=None)
    p.add_argument("--combine", choices=COMBINATORS, default=None,
                   help="combine with --second (cascade: primary=coarse, second=fine)")
    p.add_argument("--second", default=None, help="second checkpoint for --combine")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the architecture grid and preset baselines")
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--epochs-sweep", default=None, metavar="E1,E2,...",
                   help="additionally train at several epoch budgets and plot the trend")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render markdown + SVG figures for a run directory")
    p.add_argument("--run", default=None, help="run directory (default: --out-dir)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
