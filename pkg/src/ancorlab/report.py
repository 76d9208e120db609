"""Report rendering: markdown tables, CSVs, and SVG metric figures."""
from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataFormatError


def load_metrics_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            try:
                rows.append(
                    {
                        "epoch": int(raw["epoch"]),
                        "step": int(raw["step"]),
                        "lr": float(raw["lr"]),
                        "loss_ce": float(raw["loss_ce"]),
                        "loss_cont": float(raw["loss_cont"]),
                        "loss_total": float(raw["loss_total"]),
                        "coarse_acc": float(raw["coarse_acc"]),
                    }
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: malformed metrics row {raw!r}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no metrics rows")
    return rows


def _epoch_means(rows: list[dict], key: str) -> tuple[list[int], list[float]]:
    sums: dict[int, list[float]] = {}
    for r in rows:
        sums.setdefault(r["epoch"], []).append(r[key])
    epochs = sorted(sums)
    return epochs, [sum(sums[e]) / len(sums[e]) for e in epochs]


def plot_metrics(rows: list[dict], out_dir) -> list[str]:
    """Loss and lr line plots as SVG files; returns the written paths."""
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("loss_ce", "CE"), ("loss_cont", "contrastive"), ("loss_total", "total")):
        epochs, means = _epoch_means(rows, key)
        ax.plot(epochs, means, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    p = os.path.join(out_dir, "loss_curves.svg")
    fig.savefig(p)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(range(len(rows)), [r["lr"] for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel("lr")
    ax.set_title("learning-rate schedule")
    fig.tight_layout()
    p = os.path.join(out_dir, "lr_schedule.svg")
    fig.savefig(p)
    plt.close(fig)
    paths.append(p)
    return paths


def plot_epochs_sweep(sweep_rows: list[dict], out_dir) -> str:
    """All-way accuracy vs training length; one line per configuration."""
    by_label: dict[str, list[tuple[int, float]]] = {}
    for r in sweep_rows:
        by_label.setdefault(r["label"], []).append((r["epochs"], r["accuracy"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in sorted(by_label.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("train epochs")
    ax.set_ylabel("all-way accuracy")
    ax.legend()
    ax.set_title("longer training")
    fig.tight_layout()
    p = os.path.join(out_dir, "epochs_sweep.svg")
    fig.savefig(p)
    plt.close(fig)
    return p


ABLATION_COLUMNS = ("five-way", "all-way", "intra-class", "coarse-all-way")


def ablation_markdown(rows: list[dict]) -> str:
    """rows: {label, cells: {mode: (mean, ci) or None}, error: str or None}."""
    head = "| configuration | " + " | ".join(ABLATION_COLUMNS) + " |"
    sep = "| --- |" + " --- |" * len(ABLATION_COLUMNS)
    lines = [head, sep]
    for row in rows:
        if row.get("error"):
            cells = [f"error: {row['error']}"] + [""] * (len(ABLATION_COLUMNS) - 1)
        else:
            cells = []
            for mode in ABLATION_COLUMNS:
                mean, ci = row["cells"][mode]
                cells.append(f"{mean:.4f} ± {ci:.4f}")
        lines.append("| " + row["label"] + " | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("configuration," + ",".join(
            f"{m}_acc,{m}_ci95" for m in ABLATION_COLUMNS) + ",error\n")
        for row in rows:
            cells = []
            for mode in ABLATION_COLUMNS:
                if row.get("error"):
                    cells += ["", ""]
                else:
                    mean, ci = row["cells"][mode]
                    cells += [f"{mean:.6g}", f"{ci:.6g}"]
            fh.write(f"{row['label']}," + ",".join(cells) + f",{row.get('error') or ''}\n")


def write_run_report(run_dir) -> str:
    """Summarize a train/eval run directory into report.md plus SVG figures."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    lines = ["# Run report", ""]
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        lines.append(f"- seed: {manifest.get('seed')}")
        lines.append(f"- preset: {manifest.get('config', {}).get('train.preset')}")
        lines.append(f"- dataset hash: {manifest.get('dataset_hash')}")
        lines.append(f"- wall clock (s): {manifest.get('wall_clock_s')}")
        lines.append("")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        rows = load_metrics_csv(metrics_path)
        for p in plot_metrics(rows, run_dir):
            lines.append(f"![{os.path.basename(p)}]({os.path.basename(p)})")
        last_epoch, means = _epoch_means(rows, "loss_total")
        lines.append("")
        lines.append(f"- final epoch mean total loss: {means[-1]:.6f}")
        _, accs = _epoch_means(rows, "coarse_acc")
        lines.append(f"- final epoch train accuracy: {accs[-1]:.4f}")
        lines.append("")
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("eval_") and name.endswith(".md"):
            lines.append(f"## {name[:-3]}")
            with open(os.path.join(run_dir, name), "r", encoding="utf-8") as fh:
                lines.append(fh.read())
    out = os.path.join(run_dir, "report.md")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return out
