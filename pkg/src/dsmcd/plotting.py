"""Figure rendering for run artifacts (PNG files next to the JSON/CSV outputs)."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_histogram_csv  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _figure(width=5.0, height=3.2, **kw):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height), **kw)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_curves(records, path):
    fig, ax = _figure()
    steps = [r["step"] for r in records]
    for key in ("loss", "loss_semantic", "loss_height", "loss_pseudo", "consistency"):
        ys = [r.get(key) for r in records]
        if any(y is not None for y in ys):
            ax.plot(steps, [np.nan if y is None else y for y in ys], label=key, lw=1.2 if key == "loss" else 0.9)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_height_histogram(hist, path, title=None):
    edges = np.asarray(hist["edges"])
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = np.diff(edges)
    fig, ax = _figure()
    ax.bar(centers, hist["gt"], width=width, color="tab:blue", alpha=0.5, label="reference")
    ax.bar(centers, hist["pred"], width=width, color="tab:red", alpha=0.5, label="predicted")
    ax.set_yscale("symlog", linthresh=1)
    ax.set_xlabel("height change (m)")
    ax.set_ylabel("pixels")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_temperature_sweep(index, root, path):
    runs = index["runs"]
    fig, axes = _figure(3.0 * len(runs), 3.0, ncols=len(runs), sharey=True, squeeze=False)
    for ax, run in zip(axes[0], runs):
        hist = read_histogram_csv(Path(root) / run["histogram"])
        edges = np.asarray(hist["edges"])
        centers = 0.5 * (edges[1:] + edges[:-1])
        ax.step(centers, hist["gt"], where="mid", color="tab:blue", label="reference")
        ax.step(centers, hist["pred"], where="mid", color="tab:red", label="predicted")
        ax.set_yscale("symlog", linthresh=1)
        ax.set_title(f"t = {run['t']:g}")
        ax.set_xlabel("height change (m)")
    axes[0][0].set_ylabel("pixels")
    axes[0][0].legend(fontsize=7)
    return _save(fig, path)


def plot_cumulative_height(stats, path):
    cum = stats["cumulative_height"]
    fig, ax = _figure()
    x = cum["bin_upper_edges_m"]
    ax.plot(x, cum["newly_built"], label="newly-built", color="tab:red")
    ax.plot(x, cum["demolished"], label="demolished", color="tab:blue")
    ax.set_xlabel("|height change| (m)")
    ax.set_ylabel("cumulative frequency")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return _save(fig, path)


def plot_table(csv_path, path):
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    fig, ax = _figure(1.0 + 0.75 * len(header), 0.6 + 0.3 * len(body))
    ax.axis("off")
    table = ax.table(cellText=body, colLabels=header, loc="center", cellLoc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(7)
    return _save(fig, path)


def write_metrics_summary(reports, path):
    """One CSV row per ``metrics.json``: its run directory, then the metric fields."""
    from .metrics import HEIGHT_FIELDS, SEMANTIC_FIELDS

    fields = ("run",) + SEMANTIC_FIELDS + HEIGHT_FIELDS + ("mparams",)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for run, rep in reports:
            w.writerow([run] + ["" if rep.get(f) is None else repr(rep[f]) for f in fields[1:]])
    return Path(path)


def render_report(input_dir, out_dir=None):
    """Render every recognized artifact under ``input_dir``; returns the written paths.

    Besides the figures, ``metrics_summary.csv`` tabulates every ``metrics.json`` found.
    """
    input_dir = Path(input_dir)
    out_dir = Path(out_dir) if out_dir is not None else input_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def target(src, name):
        rel = src.parent.relative_to(input_dir)
        stem = "_".join(rel.parts + (name,)) if rel.parts else name
        return out_dir / f"{stem}.png"

    for p in sorted(input_dir.rglob("train_log.jsonl")):
        records = read_log(p)
        if records:
            written.append(plot_loss_curves(records, target(p, "loss_curves")))
    for p in sorted(input_dir.rglob("height_hist.csv")):
        written.append(plot_height_histogram(read_histogram_csv(p), target(p, "height_hist")))
    for p in sorted(input_dir.rglob("index.json")):
        with open(p) as fh:
            index = json.load(fh)
        if "runs" in index:
            written.append(plot_temperature_sweep(index, p.parent, target(p, "temperature_sweep")))
    for p in sorted(input_dir.rglob("ablation.csv")):
        written.append(plot_table(p, target(p, "ablation_table")))
    for p in sorted(input_dir.rglob("stats.json")):
        with open(p) as fh:
            stats = json.load(fh)
        if "dataset_stats" in stats:
            written.append(plot_cumulative_height(stats["dataset_stats"], target(p, "cumulative_height")))
    reports = []
    for p in sorted(input_dir.rglob("metrics.json")):
        with open(p) as fh:
            reports.append((p.parent.relative_to(input_dir).as_posix() or ".", json.load(fh)))
    if reports:
        written.append(write_metrics_summary(reports, out_dir / "metrics_summary.csv"))
    return written
