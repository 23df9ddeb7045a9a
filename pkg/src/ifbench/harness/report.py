"""Static figures and a machine-readable summary over finished runs."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from ..analysis import CorrelationMatrix, tsne_embed  # noqa: E402
from ..dataio import IF_CHANNELS  # noqa: E402
from ..profiling import FeatureTable  # noqa: E402
from .resources import RESOURCES_FILE, ResourceReport, resource_table  # noqa: E402

log = logging.getLogger(__name__)

METRIC_LABELS = {"mse": "MSE", "psnr": "PSNR (dB)", "ssim": "SSIM"}


def _family(run: Path) -> str:
    try:
        return json.loads((run / "config.json").read_text())["family"]
    except (OSError, KeyError, json.JSONDecodeError):
        return run.name


def _load_matrix(path: Path) -> CorrelationMatrix:
    d = json.loads(path.read_text())
    groups = [tuple(g.split("/")) for g in d["groups"]]
    vals = np.array([[np.nan if v is None else v for v in row] for row in d["values"]], dtype=float)
    return CorrelationMatrix(groups, d["methods"], vals, d["grouping"])


def metric_boxplots(runs: Sequence[Path], out: Path) -> Path | None:
    frames = []
    for r in runs:
        p = r / "quality" / "quality_records.csv"
        if p.exists():
            frames.append(pd.read_csv(p).assign(model=_family(r)))
    if not frames:
        return None
    df = pd.concat(frames, ignore_index=True)
    models = list(dict.fromkeys(df["model"]))
    channels = sorted(df["channel"].unique())
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    width = 0.8 / len(models)
    for ax, metric in zip(axes, METRIC_LABELS):
        for k, m in enumerate(models):
            data = [df[(df.model == m) & (df.channel == c)][metric].to_numpy() for c in channels]
            pos = [c + (k - (len(models) - 1) / 2) * width for c in channels]
            bp = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True, showfliers=False)
            for patch in bp["boxes"]:
                patch.set_facecolor(plt.cm.tab10(k))
        ax.set_xticks(channels)
        ax.set_xticklabels([IF_CHANNELS[c - 1] for c in channels])
        ax.set_title(METRIC_LABELS[metric])
    handles = [plt.Rectangle((0, 0), 1, 1, color=plt.cm.tab10(k)) for k in range(len(models))]
    fig.legend(handles, models, loc="upper right")
    fig.tight_layout()
    path = out / "metrics_by_channel.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def correlation_heatmap(runs: Sequence[Path], grouping: str, out: Path) -> tuple[Path, CorrelationMatrix] | None:
    mats = [_load_matrix(r / "analysis" / f"correlation_{grouping}.json")
            for r in runs if (r / "analysis" / f"correlation_{grouping}.json").exists()]
    if not mats:
        return None
    cm = CorrelationMatrix.combine(mats)
    labels = ["/".join(g) for g in cm.groups]
    with open(out / f"heatmap_{grouping}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", *cm.methods])
        for lab, row in zip(labels, cm.values):
            w.writerow([lab, *[repr(float(v)) for v in row]])
    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(cm.methods), 1 + 0.25 * len(labels)))
    im = ax.imshow(cm.values, vmin=-1, vmax=1, cmap="RdBu_r", aspect="auto")
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_xticks(range(len(cm.methods)))
    ax.set_xticklabels(cm.methods, rotation=45, ha="right")
    fig.colorbar(im, ax=ax, label="Pearson r")
    fig.tight_layout()
    path = out / f"heatmap_{grouping}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path, cm


def crosseval_figure(run: Path, out: Path) -> Path | None:
    p = run / "crosseval.json"
    if not p.exists():
        return None
    d = json.loads(p.read_text())
    lines = d["lines"]
    fig, axes = plt.subplots(1, len(d["metrics"]), figsize=(4 * len(d["metrics"]), 3.5))
    for ax, (name, mat) in zip(np.atleast_1d(axes), sorted(d["metrics"].items())):
        m = np.array([[np.nan if v is None else v for v in row] for row in mat], dtype=float)
        ax.imshow(m, cmap="viridis")
        for i in range(len(lines)):
            for j in range(len(lines)):
                ax.text(j, i, f"{m[i, j]:.3g}", ha="center", va="center", color="w")
        ax.set_xticks(range(len(lines)))
        ax.set_xticklabels(lines)
        ax.set_yticks(range(len(lines)))
        ax.set_yticklabels(lines)
        ax.set_xlabel("test")
        ax.set_ylabel("train")
        ax.set_title(f"{name} (p={d['pvalues'].get(name, float('nan')):.3g})")
    fig.tight_layout()
    path = out / f"crosseval_{run.name}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def tsne_figure(runs: Sequence[Path], out: Path, perplexity: float = 30.0, seed: int = 0) -> Path | None:
    tables = []
    for r in runs:
        feats = r / "features"
        if not feats.is_dir():
            continue
        for p in sorted(feats.glob("*.csv")):
            if p.stem == "real" and any(t.df["Metadata_Source"].iloc[0] == "real" for t in tables if len(t)):
                continue
            tables.append(FeatureTable(pd.read_csv(p)))
    ft = FeatureTable.concat(tables)
    if len(ft) < 3 * perplexity:
        return None
    xy = tsne_embed(ft, perplexity=perplexity, seed=seed)
    coords = ft.df[["Metadata_Source", "Metadata_MoA", "Metadata_Compound"]].assign(x=xy[:, 0], y=xy[:, 1])
    coords.to_csv(out / "tsne.csv", index=False)
    fig, ax = plt.subplots(figsize=(6, 5))
    for k, (src, g) in enumerate(coords.groupby("Metadata_Source", sort=True)):
        ax.scatter(g.x, g.y, s=6, color=plt.cm.tab10(k), label=src)
    ax.legend(markerscale=3)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    path = out / "tsne.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def resources_section(runs: Sequence[Path], out: Path) -> list[dict] | None:
    reports = [ResourceReport.load(r / RESOURCES_FILE) for r in runs if (r / RESOURCES_FILE).exists()]
    if not reports:
        return None
    rows = resource_table(reports)
    pd.DataFrame(rows).to_csv(out / "resources.csv", index=False)
    fig, ax = plt.subplots(figsize=(10, 0.6 + 0.35 * len(rows)))
    ax.axis("off")
    ax.table(cellText=[list(r.values()) for r in rows], colLabels=list(rows[0]), loc="center")
    fig.tight_layout()
    fig.savefig(out / "resources.png", dpi=100)
    plt.close(fig)
    return rows


def render_report(runs: Sequence, out_dir) -> dict:
    """Render every section the given runs support; missing artifacts skip a section."""
    runs = [Path(r) for r in runs]
    if not runs:
        raise ValueError("no runs to report on")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"runs": [r.name for r in runs], "sections": {}, "notices": []}

    def note(section: str, msg: str):
        log.warning("report: %s skipped (%s)", section, msg)
        summary["notices"].append(f"{section}: {msg}")

    p = metric_boxplots(runs, out)
    if p:
        summary["sections"]["metrics"] = p.name
        summary["quality"] = {_family(r): json.loads((r / "quality" / "quality_report.json").read_text())["summary"]
                              for r in runs if (r / "quality" / "quality_report.json").exists()}
    else:
        note("metrics", "no quality records")
    for grouping in ("channelwise", "overall"):
        res = correlation_heatmap(runs, grouping, out)
        if res:
            summary["sections"][f"heatmap_{grouping}"] = res[0].name
            summary[f"correlation_{grouping}"] = res[1].to_dict()
        else:
            note(f"heatmap_{grouping}", "no correlation matrices")
    cross = [crosseval_figure(r, out) for r in runs]
    if any(cross):
        summary["sections"]["crosseval"] = [c.name for c in cross if c]
        summary["crosseval"] = {r.name: json.loads((r / "crosseval.json").read_text())
                                for r in runs if (r / "crosseval.json").exists()}
    else:
        note("crosseval", "no cross-evaluation runs")
    try:
        p = tsne_figure(runs, out)
    except ValueError as e:
        p = None
        note("tsne", str(e))
    if p:
        summary["sections"]["tsne"] = p.name
    elif not any(n.startswith("tsne") for n in summary["notices"]):
        note("tsne", "too few profiled objects")
    rows = resources_section(runs, out)
    if rows:
        summary["sections"]["resources"] = "resources.csv"
        summary["resources"] = rows
    else:
        note("resources", "no resource reports")
    (out / "report_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return summary
