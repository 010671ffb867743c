"""Report assembly and plot rendering for evaluation runs.

Evaluation writes three artifacts: report.json (per-class + stratified
metrics with bootstrap CIs), roc_points.json (plot-ready per-class ROC point
series), and scores.npz (raw score/label matrices plus case anatomy tags for
the distribution plots). Rendering produces per-stratum ROC figures with the
95% AUC confidence interval drawn as a shaded band, and per-class
prediction-probability distributions splitting negatives into intra- and
inter-anatomy groups when anatomy tags exist.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import metrics as M

FPR_TARGETS = (0.01, 0.05, 0.1)


def per_class_results(scores, labels, thresholds):
    """Full per-class metric dict from (n, c) score/label matrices."""
    n, c = scores.shape
    out = {}
    for j in range(c):
        s, y = scores[:, j], labels[:, j]
        t = float(thresholds[j])
        tm = M.thresholded_metrics(s, y, t)
        entry = {
            "auc": M.auc(s, y),
            "ap": M.average_precision(s, y),
            "f1": tm["f1"],
            "mcc": tm["mcc"],
            "acc": tm["acc"],
            "threshold": t,
        }
        for f in FPR_TARGETS:
            entry[f"recall@{f}"] = M.recall_at_fpr(s, y, f)
        out[j] = entry
    return out


def evaluate_split(scores, labels, label_space, thresholds, *, seed=0,
                   bootstrap_samples=1000, bootstrap_repeats=1000):
    """Assemble the full metrics report for one split's score matrix."""
    cols = {c: i for i, c in enumerate(label_space.classes)}
    by_index = per_class_results(scores, labels, thresholds)
    per_class = {c: by_index[cols[c]] for c in label_space.classes}
    stratum_bootstrap = {}
    groups = {
        "head": label_space.members("head"),
        "medium": label_space.members("medium"),
        "tail": label_space.members("tail"),
        "all": list(label_space.classes),
    }
    for name, members in groups.items():
        idx = [cols[m] for m in members]
        if not idx:
            continue
        stratum_bootstrap[name] = M.bootstrap_stratum_auc(
            scores, labels, idx,
            n_samples=bootstrap_samples, n_repeats=bootstrap_repeats, seed=seed,
        )
    return M.stratified_report(per_class, label_space, stratum_bootstrap)


def roc_series(scores, labels, label_space):
    series = {}
    for j, cid in enumerate(label_space.classes):
        s, y = scores[:, j], labels[:, j]
        if len(np.unique(y)) < 2:
            continue
        fpr, tpr, thr = M.roc_points(s, y)
        series[cid] = {
            "fpr": [float(v) for v in fpr],
            "tpr": [float(v) for v in tpr],
            "thresholds": [None if math.isinf(v) else float(v) for v in thr],
        }
    return series


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(v):
        if isinstance(v, float) and math.isnan(v):
            return None
        if isinstance(v, dict):
            return {str(k): clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    with open(path, "w", encoding="utf-8") as f:
        json.dump(clean(obj), f, indent=1, sort_keys=True)
        f.write("\n")


def plot_roc(report, series, label_space, out_dir):
    """One figure per stratum: member-class ROC curves plus the stratum's
    bootstrap 95% AUC interval as a shaded horizontal band."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, agg in report["strata"].items():
        members = (
            label_space.members(name) if name != "all" else list(label_space.classes)
        )
        curves = [(m, series[m]) for m in members if m in series]
        if not curves:
            continue
        fig, ax = plt.subplots(figsize=(5, 5))
        for cid, pts in curves:
            ax.plot(pts["fpr"], pts["tpr"], lw=1.2,
                    label=label_space.display_name(cid)[:28])
        boot = agg.get("bootstrap")
        if boot and boot["ci_low"] is not None and not math.isnan(boot["ci_low"]):
            ax.axhspan(boot["ci_low"] / 100.0, boot["ci_high"] / 100.0,
                       color="tab:blue", alpha=0.15,
                       label=f"95% AUC CI [{boot['ci_low']:.1f}, {boot['ci_high']:.1f}]")
        ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_title(f"ROC, {name} classes (macro AUC {agg['auc']:.2f}%)")
        ax.legend(fontsize=6, loc="lower right")
        fig.tight_layout()
        path = out / f"roc_{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_probability_distributions(scores, labels, anatomies, label_space, out_dir):
    """Per-class histograms of predicted probability: positives vs negatives,
    negatives split by anatomy into intra (same anatomy as the class's
    positives) and inter groups when anatomy tags are available."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anatomies = list(anatomies) if anatomies is not None else None
    written = []
    bins = np.linspace(0.0, 1.0, 21)
    for j, cid in enumerate(label_space.classes):
        s, y = scores[:, j], labels[:, j]
        pos = s[y == 1]
        if len(pos) == 0 or (y == 0).sum() == 0:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.hist(pos, bins=bins, alpha=0.55, label="positive", density=True)
        if anatomies:
            pos_anatomy = Counter(a for a, flag in zip(anatomies, y) if flag == 1)
            home = pos_anatomy.most_common(1)[0][0]
            neg_mask = y == 0
            intra = s[neg_mask & np.array([a == home for a in anatomies])]
            inter = s[neg_mask & np.array([a != home for a in anatomies])]
            if len(intra):
                ax.hist(intra, bins=bins, alpha=0.55, label="intra-anatomy negative",
                        density=True)
            if len(inter):
                ax.hist(inter, bins=bins, alpha=0.55, label="inter-anatomy negative",
                        density=True)
        else:
            ax.hist(s[y == 0], bins=bins, alpha=0.55, label="negative", density=True)
        ax.set_xlabel("predicted probability")
        ax.set_ylabel("density")
        ax.set_title(label_space.display_name(cid)[:40])
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"probdist_{cid}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def save_saliency(saliency, source_slice, out_dir):
    """Write the Score-CAM artifacts: heatmap, source slice, blended overlay."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{saliency.case_id}_{saliency.scan_id}_{saliency.target_class}"
    paths = []
    for name, img, cmap in (
        ("heatmap", saliency.values, "inferno"),
        ("source", source_slice, "gray"),
    ):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.axis("off")
        path = out / f"{stem}_{name}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(source_slice, cmap="gray", vmin=0.0, vmax=1.0)
    ax.imshow(saliency.values, cmap="inferno", vmin=0.0, vmax=1.0, alpha=0.45)
    ax.axis("off")
    path = out / f"{stem}_overlay.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)
    return paths
