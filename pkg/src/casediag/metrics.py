"""Evaluation metrics: ranking, thresholded, bootstrap CIs, stratified report.

All metrics are computed directly in numpy. Ranking metrics that are undefined
for an input (a class with only one label value) return NaN; report assembly
excludes NaNs from macro averages and discloses the counts.

Thresholded predictions use the convention prediction = (score >= threshold)
everywhere, which makes a selected threshold equal to an observed score
reproduce its F1 exactly.
"""

from __future__ import annotations

import math

import numpy as np


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-d sequences")
    return s, y.astype(np.int64)


def _midranks(x):
    """Average (midrank) 1-based ranks; ties share their group's mean rank."""
    n = len(x)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sx[1:] != sx[:-1]
    gid = np.cumsum(new_group) - 1
    counts = np.bincount(gid)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg = starts + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = avg[gid]
    return ranks


def auc(scores, labels):
    """Rank-based ROC AUC: P(pos > neg) + half the tie probability.

    NaN when either label value is absent.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = _midranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _curve_counts(s, y):
    """Cumulative TP/FP at each unique threshold, descending; >= convention."""
    order = np.argsort(-s, kind="mergesort")
    sorted_y = y[order]
    sorted_s = s[order]
    tps = np.cumsum(sorted_y)
    fps = np.cumsum(1 - sorted_y)
    last_of_group = np.empty(len(s), dtype=bool)
    last_of_group[-1] = True
    last_of_group[:-1] = sorted_s[1:] != sorted_s[:-1]
    return tps[last_of_group], fps[last_of_group], sorted_s[last_of_group]


def average_precision(scores, labels):
    """Step-integral of precision over recall at observed thresholds.

    NaN when there are no positives.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return math.nan
    tps, fps, _ = _curve_counts(s, y)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * precision))


def roc_points(scores, labels):
    """(fpr, tpr, thresholds) over descending unique thresholds, with the
    predict-nothing origin prepended (threshold +inf)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    tps, fps, thr = _curve_counts(s, y)
    tpr = tps / n_pos if n_pos else np.zeros_like(tps, dtype=np.float64)
    fpr = fps / n_neg if n_neg else np.zeros_like(fps, dtype=np.float64)
    return (
        np.concatenate(([0.0], fpr)),
        np.concatenate(([0.0], tpr)),
        np.concatenate(([math.inf], thr)),
    )


def recall_at_fpr(scores, labels, target):
    """Maximum TPR among operating points with FPR <= target (step convention).

    NaN when there are no negatives (FPR undefined) or no positives.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_neg == 0 or n_pos == 0:
        return math.nan
    fpr, tpr, _ = roc_points(s, y)
    ok = fpr <= target + 1e-12
    return float(tpr[ok].max())


def thresholded_metrics(scores, labels, threshold):
    """Confusion-based metrics at prediction = (score >= threshold).

    MCC uses (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)); when any
    marginal is zero it is reported as 0.0 with mcc_defined=False.
    """
    s, y = _as_arrays(scores, labels)
    pred = (s >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    n = tp + fp + tn + fn
    f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    acc = (tp + tn) / n if n else 0.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        mcc, mcc_defined = 0.0, False
    else:
        mcc, mcc_defined = (tp * tn - fp * fn) / math.sqrt(denom), True
    return {
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
        "f1": f1,
        "mcc": mcc,
        "acc": acc,
        "mcc_defined": mcc_defined,
    }


def bootstrap_roc(scores, labels, n_samples=1000, n_repeats=1000, seed=0, max_retries=100):
    """Bootstrap the AUC: n_repeats resamples of n_samples cases with replacement.

    A degenerate resample (a single label value) is redrawn up to max_retries
    times, then skipped; the skip count is reported. Returns the median AUC and
    the empirical 2.5/97.5 percentiles, deterministic under seed.
    """
    s, y = _as_arrays(scores, labels)
    n = len(s)
    rng = np.random.default_rng(seed)
    aucs = []
    n_skipped = 0
    for _ in range(n_repeats):
        value = math.nan
        for _ in range(max_retries):
            idx = rng.integers(0, n, size=n_samples)
            ys = y[idx]
            t = int(ys.sum())
            if 0 < t < n_samples:
                value = auc(s[idx], ys)
                break
        if math.isnan(value):
            n_skipped += 1
        else:
            aucs.append(value)
    if not aucs:
        return {
            "median_auc": math.nan,
            "ci_low": math.nan,
            "ci_high": math.nan,
            "n_used": 0,
            "n_skipped": n_skipped,
        }
    arr = np.array(aucs)
    lo, hi = np.percentile(arr, [2.5, 97.5])
    return {
        "median_auc": float(np.median(arr)),
        "ci_low": float(lo),
        "ci_high": float(hi),
        "n_used": len(aucs),
        "n_skipped": n_skipped,
    }


def bootstrap_stratum_auc(score_matrix, label_matrix, class_cols, n_samples=1000, n_repeats=1000, seed=0, max_retries=100):
    """Bootstrap a stratum's macro AUC with jointly resampled cases.

    Each repeat draws one case index sample shared by all member classes and
    macro-averages the per-class AUCs that are defined in that resample; a
    repeat with no defined class is skipped after bounded redraws.
    """
    sm = np.asarray(score_matrix, dtype=np.float64)
    lm = np.asarray(label_matrix, dtype=np.int64)
    n = sm.shape[0]
    rng = np.random.default_rng(seed)
    macros = []
    n_skipped = 0
    for _ in range(n_repeats):
        value = math.nan
        for _ in range(max_retries):
            idx = rng.integers(0, n, size=n_samples)
            vals = [auc(sm[idx, c], lm[idx, c]) for c in class_cols]
            vals = [v for v in vals if not math.isnan(v)]
            if vals:
                value = float(np.mean(vals))
                break
        if math.isnan(value):
            n_skipped += 1
        else:
            macros.append(value)
    if not macros:
        return {"median_auc": math.nan, "ci_low": math.nan, "ci_high": math.nan,
                "n_used": 0, "n_skipped": n_skipped}
    arr = np.array(macros)
    lo, hi = np.percentile(arr, [2.5, 97.5])
    return {"median_auc": float(np.median(arr)), "ci_low": float(lo),
            "ci_high": float(hi), "n_used": len(macros), "n_skipped": n_skipped}


_MACRO_FIELDS = ("auc", "ap", "f1", "mcc", "acc", "recall@0.01", "recall@0.05", "recall@0.1")


def stratified_report(per_class, label_space, stratum_bootstrap=None):
    """Assemble the metrics report: per-class values plus head/medium/tail/all
    macro means, in percent.

    per_class maps class_id -> {auc, ap, f1, mcc, acc, recall@0.01, recall@0.05,
    recall@0.1, threshold} with raw fractional values; NaN entries are excluded
    from macros and their counts disclosed. Thresholds stay on the score scale.
    """
    notes = []
    report_classes = {}
    for cid, vals in per_class.items():
        entry = {}
        for f in _MACRO_FIELDS:
            v = vals.get(f, math.nan)
            entry[f] = math.nan if (v is None or math.isnan(v)) else 100.0 * v
        entry["threshold"] = vals.get("threshold")
        report_classes[cid] = entry

    strata = {}
    groups = {
        "head": label_space.members("head"),
        "medium": label_space.members("medium"),
        "tail": label_space.members("tail"),
        "all": list(label_space.classes),
    }
    for name, members in groups.items():
        members = [c for c in members if c in report_classes]
        if not members:
            if name != "all":
                notes.append(f"stratum {name} is empty; omitted")
            continue
        agg = {"n_classes": len(members), "n_undefined": {}}
        for f in _MACRO_FIELDS:
            vals = [report_classes[c][f] for c in members]
            defined = [v for v in vals if not math.isnan(v)]
            n_undef = len(vals) - len(defined)
            if n_undef:
                agg["n_undefined"][f] = n_undef
            agg[f] = float(np.mean(defined)) if defined else math.nan
        if stratum_bootstrap and name in stratum_bootstrap:
            b = stratum_bootstrap[name]
            agg["bootstrap"] = {
                "median_auc": 100.0 * b["median_auc"],
                "ci_low": 100.0 * b["ci_low"],
                "ci_high": 100.0 * b["ci_high"],
                "n_skipped": b.get("n_skipped", 0),
            }
        strata[name] = agg

    undef_total = sum(
        1
        for c in report_classes.values()
        for f in _MACRO_FIELDS
        if math.isnan(c[f])
    )
    if undef_total:
        notes.append(f"{undef_total} undefined per-class values excluded from macros")
    return {"per_class": report_classes, "strata": strata, "notes": notes}
