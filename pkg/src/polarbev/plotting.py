"""Static PNG figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training(history: list[dict], path):
    """Loss curves per task (left) and validation KPIs (right) over epochs."""
    ep = [h["epoch"] for h in history]
    fig, (ax_l, ax_k) = plt.subplots(1, 2, figsize=(10, 4))
    for key in history[0]:
        if key.startswith("loss_"):
            ax_l.plot(ep, [h[key] for h in history], label=key[5:])
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("mean batch loss")
    ax_l.legend()
    val_keys = [k for k in ("val_mAP", "val_best_f1", "val_parking_f1") if k in history[0]]
    for key in val_keys:
        ax_k.plot(ep, [h[key] for h in history], label=key[4:])
    if "val_fs_success_pct" in history[0]:
        ax_k.plot(ep, [h["val_fs_success_pct"] / 100 for h in history], label="fs success")
    ax_k.set_xlabel("epoch")
    ax_k.set_ylim(0, 1)
    if val_keys:
        ax_k.legend()
    return _save(fig, path)


def plot_balance(rows: list[dict], path):
    """Per-task epoch loss sums and balancer weights."""
    by_task = defaultdict(list)
    for r in rows:
        by_task[r["task"]].append(r)
    fig, (ax_l, ax_w) = plt.subplots(1, 2, figsize=(10, 4))
    for task, rs in by_task.items():
        ax_l.plot([r["epoch"] for r in rs], [r["loss_sum"] for r in rs], label=task)
        ax_w.plot([r["epoch"] for r in rs], [r["weight"] for r in rs], label=task)
    ax_l.set_ylabel("epoch loss sum L_t")
    ax_w.set_ylabel("weight w_t")
    for ax in (ax_l, ax_w):
        ax.set_xlabel("epoch")
        ax.legend()
    return _save(fig, path)


def plot_pr(curves: dict, path):
    """Precision-recall curves, ``curves[name] = (recall, precision)``."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, (rec, prec) in curves.items():
        ax.step(rec, prec, where="post", label=name)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if curves:
        ax.legend()
    return _save(fig, path)


def plot_rdm(pred_radii, gt_radii, path, r_max=None):
    """Predicted vs ground-truth radial distance map on polar axes."""
    gt = np.asarray(gt_radii, float)
    n = len(gt)
    ang = (np.arange(n + 1) + 0.5) * 2 * math.pi / n
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="polar")
    ax.plot(ang, np.r_[gt, gt[0]], label="ground truth")
    if pred_radii is not None:
        p = np.asarray(pred_radii, float)
        ax.plot(ang, np.r_[p, p[0]], label="prediction")
    if r_max:
        ax.set_rmax(r_max)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_bench(rows: list[dict], path):
    names = [r["camera"] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(x - 0.2, [r["lut_ms"] for r in rows], 0.4, label="LUT scatter")
    ax.bar(x + 0.2, [r["naive_ms"] for r in rows], 0.4, label="naive projection")
    ax.set_xticks(x, names, rotation=30)
    ax.set_ylabel("median ms")
    ax.legend()
    return _save(fig, path)


def plot_grouped(rows: list[dict], group: str, series: str, value: str, path, ylabel=None):
    """Bar chart of ``value`` with one bar per ``series`` inside each ``group``."""
    groups = sorted({r[group] for r in rows}, key=str)
    names = list(dict.fromkeys(r[series] for r in rows))
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(groups)), 4))
    for i, s in enumerate(names):
        vals = []
        for g in groups:
            v = [r[value] for r in rows if r[group] == g and r[series] == s]
            vals.append(v[0] if v and v[0] is not None else np.nan)
        ax.bar(np.arange(len(groups)) + (i - (len(names) - 1) / 2) * width, vals, width, label=str(s))
    ax.set_xticks(np.arange(len(groups)), [str(g) for g in groups])
    ax.set_xlabel(group)
    ax.set_ylabel(ylabel or value)
    ax.legend()
    return _save(fig, path)
