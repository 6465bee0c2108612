"""Figures written next to the CSV reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def plot_coreset_2d(path, train_inputs, train_labels, coreset, predict=None, title=None) -> Path:
    """Training cloud, coreset points and (optionally) the predictive's decision regions.

    ``predict`` maps an ``[n, 2]`` array to ``[n, d]`` class probabilities.
    """
    x = np.asarray(train_inputs)
    y = np.asarray(train_labels)
    u = np.asarray(coreset.u)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    lo = np.minimum(x.min(0), u.min(0)) - 0.5
    hi = np.maximum(x.max(0), u.max(0)) + 0.5
    if predict is not None:
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 150), np.linspace(lo[1], hi[1], 150))
        probs = np.asarray(predict(np.stack([gx.ravel(), gy.ravel()], axis=1)))
        ax.contourf(gx, gy, probs.argmax(1).reshape(gx.shape), levels=np.arange(probs.shape[1] + 1) - 0.5, cmap="coolwarm", alpha=0.25)
    ax.scatter(x[:, 0], x[:, 1], c=y, cmap="coolwarm", s=4, alpha=0.3)
    ax.scatter(u[:, 0], u[:, 1], c=np.asarray(coreset.labels), cmap="coolwarm", s=90, marker="*", edgecolors="k")
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_coreset_images(path, coreset, title=None) -> Path:
    """One row per class, one column per coreset image (first channel)."""
    u = np.asarray(coreset.u)
    labels = np.asarray(coreset.labels)
    d = int(labels.max()) + 1
    per = max(int((labels == c).sum()) for c in range(d))
    fig, axes = plt.subplots(d, per, figsize=(1.1 * per, 1.1 * d), squeeze=False)
    for c in range(d):
        idx = np.flatnonzero(labels == c)
        for k in range(per):
            ax = axes[c, k]
            ax.axis("off")
            if k < len(idx):
                ax.imshow(u[idx[k], 0], cmap="gray", vmin=0, vmax=1)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_compare(path, rows) -> Path:
    """Grouped bars of accuracy and NLL (mean with std error bars) per (method, ipc).

    ``rows`` are dicts with keys method, ipc, acc_mean, acc_std, nll_mean, nll_std.
    """
    methods = sorted({r["method"] for r in rows})
    ipcs = sorted({int(r["ipc"]) for r in rows})
    lookup = {(r["method"], int(r["ipc"])): r for r in rows}
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    width = 0.8 / max(len(methods), 1)
    for ax, metric in zip(axes, ("acc", "nll")):
        for i, meth in enumerate(methods):
            xs, means, stds = [], [], []
            for j, ipc in enumerate(ipcs):
                r = lookup.get((meth, ipc))
                if r is not None:
                    xs.append(j + (i - (len(methods) - 1) / 2) * width)
                    means.append(float(r[f"{metric}_mean"]))
                    stds.append(float(r[f"{metric}_std"]))
            ax.bar(xs, means, width, yerr=stds, label=meth, capsize=3)
        ax.set_xticks(range(len(ipcs)))
        ax.set_xticklabels([f"ipc {i}" for i in ipcs])
        ax.set_ylabel("accuracy" if metric == "acc" else "NLL")
    axes[0].legend(fontsize=8)
    return _save(fig, path)
