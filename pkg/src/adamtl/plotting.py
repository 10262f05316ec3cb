"""Matplotlib figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def flops_histogram(h, path: str, title: str = "Dynamic MACs per example", extra=None) -> str:
    """Bar chart of a ``flopsacct.Histogram``; ``extra`` is an optional (label, Histogram) overlay."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    series = [("learned", h)] + ([extra] if extra else [])
    for (label, hist), colour in zip(series, ("tab:blue", "tab:gray")):
        lo, hi = hist.edges[:-1], hist.edges[1:]
        width = np.maximum(hi - lo, 1.0)
        ax.bar(lo / 1e6, hist.counts, width=width / 1e6, align="edge", alpha=0.6, color=colour,
               label=f"{label} (mean {hist.mean / 1e6:.3f}M)")
        ax.axvline(hist.mean / 1e6, color=colour, linestyle="--")
    ax.set_xlabel("MACs (millions)")
    ax.set_ylabel("examples")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def complexity_bars(levels: Sequence[int], means: Sequence[float], path: str) -> str:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(c) for c in levels], np.asarray(means) / 1e6, color="tab:blue")
    ax.set_xlabel("scene complexity")
    ax.set_ylabel("mean MACs (millions)")
    lo, hi = min(means), max(means)
    pad = max(hi - lo, 1.0) / 1e6
    ax.set_ylim(lo / 1e6 - pad, hi / 1e6 + pad)
    return _save(fig, path)


def mask_grid(image: np.ndarray, decisions, grids: Sequence[int], path: str) -> str:
    """Input image plus one row per block: fused mask, then each task's own mask."""
    names = ["fused"] + [n for n in decisions[0].per_task] if decisions else ["fused"]
    rows = max(len(decisions), 1)
    fig, axes = plt.subplots(rows, len(names) + 1, figsize=(1.8 * (len(names) + 1), 1.8 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.set_axis_off()
    axes[0, 0].imshow(np.clip(np.transpose(image, (1, 2, 0)), 0, 1))
    axes[0, 0].set_title("input", fontsize=8)
    for k, (d, g) in enumerate(zip(decisions, grids)):
        for j, name in enumerate(names):
            bm, tm = (d.block_mask, d.token_mask) if name == "fused" else d.per_task[name]
            b = float(np.asarray(bm.data).reshape(-1)[0])
            m = np.asarray(tm.data)[0].reshape(g, g) * (b if name == "fused" else 1.0)
            ax = axes[k, j + 1]
            ax.set_axis_on()
            ax.set_xticks([])
            ax.set_yticks([])
            ax.imshow(m, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(f"b{k} {name} {'on' if b else 'off'}", fontsize=7)
    return _save(fig, path)


def layer_tokens(fractions: Sequence[float], weights: Sequence[float], target: float, path: str,
                 compare: Sequence[float] | None = None) -> str:
    """Per-block activated-token fractions, bar width proportional to the block's embedding width."""
    fig, ax = plt.subplots(figsize=(5, 3))
    x = np.arange(len(fractions))
    w = np.asarray(weights, dtype=float)
    w = 0.8 * w / w.max() if w.size else w
    ax.bar(x - (0.2 if compare is not None else 0), fractions, width=w * (0.5 if compare is not None else 1),
           label="weighted loss")
    if compare is not None:
        ax.bar(x + 0.2, compare, width=w * 0.5, label="unweighted loss")
        ax.legend(fontsize=8)
    ax.axhline(target, color="k", linestyle="--", linewidth=1)
    ax.set_xticks(x)
    ax.set_xlabel("block")
    ax.set_ylabel("active token fraction")
    ax.set_ylim(0, 1.05)
    return _save(fig, path)


def training_curves(rows: Sequence[dict], path: str) -> str:
    """Loss and activation fractions per logged epoch (rows as read back from metrics CSV)."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.2))
    step = np.arange(len(rows))
    a.plot(step, [float(r["loss_tasks"]) for r in rows], label="task loss")
    a.plot(step, [float(r["loss_eff"]) for r in rows], label="efficiency loss")
    a.set_xlabel("logged epoch")
    a.legend(fontsize=8)
    b.plot(step, [float(r["block_frac"]) for r in rows], label="blocks")
    b.plot(step, [float(r["token_frac"]) for r in rows], label="tokens")
    b.set_ylim(0, 1.05)
    b.set_xlabel("logged epoch")
    b.legend(fontsize=8)
    for ax in (a, b):
        edges = [i for i in range(1, len(rows)) if rows[i]["stage"] != rows[i - 1]["stage"]]
        for e in edges:
            ax.axvline(e - 0.5, color="gray", linewidth=0.6)
    return _save(fig, path)
