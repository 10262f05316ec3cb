"""Closed-form cost model for static and adaptive execution.

Costs are multiply-accumulates counted once. Softmax and layer-norm are
charged one unit per element they normalise; activations, residual adds,
biases, pooling and upsampling are free. The same conventions are what
``numerics.count_macs`` tallies during a real forward pass, which is how the
formulas here are checked.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig
from .heads import TaskSpec
from .policy import PolicyConfig, PolicyDecision


@dataclass
class FlopsReport:
    static_total: int
    dynamic_total: int
    per_block: list                  # (static, dynamic) per encoder block, policy overhead included
    rows: list = field(default_factory=list)  # (scope, name, static, dynamic)
    block_active: int = 0            # B_activ
    block_total: int = 0             # B_total
    tokens_active: list = field(default_factory=list)  # T_activ per layer
    tokens_total: list = field(default_factory=list)   # T_total per layer

    @property
    def ratio(self) -> float:
        return self.dynamic_total / self.static_total if self.static_total else 1.0


def block_terms(n: int, dim: int, heads: int, hidden: int) -> dict:
    """Cost components of one transformer block processing ``n`` tokens."""
    return {
        "norms": 2 * n * dim,
        "qkv_proj": 4 * n * dim * dim,
        "attn_matrix": 2 * n * n * dim,  # scores and attn @ v
        "softmax": heads * n * n,
        "mlp": 2 * n * dim * hidden,
    }


def block_cost(n: int, dim: int, heads: int, hidden: int) -> int:
    return sum(block_terms(n, dim, heads, hidden).values())


def policy_head_cost(dim: int, hidden: int, rows: int = 1) -> int:
    return rows * (dim * hidden + hidden * 2)


def embed_cost(cfg: EncoderConfig) -> int:
    return cfg.tokens(0) * cfg.patch_dim * cfg.embed_dims[0]


def merge_cost(cfg: EncoderConfig, stage: int) -> int:
    n = cfg.tokens(stage + 1)
    d4 = 4 * cfg.embed_dims[stage]
    return n * d4 + n * d4 * cfg.embed_dims[stage + 1]


def head_cost(cfg: EncoderConfig, task: TaskSpec, channels: int, res_blocks: int = 2) -> int:
    hw = cfg.tokens(0)
    fuse = sum(cfg.tokens(s) * d * channels for s, d in enumerate(cfg.embed_dims))
    res = res_blocks * (2 * hw * 9 * channels * channels + hw * channels)
    dec = hw * 9 * channels * channels + hw * 9 * channels * task.out_channels
    return fuse + res + dec


def _n_heads(policy: PolicyConfig | None, enabled: Sequence | None = None) -> int:
    if policy is None:
        return 0
    return len(enabled) if enabled is not None else len(policy.heads)


def _layout(cfg, tasks, policy, channels, res_blocks, enabled):
    channels = channels or cfg.embed_dims[0]
    n_sub = _n_heads(policy, enabled)
    hid = policy.hidden_dim if policy is not None else 0
    fixed = [("embed", "patch_embed", embed_cost(cfg))]
    fixed += [("merge", f"stage{s}", merge_cost(cfg, s)) for s in range(cfg.stages - 1)]
    fixed += [("head", t.name, head_cost(cfg, t, channels, res_blocks)) for t in tasks]
    return fixed, n_sub, hid


def static_flops(cfg: EncoderConfig, tasks: Sequence[TaskSpec], policy: PolicyConfig | None = None,
                 channels: int | None = None, res_blocks: int = 2, enabled: Sequence | None = None) -> FlopsReport:
    """Cost with every block and token on (policy networks included when given)."""
    return _price(cfg, tasks, policy, None, channels, res_blocks, enabled)


def dynamic_flops(cfg: EncoderConfig, decisions: Sequence[PolicyDecision], tasks: Sequence[TaskSpec],
                  policy: PolicyConfig | None = None, channels: int | None = None, res_blocks: int = 2,
                  enabled: Sequence | None = None) -> FlopsReport:
    """Cost of one example under hard decisions (one per block).

    A closed block costs nothing and skips its token policy; the block
    policy always runs.
    """
    if len(decisions) != cfg.total_blocks:
        raise ValueError(f"{len(decisions)} decisions for {cfg.total_blocks} blocks")
    for d in decisions:
        if d.mode != "hard":
            raise ValueError("only hard decisions can be priced")
    return _price(cfg, tasks, policy, decisions, channels, res_blocks, enabled)


def _price(cfg, tasks, policy, decisions, channels, res_blocks, enabled) -> FlopsReport:
    fixed, n_sub, hid = _layout(cfg, tasks, policy, channels, res_blocks, enabled)
    rows = [(scope, name, c, c) for scope, name, c in fixed]
    per_block = []
    b_active, t_active, t_total = 0, [], []
    for k, s in enumerate(cfg.block_stages):
        d, heads, hidden, n_all = cfg.embed_dims[s], cfg.heads_per_stage[s], cfg.mlp_hidden[s], cfg.tokens(s)
        bp = n_sub * policy_head_cost(d, hid)
        tp = n_sub * policy_head_cost(d, hid, rows=n_all)
        static = block_cost(n_all, d, heads, hidden) + bp + tp
        if decisions is None:
            on, n = True, n_all
        else:
            on = float(np.asarray(decisions[k].block_mask.data).reshape(-1)[0]) == 1.0
            n = int(np.asarray(decisions[k].token_mask.data).sum()) if on else 0
        dynamic = bp + ((block_cost(n, d, heads, hidden) + tp) if on else 0)
        per_block.append((static, dynamic))
        rows.append(("block", f"block{k}", static, dynamic))
        b_active += int(on)
        t_active.append(n)
        t_total.append(n_all)
    static_total = sum(r[2] for r in rows)
    dynamic_total = sum(r[3] for r in rows)
    return FlopsReport(static_total, dynamic_total, per_block, rows, b_active, cfg.total_blocks, t_active, t_total)


def backbone_flops(cfg: EncoderConfig, tasks: Sequence[TaskSpec], channels: int | None = None,
                   res_blocks: int = 2) -> int:
    """Static model without any policy network."""
    return static_flops(cfg, tasks, None, channels, res_blocks).static_total


# -- reports -----------------------------------------------------------------

def write_table(report: FlopsReport, path: str) -> None:
    """CSV ``scope,name,static,dynamic,ratio`` with a closing ``total`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", "name", "static", "dynamic", "ratio"])
        for scope, name, s, d in report.rows:
            w.writerow([scope, name, s, d, repr(d / s if s else 1.0)])
        w.writerow(["total", "all", report.static_total, report.dynamic_total, repr(report.ratio)])


def read_table(path: str) -> list:
    with open(path, newline="") as fh:
        return [(r["scope"], r["name"], int(r["static"]), int(r["dynamic"]), float(r["ratio"]))
                for r in csv.DictReader(fh)]


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    n: int


def histogram(totals: Sequence, bins: int = 10) -> Histogram:
    """Histogram of per-example totals; a constant series collapses to one bin."""
    v = np.asarray(totals, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no totals to histogram")
    if v.min() == v.max():
        edges = np.array([v.min(), v.max()])
        counts = np.array([v.size])
    else:
        counts, edges = np.histogram(v, bins=bins)
    return Histogram(edges, counts, float(v.mean()), int(v.size))


def write_histogram(h: Histogram, path: str) -> None:
    """CSV ``bin_lo,bin_hi,count`` then a ``mean,<value>,<n>`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow(["mean", repr(h.mean), h.n])


def read_histogram(path: str) -> Histogram:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    body, last = rows[:-1], rows[-1]
    if last[0] != "mean":
        raise ValueError(f"{path}: missing mean row")
    edges = [float(r[0]) for r in body] + [float(body[-1][1])]
    return Histogram(np.array(edges), np.array([int(r[2]) for r in body]), float(last[1]), int(last[2]))


def flops_histogram(model, dataset, bins: int = 10, path: str | None = None, **predict_kw) -> tuple:
    """Per-example dynamic totals over ``dataset``; optionally written as CSV."""
    totals = []
    for i in range(len(dataset)):
        pred = model.predict(dataset.images[i], **predict_kw)
        totals.append(price_prediction(model, pred).dynamic_total)
    h = histogram(totals, bins)
    if path:
        write_histogram(h, path)
    return h, np.array(totals)


def price_prediction(model, pred) -> FlopsReport:
    """FlopsReport for a single-image prediction of ``model`` (static if it carries no decisions)."""
    cfg = model.enc_cfg
    if not pred.decisions:
        return static_flops(cfg, model.tasks, None, model.fuse_channels, len(model.heads[model.tasks[0].name].fuse.res))
    return dynamic_flops(cfg, pred.decisions, model.tasks, model.pol_cfg, model.fuse_channels,
                         len(model.heads[model.tasks[0].name].fuse.res), enabled=_ran_heads(pred))


def _ran_heads(pred):
    names = set()
    for d in pred.decisions:
        names.update(d.per_task)
    return sorted(names) if names else []
