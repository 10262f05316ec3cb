"""Block and token policy networks with Gumbel-Softmax binary gates.

Every encoder block owns a block policy (pooled tokens -> one gate) and a
token policy (each token -> one gate). In the task-aware variant each of
those is a set of per-task sub-networks whose masks are fused by addition
and clamping, so a block or token runs if any task wants it.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .nn import Linear, Module
from .numerics import RngState, Tensor

SHARED = "shared"


@dataclass(frozen=True)
class PolicyConfig:
    variant: str = "task-aware"
    hidden_dim: int = 16
    temperature: float = 1.0
    final_temperature: float | None = None
    tasks: tuple = ("seg", "sal", "normals")

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.variant not in ("task-aware", "task-agnostic"):
            raise ValueError(f"unknown policy variant {self.variant!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.variant == "task-aware" and not self.tasks:
            raise ValueError("task-aware policy needs at least one task")

    @property
    def heads(self) -> tuple:
        """Names of the sub-networks attached to every block."""
        return self.tasks if self.variant == "task-aware" else (SHARED,)

    def temperature_at(self, progress: float) -> float:
        """Linear anneal from ``temperature`` to ``final_temperature`` as progress goes 0 -> 1."""
        if self.final_temperature is None:
            return self.temperature
        progress = min(max(progress, 0.0), 1.0)
        return self.temperature + (self.final_temperature - self.temperature) * progress


@dataclass
class PolicyDecision:
    """Masks for one encoder block.

    block_mask is [B]; token_mask is [B, N]. per_task maps each sub-network
    that ran to its (block_mask, token_mask) before fusion.
    """

    block_mask: Tensor
    token_mask: Tensor
    per_task: dict = field(default_factory=dict)
    mode: str = "soft"
    # noise-free straight-through (block_mask, token_mask) from the same logits, when requested
    deployed: tuple | None = None

    @property
    def hard(self) -> bool:
        return self.mode == "hard"

    def block_values(self) -> np.ndarray:
        return np.asarray(self.block_mask.data)

    def token_values(self) -> np.ndarray:
        return np.asarray(self.token_mask.data)


def gumbel_binary_gate(logits, tau: float, mode: str = "soft", rng: RngState | None = None,
                       noise: float = True) -> Tensor:
    """Binary gate from two logits (channel 0 = on, channel 1 = off).

    soft returns the "on" probability of softmax((logits + g) / tau). hard
    returns 1[on > off] in the forward pass and the soft value's gradient in
    the backward pass. With ``noise=False`` (or no rng) g is zero; a float
    ``noise`` scales the Gumbel draw.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    logits = nx.as_tensor(logits)
    if logits.shape[-1] != 2:
        raise nx.ShapeError(f"gumbel_binary_gate: last axis must be 2, got {logits.shape}")
    z = logits
    if float(noise) > 0 and rng is not None:
        g = nx.gumbel_noise(rng, logits.shape)
        z = logits + (g if float(noise) == 1.0 else g * float(noise))
    if mode == "hard":
        hard = (z.data[..., 0] > z.data[..., 1]).astype(z.data.dtype)
        if not (nx.grad_enabled() and z.requires_grad):
            return nx.Tensor(hard)
        soft = nx.take(nx.softmax(z * (1.0 / tau), axis=-1), 0, axis=-1)
        return nx.straight_through(hard, soft)
    if mode != "soft":
        raise ValueError(f"unknown gate mode {mode!r}")
    return nx.take(nx.softmax(z * (1.0 / tau), axis=-1), 0, axis=-1)


def fuse_task_masks(per_task: Sequence, surrogate: bool = False) -> Tensor:
    """clamp(sum of masks, 0, 1): a logical OR on binary masks.

    With ``surrogate`` the forward value is unchanged but the gradient skips
    the clamp, so every task's gate keeps receiving gradient after the union
    saturates.
    """
    masks = [nx.as_tensor(m) for m in per_task]
    if not masks:
        raise ValueError("fuse_task_masks needs at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise nx.ShapeError(f"fuse_task_masks: shape mismatch {shape} vs {m.shape}")
    if len(masks) == 1:
        return masks[0]
    total = masks[0]
    for m in masks[1:]:
        total = total + m
    fused = nx.clamp(total, 0.0, 1.0)
    if surrogate:
        return nx.straight_through(fused.data, total)
    return fused


class PolicyHead(Module):
    """Two fully-connected layers producing (on, off) logits."""

    def __init__(self, dim: int, hidden: int, rng: RngState):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, 2, rng)

    def __call__(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class PolicyNetwork(Module):
    """Block and token sub-networks for every encoder block."""

    def __init__(self, block_dims: Sequence, cfg: PolicyConfig, rng: RngState):
        self.cfg = cfg
        self.block_heads = [{h: PolicyHead(d, cfg.hidden_dim, rng) for h in cfg.heads} for d in block_dims]
        self.token_heads = [{h: PolicyHead(d, cfg.hidden_dim, rng) for h in cfg.heads} for d in block_dims]
        # added to every "on" logit; an evaluation-time knob for matching compute budgets, not a parameter
        self.logit_offset = 0.0

    def _gates(self, nets: dict, x, tau, mode, rng, heads, noise, deployed):
        logits = {h: nets[h](x) for h in heads}
        if self.logit_offset:
            shift = nx.Tensor(np.array([self.logit_offset, 0.0]))
            logits = {h: v + shift for h, v in logits.items()}
        live = {h: gumbel_binary_gate(logits[h], tau, mode, rng, noise) for h in heads}
        if not deployed:
            return live, None
        return live, {h: gumbel_binary_gate(logits[h], tau, "hard", None, False) for h in heads}

    def block_policy(self, k: int, tokens, tau: float, mode: str, rng, heads: Sequence, noise: float = True) -> dict:
        return self._gates(self.block_heads[k], nx.mean(tokens, axis=1), tau, mode, rng, heads, noise, False)[0]

    def token_policy(self, k: int, tokens, tau: float, mode: str, rng, heads: Sequence, noise: float = True) -> dict:
        return self._gates(self.token_heads[k], tokens, tau, mode, rng, heads, noise, False)[0]

    def decide(self, k: int, tokens, mode: str = "soft", rng: RngState | None = None, tau: float | None = None,
               enabled: Sequence | None = None, noise: float = True, deployed: bool = False) -> PolicyDecision:
        """Masks for block ``k`` given its input tokens [B, N, D].

        ``enabled`` restricts which sub-networks run and are fused (all by default).
        In hard mode a closed block gets an all-zero token mask and its token
        policy is not evaluated. ``deployed`` also fills ``decision.deployed``
        with the noise-free argmax masks (straight-through) of the same logits;
        the token policy then always runs.
        """
        tau = self.cfg.temperature if tau is None else tau
        heads = self.cfg.heads if enabled is None else tuple(enabled)
        if not heads:
            raise ValueError("decide needs at least one enabled policy sub-network")
        B, N, _ = tokens.shape
        per_block, dep_block = self._gates(self.block_heads[k], nx.mean(tokens, axis=1), tau, mode, rng, heads,
                                           noise, deployed)
        block_mask = fuse_task_masks([per_block[h] for h in heads], surrogate=True)
        if mode == "hard" and not deployed and not np.asarray(block_mask.data).any():
            zeros = nx.Tensor(np.zeros((B, N)))
            return PolicyDecision(block_mask, zeros, {h: (per_block[h], zeros) for h in heads}, mode)
        per_token, dep_token = self._gates(self.token_heads[k], tokens, tau, mode, rng, heads, noise, deployed)
        token_mask = fuse_task_masks([per_token[h] for h in heads], surrogate=True)
        dep = None
        if deployed:
            dep = (fuse_task_masks([dep_block[h] for h in heads], surrogate=True),
                   fuse_task_masks([dep_token[h] for h in heads], surrogate=True))
        if mode == "hard":
            # per-example gating order: a closed block reports no active tokens
            closed = np.asarray(block_mask.data) == 0
            if closed.any():
                token_mask = nx.mul(token_mask, nx.Tensor((~closed).astype(np.float64)).reshape(B, 1))
        return PolicyDecision(block_mask, token_mask, {h: (per_block[h], per_token[h]) for h in heads}, mode, dep)


def random_decision(rng: RngState, n_tokens: int, block_fraction: float, token_fraction: float) -> PolicyDecision:
    """Seeded random hard masks for one example at the given activation rates."""
    bm = float(rng.uniform((1,))[0] < block_fraction)
    tm = (rng.uniform((1, n_tokens)) < token_fraction).astype(np.float64) * bm
    return PolicyDecision(nx.Tensor(np.array([bm])), nx.Tensor(tm), {}, "hard")


def all_on_decision(n_tokens: int, batch: int = 1) -> PolicyDecision:
    return PolicyDecision(nx.Tensor(np.ones(batch)), nx.Tensor(np.ones((batch, n_tokens))), {}, "hard")


# -- mask dumps --------------------------------------------------------------

def dump_masks(decisions: Sequence[PolicyDecision], grids: Sequence[int], out_dir: str,
               prefix: str = "block") -> list:
    """Write one PGM per block (and per task sub-network) plus masks.csv.

    CSV rows are ``block_index,task,block_mask,active_token_fraction``;
    task ``fused`` is the combined decision. Only the first example of each
    decision is written.
    """
    from .io import write_pgm

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for k, (dec, g) in enumerate(zip(decisions, grids)):
        entries = [("fused", dec.block_mask, dec.token_mask)]
        entries += [(name, bm, tm) for name, (bm, tm) in dec.per_task.items() if name != SHARED]
        for name, bm, tm in entries:
            b = float(np.asarray(bm.data).reshape(-1)[0])
            t = np.asarray(tm.data)[0].reshape(g, g)
            if name == "fused":
                t = t * b
            img = np.where(t > 0.5, 255, 0).astype(np.uint8)
            write_pgm(os.path.join(out_dir, f"{prefix}{k:02d}_{name}.pgm"), img)
            rows.append((k, name, b, float((t > 0.5).mean())))
    with open(os.path.join(out_dir, "masks.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_index", "task", "block_mask", "active_token_fraction"])
        for k, name, b, frac in rows:
            w.writerow([k, name, repr(b), repr(frac)])
    return rows


def read_mask_csv(path: str) -> list:
    with open(path, newline="") as fh:
        return [(int(r["block_index"]), r["task"], float(r["block_mask"]), float(r["active_token_fraction"]))
                for r in csv.DictReader(fh)]
