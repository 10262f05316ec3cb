"""Hierarchical ViT encoder whose blocks and tokens can be skipped per input.

Each stage runs a stack of pre-norm transformer blocks with global
self-attention over the stage's token grid; 2x2 patch merging halves the grid
and widens the embedding between stages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .nn import LayerNorm, Linear, Module, param
from .numerics import RngState, Tensor

# Added to log(mask) so a mask of exactly 1 yields a key bias of exactly 0 in float32.
KEY_MASK_EPS = 1e-12
# The key bias is back-propagated as log(mask + KEY_GRAD_EPS): the exact
# derivative 1 / (mask + 1e-12) explodes for straight-through masks at 0.
KEY_GRAD_EPS = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    stages: int = 2
    blocks_per_stage: tuple = (2, 2)
    embed_dims: tuple = (16, 32)
    heads_per_stage: tuple = (2, 4)
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def __post_init__(self):
        for name in ("blocks_per_stage", "embed_dims", "heads_per_stage"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not (len(self.blocks_per_stage) == len(self.embed_dims) == len(self.heads_per_stage) == self.stages):
            raise ValueError("blocks_per_stage, embed_dims and heads_per_stage need one entry per stage")
        if self.image_size % (self.patch_size * 2 ** (self.stages - 1)):
            raise ValueError("image_size must be divisible by patch_size * 2**(stages-1)")
        if any(b < 0 for b in self.blocks_per_stage):
            raise ValueError("blocks_per_stage entries must be >= 0")
        if any(b <= a for a, b in zip(self.embed_dims, self.embed_dims[1:])):
            raise ValueError("embed_dims must be strictly increasing")
        for d, h in zip(self.embed_dims, self.heads_per_stage):
            if h < 1 or d % h:
                raise ValueError(f"embed dim {d} not divisible by {h} heads")

    def grid(self, stage: int) -> int:
        return self.image_size // (self.patch_size * 2 ** stage)

    def tokens(self, stage: int) -> int:
        return self.grid(stage) ** 2

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def block_stages(self) -> list:
        """Stage index of every block, in execution order."""
        return [s for s, n in enumerate(self.blocks_per_stage) for _ in range(n)]

    @property
    def mlp_hidden(self) -> tuple:
        return tuple(int(round(self.mlp_ratio * d)) for d in self.embed_dims)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2


@dataclass
class StageFeatures:
    """Token grid [B, tokens, D] at the end of each stage, with its side length."""

    tokens: list
    grids: list = field(default_factory=list)


def patch_embed(image, weight, bias, cfg: EncoderConfig) -> Tensor:
    """Project non-overlapping patches to D0; rows are row-major over the patch grid.

    ``image`` is [B, C, H, W] (or [C, H, W]); returns [B, tokens, D0].
    """
    image = nx.as_tensor(image)
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    B, C, H, W = image.shape
    if H != cfg.image_size or W != cfg.image_size or C != cfg.in_channels:
        raise nx.ShapeError(
            f"patch_embed: expected [{cfg.in_channels},{cfg.image_size},{cfg.image_size}] images, got {image.shape[1:]}")
    p, g = cfg.patch_size, cfg.image_size // cfg.patch_size
    x = image.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * p * p)
    return nx.linear(x, weight, bias)


class Block(Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: RngState, index: int = 0):
        self.index = index
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, std=0.5 / math.sqrt(hidden))

    def attention(self, x, key_bias=None):
        B, N, D = x.shape
        h = self.heads
        dh = D // h

        def split(t):
            return t.reshape(B, N, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if key_bias is not None:
            scores = scores + key_bias
        if np.isnan(scores.data).any():
            raise FloatingPointError(f"NaN in attention logits of block {self.index}")
        attn = nx.softmax(scores, axis=-1)
        out = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.proj(out)

    def __call__(self, x, key_bias=None):
        x = x + self.attention(self.ln1(x), key_bias)
        return x + self.fc2(nx.gelu(self.fc1(self.ln2(x))))


def block_forward_adaptive(block: Block, tokens, block_mask, token_mask, mode: str = "hard") -> Tensor:
    """Run ``block`` under a block gate and a per-token gate.

    hard: ``tokens`` is [1, N, D]; masks are exactly 0/1. A closed block is the
    identity; otherwise only active rows are processed, attending only to each
    other, and inactive rows pass through untouched.

    soft: ``tokens`` is [B, N, D], ``block_mask`` [B], ``token_mask`` [B, N] in
    [0, 1]. The block runs on every row with keys weighted by the token mask,
    then each row is blended: m * processed + (1 - m) * input with
    m = block_mask * token_mask.
    """
    tokens = nx.as_tensor(tokens)
    B, N, _ = tokens.shape
    if mode == "hard":
        if B != 1:
            raise nx.ShapeError(f"block_forward_adaptive: hard mode runs one example at a time, got batch {B}")
        bm = float(np.asarray(nx.as_tensor(block_mask).data).reshape(-1)[0])
        tm = np.asarray(nx.as_tensor(token_mask).data).reshape(-1)
        if tm.shape[0] != N:
            raise nx.ShapeError(f"block_forward_adaptive: token mask {tm.shape} vs tokens {tokens.shape}")
        if bm not in (0.0, 1.0) or not np.isin(tm, (0.0, 1.0)).all():
            raise ValueError("hard mode requires masks in {0, 1}")
        if bm == 0.0:
            return tokens
        active = np.flatnonzero(tm)
        if active.size == N:
            return block(tokens)
        if active.size == 0:
            return tokens
        processed = block(nx.take(tokens, active, axis=1))
        return nx.scatter(tokens, active, processed, axis=1)
    if mode != "soft":
        raise ValueError(f"unknown mode {mode!r}")
    bmask = nx.as_tensor(block_mask)
    tmask = nx.as_tensor(token_mask)
    if tmask.shape != (B, N) or bmask.shape != (B,):
        raise nx.ShapeError(f"block_forward_adaptive: masks {bmask.shape}/{tmask.shape} vs tokens {tokens.shape}")
    key_bias = nx.straight_through(np.log(tmask.data + KEY_MASK_EPS), nx.log(tmask + KEY_GRAD_EPS))
    key_bias = key_bias.reshape(B, 1, 1, N)
    processed = block(tokens, key_bias)
    m = (bmask.reshape(B, 1) * tmask).reshape(B, N, 1)
    return m * processed + (1.0 - m) * tokens


class PatchMerge(Module):
    """Concatenate 2x2 neighbours, layer-norm, project 4D -> D_next."""

    def __init__(self, dim: int, dim_out: int, rng: RngState):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, dim_out, rng, bias=False)

    def __call__(self, x, grid: int):
        B, N, D = x.shape
        g = grid // 2
        x = x.reshape(B, g, 2, g, 2, D).transpose(0, 1, 3, 4, 2, 5).reshape(B, g * g, 4 * D)
        return self.reduce(self.norm(x))


# decide(block_index, tokens) -> (block_mask, token_mask)
DecideFn = Callable[[int, Tensor], tuple]


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: RngState):
        self.cfg = cfg
        d0 = cfg.embed_dims[0]
        self.embed_weight = param(rng.normal((cfg.patch_dim, d0)) / math.sqrt(cfg.patch_dim))
        self.embed_bias = param(np.zeros(d0))
        self.pos = param(rng.normal((cfg.tokens(0), d0)) * 0.02)
        self.blocks = []
        idx = 0
        for s, n in enumerate(cfg.blocks_per_stage):
            for _ in range(n):
                self.blocks.append(Block(cfg.embed_dims[s], cfg.heads_per_stage[s], cfg.mlp_hidden[s], rng, idx))
                idx += 1
        self.merges = [PatchMerge(cfg.embed_dims[s], cfg.embed_dims[s + 1], rng) for s in range(cfg.stages - 1)]

    def __call__(self, images, decide: DecideFn | None = None, mode: str = "static") -> StageFeatures:
        """Forward pass. ``mode`` is static (no gating), soft or hard; gated modes need ``decide``."""
        cfg = self.cfg
        x = patch_embed(images, self.embed_weight, self.embed_bias, cfg) + self.pos
        feats, grids = [], []
        k = 0
        for s, n in enumerate(cfg.blocks_per_stage):
            for _ in range(n):
                block = self.blocks[k]
                if mode == "static":
                    x = block(x)
                else:
                    bm, tm = decide(k, x)
                    x = block_forward_adaptive(block, x, bm, tm, mode)
                k += 1
            feats.append(x)
            grids.append(cfg.grid(s))
            if s < cfg.stages - 1:
                x = self.merges[s](x, cfg.grid(s))
        return StageFeatures(feats, grids)


def encoder_forward(encoder: Encoder, images, decisions: Sequence | None, mode: str = "hard") -> StageFeatures:
    """Forward under precomputed per-block (block_mask, token_mask) pairs; None means static."""
    if decisions is None:
        return encoder(images, mode="static")
    if len(decisions) != encoder.cfg.total_blocks:
        raise nx.ShapeError(f"encoder_forward: {len(decisions)} decisions for {encoder.cfg.total_blocks} blocks")
    return encoder(images, lambda k, x: decisions[k], mode)
