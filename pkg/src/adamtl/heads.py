"""Per-task multi-scale fusing layers and two-convolution decoders."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import numerics as nx
from .encoder import StageFeatures
from .nn import Conv2d, LayerNorm, Module
from .numerics import RngState

KINDS = {"segmentation": "mIoU", "saliency": "F1", "normals": "mean-angular-error"}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    classes: int = 0
    loss_weight: float = 1.0
    metric: str = ""
    lower_is_better: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not self.loss_weight > 0:
            raise ValueError(f"task {self.name}: loss_weight must be > 0")
        if self.kind == "segmentation" and self.classes < 2:
            raise ValueError(f"task {self.name}: segmentation needs classes >= 2")
        if not self.metric:
            object.__setattr__(self, "metric", KINDS[self.kind])
            object.__setattr__(self, "lower_is_better", self.kind == "normals")

    @property
    def out_channels(self) -> int:
        return {"segmentation": self.classes, "saliency": 1, "normals": 2}[self.kind]


def default_tasks(classes: int = 4) -> tuple:
    return (
        TaskSpec("seg", "segmentation", classes=classes),
        TaskSpec("sal", "saliency"),
        TaskSpec("normals", "normals"),
    )


def tokens_to_map(tokens, grid: int):
    """[B, g*g, D] -> [B, D, g, g]."""
    B, N, D = tokens.shape
    return tokens.reshape(B, grid, grid, D).transpose(0, 3, 1, 2)


def channel_norm(norm: LayerNorm, x):
    """Layer-norm over the channel axis of a [B, C, H, W] map."""
    return norm(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


class ResidualBlock(Module):
    """conv3x3 -> norm -> GELU -> conv3x3, plus the identity skip."""

    def __init__(self, channels: int, rng: RngState):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.norm = LayerNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def __call__(self, x, padding_mode: str = "zeros"):
        h = nx.gelu(channel_norm(self.norm, self.conv1(x, padding_mode)))
        return x + self.conv2(h, padding_mode)


class MultiScaleFuse(Module):
    def __init__(self, embed_dims: Sequence, channels: int, rng: RngState, res_blocks: int = 2):
        self.proj = [Conv2d(d, channels, 1, rng) for d in embed_dims]
        self.res = [ResidualBlock(channels, rng) for _ in range(res_blocks)]

    def __call__(self, features: StageFeatures, padding_mode: str = "zeros"):
        base = features.grids[0]
        fused = None
        for proj, tok, g in zip(self.proj, features.tokens, features.grids):
            m = nx.upsample_nearest(proj(tokens_to_map(tok, g)), base // g)
            fused = m if fused is None else fused + m
        for block in self.res:
            fused = block(fused, padding_mode)
        return fused


class Decoder(Module):
    def __init__(self, channels: int, out_channels: int, upsample: int, rng: RngState):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, out_channels, 3, rng)
        self.upsample = upsample

    def __call__(self, fused, padding_mode: str = "zeros"):
        y = self.conv2(nx.gelu(self.conv1(fused, padding_mode)), padding_mode)
        return nx.upsample_nearest(y, self.upsample)


class TaskHead(Module):
    def __init__(self, task: TaskSpec, embed_dims: Sequence, channels: int, upsample: int, rng: RngState,
                 res_blocks: int = 2):
        self.task = task
        self.fuse = MultiScaleFuse(embed_dims, channels, rng, res_blocks)
        self.decoder = Decoder(channels, task.out_channels, upsample, rng)

    def __call__(self, features: StageFeatures):
        return self.decoder(self.fuse(features))


def multiscale_fuse(features: StageFeatures, head: TaskHead):
    return head.fuse(features)


def decode(fused, head: TaskHead):
    """Raw prediction map: class logits, one saliency logit, or a 2-vector."""
    return head.decoder(fused)
