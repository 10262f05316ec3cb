"""The adaptive multi-task model: shared encoder, policy network, task heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import Encoder, EncoderConfig, StageFeatures
from .heads import TaskHead, TaskSpec
from .nn import Module
from .numerics import RngState
from .policy import PolicyConfig, PolicyDecision, PolicyNetwork, all_on_decision, random_decision


@dataclass
class Prediction:
    outputs: dict
    decisions: list
    features: StageFeatures


class AdaMTL(Module):
    def __init__(self, enc_cfg: EncoderConfig, tasks: Sequence[TaskSpec], pol_cfg: PolicyConfig, seed: int = 0,
                 fuse_channels: int | None = None, res_blocks: int = 2):
        root = RngState(seed)
        self.enc_cfg = enc_cfg
        self.tasks = tuple(tasks)
        if pol_cfg.variant == "task-aware" and tuple(pol_cfg.tasks) != tuple(t.name for t in self.tasks):
            raise ValueError("policy tasks must match the model's task names")
        self.pol_cfg = pol_cfg
        self.fuse_channels = fuse_channels or enc_cfg.embed_dims[0]
        self.encoder = Encoder(enc_cfg, root.spawn("encoder"))
        block_dims = [enc_cfg.embed_dims[s] for s in enc_cfg.block_stages]
        self.policy = PolicyNetwork(block_dims, pol_cfg, root.spawn("policy"))
        hrng = root.spawn("heads")
        self.heads = {t.name: TaskHead(t, enc_cfg.embed_dims, self.fuse_channels, enc_cfg.patch_size, hrng, res_blocks)
                      for t in self.tasks}

    # -- parameter groups ---------------------------------------------------
    def param_groups(self) -> dict:
        """Group name -> list of parameters: encoder, head.<task>, policy.<sub-network>."""
        groups = {"encoder": self.encoder.parameters()}
        for name, head in self.heads.items():
            groups[f"head.{name}"] = head.parameters()
        for h in self.pol_cfg.heads:
            ps = []
            for k in range(len(self.policy.block_heads)):
                ps += self.policy.block_heads[k][h].parameters() + self.policy.token_heads[k][h].parameters()
            groups[f"policy.{h}"] = ps
        return groups

    def mtl_parameters(self) -> list:
        return [p for name, ps in self.param_groups().items() if not name.startswith("policy.") for p in ps]

    def policy_parameters(self) -> list:
        return self.policy.parameters()

    @property
    def layer_weights(self) -> list:
        return [self.enc_cfg.embed_dims[s] for s in self.enc_cfg.block_stages]

    @property
    def block_grids(self) -> list:
        return [self.enc_cfg.grid(s) for s in self.enc_cfg.block_stages]

    # -- forward ------------------------------------------------------------
    def run_heads(self, features: StageFeatures, tasks: Sequence[str] | None = None) -> dict:
        names = tasks if tasks is not None else [t.name for t in self.tasks]
        return {n: self.heads[n](features) for n in names}

    def forward(self, images, mode: str = "static", rng: RngState | None = None, tau: float | None = None,
                enabled: Sequence | None = None, noise: float = True, decisions: Sequence | None = None,
                tasks: Sequence[str] | None = None, gate: str | None = None, deployed: bool = False) -> Prediction:
        """static: no policy. soft/hard: policy decides every block unless ``decisions`` is given.

        ``gate`` overrides the gate mode in soft (training) mode; ``gate="hard"``
        gives straight-through binary masks blended by the soft encoder path.
        ``deployed`` asks the policy for noise-free masks alongside (see ``PolicyNetwork.decide``).
        """
        record: list = []
        if mode == "static":
            feats = self.encoder(images, mode="static")
            return Prediction(self.run_heads(feats, tasks), record, feats)

        def decide(k, x):
            if decisions is not None:
                d = decisions[k]
            else:
                d = self.policy.decide(k, x, gate or mode, rng, tau, enabled, noise, deployed)
            record.append(d)
            return d.block_mask, d.token_mask

        feats = self.encoder(images, decide, mode)
        return Prediction(self.run_heads(feats, tasks), record, feats)

    def predict(self, image, mode: str = "hard", policy: str = "learned", rng: RngState | None = None,
                fractions: tuple | None = None) -> Prediction:
        """Single-image inference without graph construction.

        ``policy``: learned (noise-free argmax gates), random (seeded masks at
        ``fractions`` = (block, token)), or all-on. Either rate may be a
        sequence with one entry per adaptive block; the token rate applies to
        tokens of executed blocks.
        """
        img = np.asarray(image.data if isinstance(image, nx.Tensor) else image)
        if img.ndim == 3:
            img = img[None]
        with nx.no_grad():
            if mode == "static":
                return self.forward(img, "static")
            if policy == "learned":
                return self.forward(img, "hard", noise=False)
            if policy == "all-on":
                decs = [all_on_decision(self.enc_cfg.tokens(s)) for s in self.enc_cfg.block_stages]
            elif policy == "random":
                n = self.enc_cfg.total_blocks
                b, t = (np.broadcast_to(np.asarray(f, dtype=np.float64), (n,)) for f in fractions)
                decs = [random_decision(rng, self.enc_cfg.tokens(s), float(b[k]), float(t[k]))
                        for k, s in enumerate(self.enc_cfg.block_stages)]
            else:
                raise ValueError(f"unknown policy {policy!r}")
            return self.forward(img, "hard", decisions=decs)


def decisions_summary(decisions: Sequence[PolicyDecision]) -> tuple:
    """(per-layer block masks, per-layer token fractions) of a hard single-example decision list."""
    b = np.array([float(np.asarray(d.block_mask.data).reshape(-1)[0]) for d in decisions])
    t = np.array([float(np.asarray(d.token_mask.data).mean()) for d in decisions])
    return b, t
