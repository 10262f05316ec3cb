"""Shared test builders."""
from adamtl.encoder import EncoderConfig
from adamtl.heads import default_tasks
from adamtl.model import AdaMTL
from adamtl.numerics import RngState
from adamtl.policy import PolicyConfig

TASKS = default_tasks(4)


def random_config(rng: RngState) -> EncoderConfig:
    u = lambda: float(rng.uniform((1,))[0])  # noqa: E731
    stages = 1 + int(u() * 3)
    patch = (2, 4)[int(u() * 2)]
    grid = patch * 2 ** (stages - 1) * (1 + int(u() * 2))
    dims, d = [], 4 * (1 + int(u() * 2))
    for _ in range(stages):
        dims.append(d)
        d += 4 * (1 + int(u() * 2))
    heads = [(1, 2)[int(u() * 2)] for _ in range(stages)]
    blocks = [int(u() * 3) for _ in range(stages)]
    return EncoderConfig(image_size=grid, patch_size=patch, stages=stages, blocks_per_stage=tuple(blocks),
                         embed_dims=tuple(dims), heads_per_stage=tuple(heads), mlp_ratio=(2.0, 4.0)[int(u() * 2)])


def random_model(seed: int):
    rng = RngState(seed)
    cfg = random_config(rng)
    n_tasks = 1 + int(rng.uniform((1,))[0] * 3)
    tasks = TASKS[:n_tasks]
    variant = ("task-aware", "task-agnostic")[seed % 2]
    pol = PolicyConfig(variant=variant, hidden_dim=4 + seed % 5, tasks=[t.name for t in tasks])
    model = AdaMTL(cfg, tasks, pol, seed=seed, res_blocks=seed % 3)
    # spread the gates so hard decisions mix on and off
    for heads in model.policy.block_heads + model.policy.token_heads:
        for head in heads.values():
            head.fc2.weight.data *= 20.0
            head.fc2.bias.data[:] = [float(rng.normal((1,))[0]), 0.0]
    return model
