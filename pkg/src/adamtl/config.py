"""INI run configuration.

Sections and keys (every key optional, unknown sections or keys are errors)::

    [encoder]  image_size patch_size stages blocks_per_stage embed_dims
               heads_per_stage mlp_ratio in_channels
    [policy]   variant hidden_dim temperature final_temperature
    [tasks]    names classes loss_weights
    [model]    fuse_channels res_blocks
    [targets]  preset block_target_fraction token_target_fraction alpha
    [train]    every TrainPlan field except targets
    [data]     train_size val_size complexity_min complexity_max clutter
               val_seed_offset

Lists are comma separated. ``preset`` (H or L) sets the defaults that the
other [targets] keys then override.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace

from .encoder import EncoderConfig
from .heads import TaskSpec, default_tasks
from .losses import PRESETS
from .policy import PolicyConfig
from .training import TrainPlan

KIND_BY_NAME = {"seg": "segmentation", "sal": "saliency", "normals": "normals"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 512
    val_size: int = 128
    complexity_min: int = 1
    complexity_max: int = 4
    clutter: bool = True
    val_seed_offset: int = 1000


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    tasks: tuple = field(default_factory=lambda: tuple(default_tasks(4)))
    fuse_channels: int = 0
    res_blocks: int = 2
    plan: TrainPlan = field(default_factory=TrainPlan)
    data: DataConfig = field(default_factory=DataConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, plan=replace(self.plan, seed=seed))


def _list(value: str, cast) -> tuple:
    return tuple(cast(v.strip()) for v in value.split(",") if v.strip())


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _caster(tp):
    tp = str(tp)
    if "tuple" in tp:
        return lambda v: _list(v, int)
    if "bool" in tp:
        return _bool
    if "int" in tp:
        return int
    if "float" in tp and "None" in tp:
        return lambda v: None if v.strip().lower() in ("", "none") else float(v)
    if "float" in tp:
        return float
    return str


def _check_keys(name: str, items: dict, allowed) -> None:
    unknown = set(items) - set(allowed)
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s) {sorted(unknown)}")


def _fields(cls, name: str, items: dict, exclude=()) -> dict:
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}
    _check_keys(name, items, known)
    out = {}
    for key, raw in items.items():
        cast = float if key == "mlp_ratio" else _caster(known[key].type)
        try:
            out[key] = cast(raw)
        except ValueError as err:
            raise ConfigError(f"[{name}] {key}: {err}") from None
    return out


def parse(text: str) -> RunConfig:
    try:
        return _parse(text)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    allowed = {"encoder", "policy", "tasks", "model", "targets", "train", "data"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}")
    sec = {name: dict(cp[name]) if cp.has_section(name) else {} for name in allowed}

    encoder = EncoderConfig(**_fields(EncoderConfig, "encoder", sec["encoder"]))

    t = sec["tasks"]
    _check_keys("tasks", t, ("names", "classes", "loss_weights"))
    names = _list(t.get("names", "seg,sal,normals"), str)
    classes = int(t.get("classes", "4"))
    weights = _list(t.get("loss_weights", ",".join("1" for _ in names)), float)
    if len(weights) != len(names):
        raise ConfigError("[tasks] loss_weights needs one value per task")
    tasks = []
    for n, w in zip(names, weights):
        if n not in KIND_BY_NAME:
            raise ConfigError(f"[tasks] unknown task {n!r} (choose from {sorted(KIND_BY_NAME)})")
        kind = KIND_BY_NAME[n]
        tasks.append(TaskSpec(n, kind, classes=classes if kind == "segmentation" else 0, loss_weight=w))

    policy = PolicyConfig(tasks=names, **_fields(PolicyConfig, "policy", sec["policy"], exclude=("tasks",)))

    m = sec["model"]
    _check_keys("model", m, ("fuse_channels", "res_blocks"))

    tg = dict(sec["targets"])
    _check_keys("targets", tg, ("preset", "block_target_fraction", "token_target_fraction", "alpha"))
    preset = tg.pop("preset", "H").strip()
    if preset not in PRESETS:
        raise ConfigError(f"[targets] unknown preset {preset!r}")
    targets = replace(PRESETS[preset], **{k: float(v) for k, v in tg.items()})

    plan = TrainPlan(targets=targets, **_fields(TrainPlan, "train", sec["train"], exclude=("targets",)))
    data = DataConfig(**_fields(DataConfig, "data", sec["data"]))
    return RunConfig(encoder, policy, tuple(tasks), int(m.get("fuse_channels", 0)), int(m.get("res_blocks", 2)),
                     plan, data)


def load(path: str) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())


def dump(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    e, p, plan, d = cfg.encoder, cfg.policy, cfg.plan, cfg.data

    def join(v):
        return ",".join(str(x) for x in v)

    lines = ["[encoder]"]
    for f in dataclasses.fields(EncoderConfig):
        v = getattr(e, f.name)
        lines.append(f"{f.name} = {join(v) if isinstance(v, tuple) else v}")
    lines += ["", "[policy]", f"variant = {p.variant}", f"hidden_dim = {p.hidden_dim}",
              f"temperature = {p.temperature!r}", f"final_temperature = {p.final_temperature}"]
    lines += ["", "[tasks]", f"names = {join(t.name for t in cfg.tasks)}",
              f"classes = {next((t.classes for t in cfg.tasks if t.kind == 'segmentation'), 4)}",
              f"loss_weights = {join(repr(t.loss_weight) for t in cfg.tasks)}"]
    lines += ["", "[model]", f"fuse_channels = {cfg.fuse_channels}", f"res_blocks = {cfg.res_blocks}"]
    tg = plan.targets
    lines += ["", "[targets]", f"block_target_fraction = {tg.block_target_fraction!r}",
              f"token_target_fraction = {tg.token_target_fraction!r}", f"alpha = {tg.alpha!r}"]
    lines += ["", "[train]"]
    for f in dataclasses.fields(TrainPlan):
        if f.name != "targets":
            v = getattr(plan, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    lines += ["", "[data]"]
    for f in dataclasses.fields(DataConfig):
        lines.append(f"{f.name} = {getattr(d, f.name)}")
    return "\n".join(lines) + "\n"
