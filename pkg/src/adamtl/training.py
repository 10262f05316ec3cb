"""Three-stage training: static MTL, policy initialisation, co-training.

Stage 3 for the task-aware policy starts with Alternating Task Training: epoch
``i`` focuses on task ``i % m``, training only that task's decoder and policy
sub-network (plus the shared encoder) on L_task + alpha * L_eff. It then
fine-tunes everything end to end.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .datasyn import Dataset, MetricAccumulator
from .flopsacct import price_prediction
from .losses import EfficiencyTargets, activation_stats, efficiency_loss, stage1_loss, stage2_loss, task_loss
from .model import AdaMTL, decisions_summary
from .nn import set_trainable
from .numerics import RngState

log = logging.getLogger(__name__)

LOG_COLUMNS = ["stage", "epoch", "task_focus", "loss_tasks", "loss_eff", "block_frac", "token_frac"]


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    stage1_epochs: int = 20
    stage2_epochs: int = 5
    att_epochs: int = 12
    finetune_epochs: int = 12
    optimizer: str = "adam"
    lr_stage1: float = 3e-3
    lr_stage2: float = 1e-2
    lr_stage3: float = 1e-3
    lr_policy: float = 3e-3
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    targets: EfficiencyTargets = field(default_factory=EfficiencyTargets)
    weighted_tokens: bool = True
    tokens_loss_form: str = "per_layer"
    train_gate: str = "hard"
    noise_scale: float = 1.0
    final_noise_scale: float = 0.3
    quiet_epochs: int = 0
    deployed_stats: bool = False
    lr_decay: bool = True
    schedule: str = "alternating"
    eval_size: int = 32

    def __post_init__(self):
        for name in ("stage1_epochs", "stage2_epochs", "att_epochs", "finetune_epochs", "quiet_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("alternating", "sequential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.train_gate not in ("soft", "hard"):
            raise ValueError(f"unknown train_gate {self.train_gate!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.noise_scale < 0 or self.final_noise_scale < 0:
            raise ValueError("noise scales must be >= 0")

    def lr_scale(self, epoch: int, total: int) -> float:
        """Stage-3 learning-rate multiplier: linear decay towards zero when ``lr_decay`` is set."""
        if not self.lr_decay or total <= 0:
            return 1.0
        return 1.0 - epoch / total

    def noise_at(self, epoch: int, total: int) -> float:
        """Gumbel noise scale for stage-3 epoch ``epoch``.

        Linear from ``noise_scale`` to ``final_noise_scale`` over the first
        ``total - quiet_epochs`` epochs; the last ``quiet_epochs`` run noise-free.
        """
        if epoch >= total - self.quiet_epochs:
            return 0.0
        span = total - self.quiet_epochs
        if span <= 1:
            return self.final_noise_scale
        frac = min(max(epoch / (span - 1), 0.0), 1.0)
        return self.noise_scale + (self.final_noise_scale - self.noise_scale) * frac


# -- optimisers --------------------------------------------------------------

class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: dict = {}

    def step(self, params) -> None:
        for p in params:
            g = p.grad
            v = self.buf.get(id(p))
            v = g.copy() if v is None else self.momentum * v + g
            self.buf[id(p)] = v
            p.data = (p.data - self.lr * v).astype(p.data.dtype)


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.state: dict = {}

    def step(self, params) -> None:
        for p in params:
            g = p.grad
            t, m, v = self.state.get(id(p), (0, np.zeros_like(g), np.zeros_like(g)))
            t += 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.state[id(p)] = (t, m, v)
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def make_optimizer(plan: TrainPlan, lr: float):
    return Adam(lr) if plan.optimizer == "adam" else SGD(lr, plan.momentum)


class CoTrainOptimizer:
    """Stage-3 optimiser: policy parameters step at lr_policy, everything else at lr_stage3."""

    def __init__(self, model: AdaMTL, plan: TrainPlan):
        self.plan = plan
        self.policy_ids = {id(p) for p in model.policy_parameters()}
        self.main = make_optimizer(plan, plan.lr_stage3)
        self.policy = make_optimizer(plan, plan.lr_policy)

    def set_epoch(self, epoch: int, total: int) -> None:
        scale = self.plan.lr_scale(epoch, total)
        self.main.lr = self.plan.lr_stage3 * scale
        self.policy.lr = self.plan.lr_policy * scale

    def step(self, params) -> None:
        self.main.step([p for p in params if id(p) not in self.policy_ids])
        self.policy.step([p for p in params if id(p) in self.policy_ids])


# -- freezing ----------------------------------------------------------------

@dataclass
class FreezeState:
    """Trainable flag per parameter group (encoder, head.<task>, policy.<sub-network>)."""

    trainable: dict

    def apply(self, model: AdaMTL) -> list:
        groups = model.param_groups()
        unknown = set(self.trainable) - set(groups)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        out = []
        for name, ps in groups.items():
            flag = self.trainable.get(name, False)
            set_trainable(ps, flag)
            if flag:
                out += ps
        return out

    @classmethod
    def only(cls, model: AdaMTL, *prefixes: str) -> "FreezeState":
        return cls({g: any(g == p or g.startswith(p + ".") for p in prefixes) for g in model.param_groups()})


def att_freeze_state(model: AdaMTL, task: str) -> FreezeState:
    """Encoder, the focus task's head and its policy sub-network trainable; everything else frozen."""
    flags = {}
    for g in model.param_groups():
        if g == "encoder":
            flags[g] = True
        elif g.startswith("head."):
            flags[g] = g == f"head.{task}"
        else:
            flags[g] = g == f"policy.{task}"
    return FreezeState(flags)


def att_task_index(epoch: int, n_tasks: int, plan: TrainPlan | None = None) -> int:
    """Focus task of ATT epoch ``epoch``: round robin, or contiguous runs when sequential."""
    if n_tasks < 1:
        raise ValueError("empty task list")
    if plan is not None and plan.schedule == "sequential":
        per = max(1, math.ceil(plan.att_epochs / n_tasks))
        return min(epoch // per, n_tasks - 1)
    return epoch % n_tasks


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: dict
    block_frac: float
    token_frac: float
    layer_token_frac: np.ndarray
    flops: np.ndarray
    ratio: float
    layer_block_frac: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def row(self, tasks) -> list:
        return [self.metrics[t.name] for t in tasks]

    def weighted_token_frac(self, weights) -> float:
        """Token fraction averaged over blocks with the efficiency-loss weights."""
        w = np.asarray(weights, dtype=np.float64)
        return float(self.layer_token_frac @ (w / w.sum())) if w.size else 1.0

    def matched_fractions(self) -> tuple:
        """Per-block (block rate, token rate given the block runs) reproducing these activations."""
        b = self.layer_block_frac
        t = np.divide(self.layer_token_frac, b, out=np.zeros_like(b), where=b > 0)
        return b, np.clip(t, 0.0, 1.0)


def evaluate(model: AdaMTL, data: Dataset, mode: str = "hard", policy: str = "learned",
             rng: RngState | None = None, fractions: tuple | None = None) -> EvalResult:
    """Per-task metrics and activation / FLOPS statistics, one image at a time."""
    accs = {t.name: MetricAccumulator(t) for t in model.tasks}
    bfr, tfr, totals, statics = [], [], [], []
    n_blocks = model.enc_cfg.total_blocks
    for i in range(len(data)):
        pred = model.predict(data.images[i], mode=mode, policy=policy, rng=rng, fractions=fractions)
        for t in model.tasks:
            accs[t.name].update(pred.outputs[t.name].data[0], data.target(t, i))
        rep = price_prediction(model, pred)
        totals.append(rep.dynamic_total)
        statics.append(rep.static_total)
        if pred.decisions:
            b, t = decisions_summary(pred.decisions)
        else:
            b, t = np.ones(n_blocks), np.ones(n_blocks)
        bfr.append(b)
        tfr.append(t)
    layer = np.mean(tfr, axis=0) if tfr else np.zeros(0)
    return EvalResult(
        metrics={k: a.value() for k, a in accs.items()},
        block_frac=float(np.mean(bfr)) if bfr and n_blocks else 1.0,
        layer_block_frac=np.mean(bfr, axis=0) if bfr else np.ones(n_blocks),
        token_frac=float(layer.mean()) if layer.size else 1.0,
        layer_token_frac=layer,
        flops=np.array(totals),
        ratio=float(np.sum(totals) / np.sum(statics)) if statics else 1.0,
    )


# -- logging -----------------------------------------------------------------

class MetricsLog:
    """Rows for the per-epoch metrics CSV."""

    def __init__(self, tasks):
        self.tasks = [t.name for t in tasks]
        self.rows: list = []

    @property
    def header(self) -> list:
        return LOG_COLUMNS + [f"metric_{t}" for t in self.tasks]

    def add(self, stage, epoch, focus, loss_tasks, loss_eff, block_frac, token_frac, metrics: dict) -> None:
        self.rows.append([stage, epoch, focus, loss_tasks, loss_eff, block_frac, token_frac]
                         + [metrics[t] for t in self.tasks])

    def write(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([v if isinstance(v, (str, int)) else repr(float(v)) for v in r])



def match_flops_ratio(model: AdaMTL, data: Dataset, target: float, span: float = 8.0,
                      iters: int = 16) -> EvalResult:
    """Shift the policy's "on" logits so the mean FLOPS ratio on ``data`` meets ``target``.

    Bisects for the largest offset in [-span, span] whose ratio is at most
    ``target`` (the ratio is monotone in the offset). Leaves the offset set on
    ``model.policy`` and returns the evaluation at that offset.
    """
    def at(offset):
        model.policy.logit_offset = offset
        return evaluate(model, data)

    lo, hi = -span, span
    best = at(lo)
    if best.ratio > target:
        return best
    top = at(hi)
    if top.ratio <= target:
        return top
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ev = at(mid)
        if ev.ratio <= target:
            lo, best = mid, ev
        else:
            hi = mid
    model.policy.logit_offset = lo
    return best


def read_metrics_log(path: str) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- loops -------------------------------------------------------------------

@dataclass
class Checkpoint:
    state: dict
    info: dict = field(default_factory=dict)


def _batches(n: int, batch_size: int, rng: RngState):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{stage}: loss diverged at epoch {epoch}")


def _eval_subset(data: Dataset, plan: TrainPlan) -> Dataset:
    return data.subset(np.arange(min(plan.eval_size, len(data))))


def run_stage1(model: AdaMTL, data: Dataset, plan: TrainPlan, log_rows: MetricsLog | None = None,
               val: Dataset | None = None) -> Checkpoint:
    """Train encoder and heads with the weighted task loss; the policy is untouched."""
    val = val if val is not None else _eval_subset(data, plan)
    params = FreezeState.only(model, "encoder", "head").apply(model)
    opt = make_optimizer(plan, plan.lr_stage1)
    root = RngState(plan.seed).spawn("stage1")
    history = []
    for epoch in range(plan.stage1_epochs):
        total, count = 0.0, 0
        for idx in _batches(len(data), plan.batch_size, root.spawn(f"epoch-{epoch}")):
            pred = model.forward(data.images[idx], "static")
            loss = stage1_loss(pred.outputs, data.targets(model.tasks, idx), model.tasks)
            nx.backward(loss)
            opt.step(params)
            model.zero_grad()
            total += loss.item() * len(idx)
            count += len(idx)
        mean_loss = total / max(count, 1)
        _check_finite(mean_loss, "stage1", epoch)
        history.append(mean_loss)
        if log_rows is not None:
            ev = evaluate(model, val, mode="static")
            log_rows.add("1", epoch, "all", mean_loss, 0.0, 1.0, 1.0, ev.metrics)
        log.info("stage1 epoch %d loss %.5f", epoch, mean_loss)
    return Checkpoint(model.state_dict(), {"loss": history})


def run_stage2(model: AdaMTL, data: Dataset, plan: TrainPlan, log_rows: MetricsLog | None = None,
               val: Dataset | None = None) -> Checkpoint:
    """Train only the policy to switch everything on; the MTL weights stay frozen."""
    val = val if val is not None else _eval_subset(data, plan)
    params = FreezeState.only(model, "policy").apply(model)
    opt = make_optimizer(plan, plan.lr_stage2)
    root = RngState(plan.seed).spawn("stage2")
    tau = model.pol_cfg.temperature
    history = []
    for epoch in range(plan.stage2_epochs):
        total, count = 0.0, 0
        noise = root.spawn(f"gumbel-{epoch}")
        for idx in _batches(len(data), plan.batch_size, root.spawn(f"epoch-{epoch}")):
            pred = model.forward(data.images[idx], "soft", rng=noise, tau=tau, tasks=[])
            loss = stage2_loss(pred.decisions)
            nx.backward(loss)
            opt.step(params)
            model.zero_grad()
            total += loss.item() * len(idx)
            count += len(idx)
        mean_loss = total / max(count, 1)
        _check_finite(mean_loss, "stage2", epoch)
        history.append(mean_loss)
        if log_rows is not None:
            ev = evaluate(model, val, mode="hard")
            log_rows.add("2", epoch, "all", 0.0, mean_loss, ev.block_frac, ev.token_frac, ev.metrics)
    all_on = all_on_fraction(model, val)
    if all_on < 1.0:
        log.warning("stage2 ended with %.3f of held-out examples fully on", all_on)
    return Checkpoint(model.state_dict(), {"loss": history, "all_on_fraction": all_on})


def all_on_fraction(model: AdaMTL, data: Dataset) -> float:
    """Share of examples whose hard decisions switch on every block and token."""
    full = 0
    for i in range(len(data)):
        decs = model.predict(data.images[i]).decisions
        full += all(d.block_values().all() and d.token_values().all() for d in decs)
    return full / max(len(data), 1)


def _co_train_epoch(model, data, plan, opt, params, rng, tau, enabled, loss_tasks_fn, alpha, noise=1.0):
    tot_task = tot_eff = 0.0
    count = 0
    targets = plan.targets
    for idx in _batches(len(data), plan.batch_size, rng.spawn("order")):
        pred = model.forward(data.images[idx], "soft", rng=rng, tau=tau, enabled=enabled, gate=plan.train_gate,
                             noise=noise, tasks=[t.name for t in loss_tasks_fn.tasks], deployed=plan.deployed_stats)
        l_task = loss_tasks_fn(pred.outputs, idx)
        stats = activation_stats(pred.decisions, model.layer_weights, plan.deployed_stats)
        l_eff = efficiency_loss(stats, targets, plan.weighted_tokens, plan.tokens_loss_form)
        loss = l_task + l_eff * alpha
        nx.backward(loss)
        opt.step(params)
        model.zero_grad()
        tot_task += l_task.item() * len(idx)
        tot_eff += l_eff.item() * len(idx)
        count += len(idx)
    return tot_task / max(count, 1), tot_eff / max(count, 1)


class _TaskLoss:
    def __init__(self, data: Dataset, tasks, weighted: bool):
        self.data, self.tasks, self.weighted = data, list(tasks), weighted

    def __call__(self, outputs, idx):
        if self.weighted:
            return stage1_loss(outputs, self.data.targets(self.tasks, idx), self.tasks)
        t = self.tasks[0]
        return task_loss(outputs[t.name], self.data.target(t, idx), t)


def att_epoch(model: AdaMTL, data: Dataset, epoch: int, plan: TrainPlan, opt=None,
              log_rows: MetricsLog | None = None, val: Dataset | None = None, total_epochs: int | None = None) -> str:
    """One Alternating Task Training epoch; returns the focus task's name."""
    if not model.tasks:
        raise ValueError("ATT needs at least one task")
    task = model.tasks[att_task_index(epoch, len(model.tasks), plan)]
    params = att_freeze_state(model, task.name).apply(model)
    opt = opt if opt is not None else CoTrainOptimizer(model, plan)
    total_epochs = total_epochs or max(plan.att_epochs + plan.finetune_epochs, 1)
    tau = model.pol_cfg.temperature_at(epoch / total_epochs)
    rng = RngState(plan.seed).spawn(f"att-{epoch}")
    opt.set_epoch(epoch, total_epochs)
    lt, le = _co_train_epoch(model, data, plan, opt, params, rng, tau, [task.name],
                             _TaskLoss(data, [task], weighted=False), plan.targets.alpha,
                             plan.noise_at(epoch, total_epochs))
    _check_finite(lt + le, "att", epoch)
    if log_rows is not None:
        ev = evaluate(model, val if val is not None else _eval_subset(data, plan))
        log_rows.add("att", epoch, task.name, lt, le, ev.block_frac, ev.token_frac, ev.metrics)
    return task.name


def run_stage3(model: AdaMTL, data: Dataset, plan: TrainPlan, log_rows: MetricsLog | None = None,
               val: Dataset | None = None, after_att=None) -> Checkpoint:
    """ATT (task-aware only), then end-to-end fine-tuning with L_tasks + alpha * L_eff.

    ``after_att`` is called with the checkpoint taken between the two phases.
    """
    val = val if val is not None else _eval_subset(data, plan)
    total_epochs = max(plan.att_epochs + plan.finetune_epochs, 1)
    schedule = []
    if model.pol_cfg.variant == "task-aware":
        opt = CoTrainOptimizer(model, plan)
        for epoch in range(plan.att_epochs):
            schedule.append(att_epoch(model, data, epoch, plan, opt, log_rows, val, total_epochs))
        finetune = plan.finetune_epochs
        start = plan.att_epochs
    else:
        finetune = plan.att_epochs + plan.finetune_epochs
        start = 0
    if after_att is not None:
        after_att(Checkpoint(model.state_dict(), {"schedule": list(schedule)}))
    params = FreezeState.only(model, "encoder", "head", "policy").apply(model)
    opt = CoTrainOptimizer(model, plan)
    loss_fn = _TaskLoss(data, model.tasks, weighted=True)
    for j in range(finetune):
        epoch = start + j
        tau = model.pol_cfg.temperature_at(epoch / total_epochs)
        rng = RngState(plan.seed).spawn(f"finetune-{epoch}")
        opt.set_epoch(epoch, total_epochs)
        lt, le = _co_train_epoch(model, data, plan, opt, params, rng, tau, None, loss_fn, plan.targets.alpha,
                                 plan.noise_at(epoch, total_epochs))
        _check_finite(lt + le, "finetune", epoch)
        if log_rows is not None:
            ev = evaluate(model, val)
            log_rows.add("3", epoch, "all", lt, le, ev.block_frac, ev.token_frac, ev.metrics)
    return Checkpoint(model.state_dict(), {"schedule": schedule})


def run_all(model: AdaMTL, data: Dataset, plan: TrainPlan, log_rows: MetricsLog | None = None,
            val: Dataset | None = None) -> dict:
    """Stages 1 -> 2 -> 3; returns checkpoints keyed s1, s2, att, final."""
    out = {"s1": run_stage1(model, data, plan, log_rows, val),
           "s2": run_stage2(model, data, plan, log_rows, val)}
    out["final"] = run_stage3(model, data, plan, log_rows, val, after_att=lambda c: out.__setitem__("att", c))
    return {k: out[k] for k in ("s1", "s2", "att", "final")}


def with_targets(plan: TrainPlan, targets: EfficiencyTargets) -> TrainPlan:
    return replace(plan, targets=targets)
