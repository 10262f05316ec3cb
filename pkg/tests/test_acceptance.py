"""The twelve acceptance criteria, one test each.

Criteria 8 to 11 share one set of trained models (toy config, seeds 0-2),
built lazily and cached for the session. Every test records a PASS/FAIL line
that is printed in the terminal summary.
"""
import functools
import math
import os
import time
from dataclasses import replace

import numpy as np

from adamtl import checkpoint, cli, config, datasyn
from adamtl import numerics as nx
from adamtl.flopsacct import dynamic_flops, price_prediction
from adamtl.heads import TaskSpec
from adamtl.losses import (PRESETS, ActivationStats, EfficiencyTargets, activation_stats, blocks_loss, efficiency_loss,
                           stage2_loss, task_loss, tokens_loss)
from adamtl.numerics import RngState, Tensor
from adamtl.policy import PolicyConfig, PolicyDecision, PolicyHead, fuse_task_masks, gumbel_binary_gate
from adamtl.training import CoTrainOptimizer, att_epoch, att_freeze_state, evaluate, match_flops_ratio, \
    run_stage1, run_stage2, run_stage3

from helpers import random_model

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY = os.path.join(ROOT, "configs", "toy.ini")
TINY = os.path.join(ROOT, "configs", "tiny.ini")
SEEDS = (0, 1, 2)


# -- 1. gradient suite ---------------------------------------------------------------

def _pos(x):
    return 0.5 + np.abs(x)


def _away(x, edges, gap=0.05):
    """Move entries at least ``gap`` away from the kinks at ``edges``."""
    for e in edges:
        near = np.abs(x - e) < gap
        x = np.where(near, e + np.sign(x - e + 1e-12) * gap * 2, x)
    return x


GRAD_CASES = [
    ("add", lambda a, b: nx.add(a, b), [(3, 4), (4,)], None),
    ("sub", lambda a, b: nx.sub(a, b), [(2, 3), (2, 3)], None),
    ("mul", lambda a, b: nx.mul(a, b), [(3, 1), (1, 4)], None),
    ("div", lambda a, b: nx.div(a, b), [(2, 3), (2, 3)], [None, _pos]),
    ("neg", lambda a: nx.neg(a), [(5,)], None),
    ("power", lambda a: nx.power(a, 1.5), [(4,)], [_pos]),
    ("exp", lambda a: nx.exp(a), [(2, 3)], None),
    ("log", lambda a: nx.log(a), [(2, 3)], [_pos]),
    ("sqrt", lambda a: nx.sqrt(a), [(6,)], [_pos]),
    ("relu", lambda a: nx.relu(a), [(8,)], [lambda x: _away(x, [0.0])]),
    ("gelu", lambda a: nx.gelu(a), [(8,)], None),
    ("sigmoid", lambda a: nx.sigmoid(a), [(8,)], None),
    ("softplus", lambda a: nx.softplus(a), [(8,)], None),
    ("clamp", lambda a: nx.clamp(a, -0.5, 0.5), [(8,)], [lambda x: _away(x, [-0.5, 0.5])]),
    ("sum", lambda a: nx.sum_(a, axis=1), [(3, 4)], None),
    ("mean", lambda a: nx.mean(a, axis=0, keepdims=True), [(3, 4)], None),
    ("reshape", lambda a: nx.reshape(nx.mul(a, a), (6, 2)), [(3, 4)], None),
    ("transpose", lambda a: nx.mul(nx.transpose(a, (1, 0, 2)), nx.transpose(a, (1, 0, 2))), [(2, 3, 2)], None),
    ("concat", lambda a, b: nx.mul(nx.concat([a, b], axis=0), nx.concat([b, a], axis=0)), [(2, 3), (2, 3)], None),
    ("take", lambda a: nx.mul(nx.take(a, [2, 0, 2], axis=1), 3.0), [(2, 4)], None),
    ("scatter", lambda a, b: nx.mul(nx.scatter(a, [1, 3], b, axis=1), nx.scatter(a, [1, 3], b, axis=1)),
     [(2, 4), (2, 2)], None),
    ("upsample", lambda a: nx.mul(nx.upsample_nearest(a, 2), 1.0), [(1, 2, 2, 3)], None),
    ("matmul", lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)], None),
    ("linear", lambda x, w, b: nx.linear(x, w, b), [(3, 4), (4, 2), (2,)], None),
    ("softmax", lambda a: nx.softmax(a, axis=-1), [(3, 5)], None),
    ("log_softmax", lambda a: nx.log_softmax(a, axis=1), [(2, 4, 3)], None),
    ("layer_norm", lambda x, w, b: nx.layer_norm(x, w, b), [(3, 6), (6,), (6,)], None),
    ("conv2d", lambda x, w, b: nx.conv2d(x, w, b), [(1, 2, 4, 4), (3, 2, 3, 3), (3,)], None),
    ("conv2d_wrap", lambda x, w: nx.conv2d(x, w, None, "wrap"), [(1, 2, 4, 5), (2, 2, 3, 3)], None),
]


def _policy_case(kind):
    def build(tokens, w1, b1, w2, b2):
        head = PolicyHead(4, 3, RngState(0))
        head.fc1.weight, head.fc1.bias, head.fc2.weight, head.fc2.bias = w1, b1, w2, b2
        x = nx.mean(tokens, axis=1) if kind == "block" else tokens
        g = nx.gumbel_noise(RngState(9), (2, 2) if kind == "block" else (2, 5, 2))
        return gumbel_binary_gate(nx.add(head(x), g), 0.7, "soft")
    return (f"{kind}_policy", build, [(2, 5, 4), (4, 3), (3,), (3, 2), (2,)], None)


def _loss_cases():
    seg, sal, nrm = (TaskSpec("seg", "segmentation", classes=3), TaskSpec("sal", "saliency"),
                     TaskSpec("n", "normals"))
    labels = np.array([[[0, 1], [2, 1]]])
    sal_t = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    nrm_t = np.zeros((1, 2, 2, 2))
    nrm_t[0, 0, 0] = [0.6, 1.0]
    nrm_t[0, 1, 0] = [0.8, 0.0]

    def eff(b, t):
        dec = [PolicyDecision(nx.sigmoid(b), nx.sigmoid(t))]
        return efficiency_loss(activation_stats(dec, [16]), EfficiencyTargets(0.9, 0.6))

    def s2(b, t):
        return stage2_loss([PolicyDecision(nx.sigmoid(b), nx.sigmoid(t))])
    return [
        ("ce_loss", lambda p: task_loss(p, labels, seg), [(1, 3, 2, 2)], None),
        ("bce_loss", lambda p: task_loss(p, sal_t, sal), [(1, 1, 2, 2)], None),
        ("cosine_loss", lambda p: task_loss(p, nrm_t, nrm), [(1, 2, 2, 2)], None),
        ("efficiency_loss", eff, [(3,), (3, 4)], None),
        ("stage2_loss", s2, [(3,), (3, 4)], None),
    ]


def _grad_error(build, shapes, transforms, rng):
    with nx.precision(np.float64):
        xs = [rng.normal(s).astype(np.float64) for s in shapes]
        if transforms:
            xs = [t(x) if t else x for t, x in zip(transforms, xs)]
        leaves = [Tensor(x, requires_grad=True) for x in xs]
        out = build(*leaves)
        proj = rng.normal(out.shape).astype(np.float64)
        nx.backward(nx.sum_(nx.mul(out, Tensor(proj))))

        def f():
            return float(np.sum(build(*[Tensor(x) for x in xs]).data * proj))
        worst = 0.0
        for leaf, x in zip(leaves, xs):
            num = nx.numerical_grad(f, x, h=1e-6)
            worst = max(worst, nx.relative_error(leaf.grad, num))
        return worst


def test_criterion_01_gradient_suite(report):
    t0 = time.time()
    cases = GRAD_CASES + [_policy_case("block"), _policy_case("token")] + _loss_cases()
    rng = RngState(101)
    errors = {}
    n = 0
    for name, build, shapes, tr in cases:
        for _ in range(2):
            errors[name] = max(errors.get(name, 0.0), _grad_error(build, shapes, tr, rng))
            n += 1
    # straight-through: the backward pass must be the soft function's exact gradient
    for _ in range(2):
        with nx.precision(np.float64):
            x = rng.normal((6,)).astype(np.float64)
            leaf = Tensor(x, requires_grad=True)
            soft = nx.sigmoid(leaf)
            nx.backward(nx.sum_(nx.straight_through((soft.data > 0.5).astype(float), soft)))
            num = nx.numerical_grad(lambda: float(np.sum(1 / (1 + np.exp(-x)))), x, h=1e-6)
            errors["straight_through"] = max(errors.get("straight_through", 0.0), nx.relative_error(leaf.grad, num))
            n += 1
    elapsed = time.time() - t0
    worst = max(errors, key=errors.get)
    ok = n >= 50 and errors[worst] < 1e-3 and elapsed < 60
    report(1, ok, f"gradient suite: {n} cases over {len(errors)} ops, worst rel err {errors[worst]:.2e} ({worst}), "
                  f"{elapsed:.1f}s")
    assert ok, errors


# -- shared training runs (criteria 2, 8-11) -------------------------------------------

def toy_config(seed: int, preset: str = "H", variant: str = "task-aware", weighted: bool = True) -> config.RunConfig:
    cfg = config.load(TOY).with_seed(seed)
    plan = replace(cfg.plan, targets=PRESETS[preset], weighted_tokens=weighted)
    return replace(cfg, plan=plan, policy=replace(cfg.policy, variant=variant))


@functools.lru_cache(maxsize=None)
def data(seed: int):
    return cli.datasets(toy_config(seed))


@functools.lru_cache(maxsize=None)
def stage1_state(seed: int) -> dict:
    cfg = toy_config(seed)
    model = cli.build_model(cfg)
    train, _ = data(seed)
    return run_stage1(model, train, cfg.plan).state


def _mtl_keys(state):
    return {k: v for k, v in state.items() if not k.startswith("policy.")}


@functools.lru_cache(maxsize=None)
def stage2_state(seed: int, variant: str) -> dict:
    cfg = toy_config(seed, variant=variant)
    model = cli.build_model(cfg)
    # encoder and heads are seeded independently of the policy, so stage 1 is shared across variants
    own = model.state_dict()
    own.update(_mtl_keys(stage1_state(seed)))
    model.load_state_dict(own)
    train, _ = data(seed)
    return run_stage2(model, train, cfg.plan).state


@functools.lru_cache(maxsize=None)
def final_model(seed: int, preset: str = "H", variant: str = "task-aware", weighted: bool = True):
    cfg = toy_config(seed, preset, variant, weighted)
    model = cli.build_model(cfg)
    model.load_state_dict(stage2_state(seed, variant))
    train, _ = data(seed)
    run_stage3(model, train, cfg.plan)
    return model


@functools.lru_cache(maxsize=None)
def final_eval(seed: int, preset: str = "H", variant: str = "task-aware", weighted: bool = True):
    _, val = data(seed)
    return evaluate(final_model(seed, preset, variant, weighted), val)


def static_model(seed: int):
    model = cli.build_model(toy_config(seed))
    model.load_state_dict(stage1_state(seed))
    return model


# -- 2. all-on equivalence ------------------------------------------------------------

def test_criterion_02_all_on_after_stage2(report):
    model = cli.build_model(toy_config(0))
    model.load_state_dict(stage2_state(0, "task-aware"))
    t0 = time.time()
    rng = RngState(202)
    cfg = model.enc_cfg
    same = 0
    for _ in range(64):
        img = rng.uniform((cfg.in_channels, cfg.image_size, cfg.image_size))
        a = model.predict(img)
        s = model.predict(img, mode="static")
        same += all(np.array_equal(a.outputs[t.name].data, s.outputs[t.name].data) for t in model.tasks)
    elapsed = time.time() - t0
    ok = same == 64 and elapsed < 60
    report(2, ok, f"all-on equivalence after stage 2: {same}/64 random inputs bit-identical, {elapsed:.1f}s")
    assert ok


# -- 3. Gumbel law --------------------------------------------------------------------

def test_criterion_03_gumbel_law(report):
    rng = RngState(303)
    draws = 100_000
    worst = 0.0
    for i in range(10):
        pair = rng.normal((2,)) * 2
        logits = np.broadcast_to(pair, (draws, 2))
        hits = gumbel_binary_gate(Tensor(logits), 1.0, "hard", rng.spawn(f"pair-{i}")).data.mean()
        p = math.exp(pair[0]) / (math.exp(pair[0]) + math.exp(pair[1]))
        sigma = math.sqrt(p * (1 - p) / draws)
        worst = max(worst, abs(hits - p) / sigma)
    ok = worst <= 3.0
    report(3, ok, f"Gumbel law: 10 logit pairs x 1e5 draws, worst deviation {worst:.2f} sigma")
    assert ok


# -- 4. fusion is OR --------------------------------------------------------------------

def test_criterion_04_fusion_is_or(report):
    rng = RngState(404)
    bad = 0
    for i in range(10_000):
        k = 1 + int(rng.uniform((1,))[0] * 4)
        shape = (1 + int(rng.uniform((1,))[0] * 3), 1 + int(rng.uniform((1,))[0] * 8))
        masks = [(rng.uniform(shape) < 0.5).astype(np.float64) for _ in range(k)]
        fused = fuse_task_masks([Tensor(m) for m in masks]).data
        bad += not np.array_equal(fused, np.logical_or.reduce(masks).astype(np.float64))
    report(4, bad == 0, f"fusion = OR on 10000 random binary tuples, {bad} mismatches")
    assert bad == 0


# -- 5. FLOPS oracle -------------------------------------------------------------------

def test_criterion_05_flops_oracle(report):
    from adamtl.encoder import EncoderConfig
    from adamtl.policy import all_on_decision
    mismatches = 0
    for seed in range(24):
        model = random_model(seed)
        cfg = model.enc_cfg
        img = RngState(seed + 100).uniform((cfg.in_channels, cfg.image_size, cfg.image_size))
        with nx.count_macs() as c:
            pred = model.predict(img, mode="static")
        mismatches += price_prediction(model, pred).static_total != c.total
        with nx.count_macs() as c:
            pred = model.predict(img)
        mismatches += price_prediction(model, pred).dynamic_total != c.total
    cfg = EncoderConfig()
    pol = PolicyConfig()
    tasks = toy_config(0).tasks
    full = dynamic_flops(cfg, [all_on_decision(cfg.tokens(s)) for s in cfg.block_stages], tasks, pol)
    rng = RngState(505)
    non_monotone = 0
    for _ in range(1000):
        lo, hi = [], []
        for s in cfg.block_stages:
            n = cfg.tokens(s)
            b_hi = float(rng.uniform((1,))[0] < 0.8)
            t_hi = (rng.uniform((1, n)) < 0.7).astype(float) * b_hi
            b_lo = b_hi * float(rng.uniform((1,))[0] < 0.8)
            t_lo = t_hi * (rng.uniform((1, n)) < 0.7) * b_lo
            hi.append(PolicyDecision(Tensor([b_hi]), Tensor(t_hi), {}, "hard"))
            lo.append(PolicyDecision(Tensor([b_lo]), Tensor(t_lo), {}, "hard"))
        non_monotone += dynamic_flops(cfg, lo, tasks, pol).dynamic_total > dynamic_flops(cfg, hi, tasks, pol).dynamic_total
    ok = mismatches == 0 and full.ratio == 1.0 and non_monotone == 0
    report(5, ok, f"FLOPS oracle: 24 configs x 2 passes, {mismatches} counter mismatches; all-on ratio {full.ratio}; "
                  f"{non_monotone}/1000 lattice violations")
    assert ok


# -- 6. loss identities -------------------------------------------------------------------

def test_criterion_06_loss_identities(report):
    def dec(v, n=4):
        return [PolicyDecision(Tensor([v]), Tensor(np.full((1, 5), v))) for _ in range(n)]
    zero_on = stage2_loss(dec(1.0)).item() == 0.0
    rng = RngState(606)
    positive = all(stage2_loss([PolicyDecision(Tensor([1.0]), Tensor(np.r_[np.ones(4), rng.uniform((1,))][None]))])
                   .item() > 0 for _ in range(100))
    with nx.precision(np.float64):
        eq5 = blocks_loss(ActivationStats(Tensor(0.75), Tensor([0.6]), np.array([16.0])),
                          EfficiencyTargets(0.9, 0.6)).item()
        eq6 = tokens_loss(ActivationStats(Tensor(1.0), Tensor([0.5, 0.8]), np.array([16.0, 32.0])),
                          EfficiencyTargets(0.9, 0.5)).item()
    ok = zero_on and positive and abs(eq5 - 0.0225) < 1e-9 and abs(eq6 - 0.06) < 1e-9
    report(6, ok, f"loss identities: stage2 zero iff all-on {zero_on and positive}, blocks {eq5:.6f}, tokens {eq6:.6f}")
    assert ok


# -- 7. ATT contract --------------------------------------------------------------------

def test_criterion_07_att_contract(report):
    cfg = config.load(TINY)
    model = cli.build_model(cfg)
    train, _ = cli.datasets(cfg)
    plan = replace(cfg.plan, att_epochs=6)
    opt = CoTrainOptimizer(model, plan)
    groups = model.param_groups()
    names = [t.name for t in model.tasks]
    schedule, violations = [], []
    for epoch in range(plan.att_epochs):
        before = {g: [p.data.copy() for p in ps] for g, ps in groups.items()}
        focus = att_epoch(model, train, epoch, plan, opt)
        schedule.append(names.index(focus))
        frozen = [g for g, on in att_freeze_state(model, focus).trainable.items() if not on]
        violations += [(epoch, g) for g in frozen
                       if not all(np.array_equal(a, p.data) for a, p in zip(before[g], groups[g]))]
    ok = schedule == [0, 1, 2, 0, 1, 2] and not violations
    report(7, ok, f"ATT contract: schedule {schedule}, {len(violations)} frozen-group changes")
    assert ok


# -- 8. target tracking ------------------------------------------------------------------

def test_criterion_08_target_tracking(report):
    t0 = time.time()
    lines, ok = [], True
    for preset in ("H", "L"):
        ev = final_eval(0, preset)
        tgt = PRESETS[preset]
        tok = ev.weighted_token_frac(final_model(0, preset).layer_weights)
        good = abs(ev.block_frac - tgt.block_target_fraction) <= 0.05 and \
            abs(tok - tgt.token_target_fraction) <= 0.05
        ok &= good
        lines.append(f"{preset} blocks {ev.block_frac:.3f}/{tgt.block_target_fraction} "
                     f"tokens {tok:.3f}/{tgt.token_target_fraction} (unweighted {ev.token_frac:.3f})")
    elapsed = time.time() - t0
    ok &= elapsed <= 15 * 60
    report(8, ok, f"target tracking: {'; '.join(lines)}; {elapsed:.0f}s")
    assert ok


# -- 9. policy-quality ordering ------------------------------------------------------------

def policy_arms(seed: int) -> dict:
    _, val = data(seed)
    ref = evaluate(static_model(seed), val, mode="static").metrics
    tasks = toy_config(seed).tasks
    aware = final_eval(seed)
    # the agnostic policy is shifted onto the aware policy's FLOPS ratio (from below)
    model = final_model(seed, variant="task-agnostic")
    agnostic = match_flops_ratio(model, val, aware.ratio)
    model.policy.logit_offset = 0.0
    fractions = aware.matched_fractions()
    rng = RngState(seed).spawn("random-policy")
    plus = evaluate(final_model(seed), val, policy="random", rng=rng, fractions=fractions)
    rng = RngState(seed).spawn("random-policy")
    rand = evaluate(static_model(seed), val, policy="random", rng=rng, fractions=fractions)
    arms = {"task-aware": aware, "task-agnostic": agnostic, "random+": plus, "random": rand}
    return {k: (datasyn.delta_m(ev.metrics, ref, tasks), ev.ratio) for k, ev in arms.items()}


def test_criterion_09_policy_ordering(report):
    # a seed votes yes only if the whole chain holds; pairwise tallies are reported, not judged
    votes, lines = 0, []
    order = ["task-aware", "task-agnostic", "random+", "random"]
    pairs = [0] * (len(order) - 1)
    for seed in SEEDS:
        arms = policy_arms(seed)
        dm = [arms[k][0] for k in order]
        steps = [a >= b for a, b in zip(dm, dm[1:])]
        pairs = [p + s for p, s in zip(pairs, steps)]
        votes += all(steps)
        lines.append(f"seed {seed} " + " ".join(f"{k} {arms[k][0]:+.2f}%@{arms[k][1]:.3f}" for k in order)
                     + (" ok" if all(steps) else " x"))
    ok = votes >= 2
    tally = ", ".join(f"{a}>={b} {n}/3" for a, b, n in zip(order, order[1:], pairs))
    report(9, ok, f"policy ordering holds on {votes}/3 seeds (pairwise: {tally}): " + " | ".join(lines))
    assert ok


# -- 10. complexity adaptivity ----------------------------------------------------------

def test_criterion_10_complexity_adaptivity(report):
    wins, lines = 0, []
    for seed in SEEDS:
        _, val = data(seed)
        ev = final_eval(seed)
        simple = ev.flops[val.complexity == 1].mean()
        busy = ev.flops[val.complexity == 4].mean()
        wins += simple < busy
        lines.append(f"seed {seed} {simple / 1e6:.4f}M vs {busy / 1e6:.4f}M")
    ok = wins == 3
    report(10, ok, f"complexity adaptivity {wins}/3 seeds (complexity 1 vs 4 mean MACs): " + ", ".join(lines))
    assert ok


# -- 11. weighted-tokens ablation --------------------------------------------------------

def test_criterion_11_weighted_tokens(report):
    wins, lines = 0, []
    for seed in SEEDS:
        w = float(np.var(final_eval(seed).layer_token_frac))
        u = float(np.var(final_eval(seed, weighted=False).layer_token_frac))
        wins += w < u
        lines.append(f"seed {seed} {w:.5f} vs {u:.5f}")
    ok = wins >= 2
    report(11, ok, f"weighted-token variance lower on {wins}/3 seeds (weighted vs unweighted): " + ", ".join(lines))
    assert ok


# -- 12. determinism --------------------------------------------------------------------

def test_criterion_12_determinism(report, tmp_path):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--config", TINY, "--stage", "all", "--seed", "5", "--out", str(out),
                         "--no-plots"]) == 0
        outs.append(((out / "final.ckpt").read_bytes(), (out / "metrics_all.csv").read_bytes()))
    same_ckpt = outs[0][0] == outs[1][0]
    same_csv = outs[0][1] == outs[1][1]
    digest = checkpoint.digest(checkpoint.decode(outs[0][0]))[:12]
    ok = same_ckpt and same_csv
    report(12, ok, f"determinism: final.ckpt identical {same_ckpt} (sha256 {digest}), metrics CSV identical {same_csv}")
    assert ok



# -- ATT against sequential task training (operation example, not a numbered criterion) --

def _worst_task(model, seed):
    """Most negative sign-corrected relative change of any task against the static model."""
    _, val = data(seed)
    ref = evaluate(static_model(seed), val, mode="static").metrics
    got = evaluate(model, val).metrics
    tasks = cli.build_model(toy_config(seed)).tasks
    return min(datasyn.delta_m({t.name: got[t.name]}, {t.name: ref[t.name]}, [t]) for t in tasks)


def test_att_worst_task_not_below_sequential():
    seed = 0
    cfg = toy_config(seed)
    train, _ = data(seed)
    worst = {}
    for schedule in ("alternating", "sequential"):
        model = cli.build_model(cfg)
        model.load_state_dict(stage2_state(seed, "task-aware"))
        run_stage3(model, train, replace(cfg.plan, schedule=schedule, finetune_epochs=0))
        worst[schedule] = _worst_task(model, seed)
    print(f"worst-task change vs static: {worst}")
    assert worst["alternating"] >= worst["sequential"]
