import numpy as np
import pytest

from adamtl import checkpoint, datasyn
from adamtl import numerics as nx
from adamtl.encoder import EncoderConfig
from adamtl.heads import default_tasks
from adamtl.losses import EfficiencyTargets
from adamtl.model import AdaMTL
from adamtl.policy import PolicyConfig
from adamtl.training import (CoTrainOptimizer, FreezeState, MetricsLog, TrainPlan, att_epoch, att_freeze_state,
                             att_task_index, evaluate, match_flops_ratio, read_metrics_log, run_all, run_stage1,
                             run_stage2, run_stage3)

CFG = EncoderConfig(image_size=16, patch_size=4, blocks_per_stage=(1, 1), embed_dims=(8, 16), heads_per_stage=(1, 2))
TASKS = default_tasks(4)


def tiny_model(variant="task-aware", seed=0):
    return AdaMTL(CFG, TASKS, PolicyConfig(variant=variant, hidden_dim=4), seed=seed, res_blocks=1)


def tiny_data(n=16, seed=0):
    return datasyn.generate(seed, n, size=16)


def plan(**kw):
    base = dict(stage1_epochs=2, stage2_epochs=2, att_epochs=3, finetune_epochs=1, batch_size=8, eval_size=4)
    base.update(kw)
    return TrainPlan(**base)


def snapshot(params):
    return [p.data.copy() for p in params]


def test_plan_validation():
    for bad in ({"stage1_epochs": -1}, {"optimizer": "rmsprop"}, {"schedule": "random"}, {"batch_size": 0},
                {"train_gate": "sometimes"}, {"noise_scale": -0.1}):
        with pytest.raises(ValueError):
            TrainPlan(**bad)


def test_noise_and_lr_schedules():
    p = TrainPlan(noise_scale=1.0, final_noise_scale=0.0, quiet_epochs=0)
    assert [p.noise_at(e, 5) for e in range(5)] == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert p.noise_at(0, 1) == 0.0
    q = TrainPlan(noise_scale=1.0, final_noise_scale=0.4, quiet_epochs=2)
    assert [q.noise_at(e, 6) for e in range(6)] == pytest.approx([1.0, 0.8, 0.6, 0.4, 0.0, 0.0])
    assert [p.lr_scale(e, 4) for e in range(4)] == [1.0, 0.75, 0.5, 0.25]
    assert TrainPlan(lr_decay=False).lr_scale(3, 4) == 1.0


def test_cotrain_optimizer_splits_learning_rates():
    model = tiny_model()
    opt = CoTrainOptimizer(model, plan(lr_stage3=1e-3, lr_policy=1e-2))
    opt.set_epoch(1, 4)
    assert opt.main.lr == pytest.approx(0.75e-3) and opt.policy.lr == pytest.approx(0.75e-2)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    before = snapshot(model.policy_parameters())
    enc_before = snapshot(model.encoder.parameters())
    opt.step(model.parameters())
    # first Adam step moves every weight by exactly its learning rate
    for b, p in zip(before, model.policy_parameters()):
        np.testing.assert_allclose(b - p.data, 0.75e-2, rtol=1e-3)
    for b, p in zip(enc_before, model.encoder.parameters()):
        np.testing.assert_allclose(b - p.data, 0.75e-3, rtol=1e-3)


def test_zero_epochs_is_identity():
    model = tiny_model()
    before = model.state_dict()
    p = plan(stage1_epochs=0, stage2_epochs=0, att_epochs=0, finetune_epochs=0)
    data = tiny_data(4)
    run_stage1(model, data, p)
    run_stage2(model, data, p)
    run_stage3(model, data, p)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_stage1_loss_decreases():
    model = tiny_model()
    ck = run_stage1(model, tiny_data(32), plan(stage1_epochs=5))
    assert ck.info["loss"][-1] < ck.info["loss"][0]


def test_stage1_leaves_policy_untouched_and_stage2_leaves_mtl_untouched():
    model = tiny_model()
    data = tiny_data(8)
    pol = checkpoint.digest({k: v for k, v in model.state_dict().items() if k.startswith("policy")})
    run_stage1(model, data, plan())
    assert checkpoint.digest({k: v for k, v in model.state_dict().items() if k.startswith("policy")}) == pol
    mtl = {k: v for k, v in model.state_dict().items() if not k.startswith("policy")}
    run_stage2(model, data, plan())
    after = {k: v for k, v in model.state_dict().items() if not k.startswith("policy")}
    assert checkpoint.digest(after) == checkpoint.digest(mtl)


def test_stage2_switches_everything_on():
    model = tiny_model()
    data = tiny_data(16)
    ck = run_stage2(model, data, plan(stage2_epochs=25, batch_size=2))
    # soft Gumbel samples keep a small floor; the hard decisions are what matter
    assert ck.info["loss"][-1] < 1e-2
    assert ck.info["all_on_fraction"] == 1.0
    for i in range(4):
        a = model.predict(data.images[i])
        s = model.predict(data.images[i], mode="static")
        for t in TASKS:
            np.testing.assert_array_equal(a.outputs[t.name].data, s.outputs[t.name].data)


def test_checkpoint_bytes_roundtrip(tmp_path):
    model = tiny_model()
    path = str(tmp_path / "m.ckpt")
    checkpoint.save(path, model.state_dict())
    other = tiny_model(seed=1)
    other.load_state_dict(checkpoint.load(path))
    assert checkpoint.encode(other.state_dict()) == checkpoint.encode(model.state_dict())
    with open(path, "rb") as fh:
        assert fh.read(7) == b"ADAMTL1"


def test_att_schedule_round_robin_and_sequential():
    assert [att_task_index(e, 3) for e in range(7)] == [0, 1, 2, 0, 1, 2, 0]
    seq = plan(att_epochs=6, schedule="sequential")
    assert [att_task_index(e, 3, seq) for e in range(6)] == [0, 0, 1, 1, 2, 2]
    with pytest.raises(ValueError):
        att_task_index(0, 0)


def test_att_freeze_state_groups():
    model = tiny_model()
    flags = att_freeze_state(model, "sal").trainable
    assert flags["encoder"] and flags["head.sal"] and flags["policy.sal"]
    assert not flags["head.seg"] and not flags["policy.normals"]
    with pytest.raises(KeyError):
        FreezeState({"nope": True}).apply(model)


def test_att_epochs_keep_frozen_groups_bit_unchanged():
    model = tiny_model()
    data = tiny_data(8)
    p = plan(att_epochs=6)
    opt = CoTrainOptimizer(model, p)
    groups = model.param_groups()
    seen = []
    for epoch in range(6):
        before = {g: snapshot(ps) for g, ps in groups.items()}
        focus = att_epoch(model, data, epoch, p, opt)
        seen.append(focus)
        trainable = att_freeze_state(model, focus).trainable
        for g, ps in groups.items():
            unchanged = all(np.array_equal(a, q.data) for a, q in zip(before[g], ps))
            if not trainable[g]:
                assert unchanged, (epoch, g)
        assert not all(np.array_equal(a, q.data) for a, q in zip(before["encoder"], groups["encoder"]))
    assert seen == ["seg", "sal", "normals"] * 2


def test_disabled_subnetworks_receive_no_gradient():
    model = tiny_model()
    data = tiny_data(2)
    pred = model.forward(data.images, "soft", rng=nx.RngState(0), enabled=["sal"], gate="hard")
    nx.backward(nx.sum_(pred.outputs["sal"]))
    groups = model.param_groups()
    assert any(np.abs(p.grad).sum() > 0 for p in groups["policy.sal"])
    for g in ("policy.seg", "policy.normals"):
        assert all(not p.grad.any() for p in groups[g])


def test_task_agnostic_stage3_runs_without_att():
    model = tiny_model("task-agnostic")
    ck = run_stage3(model, tiny_data(8), plan(att_epochs=2, finetune_epochs=1))
    assert ck.info["schedule"] == []


def test_run_all_deterministic_and_logged(tmp_path):
    outs = []
    for _ in range(2):
        model = tiny_model()
        rows = MetricsLog(TASKS)
        cks = run_all(model, tiny_data(8), plan(), rows, tiny_data(4, seed=9))
        assert list(cks) == ["s1", "s2", "att", "final"]
        path = str(tmp_path / f"m{len(outs)}.csv")
        rows.write(path)
        with open(path) as fh:
            outs.append((checkpoint.encode(cks["final"].state), fh.read()))
    assert outs[0] == outs[1]
    logged = read_metrics_log(str(tmp_path / "m0.csv"))
    assert [r["stage"] for r in logged] == ["1"] * 2 + ["2"] * 2 + ["att"] * 3 + ["3"]
    assert [r["task_focus"] for r in logged if r["stage"] == "att"] == ["seg", "sal", "normals"]


def test_zero_alpha_keeps_policy_near_all_on():
    model = tiny_model()
    data = tiny_data(16)
    p = plan(stage2_epochs=8, batch_size=2, att_epochs=0, finetune_epochs=2, targets=EfficiencyTargets(0.5, 0.5, alpha=0.0))
    run_stage2(model, data, p)
    run_stage3(model, data, p)
    ev = evaluate(model, data)
    assert ev.block_frac > 0.9 and ev.token_frac > 0.9


def test_evaluate_static_ratio_one():
    model = tiny_model()
    ev = evaluate(model, tiny_data(4), mode="static")
    assert ev.ratio == 1.0 and ev.block_frac == 1.0
    assert set(ev.metrics) == {"seg", "sal", "normals"}


def test_match_flops_ratio_meets_target_from_below():
    model, data = tiny_model(), tiny_data(8)
    free = evaluate(model, data).ratio
    ev = match_flops_ratio(model, data, 0.8, iters=10)
    assert ev.ratio <= 0.8
    assert model.policy.logit_offset < 0 or free <= 0.8
    assert evaluate(model, data).ratio == ev.ratio
    model.policy.logit_offset = 0.0
    assert evaluate(model, data).ratio == free
    assert match_flops_ratio(model, data, 1.0, iters=4).ratio <= 1.0
