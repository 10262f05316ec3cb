import csv
import os
import shutil

import numpy as np
import pytest

from adamtl import checkpoint, cli, config, flopsacct
from adamtl.io import read_pgm
from adamtl.policy import read_mask_csv

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TINY = os.path.join(ROOT, "configs", "tiny.ini")
TOY = os.path.join(ROOT, "configs", "toy.ini")


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--config", TINY, "--stage", "all", "--out", out, "--no-plots") == 0
    return out


def test_shipped_configs_parse():
    assert config.parse("") == config.RunConfig() == config.parse(config.dump(config.RunConfig()))
    for path in (TINY, TOY):
        cfg = config.load(path)
        assert config.parse(config.dump(cfg)) == cfg
    toy = config.load(TOY)
    assert toy.plan.targets.block_target_fraction == 0.9 and [t.name for t in toy.tasks] == ["seg", "sal", "normals"]


def test_unknown_key_or_section_is_an_error(tmp_path):
    for text in ("[train]\nlr_stage9 = 1\n", "[trian]\nseed = 1\n", "[policy]\nvariant = maybe\n",
                 "[tasks]\nnames = seg, depth\n", "[encoder]\nstages = two\n", "no header\n"):
        path = tmp_path / "bad.ini"
        path.write_text(text)
        assert run("flops", "--config", path, "--out", tmp_path / "f") != 0


def test_train_all_writes_four_checkpoints(trained):
    for name in ("s1.ckpt", "s2.ckpt", "att.ckpt", "final.ckpt", "metrics_all.csv", "config.ini"):
        assert (trained / name).exists(), name
    assert config.load(str(trained / "config.ini")) == config.load(TINY)


def test_stage3_without_s2_fails(tmp_path, capsys):
    assert run("train", "--config", TINY, "--stage", "3", "--out", tmp_path, "--no-plots") != 0
    assert "s2.ckpt" in capsys.readouterr().err
    assert not (tmp_path / "final.ckpt").exists()


def test_stagewise_matches_all(trained, tmp_path):
    for stage in ("1", "2", "3"):
        assert run("train", "--config", TINY, "--stage", stage, "--out", tmp_path, "--no-plots") == 0
    for name in ("s1.ckpt", "s2.ckpt", "att.ckpt", "final.ckpt"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    assert cli.resolve_config(TINY).plan.seed == 7
    assert cli.resolve_config(TINY, 3).plan.seed == 3
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.resolve_config(TINY).plan.seed == 0
    monkeypatch.setenv(cli.SEED_ENV, "x")
    with pytest.raises(cli.CliError):
        cli.resolve_config(TINY)


def test_eval_stage2_matches_static(trained, tmp_path):
    assert run("eval", "--config", TINY, "--checkpoint", trained / "s2.ckpt", "--mode", "adaptive",
               "--out", tmp_path / "a", "--no-plots") == 0
    assert run("eval", "--config", TINY, "--checkpoint", trained / "s2.ckpt", "--mode", "static",
               "--out", tmp_path / "s", "--no-plots") == 0
    a = cli.read_eval_csv(str(tmp_path / "a" / "eval.csv"))
    s = cli.read_eval_csv(str(tmp_path / "s" / "eval.csv"))
    assert a[("all", "flops_ratio")] == 1.0
    for task in ("seg", "sal", "normals"):
        key = next(k for k in a if k[0] == task)
        assert a[key] == s[key]
    assert a[("all", "delta_m")] == 0.0


def test_eval_csv_columns_fixed(trained, tmp_path):
    assert run("eval", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--out", tmp_path,
               "--no-plots") == 0
    with open(tmp_path / "eval.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == cli.EVAL_COLUMNS
    assert [(r[2], r[3]) for r in rows[1:]] == [
        ("seg", "mIoU"), ("sal", "F1"), ("normals", "mean-angular-error"), ("all", "delta_m"),
        ("all", "flops_ratio"), ("all", "mean_macs"), ("all", "block_fraction"), ("all", "token_fraction"),
        ("all", "weighted_token_fraction")]


def test_static_eval_ignores_policy(trained, tmp_path):
    state = checkpoint.load(str(trained / "final.ckpt"))
    scrambled = {k: (v * 0 - 5 if k.startswith("policy") else v) for k, v in state.items()}
    checkpoint.save(str(tmp_path / "scrambled.ckpt"), scrambled)
    outs = []
    for name in ("final.ckpt", "scrambled.ckpt"):
        src = trained / name if name == "final.ckpt" else tmp_path / name
        run("eval", "--config", TINY, "--checkpoint", src, "--mode", "static", "--out", tmp_path / f"out_{name}",
            "--static-checkpoint", trained / "s1.ckpt", "--no-plots")
        outs.append((tmp_path / f"out_{name}" / "eval.csv").read_text())
    assert outs[0] == outs[1]


def test_policy_arms(trained, tmp_path):
    values = {}
    for arm in ("task-aware", "random", "random-plus"):
        assert run("eval", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--policy", arm,
                   "--out", tmp_path / arm, "--no-plots") == 0
        values[arm] = cli.read_eval_csv(str(tmp_path / arm / "eval.csv"))
    assert all(np.isfinite(v[("all", "delta_m")]) for v in values.values())
    assert values["random-plus"][("all", "flops_ratio")] <= 1.0
    assert run("eval", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--policy", "task-agnostic",
               "--out", tmp_path / "x") != 0
    lonely = tmp_path / "lonely"
    lonely.mkdir()
    shutil.copy(trained / "final.ckpt", lonely / "final.ckpt")
    assert run("eval", "--config", TINY, "--checkpoint", lonely / "final.ckpt", "--policy", "random",
               "--out", tmp_path / "y") != 0


def test_eval_match_ratio(trained, tmp_path):
    # random masks only copy the matched rates, so their ratio gets some slack
    for arm, slack in (("task-aware", 0.0), ("random-plus", 0.05)):
        assert run("eval", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--policy", arm,
                   "--match-ratio", 0.9, "--out", tmp_path / arm, "--no-plots") == 0
        assert cli.read_eval_csv(str(tmp_path / arm / "eval.csv"))[("all", "flops_ratio")] <= 0.9 + slack


def test_masks_outputs(trained, tmp_path):
    assert run("masks", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--image-index", 1,
               "--out", tmp_path) == 0
    rows = read_mask_csv(str(tmp_path / "masks.csv"))
    cfg = config.load(TINY).encoder
    grids = [cfg.grid(s) for s in cfg.block_stages]
    for k, task, b, frac in rows:
        img = read_pgm(str(tmp_path / f"block{k:02d}_{task}.pgm"))
        assert img.shape == (grids[k], grids[k])
        assert frac == float((img == 255).mean())
    assert (tmp_path / "masks.png").exists()
    assert run("masks", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--image-index", 99,
               "--out", tmp_path) != 0


def test_masks_all_on_checkpoint_is_white(trained, tmp_path):
    run("masks", "--config", TINY, "--checkpoint", trained / "s2.ckpt", "--out", tmp_path, "--no-plots")
    for name in os.listdir(tmp_path):
        if name.endswith("_fused.pgm"):
            assert (read_pgm(str(tmp_path / name)) == 255).all()


def test_flops_without_checkpoint_static_only(tmp_path, capsys):
    assert run("flops", "--config", TINY, "--out", tmp_path) == 0
    assert sorted(os.listdir(tmp_path)) == ["flops_static.csv"]
    rows = flopsacct.read_table(str(tmp_path / "flops_static.csv"))
    assert rows[-1][0] == "total" and rows[-1][4] == 1.0
    assert "total" in capsys.readouterr().out


def test_flops_histogram_roundtrip(trained, tmp_path):
    assert run("flops", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--random", "--out", tmp_path) == 0
    h = flopsacct.read_histogram(str(tmp_path / "flops_hist.csv"))
    assert h.n == config.load(TINY).data.val_size
    flopsacct.write_histogram(h, str(tmp_path / "again.csv"))
    assert (tmp_path / "again.csv").read_text() == (tmp_path / "flops_hist.csv").read_text()
    for name in ("flops_hist_random.csv", "flops_complexity.csv", "flops_hist.png", "flops_complexity.png"):
        assert (tmp_path / name).exists()


def test_data_export(tmp_path):
    assert run("data", "--config", TINY, "--out", tmp_path) == 0
    with open(tmp_path / "manifest.csv") as fh:
        assert len(list(csv.DictReader(fh))) == config.load(TINY).data.val_size


def test_commands_deterministic(trained, tmp_path):
    for d in ("a", "b"):
        run("eval", "--config", TINY, "--checkpoint", trained / "final.ckpt", "--policy", "random",
            "--out", tmp_path / d, "--no-plots")
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()


def test_matched_fractions_reproduce_activation():
    from adamtl.training import EvalResult
    ev = EvalResult({}, 0.5, 0.3, np.array([0.4, 0.2]), np.zeros(0), 1.0, np.array([0.8, 0.0]))
    b, t = ev.matched_fractions()
    np.testing.assert_allclose(b * t, [0.4, 0.0])
    assert ev.weighted_token_frac([1, 3]) == pytest.approx(0.25)
