"""``adamtl`` command line: train, eval, masks, flops, data.

Artifacts (all under ``--out``):

    train   s1.ckpt s2.ckpt att.ckpt final.ckpt, metrics_<stage>.csv,
            config.ini (resolved config, seed included), curves_<stage>.png
    eval    eval.csv, layer_tokens.png (adaptive modes)
    masks   block<k>_<task>.pgm, masks.csv, masks.png, image.ppm
    flops   flops_static.csv; with --checkpoint also flops_hist.csv,
            flops_complexity.csv, flops_hist.png, flops_complexity.png;
            with --random also flops_hist_random.csv
    data    PPM/PGM/CSV export with manifest.csv

eval.csv has the fixed columns ``mode,policy,task,metric,value``: one row per
task (metric named after the task's metric), then rows with task ``all`` for
delta_m, flops_ratio, mean_macs, block_fraction, token_fraction and
weighted_token_fraction.

The seed comes from ``--seed``, else ``$ADAMTL_SEED``, else ``[train] seed``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import checkpoint, config, datasyn, flopsacct, plotting
from .io import write_ppm
from .model import AdaMTL
from .numerics import RngState
from .policy import dump_masks
from .training import MetricsLog, evaluate, match_flops_ratio, read_metrics_log, run_stage1, run_stage2, run_stage3

log = logging.getLogger("adamtl")

STAGE_FILES = {"1": "s1.ckpt", "2": "s2.ckpt", "att": "att.ckpt", "3": "final.ckpt"}
EVAL_COLUMNS = ["mode", "policy", "task", "metric", "value"]
SEED_ENV = "ADAMTL_SEED"


class CliError(Exception):
    pass


# -- shared helpers ----------------------------------------------------------

def resolve_config(path: str | None, seed: int | None = None) -> config.RunConfig:
    if path and not os.path.exists(path):
        raise CliError(f"config not found: {path}")
    cfg = config.load(path) if path else config.parse("")
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise CliError(f"${SEED_ENV} is not an integer: {os.environ[SEED_ENV]!r}") from None
    return cfg.with_seed(seed) if seed is not None else cfg


def build_model(cfg: config.RunConfig) -> AdaMTL:
    return AdaMTL(cfg.encoder, cfg.tasks, cfg.policy, seed=cfg.plan.seed, fuse_channels=cfg.fuse_channels or None,
                  res_blocks=cfg.res_blocks)


def datasets(cfg: config.RunConfig) -> tuple:
    d, e, seed = cfg.data, cfg.encoder, cfg.plan.seed
    kw = dict(size=e.image_size, complexity_range=(d.complexity_min, d.complexity_max), clutter=d.clutter,
              patch_size=e.patch_size)
    return datasyn.generate(seed, d.train_size, **kw), datasyn.generate(seed + d.val_seed_offset, d.val_size, **kw)


def load_into(model: AdaMTL, path: str) -> None:
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    try:
        model.load_state_dict(checkpoint.load(path))
    except (KeyError, ValueError) as err:
        raise CliError(f"{path} does not fit this config: {err}") from None


def _split(cfg, name):
    train, val = datasets(cfg)
    return train if name == "train" else val


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    model = build_model(cfg)
    train, val = datasets(cfg)
    plan = cfg.plan
    stages = ["1", "2", "3"] if args.stage == "all" else [args.stage]
    first = stages[0]
    if first != "1":
        prereq = os.path.join(args.out, STAGE_FILES[str(int(first) - 1)])
        if not os.path.exists(prereq):
            raise CliError(f"stage {first} needs {prereq}; run stage {int(first) - 1} first")
        load_into(model, prereq)
    rows = MetricsLog(model.tasks)
    val_eval = val.subset(np.arange(min(plan.eval_size, len(val))))
    for stage in stages:
        log.info("stage %s (seed %d)", stage, plan.seed)
        if stage == "1":
            ck = run_stage1(model, train, plan, rows, val_eval)
        elif stage == "2":
            ck = run_stage2(model, train, plan, rows, val_eval)
        else:
            def save_att(c):
                checkpoint.save(os.path.join(args.out, STAGE_FILES["att"]), c.state)
            ck = run_stage3(model, train, plan, rows, val_eval, after_att=save_att)
        checkpoint.save(os.path.join(args.out, STAGE_FILES[stage]), ck.state)
    with open(os.path.join(args.out, "config.ini"), "w") as fh:
        fh.write(config.dump(cfg))
    metrics_path = os.path.join(args.out, f"metrics_{args.stage}.csv")
    rows.write(metrics_path)
    if rows.rows and not args.no_plots:
        plotting.training_curves(read_metrics_log(metrics_path), os.path.join(args.out, f"curves_{args.stage}.png"))
    written = [STAGE_FILES[s] for s in stages]
    if "3" in stages:
        written.insert(-1, STAGE_FILES["att"])
    print(f"wrote {', '.join(written)} and {os.path.basename(metrics_path)} to {args.out}")
    return 0


# -- eval --------------------------------------------------------------------

def _static_reference(cfg, checkpoint_path: str, static_checkpoint: str | None):
    """Explicit static checkpoint, else the s1.ckpt next to ``checkpoint_path``, else None."""
    path = static_checkpoint or os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), "s1.ckpt")
    if not os.path.exists(path):
        if static_checkpoint:
            raise CliError(f"static checkpoint not found: {static_checkpoint}")
        return None
    ref = build_model(cfg)
    load_into(ref, path)
    return ref


def run_eval(cfg, checkpoint_path: str, mode: str, policy: str | None, static_checkpoint: str | None = None,
             split: str = "val", match_ratio: float | None = None):
    """(rows for eval.csv, EvalResult, model). See the module docstring for the row layout.

    ``match_ratio`` shifts the learned policy's logits until its FLOPS ratio
    is at most that value; random arms then copy the shifted rates.
    """
    if policy in ("task-aware", "task-agnostic") and policy != cfg.policy.variant:
        raise CliError(f"--policy {policy} but the config's policy variant is {cfg.policy.variant}")
    data = _split(cfg, split)
    model = build_model(cfg)
    load_into(model, checkpoint_path)
    ref_model = _static_reference(cfg, checkpoint_path, static_checkpoint)
    rng = RngState(cfg.plan.seed).spawn("random-policy")

    def learned():
        return evaluate(model, data) if match_ratio is None else match_flops_ratio(model, data, match_ratio)

    if mode == "static":
        label = "static"
        ev = evaluate(model, data, mode="static")
    elif policy in ("random", "random-plus"):
        fractions = learned().matched_fractions()
        if policy == "random":
            if ref_model is None:
                raise CliError("--policy random needs the static model: pass --static-checkpoint or keep s1.ckpt "
                               "next to the checkpoint")
            target = ref_model
        else:
            target = model
        label = policy
        ev = evaluate(target, data, policy="random", rng=rng, fractions=fractions)
    else:
        label = cfg.policy.variant
        ev = learned()

    reference = evaluate(ref_model if ref_model is not None else model, data, mode="static").metrics
    rows = [[mode, label, t.name, t.metric, ev.metrics[t.name]] for t in cfg.tasks]
    summary = [("delta_m", datasyn.delta_m(ev.metrics, reference, cfg.tasks)),
               ("flops_ratio", ev.ratio),
               ("mean_macs", float(np.mean(ev.flops)) if ev.flops.size else 0.0),
               ("block_fraction", ev.block_frac),
               ("token_fraction", ev.token_frac),
               ("weighted_token_fraction", ev.weighted_token_frac(model.layer_weights))]
    rows += [[mode, label, "all", k, v] for k, v in summary]
    return rows, ev, model


def write_eval_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow(r[:4] + [repr(float(r[4]))])


def read_eval_csv(path: str) -> dict:
    """{(task, metric): value} from an eval.csv."""
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != EVAL_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        return {(r["task"], r["metric"]): float(r["value"]) for r in rd}


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    rows, ev, model = run_eval(cfg, args.checkpoint, args.mode, args.policy, args.static_checkpoint, args.split,
                               args.match_ratio)
    os.makedirs(args.out, exist_ok=True)
    write_eval_csv(rows, os.path.join(args.out, "eval.csv"))
    if args.mode == "adaptive" and not args.no_plots and ev.layer_token_frac.size:
        plotting.layer_tokens(ev.layer_token_frac, model.layer_weights, cfg.plan.targets.token_target_fraction,
                              os.path.join(args.out, "layer_tokens.png"))
    for r in rows:
        print(f"{r[2]:>8} {r[3]:<24} {r[4]:.6g}")
    return 0


# -- masks -------------------------------------------------------------------

def cmd_masks(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    data = _split(cfg, args.split)
    if not 0 <= args.image_index < len(data):
        raise CliError(f"--image-index {args.image_index} outside the {args.split} split (0..{len(data) - 1})")
    model = build_model(cfg)
    load_into(model, args.checkpoint)
    image = data.images[args.image_index]
    pred = model.predict(image)
    os.makedirs(args.out, exist_ok=True)
    rows = dump_masks(pred.decisions, model.block_grids, args.out)
    write_ppm(os.path.join(args.out, "image.ppm"), image)
    if not args.no_plots:
        plotting.mask_grid(image, pred.decisions, model.block_grids, os.path.join(args.out, "masks.png"))
    for k, name, b, frac in rows:
        print(f"block {k} {name:>8}: block {'on' if b else 'off'}, tokens {frac:.3f}")
    return 0


# -- flops -------------------------------------------------------------------

def cmd_flops(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    model = build_model(cfg)
    rep = flopsacct.static_flops(cfg.encoder, cfg.tasks, cfg.policy, model.fuse_channels, cfg.res_blocks)
    flopsacct.write_table(rep, os.path.join(args.out, "flops_static.csv"))
    for scope, name, s, _ in rep.rows:
        print(f"{scope:>6} {name:<12} {s:>12,d}")
    print(f"{'total':>6} {'all':<12} {rep.static_total:>12,d}")
    if not args.checkpoint:
        return 0
    load_into(model, args.checkpoint)
    data = _split(cfg, args.dataset)
    h, totals = flopsacct.flops_histogram(model, data, args.bins, os.path.join(args.out, "flops_hist.csv"))
    levels = sorted(set(int(c) for c in data.complexity))
    means = [float(totals[data.complexity == c].mean()) for c in levels]
    with open(os.path.join(args.out, "flops_complexity.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["complexity", "count", "mean_macs"])
        for c, m in zip(levels, means):
            w.writerow([c, int((data.complexity == c).sum()), repr(m)])
    extra = None
    if args.random:
        ev = evaluate(model, data)
        rng = RngState(cfg.plan.seed).spawn("random-policy")
        hr, _ = flopsacct.flops_histogram(model, data, args.bins, os.path.join(args.out, "flops_hist_random.csv"),
                                          policy="random", rng=rng, fractions=ev.matched_fractions())
        extra = ("random", hr)
        print(f"random mean {hr.mean:,.1f}")
    if not args.no_plots:
        plotting.flops_histogram(h, os.path.join(args.out, "flops_hist.png"), extra=extra)
        plotting.complexity_bars(levels, means, os.path.join(args.out, "flops_complexity.png"))
    print(f"mean {h.mean:,.1f} over {h.n} examples (ratio {h.mean / rep.static_total:.4f})")
    for c, m in zip(levels, means):
        print(f"complexity {c}: {m:,.1f}")
    return 0


# -- data --------------------------------------------------------------------

def cmd_data(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    manifest = datasyn.export(_split(cfg, args.split), args.out)
    print(f"wrote {manifest}")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adamtl", description="Adaptive multi-task transformer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="INI run configuration (defaults when omitted)")
        sp.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config's seed")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    t = sub.add_parser("train", help="run training stages")
    common(t, "runs")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics, delta-m and FLOPS ratio of a checkpoint")
    common(e, "eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=["static", "adaptive"], default="adaptive")
    e.add_argument("--policy", choices=["task-aware", "task-agnostic", "random", "random-plus"])
    e.add_argument("--static-checkpoint", help="static model for the random arm and delta-m (default: sibling s1.ckpt)")
    e.add_argument("--split", choices=["train", "val"], default="val")
    e.add_argument("--match-ratio", type=float,
                   help="shift the learned policy until its FLOPS ratio is at most this value")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("masks", help="dump one image's block and token masks")
    common(m, "masks")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--image-index", type=int, default=0)
    m.add_argument("--split", choices=["train", "val"], default="val")
    m.set_defaults(func=cmd_masks)

    f = sub.add_parser("flops", help="static FLOPS table and dynamic histogram")
    common(f, "flops")
    f.add_argument("--checkpoint")
    f.add_argument("--dataset", choices=["train", "val"], default="val")
    f.add_argument("--bins", type=int, default=10)
    f.add_argument("--random", action="store_true", help="also histogram random masks at matched activation rates")
    f.set_defaults(func=cmd_flops)

    d = sub.add_parser("data", help="export the synthetic dataset")
    common(d, "data")
    d.add_argument("--split", choices=["train", "val"], default="val")
    d.set_defaults(func=cmd_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, config.ConfigError) as err:
        print(f"adamtl {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
