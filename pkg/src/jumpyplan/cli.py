"""Command-line entry point: ``jumpyplan <command> [flags]``.

Outputs go under ``--out`` (default from the config)::

    dataset.jmpd  dataset.json           gen-data
    model_k10/    train_k10.csv          train --k 10
    eval_summary.csv  eval_records.jsonl eval
    sweep_jumpy.csv / sweep_k1.csv       sweep
    viz/*.svg                            viz
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import dataset, env, files, harness, nn, skill, viz
from .config import ConfigError, RunConfig
from .harness import Models

log = logging.getLogger("jumpyplan")

GRAD_CHECK_THRESHOLD = 1e-5
TRAIN_LOG_COLUMNS = ("step", "kl", "action_term", "state_term", "total")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out is not None:
        top["out"] = args.out
    if args.threads is not None:
        top["threads"] = args.threads
    ev = {}
    if getattr(args, "seeds", None) is not None:
        ev["seeds"] = args.seeds
    if getattr(args, "tasks", None):
        ev["tasks"] = _csv_list(args.tasks)
    if getattr(args, "variants", None):
        ev["variants"] = _csv_list(args.variants)
    pl = {"threads": top.get("threads", cfg.threads)}
    if getattr(args, "horizon", None) is not None:
        pl["horizon"] = args.horizon
    if getattr(args, "hold", None) is not None:
        pl["hold_steps"] = args.hold
    try:
        cfg = dataclasses.replace(cfg, **top)
        return dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, **ev),
                                   planner=dataclasses.replace(cfg.planner, **pl))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _out_dir(cfg: RunConfig) -> Path:
    """The output directory; its parent must already exist."""
    out = Path(cfg.out)
    if not out.parent.is_dir():
        raise CommandError(f"parent of output directory {out} does not exist")
    out.mkdir(exist_ok=True)
    return out


def _load_model(path: Path, what: str) -> skill.SkillModel:
    if not (path / "manifest.json").exists():
        raise harness.ConfigurationError(f"{what}: no checkpoint at {path}")
    return skill.SkillModel.load(path)


def _models_for(variants, cfg: RunConfig, args) -> Models:
    out = Path(cfg.out)
    need_jumpy = any(v in ("random_hl", "zeroshot_plan_jumpy", "plan_finetune") for v in variants)
    need_k1 = "zeroshot_plan_k1" in variants
    jumpy_path = Path(args.jumpy) if getattr(args, "jumpy", None) else out / f"model_k{cfg.model.K}"
    k1_path = Path(args.k1) if getattr(args, "k1", None) else out / f"model_k{cfg.model_k1.K}"
    models = Models()
    if need_jumpy:
        models.jumpy = _load_model(jumpy_path, "variants " + ", ".join(
            v for v in variants if v in ("random_hl", "zeroshot_plan_jumpy", "plan_finetune")))
    if need_k1:
        models.k1 = _load_model(k1_path, "variant zeroshot_plan_k1")
    return models


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    path = out / "dataset.jmpd"
    ds = dataset.generate_dataset(cfg.data.episodes, cfg.seed, cfg.data.noise)
    digest = dataset.write_dataset(ds, path)
    meta = {"path": path.name, "master_seed": cfg.seed, "episodes": ds.episode_count, "T": ds.T,
            "transitions": ds.transition_count, "noise": cfg.data.noise, "content_hash": digest}
    files.atomic_write_text(out / "dataset.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path} ({ds.episode_count} episodes, sha256 {digest})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    K = args.k if args.k is not None else cfg.model.K
    path = Path(args.dataset) if args.dataset else out / "dataset.jmpd"
    if not path.exists():
        raise CommandError(f"dataset {path} not found; run gen-data first")
    head = dataset.read_header(path)
    if head["state_dim"] != env.STATE_DIM or head["action_dim"] != env.ACTION_DIM:
        raise CommandError(f"{path}: header dims {head['state_dim']}/{head['action_dim']} do not match "
                           f"the environment ({env.STATE_DIM}/{env.ACTION_DIM})")
    if head["T"] < K:
        raise CommandError(f"{path}: episodes of {head['T']} steps are shorter than K={K}")
    ds = dataset.read_dataset(path)
    train_part, _ = ds.split(cfg.data.holdout_fraction)
    scfg = cfg.skill_config(K)
    model, tlog = skill.train(train_part, scfg, cfg.seed)
    ckpt = out / f"model_k{K}"
    digest = model.save(ckpt)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAIN_LOG_COLUMNS)
    for row in tlog.rows:
        w.writerow([row["step"]] + [repr(row[c]) for c in TRAIN_LOG_COLUMNS[1:]])
    files.atomic_write_text(out / f"train_k{K}.csv", buf.getvalue())
    print(f"wrote {ckpt} (sha256 {digest}); {len(tlog.rows)} log rows")
    return 0


def _cells(cfg: RunConfig):
    for task in cfg.eval.tasks:
        for variant in cfg.eval.variants:
            if variant == "base_policy_reference" and task not in env.IN_DISTRIBUTION_TASKS:
                continue
            yield task, variant


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    models = _models_for(cfg.eval.variants, cfg, args)
    ft = harness.FinetuneSettings(cfg.eval.finetune_every, cfg.eval.finetune_steps)
    summaries, records, failures = [], [], 0
    for task, variant in _cells(cfg):
        pc = cfg.planner_k1() if variant == "zeroshot_plan_k1" else cfg.planner
        try:
            summary, recs = harness.evaluate(variant, task, models, pc, cfg.eval.seeds, cfg.seed,
                                             cfg.eval.episode_steps, ft, keep_path=True)
        except (ArithmeticError, ValueError) as e:
            failures += 1
            log.error("%s / %s failed: %s", task, variant, e)
            continue
        summaries.append(summary)
        records.extend(recs)
    harness.write_summaries(summaries, out / "eval_summary.csv")
    harness.write_records(records, out / "eval_records.jsonl")
    print(f"wrote {len(summaries)} summary rows to {out / 'eval_summary.csv'}")
    return 1 if failures else 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    mode = args.mode
    variant = "zeroshot_plan_jumpy" if mode == "jumpy" else "zeroshot_plan_k1"
    models = _models_for((variant,), cfg, args)
    rows = []
    for task in cfg.eval.tasks:
        if mode == "jumpy":
            horizons = (args.horizon,) if args.horizon else cfg.sweep.horizons
            holds = (args.hold,) if args.hold else cfg.sweep.holds
            rows += harness.sweep_jumpy(task, models, cfg.planner, horizons, holds, cfg.eval.seeds,
                                        cfg.seed, cfg.eval.episode_steps)
        else:
            horizons = (args.horizon,) if args.horizon else cfg.sweep.k1_horizons
            rows += harness.sweep_k1(task, models, cfg.planner, horizons, cfg.eval.seeds, cfg.seed,
                                     cfg.eval.episode_steps)
    path = out / f"sweep_{mode}.csv"
    harness.write_summaries(rows, path, grid=True)
    print(f"wrote {len(rows)} cells to {path}")
    return 0


def cmd_viz(cfg: RunConfig, args) -> int:
    src = Path(args.records) if args.records else Path(cfg.out) / "eval_records.jsonl"
    dest = Path(args.viz_out) if args.viz_out else Path(cfg.out) / "viz"
    dest.mkdir(parents=True, exist_ok=True)
    written, warnings = render_records(harness.read_records(src), dest)
    print(f"wrote {written} SVG files to {dest}; {warnings} warnings")
    return 0


def render_records(records, dest: Path) -> tuple[int, int]:
    """Score-trace and top-down SVGs per planning record; returns (files written, warnings)."""
    written = warnings = 0
    if not records:
        log.warning("no records to plot")
        return 0, 1
    for rec in records:
        stem = f"{rec.task}_{rec.variant}_{rec.seed}"
        if not rec.trace:
            log.warning("record %s has no plan trace; skipped", stem)
            warnings += 1
            continue
        title = f"{rec.task} / {rec.variant} / seed {rec.seed}"
        files.atomic_write_text(dest / f"trace_{stem}.svg",
                                viz.score_trace_svg(harness.record_plan_trace(rec), title))
        written += 1
        if rec.path:
            files.atomic_write_text(dest / f"path_{stem}.svg", viz.topdown_svg(rec.path, title))
            written += 1
    return written, warnings


def miniature_model(seed: int = 0) -> tuple[skill.SkillModel, np.ndarray, np.ndarray, np.ndarray]:
    """A small randomly initialised model and one batch for gradient checking.

    Weights are redrawn at unit fan-in scale so that gradients are large enough
    for central differences to resolve them.
    """
    rng = np.random.default_rng(seed)
    ds = dataset.generate_dataset(4, seed, T=40)
    cfg = skill.SkillModelConfig(K=3, feature_dim=6, latent_dim=3, hidden=8)
    model = skill.SkillModel.init(cfg, dataset.compute_delta_stats(ds, 3, rng, samples=500), rng)
    for v in model.params.values():
        if v.ndim == 2:
            v[...] = rng.standard_normal(v.shape) / np.sqrt(v.shape[0])
        else:
            v[...] += 0.3 * rng.standard_normal(v.shape)
    states, actions = dataset.sample_batch(ds, rng, 3, 3)
    eps = rng.standard_normal((3, cfg.latent_dim))
    return model, states, actions, eps


def grad_check_report(probes: int = 200, fd_step: float = 1e-6, seed: int = 0,
                      corrupt: bool = False) -> dict[str, float]:
    """Max relative error of the full objective and of each of its three terms."""
    model, states, actions, eps = miniature_model(seed)
    terms = {"total": (1.0, 1.0, 1.0), "kl": (1.0, 0.0, 0.0), "action": (0.0, 1.0, 0.0),
             "state": (0.0, 0.0, 1.0)}
    report = {}
    for name, (bkl, ba, bs) in terms.items():
        cfg = dataclasses.replace(model.config, beta_kl=bkl, beta_a=ba, beta_s=bs)
        m = skill.SkillModel(cfg, model.nets, model.delta_scale)

        def loss_fn(params, m=m):
            bd, grads = skill.loss_and_grads(m, states, actions, eps)
            if corrupt:
                grads = {k: g * 1.01 for k, g in grads.items()}
            return bd.total, grads

        report[name] = nn.grad_check(m.params, loss_fn, probes, fd_step, np.random.default_rng([seed, 1]))
    return report


def cmd_grad_check(cfg: RunConfig, args) -> int:
    report = grad_check_report(args.probes, args.fd_step, cfg.seed, corrupt=args.corrupt)
    for name, err in report.items():
        print(f"{name:>7}: max relative error {err:.3e}")
    ok = report["total"] <= GRAD_CHECK_THRESHOLD
    print(f"grad-check {'PASS' if ok else 'FAIL'} (threshold {GRAD_CHECK_THRESHOLD:g}, {args.probes} probes)")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for planner rollouts")

    evalish = argparse.ArgumentParser(add_help=False)
    evalish.add_argument("--seeds", type=int, help="evaluation seeds per cell")
    evalish.add_argument("--tasks", help="comma-separated task names")
    evalish.add_argument("--jumpy", help="jumpy model checkpoint (default OUT/model_k10)")
    evalish.add_argument("--k1", help="one-step model checkpoint (default OUT/model_k1)")
    evalish.add_argument("--horizon", type=int, help="planning horizon")
    evalish.add_argument("--hold", type=int, help="actions executed per planned latent")

    p = argparse.ArgumentParser(prog="jumpyplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the offline dataset")
    t = sub.add_parser("train", parents=[common], help="train a skill model")
    t.add_argument("--k", type=int, choices=(1, 10), help="context length (default from config)")
    t.add_argument("--dataset", help="dataset file (default OUT/dataset.jmpd)")
    e = sub.add_parser("eval", parents=[common, evalish], help="evaluate variants over tasks")
    e.add_argument("--variants", help="comma-separated variant names")
    s = sub.add_parser("sweep", parents=[common, evalish], help="planner setting sweeps")
    s.add_argument("--mode", choices=("jumpy", "k1"), default="jumpy")
    v = sub.add_parser("viz", parents=[common], help="SVG plots of recorded episodes")
    v.add_argument("--records", help="records JSONL (default OUT/eval_records.jsonl)")
    v.add_argument("--viz-out", help="directory for SVG files (default OUT/viz)")
    g = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the objective")
    g.add_argument("--probes", type=int, default=200)
    g.add_argument("--fd-step", type=float, default=1e-6)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "viz": cmd_viz, "grad-check": cmd_grad_check}


def _setup_logging():
    level = os.environ.get("JMP_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"JMP_LOG must be one of {', '.join(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CommandError, harness.ConfigurationError, dataset.DatasetError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
