"""Command-line entry points: generate, train, evaluate, rollout, subgoals,
ablate, ensemble."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig, load_config
from .metrics import compute_metrics
from .tasks import load_dataset, make_dataset, save_dataset

LOG_VERSION = 1


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def _config(args):
    return load_config(args.config, args.set)


def _dataset(args, cfg):
    if args.data and os.path.isdir(args.data):
        return load_dataset(args.data)
    splits = make_dataset(cfg.n_train, cfg.n_valid_seen, cfg.n_valid_unseen,
                          misleading=cfg.misleading)
    if args.data:
        save_dataset(splits, args.data)
    return splits


def cmd_generate(args):
    cfg = _config(args)
    splits = make_dataset(cfg.n_train, cfg.n_valid_seen, cfg.n_valid_unseen,
                          misleading=cfg.misleading)
    save_dataset(splits, args.out)
    counts = {k: len(v) for k, v in splits.items()}
    print(json.dumps(counts))


def cmd_train(args):
    from .train import train
    cfg = _config(args)
    splits = _dataset(args, cfg)
    train(cfg, splits, out_dir=args.out, log=print,
          resume_from=args.resume)


def cmd_evaluate(args):
    from .rollout import evaluate
    from .train import load_agent
    store, cfg, vocab, _ = load_agent(args.ckpt)
    splits = _dataset(args, cfg)
    report, _ = evaluate(store, cfg, vocab, splits[args.split])
    if args.json:
        print(report.to_json())
    else:
        print(report.table())


def _log_record(rec, verbose):
    entries = []
    for ts in rec.timesteps:
        e = {"m": ts["m"], "action": ts["action"],
             "success": ts["success"], "mask_slot": ts["mask_slot"]}
        if verbose:
            for k in ("alpha_g", "mask_hex"):
                if k in ts:
                    e[k] = ts[k]
        entries.append(e)
    return {"version": LOG_VERSION, "task_type": rec.task_type,
            "satisfied": rec.satisfied, "total": rec.total,
            "pred_len": rec.pred_len, "expert_len": rec.expert_len,
            "failures": rec.failures, "timesteps": entries}


def cmd_rollout(args):
    from .rollout import rollout
    from .train import load_agent
    store, cfg, vocab, _ = load_agent(args.ckpt)
    splits = _dataset(args, cfg)
    episodes = splits[args.split]
    if args.index is not None:
        episodes = [episodes[args.index]]
    out = open(args.log, "w") if args.log else sys.stdout
    try:
        for ep in episodes:
            rec = rollout(store, cfg, vocab, ep, collect_diag=args.verbose)
            out.write(json.dumps(_log_record(rec, args.verbose),
                                 sort_keys=True) + "\n")
    finally:
        if args.log:
            out.close()


def cmd_subgoals(args):
    from .rollout import evaluate_subgoals, expert_subgoal_scores
    from .train import load_agent
    store, cfg, vocab, _ = load_agent(args.ckpt)
    splits = _dataset(args, cfg)
    table = evaluate_subgoals(store, cfg, vocab, splits[args.split])
    result = {"agent": table}
    if args.expert:
        result["expert"] = expert_subgoal_scores(splits[args.split], cfg)
    print(json.dumps(result, sort_keys=True))


def cmd_ensemble(args):
    from .rollout import ensemble_rollout
    from .train import load_agent
    stores = []
    cfg = vocab = None
    for path in args.ckpt:
        store, cfg, vocab, _ = load_agent(path)
        stores.append(store)
    splits = _dataset(args, cfg)
    records = [ensemble_rollout(stores, cfg, vocab, ep)
               for ep in splits[args.split]]
    print(compute_metrics(records).to_json())


ABLATION_VARIANTS = {
    "full": {},
    "k3": {"k_views": 3},
    "k1": {"k_views": 1},
    "k1_single_stage": {"k_views": 1, "two_stage": False},
    "no_selection": {"selection": False},
    "softmax_gate": {"gate": "softmax"},
}


def run_ablations(cfg, seeds, variants=None, log=None):
    """Train each variant for each seed; returns {variant: [seen Task %]}."""
    from .rollout import evaluate
    from .train import train
    variants = variants or list(ABLATION_VARIANTS)
    results = {}
    for name in variants:
        results[name] = []
        for seed in seeds:
            vd = dict(cfg.to_dict())
            vd.update(ABLATION_VARIANTS[name])
            vd["seed"] = seed
            vcfg = RunConfig.from_dict(vd)
            splits = make_dataset(vcfg.n_train, vcfg.n_valid_seen,
                                  vcfg.n_valid_unseen,
                                  misleading=vcfg.misleading)
            store, vocab, _ = train(vcfg, splits)
            report, _ = evaluate(store, vcfg, vocab, splits["valid_seen"])
            results[name].append(report.task)
            if log:
                log(f"{name} seed {seed}: seen Task {report.task:.1f}%")
    return results


def cmd_ablate(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",") if args.variants else None
    results = run_ablations(cfg, seeds, variants, log=print)
    medians = {k: float(np.median(v)) for k, v in results.items()}
    print(json.dumps({"runs": results, "median": medians}, sort_keys=True))


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="ifgrid",
        description="gridworld instruction-following agent")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="write train/valid episode splits")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train an agent")
    _add_config_args(p)
    p.add_argument("--data", help="dataset dir (generated if missing)")
    p.add_argument("--out", help="checkpoint output dir")
    p.add_argument("--resume", help="resume from this checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="report metrics for a checkpoint")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="valid_seen",
                   choices=["train", "valid_seen", "valid_unseen"])
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("rollout", help="log agent trajectories")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="valid_seen",
                   choices=["train", "valid_seen", "valid_unseen"])
    p.add_argument("--index", type=int, help="single episode index")
    p.add_argument("--log", help="write line-delimited JSON here")
    p.add_argument("--verbose", action="store_true",
                   help="include attention weights and chosen masks")
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("subgoals", help="isolated sub-goal evaluation")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="valid_seen",
                   choices=["train", "valid_seen", "valid_unseen"])
    p.add_argument("--expert", action="store_true",
                   help="also report the expert upper bound")
    p.set_defaults(fn=cmd_subgoals)

    p = sub.add_parser("ablate", help="train and compare model variants")
    _add_config_args(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", help="comma-separated subset to run")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("ensemble", help="evaluate averaged checkpoints")
    _add_config_args(p)
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="valid_seen",
                   choices=["train", "valid_seen", "valid_unseen"])
    p.set_defaults(fn=cmd_ensemble)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
