"""Command-line entry point: ``softq {train,gen-demos,eval,verify}``.

Exit codes: 0 success, 1 a verification check failed, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from .data import DemoFormatError, demo_save, generate_demos
from .mdp import make_env
from .models import load_checkpoint
from .soft import soft_value_iteration
from .trainer import ConfigError, TrainConfig, evaluate, load_config, train
from .verify import run_all

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise UsageError(f"override must look like key=value, got {text!r}")
    return key.strip(), yaml.safe_load(raw)


def _parse_seed_range(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        seeds = list(range(int(lo), int(hi) + 1)) if sep else [int(text)]
    except ValueError:
        raise UsageError(f"--seeds expects a..b, got {text!r}") from None
    if not seeds:
        raise UsageError(f"empty seed range {text!r}")
    return seeds


def resolve_train_config(args) -> TrainConfig:
    doc = load_config(args.config).to_dict() if args.config else {}
    for text in args.set or []:
        key, value = _parse_override(text)
        doc[key] = value
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.algorithm is not None:
        doc["algorithm"] = args.algorithm
    if args.out_dir is not None:
        doc["out_dir"] = args.out_dir
    cfg = TrainConfig.from_dict(doc)
    cfg.validate()
    return cfg


def _train_one(run: TrainConfig) -> str:
    result = train(run)
    evals = [r["eval_return_mean"] for r in result.metrics if not np.isnan(r["eval_return_mean"])]
    last = f"{evals[-1]:.4f}" if evals else "n/a"
    status = " (aborted: non-finite loss)" if result.aborted else ""
    return f"seed {run.seed}: {run.algorithm} last eval return {last}{status}" + (f" -> {run.out_dir}" if run.out_dir else "")


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    seeds = _parse_seed_range(args.seeds) if args.seeds else [cfg.seed]
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    runs = []
    for seed in seeds:
        run = dataclasses.replace(cfg, seed=seed)
        if len(seeds) > 1:
            base = cfg.out_dir or "runs"
            run = dataclasses.replace(run, out_dir=os.path.join(base, f"seed{seed}"))
        runs.append(run)
    if args.jobs == 1 or len(runs) == 1:
        for run in runs:
            print(_train_one(run))
    else:
        # runs share nothing, so each goes to its own process
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for line in pool.map(_train_one, runs):
                print(line)
    return EXIT_OK


def cmd_gen_demos(args) -> int:
    mdp, max_steps = make_env(args.env)
    q_star, _ = soft_value_iteration(mdp, args.epsilon, args.gamma)
    ds = generate_demos(mdp, q_star, args.temperature, args.noise, args.steps, args.seed, max_steps)
    demo_save(ds, args.out)
    print(f"wrote {len(ds)} steps ({ds.meta.n_episodes} episodes) to {args.out}")
    print(f"measured mean return {ds.meta.measured_return:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    mdp, max_steps = make_env(args.env)
    eps = args.epsilon if args.epsilon is not None else extra.get("epsilon")
    if eps is None:
        raise UsageError("checkpoint stores no epsilon; pass --epsilon")
    mean, std = evaluate(model, mdp, args.episodes, float(eps), args.seed, max_steps)
    print(f"{mean:.6f} ± {std:.6f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_verify(args) -> int:
    reports = run_all(args.seed)
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        for r in reports:
            print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="softq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run training from a YAML config")
    t.add_argument("--config", help="YAML file of TrainConfig keys")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="run seeds a..b, each into out_dir/seed<k>")
    t.add_argument("--jobs", type=int, default=1, help="worker processes for --seeds")
    t.add_argument("--algorithm")
    t.add_argument("--out-dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gen-demos", help="write reward-free demonstrations of a degraded soft-optimal expert")
    g.add_argument("--env", required=True)
    g.add_argument("--temperature", type=float, required=True)
    g.add_argument("--noise", type=float, required=True)
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--epsilon", type=float, default=0.1, help="temperature of the soft-optimal solve")
    g.add_argument("--gamma", type=float, default=0.99)
    g.set_defaults(func=cmd_gen_demos)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--epsilon", type=float)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the numerical identity suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, DemoFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
