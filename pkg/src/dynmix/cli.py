"""Command-line interface: meta-train, train-baseline, run, summarize."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, meta
from .control import ControllerConfig
from .envs import env_names, make_env
from .errors import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, ConfigError, NumericalError
from .net import LikelihoodConfig, NetArchitecture, save_checkpoint


def _add_meta_flags(p: argparse.ArgumentParser):
    p.add_argument("--hidden", default="64,64", help="comma-separated hidden layer widths")
    p.add_argument("--sigma-sq", type=float, default=1.0, help="Gaussian likelihood variance")
    p.add_argument("--inner-lr", type=float, default=0.01)
    p.add_argument("--outer-lr", type=float, default=0.001)
    p.add_argument("--iters", type=int, default=4, help="collection/optimization iterations")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--tasks-per-iter", type=int, default=8)
    p.add_argument("--timesteps-per-iter", type=int, default=600)
    p.add_argument("--k", type=int, default=16, help="adaptation window length")
    p.add_argument("--second-order", action="store_true")
    p.add_argument("--num-candidates", type=int, default=128)
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)


def _meta_config(args) -> meta.MetaConfig:
    return meta.MetaConfig(
        inner_lr=args.inner_lr,
        outer_lr=args.outer_lr,
        meta_iterations=args.iters,
        epochs=args.epochs,
        tasks_per_iter=args.tasks_per_iter,
        timesteps_per_iter=args.timesteps_per_iter,
        k=args.k,
        second_order=args.second_order,
    )


def cmd_meta_train(args) -> int:
    env = make_env(args.env)
    hidden = tuple(int(h) for h in args.hidden.split(","))
    arch = NetArchitecture(env.state_dim + env.action_dim, env.state_dim, hidden)
    result = meta.meta_train(
        env,
        arch,
        ControllerConfig(args.num_candidates, args.horizon),
        _meta_config(args),
        LikelihoodConfig(args.sigma_sq),
        seed=args.seed,
    )
    save_checkpoint(args.out, result.params, result.model.lik, result.model.normalizer)
    print(f"wrote prior checkpoint: {args.out}")
    if args.dataset_out:
        result.dataset.save(args.dataset_out)
        print(f"wrote dataset ({result.dataset.total_transitions()} transitions): {args.dataset_out}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    if not os.path.exists(args.dataset):
        raise ConfigError(f"missing dataset: {args.dataset!r}")
    dataset = meta.Dataset.load(args.dataset)
    envs = {t.env for t in dataset.trajectories}
    if len(envs) != 1:
        raise ConfigError(f"dataset mixes environments: {sorted(envs)}")
    env = make_env(envs.pop())
    hidden = tuple(int(h) for h in args.hidden.split(","))
    arch = NetArchitecture(env.state_dim + env.action_dim, env.state_dim, hidden)
    params, model = meta.train_baseline(
        dataset, arch, _meta_config(args), LikelihoodConfig(args.sigma_sq), seed=args.seed
    )
    save_checkpoint(args.out, params, model.lik, model.normalizer)
    print(f"wrote baseline checkpoint: {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    base: dict = {}
    if args.preset:
        base = dict(harness.PRESETS[args.preset]) if args.preset in harness.PRESETS else None
        if base is None:
            raise ConfigError(f"unknown preset {args.preset!r}; known: {sorted(harness.PRESETS)}")
    if args.config:
        with open(args.config) as f:
            base.update(json.load(f))
    overrides = {
        key: getattr(args, key)
        for key in (
            "env",
            "schedule",
            "method",
            "trial_length",
            "out_dir",
            "prior_checkpoint",
            "baseline_checkpoint",
            "online_lr",
            "window_k",
            "alpha",
            "em_iterations",
            "spawn_offset",
            "num_candidates",
            "horizon",
            "discount",
            "sigma_sq",
        )
        if getattr(args, key) is not None
    }
    if args.seeds is not None:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    base.update(overrides)
    if "out_dir" not in base or os.environ.get("DYNMIX_OUT"):
        base["out_dir"] = os.environ.get("DYNMIX_OUT", base.get("out_dir", "runs"))
    config = harness.RunConfig.from_dict(base)
    paths = harness.run(config)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    summary = harness.summarize(args.logs)
    print(harness.render_summary(summary))
    if args.csv:
        harness.summary_to_csv(summary, args.csv)
        print(f"wrote {args.csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmix",
        description="Online mixtures of meta-trained dynamics models under MPC",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train a prior inside the data-collection loop")
    p.add_argument("--env", required=True, choices=env_names())
    p.add_argument("--out", required=True, help="prior checkpoint path")
    p.add_argument("--dataset-out", default=None, help="also write the collected dataset")
    _add_meta_flags(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("train-baseline", help="supervised training on an existing dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="baseline checkpoint path")
    _add_meta_flags(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("run", help="run online trials for one method")
    p.add_argument("--config", default=None, help="JSON file with RunConfig keys")
    p.add_argument("--preset", default=None, help=f"one of {sorted(harness.PRESETS)}")
    p.add_argument("--env", default=None, choices=env_names())
    p.add_argument("--schedule", default=None)
    p.add_argument("--method", default=None, choices=harness.METHODS)
    p.add_argument("--trial-length", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--prior-checkpoint", default=None)
    p.add_argument("--baseline-checkpoint", default=None)
    p.add_argument("--online-lr", type=float, default=None)
    p.add_argument("--window-k", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--em-iterations", type=int, default=None)
    p.add_argument("--spawn-offset", type=int, default=None)
    p.add_argument("--num-candidates", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--discount", type=float, default=None)
    p.add_argument("--sigma-sq", type=float, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="aggregate trial logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_summarize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
