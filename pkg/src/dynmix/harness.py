"""Experiment runner: five online-learning method variants on shared streams.

Methods:
  mole        -- online EM mixture with CRP task spawning over the meta prior
  kshot       -- re-adapt from the meta prior on the last K steps, discard after
  continued   -- keep taking gradient steps from the previous step's parameters
  mbrl_fixed  -- plain-trained model, never adapted
  mbrl_online -- plain-trained model with online gradient updates

All run from one RunConfig; seeds are split hierarchically so different
methods on the same seed share initial conditions and diverge only through
their action choices.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import mixture
from .control import ControllerConfig, TrialLog, TrialSettings, run_trial
from .envs import make_env, make_schedule
from .errors import ConfigError
from .meta import inner_adapt
from .net import (
    DynamicsModel,
    LikelihoodConfig,
    ParamVector,
    grad_nll,
    load_checkpoint,
    nll,
    sgd_step,
)

METHODS = ("mole", "kshot", "continued", "mbrl_fixed", "mbrl_online")


class MoleLearner:
    """Wraps the mixture state machine and reports its diagnostics."""

    def __init__(self, prior: ParamVector, cfg: mixture.MixtureConfig, lik: LikelihoodConfig):
        self.cfg = cfg
        self.lik = lik
        self.state = mixture.init(prior)

    def update(self, window, spawn_window):
        self.state, posterior, spawned = mixture.step(
            self.state, window, self.cfg, self.lik, spawn_window
        )
        best = self.state.best_entry()
        return {
            "nll": nll(best.params, window, self.lik) / window.size,
            "posterior": posterior.probs.tolist(),
            "new_task_prob": posterior.new_task_prob,
            "chosen_task": best.id,
            "num_tasks": len(self.state.tasks),
            "spawn": spawned,
        }

    def planning_params(self) -> ParamVector:
        return self.state.best_entry().params


class KShotLearner:
    """Always adapts from the prior on the latest window; nothing carries over."""

    def __init__(self, prior: ParamVector, lr: float, lik: LikelihoodConfig):
        self.prior = prior
        self.lr = lr
        self.lik = lik
        self.params = prior

    def update(self, window, spawn_window):
        self.params = inner_adapt(self.prior, window, self.lr, self.lik)
        return {"nll": nll(self.params, window, self.lik) / window.size}

    def planning_params(self) -> ParamVector:
        return self.params


class ContinuedLearner:
    """One plain SGD step per timestep from the previous parameters."""

    def __init__(self, params: ParamVector, lr: float, lik: LikelihoodConfig):
        self.params = params
        self.lr = lr
        self.lik = lik

    def update(self, window, spawn_window):
        self.params = sgd_step(self.params, grad_nll(self.params, window, self.lik), self.lr, 1.0)
        return {"nll": nll(self.params, window, self.lik) / window.size}

    def planning_params(self) -> ParamVector:
        return self.params


class FixedLearner:
    """No adaptation at all."""

    def __init__(self, params: ParamVector, lik: LikelihoodConfig):
        self.params = params
        self.lik = lik

    def update(self, window, spawn_window):
        return {"nll": nll(self.params, window, self.lik) / window.size}

    def planning_params(self) -> ParamVector:
        return self.params


@dataclass(frozen=True)
class RunConfig:
    env: str
    schedule: str
    method: str
    trial_length: int
    seeds: tuple[int, ...]
    out_dir: str = "runs"
    prior_checkpoint: str | None = None
    baseline_checkpoint: str | None = None
    online_lr: float = 0.01
    window_k: int = 16
    alpha: float = 1.0
    em_iterations: int = 1
    spawn_offset: int = 16
    num_candidates: int = 1000
    horizon: int = 10
    discount: float = 1.0
    sigma_sq: float | None = None  # None: use the checkpoint's value

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def validate(self):
        from .envs import env_names

        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; known: {METHODS}")
        if self.env not in env_names():
            raise ConfigError(f"unknown environment {self.env!r}; known: {env_names()}")
        if self.trial_length < 0:
            raise ConfigError("trial_length must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        needs = (
            self.prior_checkpoint
            if self.method in ("mole", "kshot", "continued")
            else self.baseline_checkpoint
        )
        name = "prior_checkpoint" if self.method in ("mole", "kshot", "continued") else "baseline_checkpoint"
        if needs is None:
            raise ConfigError(f"method {self.method!r} requires {name}")
        if not os.path.exists(needs):
            raise ConfigError(f"missing {name}: {needs!r}")

    def mixture_config(self) -> mixture.MixtureConfig:
        return mixture.MixtureConfig(
            alpha=self.alpha,
            online_lr=self.online_lr,
            em_iterations=self.em_iterations,
            spawn_window_offset=self.spawn_offset,
        )

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(self.num_candidates, self.horizon, self.discount)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"env", "schedule", "method", "trial_length", "seeds"} - set(d)
        if missing:
            raise ConfigError(f"config is missing required keys: {sorted(missing)}")
        return cls(**{k: (tuple(v) if k == "seeds" else v) for k, v in d.items()})


def _make_learner(config: RunConfig, prior, baseline, lik: LikelihoodConfig):
    if config.method == "mole":
        return MoleLearner(prior, config.mixture_config(), lik)
    if config.method == "kshot":
        return KShotLearner(prior, config.online_lr, lik)
    if config.method == "continued":
        return ContinuedLearner(prior, config.online_lr, lik)
    if config.method == "mbrl_fixed":
        return FixedLearner(baseline, lik)
    if config.method == "mbrl_online":
        return ContinuedLearner(baseline, config.online_lr, lik)
    raise ConfigError(f"unknown method {config.method!r}")


def log_path(config: RunConfig, seed: int) -> str:
    return os.path.join(config.out_dir, f"{config.method}_{config.env}_seed{seed}.ndjson")


def run(config: RunConfig) -> list[str]:
    """Execute the configured trials, one log file per seed."""
    config.validate()
    env = make_env(config.env)

    prior = baseline = None
    lik = None
    normalizer = None
    if config.method in ("mole", "kshot", "continued"):
        prior, lik, normalizer = load_checkpoint(config.prior_checkpoint)
    else:
        baseline, lik, normalizer = load_checkpoint(config.baseline_checkpoint)
    if config.sigma_sq is not None:
        lik = LikelihoodConfig(config.sigma_sq)
    arch = (prior or baseline).arch
    if arch.input_dim != env.state_dim + env.action_dim or arch.output_dim != env.state_dim:
        raise ConfigError(
            f"checkpoint dims ({arch.input_dim}->{arch.output_dim}) do not match "
            f"env {env.name} ({env.state_dim + env.action_dim}->{env.state_dim})"
        )
    model = DynamicsModel(arch, lik, normalizer)

    os.makedirs(config.out_dir, exist_ok=True)
    settings = TrialSettings(config.window_k, config.spawn_offset)
    paths = []
    for seed in config.seeds:
        # the schedule seed is shared across methods so comparisons see the
        # same task sequence
        schedule = make_schedule(config.schedule, env, config.trial_length, seed=seed + 1)
        learner = _make_learner(config, prior, baseline, lik)
        log = run_trial(
            learner,
            env,
            schedule,
            model,
            config.controller_config(),
            settings,
            seed,
            header_extra={"method": config.method, "config": config.to_dict()},
        )
        path = log_path(config, seed)
        log.save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Summaries

def _segment_stats(log: TrialLog) -> list[dict]:
    out = []
    for i, seg in enumerate(log.header["segments"]):
        lo, hi = seg["start"], seg["start"] + seg["duration"]
        rewards = [r["reward"] for r in log.records[lo:hi]]
        chosen = [r["chosen_task"] for r in log.records[lo:hi] if "chosen_task" in r]
        out.append(
            {
                "segment": i,
                "start": lo,
                "duration": seg["duration"],
                "task": seg["task"],
                "total_reward": float(sum(rewards)),
                "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
                "modal_task": (max(set(chosen), key=chosen.count) if chosen else None),
            }
        )
    return out


def _recall_stats(log: TrialLog, segments: list[dict]) -> list[dict]:
    """For each segment revisiting an earlier task, the fraction of steps on
    which the argmax task matches the original segment's modal task."""
    out = []
    for i, seg in enumerate(segments):
        first = next(
            (j for j in range(i) if segments[j]["task"] == seg["task"]), None
        )
        if first is None or seg["modal_task"] is None:
            continue
        origin = segments[first]["modal_task"]
        lo, hi = seg["start"], seg["start"] + seg["duration"]
        chosen = [r["chosen_task"] for r in log.records[lo:hi] if "chosen_task" in r]
        if not chosen:
            continue
        match = sum(1 for c in chosen if c == origin) / len(chosen)
        out.append(
            {"segment": i, "revisits": first, "recall_fraction": float(match)}
        )
    return out


def summarize(paths: list[str]) -> dict:
    """Aggregate trial logs into per-file and per-segment statistics."""
    files = []
    for path in paths:
        log = TrialLog.load(path)
        segments = _segment_stats(log)
        spawns = sum(1 for r in log.records if r.get("spawn"))
        num_tasks = max((r.get("num_tasks", 1) for r in log.records), default=1)
        files.append(
            {
                "path": str(path),
                "method": log.header.get("method"),
                "env": log.header.get("env"),
                "seed": log.header.get("seed"),
                "total_reward": log.total_reward(),
                "num_tasks": num_tasks,
                "spawn_count": spawns,
                "segments": segments,
                "recall": _recall_stats(log, segments),
            }
        )
    return {"files": files}


def render_summary(summary: dict) -> str:
    lines = []
    header = f"{'file':<44} {'method':<12} {'seed':>4} {'total_reward':>13} {'tasks':>6} {'spawns':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for f in summary["files"]:
        name = os.path.basename(f["path"])
        lines.append(
            f"{name:<44} {str(f['method']):<12} {str(f['seed']):>4} "
            f"{f['total_reward']:>13.3f} {f['num_tasks']:>6} {f['spawn_count']:>7}"
        )
        for seg in f["segments"]:
            lines.append(
                f"    segment {seg['segment']} [{seg['start']}:{seg['start'] + seg['duration']}] "
                f"mean_reward={seg['mean_reward']:.4f} total={seg['total_reward']:.3f}"
            )
        for rec in f["recall"]:
            lines.append(
                f"    recall: segment {rec['segment']} revisits {rec['revisits']} "
                f"fraction={rec['recall_fraction']:.3f}"
            )
    return "\n".join(lines)


def summary_to_csv(summary: dict, path):
    with open(path, "w") as f:
        f.write("file,method,seed,segment,start,duration,mean_reward,total_reward\n")
        for entry in summary["files"]:
            for seg in entry["segments"]:
                f.write(
                    f"{os.path.basename(entry['path'])},{entry['method']},{entry['seed']},"
                    f"{seg['segment']},{seg['start']},{seg['duration']},"
                    f"{seg['mean_reward']!r},{seg['total_reward']!r}\n"
                )


# ---------------------------------------------------------------------------
# Desk-scale presets

PRESETS: dict[str, dict] = {
    "pendulum-alternating": {
        "env": "gain_pendulum",
        "schedule": "alternate(normal, reversed, 100)",
        "trial_length": 400,
        "method": "mole",
        "seeds": list(range(10)),
        "num_candidates": 128,
        "horizon": 8,
    },
    "pendulum-constant": {
        "env": "gain_pendulum",
        "schedule": "constant(normal)",
        "trial_length": 200,
        "method": "mole",
        "seeds": list(range(10)),
        "num_candidates": 128,
        "horizon": 8,
    },
    "switchlin-aba": {
        "env": "switch_lin",
        "schedule": "alternate(mode_a, mode_b, 50)",
        "trial_length": 150,
        "method": "mole",
        "seeds": list(range(10)),
        "num_candidates": 64,
        "horizon": 5,
        "window_k": 8,
        "spawn_offset": 8,
    },
}


def preset_config(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    d = dict(PRESETS[name])
    d.update(overrides)
    return RunConfig.from_dict(d)
