"""Random-shooting model-predictive control and the online trial loop.

The planner samples candidate action sequences uniformly within bounds,
rolls each through the learned dynamics model, scores them with the task
reward and executes only the first action of the best sequence, replanning
every step.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .net import DynamicsModel, ParamVector

logger = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ControllerConfig:
    num_candidates: int = 1000
    horizon: int = 10
    discount: float = 1.0

    def __post_init__(self):
        if self.num_candidates < 1 or self.horizon < 1:
            raise ValueError("num_candidates and horizon must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")


def plan(
    model: DynamicsModel,
    params: ParamVector,
    state: np.ndarray,
    reward_batch,
    bounds: tuple[np.ndarray, np.ndarray],
    cfg: ControllerConfig,
    rng: np.random.Generator,
    candidates: np.ndarray | None = None,
) -> np.ndarray:
    """Choose the first action of the highest-scoring candidate sequence.

    Scores are sum over the horizon of discount^p * reward(s_p, a_p) with
    s_0 the current state and s_{p+1} the model prediction. Ties go to the
    lowest candidate index. Pass `candidates` (shape (N, H, action_dim)) to
    replace uniform sampling, e.g. with an exhaustive grid.
    """
    low, high = bounds
    if candidates is None:
        candidates = rng.uniform(low, high, size=(cfg.num_candidates, cfg.horizon, low.size))
    else:
        candidates = np.asarray(candidates, dtype=np.float64)
        if candidates.ndim != 3 or candidates.shape[2] != low.size:
            raise ValueError(f"candidates must have shape (N, H, {low.size})")
    n, horizon, _ = candidates.shape

    scores = np.zeros(n)
    sim = np.tile(np.asarray(state, dtype=np.float64), (n, 1))
    alive = np.arange(n)
    disc = 1.0
    for p in range(horizon):
        acts = candidates[alive, p, :]
        scores[alive] += disc * reward_batch(sim[alive], acts)
        disc *= cfg.discount
        if p == horizon - 1:
            break
        nxt = model.predict_batch(params, sim[alive], acts)
        ok = np.all(np.isfinite(nxt), axis=1)
        if not ok.all():
            logger.warning(
                "plan: %d candidate rollouts diverged at step %d; scoring them -inf",
                int((~ok).sum()),
                p,
            )
            scores[alive[~ok]] = -np.inf
        sim[alive[ok]] = nxt[ok]
        alive = alive[ok]
        if alive.size == 0:
            break
    return candidates[int(np.argmax(scores)), 0, :].copy()


@dataclass(frozen=True)
class TrialSettings:
    window_k: int = 16
    spawn_offset: int = 16

    def __post_init__(self):
        if self.window_k < 1 or self.spawn_offset < 1:
            raise ValueError("window_k and spawn_offset must be >= 1")


class TrialLog:
    """Header plus one record per timestep, written as newline-delimited JSON."""

    def __init__(self, header: dict, records: list[dict]):
        self.header = header
        self.records = records

    def total_reward(self) -> float:
        return float(sum(r["reward"] for r in self.records))

    def save(self, path):
        with open(path, "w") as f:
            f.write(json.dumps({"schema": LOG_SCHEMA_VERSION, **self.header}) + "\n")
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "TrialLog":
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("schema") != LOG_SCHEMA_VERSION:
                raise ConfigError(
                    f"{path}: log schema {header.get('schema')!r} != supported {LOG_SCHEMA_VERSION}"
                )
            records = [json.loads(line) for line in f if line.strip()]
        for t, rec in enumerate(records):
            if rec["t"] != t:
                raise ConfigError(f"{path}: records are not consecutive at t={t}")
        return cls(header, records)

    def to_csv(self, path):
        """Flat per-timestep export for plotting tools."""
        cols = ["t", "reward", "nll", "chosen_task", "num_tasks", "spawn", "new_task_prob"]
        with open(path, "w") as f:
            f.write(",".join(cols + ["posterior"]) + "\n")
            for rec in self.records:
                row = [str(rec.get(c, "")) for c in cols]
                post = rec.get("posterior")
                row.append("" if post is None else ";".join(repr(p) for p in post))
                f.write(",".join(row) + "\n")


def _params_hash(params: ParamVector) -> str:
    return hashlib.sha256(params.values.astype("<f8").tobytes()).hexdigest()[:12]


def run_trial(
    learner,
    env,
    schedule,
    model: DynamicsModel,
    controller_cfg: ControllerConfig,
    settings: TrialSettings,
    seed: int,
    header_extra: dict | None = None,
) -> TrialLog:
    """Run one online trial: update the learner, plan, act, log, repeat.

    The learner sees the window of the last K transitions plus (when
    available) the earlier disjoint window used to fit new-task candidates;
    planning always uses the learner's current choice of parameters.
    """
    seq = np.random.SeedSequence(seed)
    env_rng, plan_rng = (np.random.default_rng(s) for s in seq.spawn(2))

    state = env.initial_state(env_rng)
    header = {
        "env": env.name,
        "seed": seed,
        "trial_length": schedule.total,
        "initial_state": state.tolist(),
        "segments": [
            {"start": start, "duration": dur, "task": env.task_to_dict(seg.task)}
            for (start, dur), seg in zip(schedule.boundaries(), schedule.segments)
        ],
        "gradual": schedule.gradual,
    }
    if header_extra:
        header.update(header_extra)

    k, offset = settings.window_k, settings.spawn_offset
    states_hist: list[np.ndarray] = []
    actions_hist: list[np.ndarray] = []
    next_hist: list[np.ndarray] = []
    records = []

    def make_window(lo, hi):
        return model.window(
            np.asarray(states_hist[lo:hi]),
            np.asarray(actions_hist[lo:hi]),
            np.asarray(next_hist[lo:hi]),
        )

    for t in range(schedule.total):
        diag = {}
        n = len(states_hist)
        if n > 0:
            window = make_window(max(0, n - k), n)
            if n < k:
                spawn_window = None  # candidate disabled until a full window exists
            elif n >= k + offset:
                spawn_window = make_window(n - k - offset, n - offset)
            else:
                spawn_window = make_window(0, k)
            diag = learner.update(window, spawn_window)

        params = learner.planning_params()
        action = plan(
            model,
            params,
            state,
            env.reward_batch,
            (env.action_low, env.action_high),
            controller_cfg,
            plan_rng,
        )
        next_state, reward = env.step(state, action, schedule.task_at(t), env_rng)

        rec = {"t": t, "reward": reward, "params_hash": _params_hash(params)}
        rec.update(diag)
        records.append(rec)

        states_hist.append(state)
        actions_hist.append(action)
        next_hist.append(next_state)
        state = next_state

    return TrialLog(header, records)
