"""Meta-training of the adaptation prior inside a model-based RL data loop.

The prior is trained so that one gradient step on a small window of recent
transitions produces a model that predicts the next window well. Data
collection and meta-optimization alternate: the current prior plus the MPC
controller generate on-policy rollouts, the rollouts extend an append-only
dataset, and the prior is then re-optimized over the whole dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import control
from .net import (
    DynamicsModel,
    LikelihoodConfig,
    NetArchitecture,
    Normalizer,
    ParamVector,
    TransitionWindow,
    grad_nll,
    init_params,
    sgd_step,
)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    meta_iterations: int = 12
    epochs: int = 50
    tasks_per_iter: int = 16
    timesteps_per_iter: int = 2500
    k: int = 16
    second_order: bool = False

    def __post_init__(self):
        if self.inner_lr < 0.0 or self.outer_lr <= 0.0:
            raise ValueError("learning rates must be positive (inner_lr may be 0)")
        if min(self.epochs, self.tasks_per_iter, self.timesteps_per_iter, self.k) < 1:
            raise ValueError("epochs, tasks_per_iter, timesteps_per_iter, k must be >= 1")
        if self.meta_iterations < 0:
            raise ValueError("meta_iterations must be >= 0")


@dataclass(frozen=True)
class MetaBatch:
    """Per-task (train_window, val_window) pairs.

    The validation window is the train window shifted forward by one
    transition, matching how adaptation is scored online: fit on the K most
    recent transitions, predict the next arrival.
    """

    pairs: tuple[tuple[TransitionWindow, TransitionWindow], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a MetaBatch needs at least one task pair")


@dataclass
class Trajectory:
    env: str
    task: dict
    iteration: int
    episode: int
    states: np.ndarray  # (T+1, state_dim)
    actions: np.ndarray  # (T, action_dim)

    @property
    def transitions(self) -> int:
        return self.actions.shape[0]


class Dataset:
    """Append-only store of rollout trajectories."""

    def __init__(self):
        self._trajectories: list[Trajectory] = []

    def add(self, traj: Trajectory):
        self._trajectories.append(traj)

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return tuple(self._trajectories)

    def total_transitions(self) -> int:
        return sum(t.transitions for t in self._trajectories)

    def transition_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All transitions stacked as (states, actions, next_states)."""
        s = np.concatenate([t.states[:-1] for t in self._trajectories])
        a = np.concatenate([t.actions for t in self._trajectories])
        s2 = np.concatenate([t.states[1:] for t in self._trajectories])
        return s, a, s2

    def subset(self, fraction: float) -> "Dataset":
        """First `fraction` of trajectories, for data-budget comparisons."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        out = Dataset()
        keep = max(1, round(fraction * len(self._trajectories)))
        for traj in self._trajectories[:keep]:
            out.add(traj)
        return out

    def save(self, path):
        """One JSON record per transition; column order is documented in FORMATS.md."""
        with open(path, "w") as f:
            for traj in self._trajectories:
                for i in range(traj.transitions):
                    rec = {
                        "env": traj.env,
                        "iteration": traj.iteration,
                        "episode": traj.episode,
                        "task": traj.task,
                        "s": traj.states[i].tolist(),
                        "a": traj.actions[i].tolist(),
                        "s_next": traj.states[i + 1].tolist(),
                    }
                    f.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        out = cls()
        current: list[dict] = []

        def flush():
            if not current:
                return
            first = current[0]
            states = [r["s"] for r in current] + [current[-1]["s_next"]]
            out.add(
                Trajectory(
                    env=first["env"],
                    task=first["task"],
                    iteration=first["iteration"],
                    episode=first["episode"],
                    states=np.asarray(states, dtype=np.float64),
                    actions=np.asarray([r["a"] for r in current], dtype=np.float64),
                )
            )

        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if current and rec["episode"] != current[0]["episode"]:
                    flush()
                    current = []
                current.append(rec)
        flush()
        return out


def inner_adapt(
    theta: ParamVector, train: TransitionWindow, eta: float, lik: LikelihoodConfig
) -> ParamVector:
    """One full-weight gradient step on the train window."""
    return sgd_step(theta, grad_nll(theta, train, lik), eta, 1.0)


def _hvp_fd(
    theta: ParamVector,
    window: TransitionWindow,
    lik: LikelihoodConfig,
    vec: np.ndarray,
    rel_step: float = 1e-6,
) -> np.ndarray:
    """Hessian-vector product of the window NLL via central differences."""
    vnorm = float(np.linalg.norm(vec))
    if vnorm == 0.0:
        return np.zeros_like(vec)
    eps = rel_step * (1.0 + float(np.linalg.norm(theta.values))) / vnorm
    gp = grad_nll(ParamVector(theta.values + eps * vec, theta.arch), window, lik).values
    gm = grad_nll(ParamVector(theta.values - eps * vec, theta.arch), window, lik).values
    return (gp - gm) / (2.0 * eps)


def meta_gradient(
    theta: ParamVector, batch: MetaBatch, cfg: MetaConfig, lik: LikelihoodConfig
) -> ParamVector:
    """Gradient of the post-adaptation validation loss summed over the batch.

    First-order mode evaluates the validation gradient at the adapted
    parameters and treats the adaptation Jacobian as the identity; exact
    mode adds the -eta * H_train * grad_val correction with the
    Hessian-vector product taken by finite differences.
    """
    total = np.zeros(theta.arch.param_count)
    for train, val in batch.pairs:
        phi = inner_adapt(theta, train, cfg.inner_lr, lik)
        g_val = grad_nll(phi, val, lik).values
        if cfg.second_order and cfg.inner_lr != 0.0:
            total += g_val - cfg.inner_lr * _hvp_fd(theta, train, lik, g_val)
        else:
            total += g_val
    return ParamVector(total, theta.arch)


def _window_pairs(
    dataset: Dataset, model: DynamicsModel, k: int
) -> list[tuple[Trajectory, int]]:
    """All (trajectory, start) positions admitting a k-window and its shift."""
    out = []
    for traj in dataset.trajectories:
        for i in range(traj.transitions - k):
            out.append((traj, i))
    return out


def _pair_windows(
    traj: Trajectory, i: int, k: int, model: DynamicsModel
) -> tuple[TransitionWindow, TransitionWindow]:
    def win(j):
        return model.window(traj.states[j : j + k], traj.actions[j : j + k], traj.states[j + 1 : j + k + 1])

    return win(i), win(i + 1)


def _epoch_batches(
    dataset: Dataset, model: DynamicsModel, cfg: MetaConfig, rng: np.random.Generator
):
    positions = _window_pairs(dataset, model, cfg.k)
    if not positions:
        raise ValueError(
            f"dataset has no trajectory long enough for k={cfg.k} (+1) windows"
        )
    n_batches = max(1, dataset.total_transitions() // (cfg.k * cfg.tasks_per_iter))
    for _ in range(n_batches):
        idx = rng.integers(0, len(positions), size=cfg.tasks_per_iter)
        yield MetaBatch(
            tuple(_pair_windows(*positions[j], cfg.k, model) for j in idx)
        )


def meta_optimize(
    theta: ParamVector,
    dataset: Dataset,
    model: DynamicsModel,
    cfg: MetaConfig,
    rng: np.random.Generator,
) -> ParamVector:
    """cfg.epochs passes of minibatched meta-gradient descent on the dataset."""
    for _ in range(cfg.epochs):
        for batch in _epoch_batches(dataset, model, cfg, rng):
            theta = sgd_step(theta, meta_gradient(theta, batch, cfg, model.lik), cfg.outer_lr, 1.0)
    return theta


def supervised_optimize(
    theta: ParamVector,
    dataset: Dataset,
    model: DynamicsModel,
    cfg: MetaConfig,
    rng: np.random.Generator,
) -> ParamVector:
    """Plain-SGD twin of meta_optimize: same batch stream, losses at theta."""
    for _ in range(cfg.epochs):
        for batch in _epoch_batches(dataset, model, cfg, rng):
            total = np.zeros(theta.arch.param_count)
            for _, val in batch.pairs:
                total += grad_nll(theta, val, model.lik).values
            theta = sgd_step(theta, ParamVector(total, theta.arch), cfg.outer_lr, 1.0)
    return theta


@dataclass
class MetaTrainResult:
    params: ParamVector
    dataset: Dataset
    model: DynamicsModel  # carries the frozen normalization statistics


def _collect_episode(
    env,
    task,
    theta: ParamVector,
    model: DynamicsModel,
    controller_cfg: "control.ControllerConfig",
    cfg: MetaConfig,
    length: int,
    env_rng: np.random.Generator,
    plan_rng: np.random.Generator,
    adapt: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll one on-policy episode, re-adapting from theta on the last k steps."""
    states = [env.initial_state(env_rng)]
    actions = []
    for t in range(length):
        params = theta
        if adapt and actions:
            j = max(0, len(actions) - cfg.k)
            window = model.window(
                np.asarray(states[j:-1]), np.asarray(actions[j:]), np.asarray(states[j + 1 :])
            )
            params = inner_adapt(theta, window, cfg.inner_lr, model.lik)
        action = control.plan(
            model,
            params,
            states[-1],
            env.reward_batch,
            (env.action_low, env.action_high),
            controller_cfg,
            plan_rng,
        )
        nxt, _ = env.step(states[-1], action, task, env_rng)
        states.append(nxt)
        actions.append(action)
    return np.asarray(states), np.asarray(actions)


def meta_train(
    env,
    arch: NetArchitecture,
    controller_cfg: "control.ControllerConfig",
    cfg: MetaConfig,
    lik: LikelihoodConfig,
    seed: int,
) -> MetaTrainResult:
    """Alternate on-policy collection and meta-optimization.

    Each iteration samples tasks_per_iter training tasks, collects
    timesteps_per_iter transitions with the current prior under k-shot
    adaptation, refits the normalization statistics on the full dataset and
    re-optimizes the prior for cfg.epochs epochs. Returns the final prior,
    the dataset (reused to train non-meta baselines on identical data) and
    the model wrapper holding the frozen normalizer.
    """
    seq = np.random.SeedSequence(seed)
    init_rng, env_rng, plan_rng, opt_rng = (np.random.default_rng(s) for s in seq.spawn(4))
    theta = init_params(arch, init_rng)
    dataset = Dataset()
    model = DynamicsModel(arch, lik, Normalizer.identity(arch.input_dim, arch.output_dim))

    ep_len = max(cfg.k + 2, cfg.timesteps_per_iter // cfg.tasks_per_iter)
    episode = 0
    for iteration in range(cfg.meta_iterations):
        for _ in range(cfg.tasks_per_iter):
            task = env.sample_train_task(env_rng)
            states, acts = _collect_episode(
                env, task, theta, model, controller_cfg, cfg, ep_len, env_rng, plan_rng, adapt=True
            )
            dataset.add(
                Trajectory(env.name, env.task_to_dict(task), iteration, episode, states, acts)
            )
            episode += 1
        s, a, s2 = dataset.transition_arrays()
        model = DynamicsModel(
            arch, lik, Normalizer.fit(np.concatenate([s, a], axis=1), s2)
        )
        theta = meta_optimize(theta, dataset, model, cfg, opt_rng)
    return MetaTrainResult(theta, dataset, model)


def train_baseline(
    dataset: Dataset,
    arch: NetArchitecture,
    cfg: MetaConfig,
    lik: LikelihoodConfig,
    seed: int,
) -> tuple[ParamVector, DynamicsModel]:
    """Standard supervised training on an existing dataset.

    The epoch budget is cfg.epochs * max(1, cfg.meta_iterations) so the
    baseline sees roughly as many updates as the meta-trained model did
    across its iterations.
    """
    seq = np.random.SeedSequence(seed)
    init_rng, opt_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    theta = init_params(arch, init_rng)
    s, a, s2 = dataset.transition_arrays()
    model = DynamicsModel(arch, lik, Normalizer.fit(np.concatenate([s, a], axis=1), s2))
    budget = MetaConfig(
        inner_lr=cfg.inner_lr,
        outer_lr=cfg.outer_lr,
        meta_iterations=cfg.meta_iterations,
        epochs=cfg.epochs * max(1, cfg.meta_iterations),
        tasks_per_iter=cfg.tasks_per_iter,
        timesteps_per_iter=cfg.timesteps_per_iter,
        k=cfg.k,
        second_order=cfg.second_order,
    )
    theta = supervised_optimize(theta, dataset, model, budget, opt_rng)
    return theta, model
