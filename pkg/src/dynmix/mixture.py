"""Streaming EM over a growing set of task models with a CRP prior.

One call to step() per incoming window: infer a posterior over which task
generated the window (existing tasks weighted by accumulated mass, a fresh
candidate weighted by the concentration alpha), take one posterior-weighted
gradient step on every task, and spawn the candidate as a new task when it
wins the posterior outright. No past data is stored; the accumulated
per-task mass is the only memory of previous steps.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericalError
from .net import (
    LikelihoodConfig,
    Normalizer,
    ParamVector,
    TransitionWindow,
    _read_model_header,
    _read_params,
    _write_model_header,
    _write_params,
    grad_nll,
    nll,
    sgd_step,
)


@dataclass(frozen=True)
class TaskEntry:
    """One mixture component: parameters plus accumulated prior mass."""

    id: int
    params: ParamVector
    prior_mass: float

    def __post_init__(self):
        if not (self.prior_mass >= 0.0 and np.isfinite(self.prior_mass)):
            raise ValueError(f"prior_mass must be finite and >= 0, got {self.prior_mass}")


@dataclass(frozen=True)
class TaskPosterior:
    """Per-task probabilities plus the probability of an unseen task."""

    probs: np.ndarray
    new_task_prob: float

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True).ravel()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if np.any(probs < 0.0) or self.new_task_prob < 0.0:
            raise ValueError("posterior entries must be nonnegative")
        total = math.fsum(probs.tolist()) + self.new_task_prob
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"posterior must sum to 1 within 1e-12, got {total!r}")


@dataclass(frozen=True)
class MixtureConfig:
    alpha: float = 1.0  # CRP concentration; 0 disables new tasks
    online_lr: float = 0.01
    em_iterations: int = 1
    spawn_window_offset: int = 16

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.online_lr < 0.0:
            raise ValueError(f"online_lr must be >= 0, got {self.online_lr}")
        if self.em_iterations < 1:
            raise ValueError(f"em_iterations must be >= 1, got {self.em_iterations}")
        if self.spawn_window_offset < 1:
            raise ValueError("spawn_window_offset must be >= 1")


@dataclass(frozen=True)
class MixtureState:
    tasks: tuple[TaskEntry, ...]
    step_count: int
    prior: ParamVector
    current_best: int

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a mixture needs at least one task")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")
        if not any(t.id == self.current_best for t in self.tasks):
            raise ValueError(f"current_best {self.current_best} is not a task id")

    def task_params(self) -> list[ParamVector]:
        return [t.params for t in self.tasks]

    def masses(self) -> np.ndarray:
        return np.array([t.prior_mass for t in self.tasks])

    def best_entry(self) -> TaskEntry:
        return next(t for t in self.tasks if t.id == self.current_best)


def init(prior: ParamVector) -> MixtureState:
    """Start with a single task holding the prior parameters and no mass."""
    return MixtureState(
        tasks=(TaskEntry(id=0, params=prior, prior_mass=0.0),),
        step_count=0,
        prior=prior,
        current_best=0,
    )


def crp_prior(state: MixtureState, alpha: float) -> TaskPosterior:
    """CRP prior over tasks: mass_i / (t - 1 + alpha), alpha / (t - 1 + alpha).

    state.step_count counts completed steps, so it equals t - 1 for the
    1-indexed step about to be processed. Under the mass-accounting rule in
    step() the masses sum to step_count, which keeps this normalized.
    """
    if alpha < 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    denom = state.step_count + alpha
    if denom <= 0.0:
        raise ValueError("CRP prior is undefined at step 0 with alpha == 0")
    return TaskPosterior(state.masses() / denom, alpha / denom)


def _posterior_from(
    params: list[ParamVector],
    weights: np.ndarray,
    window: TransitionWindow,
    candidate: ParamVector | None,
    alpha: float,
    lik: LikelihoodConfig,
) -> TaskPosterior:
    """Normalize likelihood * prior-weight over tasks and the candidate.

    Everything happens in log space with max-subtraction, so only ratios
    matter and long windows cannot underflow all entries at once.
    """
    with np.errstate(divide="ignore"):
        logw = np.array(
            [-nll(p, window, lik) + (np.log(w) if w > 0 else -np.inf) for p, w in zip(params, weights)]
        )
        log_new = -np.inf
        if candidate is not None and alpha > 0.0:
            log_new = -nll(candidate, window, lik) + np.log(alpha)
    peak = max(float(np.max(logw)) if logw.size else -np.inf, log_new)
    if peak == -np.inf:
        raise NumericalError("every task has zero posterior weight")
    w = np.exp(logw - peak)
    w_new = np.exp(log_new - peak) if log_new > -np.inf else 0.0
    total = float(np.sum(w)) + w_new
    return TaskPosterior(w / total, w_new / total)


def e_step(
    state: MixtureState,
    window: TransitionWindow,
    candidate_new: ParamVector | None,
    alpha: float,
    lik: LikelihoodConfig,
) -> TaskPosterior:
    """Posterior over tasks given the window; candidate_new may be None."""
    if alpha < 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return _posterior_from(
        state.task_params(), state.masses(), window, candidate_new, alpha, lik
    )


def _weighted_updates(
    params: list[ParamVector],
    probs: np.ndarray,
    window: TransitionWindow,
    lr: float,
    lik: LikelihoodConfig,
) -> list[ParamVector]:
    out = []
    for p, w in zip(params, probs):
        if w == 0.0:
            out.append(p)  # weight-0 step is a no-op; skip the gradient
        else:
            out.append(sgd_step(p, grad_nll(p, window, lik), lr, float(w)))
    return out


def m_step(
    state: MixtureState,
    window: TransitionWindow,
    posterior: TaskPosterior,
    lr: float,
    lik: LikelihoodConfig,
) -> tuple[ParamVector, ...]:
    """Posterior-weighted gradient step for every task (soft assignment)."""
    if posterior.probs.size != len(state.tasks):
        raise ValueError("posterior is not aligned with the task list")
    return tuple(_weighted_updates(state.task_params(), posterior.probs, window, lr, lik))


def spawn_candidate(
    state: MixtureState,
    recent_data: TransitionWindow,
    lr: float,
    lik: LikelihoodConfig,
) -> ParamVector:
    """New-task candidate: one full-weight step from the prior on recent data.

    recent_data must be a window disjoint from the one the candidate will be
    scored on; the caller owns that bookkeeping.
    """
    return sgd_step(state.prior, grad_nll(state.prior, recent_data, lik), lr, 1.0)


def _renormalized(probs: np.ndarray) -> np.ndarray:
    # fold the unspawned candidate's probability back over existing tasks;
    # normalize twice to pin the per-step mass total at 1 up to rounding
    q = probs / np.sum(probs)
    return q / np.sum(q)


def step(
    state: MixtureState,
    window: TransitionWindow,
    cfg: MixtureConfig,
    lik: LikelihoodConfig,
    spawn_data: TransitionWindow | None = None,
) -> tuple[MixtureState, TaskPosterior, bool]:
    """One full online EM step on the newest window.

    spawn_data is the separate window the new-task candidate adapts on;
    None (or alpha == 0) disables the candidate for this step. Returns the
    new state, the posterior used for mass assignment, and whether a task
    was spawned.
    """
    base = state.task_params()
    masses = state.masses()
    lr = cfg.online_lr

    if state.step_count == 0:
        # Degenerate first step: the CRP prior has no mass anywhere and would
        # put probability 1 on a duplicate of the prior, so anchor the initial
        # task with this step's full mass instead.
        probs = np.zeros(len(base))
        probs[0] = 1.0
        posterior = TaskPosterior(probs, 0.0)
        updated = _weighted_updates(base, probs, window, lr, lik)
        spawned = False
    else:
        candidate = None
        if spawn_data is not None and cfg.alpha > 0.0:
            candidate = spawn_candidate(state, spawn_data, lr, lik)

        posterior = None
        updated = None
        for _ in range(cfg.em_iterations):
            eval_params = base if updated is None else updated
            posterior = _posterior_from(eval_params, masses, window, candidate, cfg.alpha, lik)
            # M always re-applies from the pre-step parameters (rollback)
            updated = _weighted_updates(base, posterior.probs, window, lr, lik)

        spawned = (
            candidate is not None
            and posterior.new_task_prob > float(np.max(posterior.probs))
        )
        if spawned:
            # Discard the pre-spawn M results, admit the candidate as a full
            # member (prior weight alpha), then redo the weighted update over
            # the enlarged set.
            base = base + [candidate]
            member_weights = np.concatenate([masses, [cfg.alpha]])
            posterior = _posterior_from(base, member_weights, window, None, 0.0, lik)
            updated = _weighted_updates(base, posterior.probs, window, lr, lik)

    # Mass accounting: every step assigns exactly one unit of mass across the
    # surviving tasks (unspawned-candidate probability folded back in), so
    # the CRP normalization identity keeps holding.
    assign = _renormalized(posterior.probs)

    new_tasks = []
    for i, params in enumerate(updated):
        if i < len(state.tasks):
            entry = state.tasks[i]
            new_tasks.append(
                replace(entry, params=params, prior_mass=entry.prior_mass + float(assign[i]))
            )
        else:
            new_tasks.append(TaskEntry(id=i, params=params, prior_mass=float(assign[i])))

    # The most likely task is chosen by likelihood of the updated models,
    # not by the posterior.
    nlls = np.array([nll(p, window, lik) for p in updated])
    best = new_tasks[int(np.argmin(nlls))].id

    new_state = MixtureState(
        tasks=tuple(new_tasks),
        step_count=state.step_count + 1,
        prior=state.prior,
        current_best=best,
    )
    return new_state, posterior, spawned


# ---------------------------------------------------------------------------
# Snapshot serialization (model checkpoint header + task table; FORMATS.md)

def save_snapshot(
    path, state: MixtureState, lik: LikelihoodConfig, normalizer: Normalizer
):
    with open(path, "wb") as f:
        _write_model_header(f, state.prior.arch, lik, normalizer)
        _write_params(f, state.prior)
        f.write(struct.pack("<QII", state.step_count, state.current_best, len(state.tasks)))
        for task in state.tasks:
            f.write(struct.pack("<Id", task.id, task.prior_mass))
            _write_params(f, task.params)


def load_snapshot(path) -> tuple[MixtureState, LikelihoodConfig, Normalizer]:
    with open(path, "rb") as f:
        arch, lik, normalizer = _read_model_header(f)
        prior = _read_params(f, arch)
        step_count, best, n_tasks = struct.unpack("<QII", f.read(16))
        tasks = []
        for _ in range(n_tasks):
            task_id, mass = struct.unpack("<Id", f.read(12))
            tasks.append(TaskEntry(task_id, _read_params(f, arch), mass))
    if not tasks:
        raise ConfigError("snapshot contains no tasks")
    return MixtureState(tuple(tasks), step_count, prior, best), lik, normalizer
