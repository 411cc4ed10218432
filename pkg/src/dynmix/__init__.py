"""Online mixtures of meta-trained neural dynamics models for MPC."""

from .net import (
    DynamicsModel,
    LikelihoodConfig,
    NetArchitecture,
    Normalizer,
    ParamVector,
    TransitionWindow,
    forward,
    forward_batch,
    grad_nll,
    init_params,
    load_checkpoint,
    nll,
    save_checkpoint,
    sgd_step,
)
from .mixture import MixtureConfig, MixtureState, TaskEntry, TaskPosterior
from .meta import Dataset, MetaBatch, MetaConfig, inner_adapt, meta_gradient, meta_train
from .control import ControllerConfig, TrialLog, TrialSettings, plan, run_trial
from .envs import TaskSchedule, env_names, make_env, make_schedule
from .harness import METHODS, RunConfig, run, summarize

__all__ = [
    "ControllerConfig",
    "Dataset",
    "DynamicsModel",
    "LikelihoodConfig",
    "METHODS",
    "MetaBatch",
    "MetaConfig",
    "MixtureConfig",
    "MixtureState",
    "NetArchitecture",
    "Normalizer",
    "ParamVector",
    "RunConfig",
    "TaskEntry",
    "TaskPosterior",
    "TaskSchedule",
    "TransitionWindow",
    "TrialLog",
    "TrialSettings",
    "env_names",
    "forward",
    "forward_batch",
    "grad_nll",
    "init_params",
    "inner_adapt",
    "load_checkpoint",
    "make_env",
    "make_schedule",
    "meta_gradient",
    "meta_train",
    "nll",
    "plan",
    "run",
    "run_trial",
    "save_checkpoint",
    "sgd_step",
    "summarize",
]
