"""Desk-scale simulated environments with scheduled task switching.

Physical environments integrate with semi-implicit Euler at a fixed step of
DT = 0.02 s. Task parameters (slope angle, actuator gain, crippled-joint
mask, linear system matrices) change over a trial according to a
TaskSchedule; the learner is never told where the switches are.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScheduleParseError

DT = 0.02
GRAVITY = 9.81


# ---------------------------------------------------------------------------
# Task parameter types

@dataclass(frozen=True)
class SlopeTask:
    angle: float  # terrain slope in radians, uphill positive


@dataclass(frozen=True)
class GainTask:
    gain: float  # actuator multiplier; sign flips model polarity faults


@dataclass(frozen=True)
class CrippleTask:
    mask: tuple[int, ...]  # 1 = joint works, 0 = actuator command ignored


@dataclass(frozen=True)
class LinTask:
    a_mat: tuple[tuple[float, ...], ...]
    b_mat: tuple[tuple[float, ...], ...]
    noise_std: float

    def a(self) -> np.ndarray:
        return np.asarray(self.a_mat, dtype=np.float64)

    def b(self) -> np.ndarray:
        return np.asarray(self.b_mat, dtype=np.float64)


class Environment:
    """Shared behavior: action clipping, batched rewards, task dict codecs."""

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    named_tasks: dict

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)

    def reward(self, state: np.ndarray, action: np.ndarray) -> float:
        return float(self.reward_batch(np.asarray(state)[None, :], np.asarray(action)[None, :])[0])

    def named_task(self, name: str):
        try:
            return self.named_tasks[name]
        except KeyError:
            raise ConfigError(
                f"unknown task name {name!r} for env {self.name}; "
                f"known: {sorted(self.named_tasks)}"
            ) from None

    def sample_test_task(self, rng: np.random.Generator):
        return self.sample_train_task(rng)

    def interpolate_task(self, a, b, frac: float):
        raise ConfigError(f"env {self.name} does not support gradual task interpolation")

    # subclasses implement:
    #   initial_state(rng), step(state, action, task, rng),
    #   reward_batch(states, actions), sample_train_task(rng),
    #   validate_task(task), task_to_dict(task), task_from_dict(d)


class SlopePoint(Environment):
    """1-D point mass pushed along sloped terrain.

    State [x, v] (m, m/s), action [f] (N). Acceleration is
    (f - m*g*sin(angle) - drag*v) / m; reward is forward velocity.
    """

    name = "slope_point"
    state_dim = 2
    action_dim = 1

    def __init__(self, mass: float = 1.0, drag: float = 0.5):
        self.mass = mass
        self.drag = drag
        self.action_low = np.array([-3.0])
        self.action_high = np.array([3.0])
        deg = np.pi / 180.0
        self.named_tasks = {
            "flat": SlopeTask(0.0),
            "gentle_up": SlopeTask(4.0 * deg),
            "uphill": SlopeTask(15.0 * deg),
            "downhill": SlopeTask(-15.0 * deg),
            "steep_up": SlopeTask(20.0 * deg),
            "steep_down": SlopeTask(-20.0 * deg),
        }

    def validate_task(self, task):
        if not isinstance(task, SlopeTask) or abs(task.angle) > 25.0 * np.pi / 180.0:
            raise ConfigError(f"invalid slope task {task!r}")

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([0.0, 0.1 * rng.standard_normal()])

    def step(self, state, action, task, rng):
        self.validate_task(task)
        f = self.clip_action(action)[0]
        x, v = state
        acc = (f - self.mass * GRAVITY * np.sin(task.angle) - self.drag * v) / self.mass
        v_next = v + DT * acc
        x_next = x + DT * v_next
        return np.array([x_next, v_next]), self.reward(state, action)

    def reward_batch(self, states, actions):
        return np.asarray(states, dtype=np.float64)[:, 1]

    def sample_train_task(self, rng):
        # train slopes stay shallow; named test tasks go out of range
        return SlopeTask(float(rng.uniform(-5.0, 5.0)) * np.pi / 180.0)

    def interpolate_task(self, a, b, frac):
        return SlopeTask((1.0 - frac) * a.angle + frac * b.angle)

    def task_to_dict(self, task):
        return {"angle": task.angle}

    def task_from_dict(self, d):
        return SlopeTask(float(d["angle"]))


class GainPendulum(Environment):
    """Torque-balanced inverted pendulum with a faulty actuator gain.

    State [cos(th), sin(th), thdot] with th = 0 upright, action [torque].
    The applied torque is gain * torque; gain magnitude or polarity changes
    are the fault model. Reward is uprightness cos(th).
    """

    name = "gain_pendulum"
    state_dim = 3
    action_dim = 1

    def __init__(self, mass: float = 0.6, length: float = 0.5, damping: float = 0.15):
        self.mass = mass
        self.length = length
        self.damping = damping
        self.inertia = mass * length * length
        self.action_low = np.array([-3.0])
        self.action_high = np.array([3.0])
        self.named_tasks = {
            "normal": GainTask(1.0),
            "reversed": GainTask(-1.0),
            "weak": GainTask(0.4),
            "strong": GainTask(1.5),
            "unactuated": GainTask(0.0),
        }

    def validate_task(self, task):
        if not isinstance(task, GainTask) or abs(task.gain) > 1.5:
            raise ConfigError(f"invalid gain task {task!r}; |gain| <= 1.5")

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        th = 0.15 * rng.standard_normal()
        thdot = 0.1 * rng.standard_normal()
        return np.array([np.cos(th), np.sin(th), thdot])

    def step(self, state, action, task, rng):
        self.validate_task(task)
        torque = task.gain * self.clip_action(action)[0]
        th = np.arctan2(state[1], state[0])
        thdot = state[2]
        # inverted convention: gravity torque +m*g*l*sin(th) pushes away from upright
        acc = (
            self.mass * GRAVITY * self.length * np.sin(th)
            - self.damping * thdot
            + torque
        ) / self.inertia
        thdot_next = thdot + DT * acc
        th_next = th + DT * thdot_next
        next_state = np.array([np.cos(th_next), np.sin(th_next), thdot_next])
        return next_state, self.reward(state, action)

    def reward_batch(self, states, actions):
        return np.asarray(states, dtype=np.float64)[:, 0]

    def energy(self, state) -> float:
        """Kinetic plus gravitational potential, for conservation checks."""
        thdot = state[2]
        return 0.5 * self.inertia * thdot * thdot + self.mass * GRAVITY * self.length * state[0]

    def sample_train_task(self, rng):
        magnitude = rng.uniform(0.6, 1.2)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return GainTask(float(sign * magnitude))

    def interpolate_task(self, a, b, frac):
        return GainTask((1.0 - frac) * a.gain + frac * b.gain)

    def task_to_dict(self, task):
        return {"gain": task.gain}

    def task_from_dict(self, d):
        return GainTask(float(d["gain"]))


class CrippleArm(Environment):
    """Planar 3-link reacher whose masked joints ignore actuator commands.

    State [q1 q2 q3 qd1 qd2 qd3], action = 3 joint torques. Joints are
    damped decoupled rotors (horizontal plane, no gravity). Reward is the
    negative distance from fingertip to a fixed goal.
    """

    name = "cripple_arm"
    state_dim = 6
    action_dim = 3

    LINKS = np.array([0.5, 0.4, 0.3])
    GOAL_Q = np.array([0.6, 0.4, 0.2])

    def __init__(self, inertia: float = 0.5, damping: float = 0.8):
        self.inertia = inertia
        self.damping = damping
        self.action_low = -2.0 * np.ones(3)
        self.action_high = 2.0 * np.ones(3)
        self.goal = self._tip(self.GOAL_Q[None, :])[0]
        self.named_tasks = {
            "normal": CrippleTask((1, 1, 1)),
            "crippled": CrippleTask((0, 1, 1)),
            "crippled_mid": CrippleTask((1, 0, 1)),
            "crippled_tip": CrippleTask((1, 1, 0)),
        }

    def validate_task(self, task):
        if (
            not isinstance(task, CrippleTask)
            or len(task.mask) != 3
            or any(m not in (0, 1) for m in task.mask)
        ):
            raise ConfigError(f"invalid cripple task {task!r}")

    def _tip(self, q: np.ndarray) -> np.ndarray:
        angles = np.cumsum(q, axis=1)
        x = (self.LINKS * np.cos(angles)).sum(axis=1)
        y = (self.LINKS * np.sin(angles)).sum(axis=1)
        return np.stack([x, y], axis=1)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        q = 0.1 * rng.standard_normal(3)
        return np.concatenate([q, np.zeros(3)])

    def step(self, state, action, task, rng):
        self.validate_task(task)
        torque = np.asarray(task.mask, dtype=np.float64) * self.clip_action(action)
        q, qd = state[:3], state[3:]
        acc = (torque - self.damping * qd) / self.inertia
        qd_next = qd + DT * acc
        q_next = q + DT * qd_next
        return np.concatenate([q_next, qd_next]), self.reward(state, action)

    def reward_batch(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        tips = self._tip(states[:, :3])
        return -np.linalg.norm(tips - self.goal, axis=1)

    def sample_train_task(self, rng):
        # normal operation or one random crippled joint
        j = int(rng.integers(0, 4))
        mask = [1, 1, 1]
        if j < 3:
            mask[j] = 0
        return CrippleTask(tuple(mask))

    def task_to_dict(self, task):
        return {"mask": list(task.mask)}

    def task_from_dict(self, d):
        return CrippleTask(tuple(int(m) for m in d["mask"]))


class SwitchLin(Environment):
    """Linear-Gaussian system s' = A s + B a + noise, with exact densities.

    Reward is -||s||^2. Tasks parameterize (A, B, noise_std); A is a damped
    rotation so every mode is stable. The closed-form transition density
    makes this the oracle environment for inference tests.
    """

    name = "switch_lin"
    state_dim = 2
    action_dim = 1

    def __init__(self):
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self.named_tasks = {
            "mode_a": self.make_task(0.9, 0.5, 1.0),
            "mode_b": self.make_task(0.9, -0.5, 1.0),
            "mode_c": self.make_task(0.8, 0.0, 1.0),
        }

    @staticmethod
    def make_task(radius: float, turn: float, b_scale: float, noise_std: float = 0.05) -> LinTask:
        c, s = np.cos(turn), np.sin(turn)
        a = radius * np.array([[c, -s], [s, c]])
        b = b_scale * np.array([[0.0], [1.0]])
        return LinTask(tuple(map(tuple, a)), tuple(map(tuple, b)), noise_std)

    def validate_task(self, task):
        if not isinstance(task, LinTask):
            raise ConfigError(f"invalid linear task {task!r}")
        if task.a().shape != (2, 2) or task.b().shape != (2, 1):
            raise ConfigError("linear task matrices must be A: 2x2, B: 2x1")
        if not task.noise_std >= 0.0:
            raise ConfigError("noise_std must be nonnegative")

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 1.0, size=2)

    def step(self, state, action, task, rng):
        self.validate_task(task)
        a = self.clip_action(action)
        mean = task.a() @ state + (task.b() @ a).ravel()
        noise = task.noise_std * rng.standard_normal(2)
        return mean + noise, self.reward(state, action)

    def reward_batch(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        return -np.sum(states * states, axis=1)

    def transition_logpdf(self, task, state, action, next_state) -> float:
        """Closed-form log density of one transition (isotropic Gaussian)."""
        a = self.clip_action(action)
        mean = task.a() @ np.asarray(state) + (task.b() @ a).ravel()
        resid = np.asarray(next_state) - mean
        var = task.noise_std**2
        return float(-0.5 * resid @ resid / var - np.log(2.0 * np.pi * var))

    def sample_train_task(self, rng):
        return self.make_task(
            radius=float(rng.uniform(0.75, 0.95)),
            turn=float(rng.uniform(-0.6, 0.6)),
            b_scale=float(rng.uniform(0.8, 1.2)),
        )

    def task_to_dict(self, task):
        return {
            "a_mat": [list(r) for r in task.a_mat],
            "b_mat": [list(r) for r in task.b_mat],
            "noise_std": task.noise_std,
        }

    def task_from_dict(self, d):
        return LinTask(
            tuple(tuple(float(v) for v in r) for r in d["a_mat"]),
            tuple(tuple(float(v) for v in r) for r in d["b_mat"]),
            float(d["noise_std"]),
        )


_REGISTRY = {
    cls.name: cls for cls in (SlopePoint, GainPendulum, CrippleArm, SwitchLin)
}


def env_names() -> list[str]:
    return sorted(_REGISTRY)


def make_env(name: str) -> Environment:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; known: {env_names()}") from None


# ---------------------------------------------------------------------------
# Task schedules

@dataclass(frozen=True)
class Segment:
    duration: int
    task: object

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("segment durations must be >= 1")


@dataclass(frozen=True)
class TaskSchedule:
    """Per-step task assignment over a trial, plus segment metadata."""

    segments: tuple[Segment, ...]
    per_step: tuple
    gradual: bool = False

    def __post_init__(self):
        if sum(s.duration for s in self.segments) != len(self.per_step):
            raise ValueError("segment durations must sum to the trial length")

    @property
    def total(self) -> int:
        return len(self.per_step)

    def task_at(self, t: int):
        return self.per_step[t]

    def boundaries(self) -> list[tuple[int, int]]:
        """(start, duration) per segment."""
        out, start = [], 0
        for seg in self.segments:
            out.append((start, seg.duration))
            start += seg.duration
        return out


_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z_0-9]*|-?\d+(?:\.\d+)?|[(),=])")


def _tokenize(spec: str):
    pos, out = 0, []
    while pos < len(spec):
        m = _TOKEN.match(spec, pos)
        if m is None:
            raise ScheduleParseError(f"unexpected character {spec[pos]!r}", pos)
        out.append((m.group(1), m.start(1)))
        pos = m.end()
    return out


def _parse_call(spec: str):
    """name(arg, ..., key=value, ...) -> (name, positional args, kwargs)."""
    toks = _tokenize(spec)
    if not toks or not toks[0][0].isidentifier():
        raise ScheduleParseError("expected a schedule mode name", 0)
    name = toks[0][0]
    if len(toks) < 3 or toks[1][0] != "(" or toks[-1][0] != ")":
        raise ScheduleParseError(f"expected {name}(...)", toks[0][1])
    args, kwargs = [], {}
    i = 2
    while i < len(toks) - 1:
        tok, tpos = toks[i]
        if i + 1 < len(toks) - 1 and toks[i + 1][0] == "=":
            if i + 2 >= len(toks) - 1:
                raise ScheduleParseError(f"missing value for {tok}", tpos)
            kwargs[tok] = toks[i + 2][0]
            i += 3
        else:
            args.append((tok, tpos))
            i += 1
        if i < len(toks) - 1:
            if toks[i][0] != ",":
                raise ScheduleParseError("expected ','", toks[i][1])
            i += 1
    return name, args, kwargs


def _resolve_task(env: Environment, token: str, pos: int):
    try:
        return env.named_task(token)
    except ConfigError:
        raise ScheduleParseError(
            f"unknown task {token!r} for env {env.name}", pos
        ) from None


def _expand(segments: list[Segment]) -> TaskSchedule:
    per_step = []
    for seg in segments:
        per_step.extend([seg.task] * seg.duration)
    return TaskSchedule(tuple(segments), tuple(per_step))


def make_schedule(
    spec: str, env: Environment, trial_length: int, seed: int | None = None
) -> TaskSchedule:
    """Parse a schedule spec string into a per-step task assignment.

    Modes:
      constant(task)  or  constant(key=value, ...)
      alternate(task_a, task_b, segment_length)
      random(segment_length)            -- tasks drawn from the env sampler
      gradual(task_a, task_b)           -- linear interpolation over the trial
    """
    if trial_length < 0:
        raise ConfigError(f"trial_length must be >= 0, got {trial_length}")
    if trial_length == 0:
        return TaskSchedule((), ())
    name, args, kwargs = _parse_call(spec)

    if name == "constant":
        if kwargs:
            task = env.task_from_dict({k: float(v) for k, v in kwargs.items()})
            env.validate_task(task)
        elif len(args) == 1:
            task = _resolve_task(env, *args[0])
        else:
            raise ScheduleParseError("constant() takes one task name or key=value params", 0)
        return _expand([Segment(trial_length, task)])

    if name == "alternate":
        if len(args) != 3 or kwargs:
            raise ScheduleParseError("alternate(task_a, task_b, segment_length)", 0)
        task_a = _resolve_task(env, *args[0])
        task_b = _resolve_task(env, *args[1])
        try:
            seglen = int(args[2][0])
        except ValueError:
            raise ScheduleParseError("segment_length must be an integer", args[2][1]) from None
        if seglen < 1:
            raise ScheduleParseError("segment_length must be >= 1", args[2][1])
        segments, left, which = [], trial_length, 0
        while left > 0:
            d = min(seglen, left)
            segments.append(Segment(d, task_a if which == 0 else task_b))
            left -= d
            which ^= 1
        return _expand(segments)

    if name == "random":
        if len(args) != 1 or kwargs:
            raise ScheduleParseError("random(segment_length)", 0)
        try:
            seglen = int(args[0][0])
        except ValueError:
            raise ScheduleParseError("segment_length must be an integer", args[0][1]) from None
        if seglen < 1:
            raise ScheduleParseError("segment_length must be >= 1", args[0][1])
        rng = np.random.default_rng(seed)
        segments, left = [], trial_length
        while left > 0:
            d = min(seglen, left)
            segments.append(Segment(d, env.sample_test_task(rng)))
            left -= d
        return _expand(segments)

    if name == "gradual":
        if len(args) != 2 or kwargs:
            raise ScheduleParseError("gradual(task_a, task_b)", 0)
        task_a = _resolve_task(env, *args[0])
        task_b = _resolve_task(env, *args[1])
        denom = max(trial_length - 1, 1)
        per_step = tuple(
            env.interpolate_task(task_a, task_b, t / denom) for t in range(trial_length)
        )
        return TaskSchedule((Segment(trial_length, task_a),), per_step, gradual=True)

    raise ScheduleParseError(f"unknown schedule mode {name!r}", 0)
