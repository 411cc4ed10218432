"""Fixed-architecture MLP dynamics models over flat parameter vectors.

Everything is float64. A model's parameters live in one contiguous vector so
that task mixtures can copy, update, compare and serialize whole models
cheaply; per-layer weights are read-only views into that vector. All
operations are pure: updates return new vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

CHECKPOINT_MAGIC = b"DMXCKPT\x01"


@dataclass(frozen=True)
class NetArchitecture:
    """MLP shape: input -> hidden layers (ReLU) -> linear output."""

    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (500, 500, 500)

    def __post_init__(self):
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) pairs from input to output."""
        widths = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat float64 parameter vector tied to an architecture."""

    values: np.ndarray
    arch: NetArchitecture

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if vals.size != self.arch.param_count:
            raise ValueError(
                f"expected {self.arch.param_count} parameters, got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise NumericalError("parameter vector contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views per layer; W has shape (fan_in, fan_out)."""
        out = []
        off = 0
        for fi, fo in self.arch.layer_dims:
            w = self.values[off : off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = self.values[off : off + fo]
            off += fo
            out.append((w, b))
        return out


def init_params(arch: NetArchitecture, rng: np.random.Generator) -> ParamVector:
    """He-normal weights, zero biases."""
    chunks = []
    for fi, fo in arch.layer_dims:
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fi), size=fi * fo))
        chunks.append(np.zeros(fo))
    return ParamVector(np.concatenate(chunks), arch)


@dataclass(frozen=True)
class LikelihoodConfig:
    """Gaussian observation model: constant per-dimension variance."""

    variance: float = 1.0

    def __post_init__(self):
        if not (self.variance > 0.0 and np.isfinite(self.variance)):
            raise ValueError(f"variance must be positive, got {self.variance}")


@dataclass(frozen=True)
class TransitionWindow:
    """A batch of K (input, target) rows from consecutive transitions.

    Each input row is one state-action concatenation, each target row the
    successor state. Rows are stored in stream order but every operation on
    a window treats the rows as an unordered set.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inp = np.array(self.inputs, dtype=np.float64, copy=True)
        tgt = np.array(self.targets, dtype=np.float64, copy=True)
        if inp.ndim != 2 or tgt.ndim != 2:
            raise ValueError("inputs and targets must be 2-D row matrices")
        if inp.shape[0] != tgt.shape[0] or inp.shape[0] < 1:
            raise ValueError(
                f"inputs/targets need an equal, positive row count, got "
                f"{inp.shape[0]} and {tgt.shape[0]}"
            )
        inp.setflags(write=False)
        tgt.setflags(write=False)
        object.__setattr__(self, "inputs", inp)
        object.__setattr__(self, "targets", tgt)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def _check_window(params: ParamVector, window: TransitionWindow):
    arch = params.arch
    if window.inputs.shape[1] != arch.input_dim:
        raise ValueError(
            f"window input width {window.inputs.shape[1]} != arch input_dim {arch.input_dim}"
        )
    if window.targets.shape[1] != arch.output_dim:
        raise ValueError(
            f"window target width {window.targets.shape[1]} != arch output_dim {arch.output_dim}"
        )


def forward_batch(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Evaluate the network on a (n, input_dim) matrix of inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ValueError(
            f"expected inputs of shape (n, {params.arch.input_dim}), got {x.shape}"
        )
    layers = params.layers()
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = layers[-1]
    return h @ w + b


def forward(params: ParamVector, input_vec: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(input_vec, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D input vector, got shape {x.shape}")
    return forward_batch(params, x[None, :])[0]


def _log_norm_constant(lik: LikelihoodConfig, output_dim: int) -> float:
    # per-row constant: d * log(sigma * sqrt(2*pi))
    return output_dim * 0.5 * (np.log(2.0 * np.pi) + np.log(lik.variance))


def nll(params: ParamVector, window: TransitionWindow, lik: LikelihoodConfig) -> float:
    """Negative log-likelihood of the window under the Gaussian model.

    Sum over rows of ||target - f(input)||^2 / (2 sigma^2) plus the
    normalizing constant, so values are comparable across sigma.
    """
    _check_window(params, window)
    resid = forward_batch(params, window.inputs) - window.targets
    k, d = window.targets.shape
    return float(np.sum(resid * resid) / (2.0 * lik.variance) + k * _log_norm_constant(lik, d))


def grad_nll(
    params: ParamVector, window: TransitionWindow, lik: LikelihoodConfig
) -> ParamVector:
    """Exact reverse-mode gradient of nll with respect to every parameter."""
    _check_window(params, window)
    layers = params.layers()

    acts = [window.inputs]
    pre = []
    h = window.inputs
    for w, b in layers[:-1]:
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    w_out, b_out = layers[-1]
    pred = h @ w_out + b_out

    delta = (pred - window.targets) / lik.variance
    grads: list[tuple[np.ndarray, np.ndarray]] = [(np.empty(0),) * 2] * len(layers)
    grads[-1] = (acts[-1].T @ delta, delta.sum(axis=0))
    back = delta
    for li in range(len(layers) - 2, -1, -1):
        back = back @ layers[li + 1][0].T
        back = np.where(pre[li] > 0.0, back, 0.0)
        grads[li] = (acts[li].T @ back, back.sum(axis=0))

    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return ParamVector(flat, params.arch)


def sgd_step(
    params: ParamVector, grad: ParamVector, lr: float, weight: float = 1.0
) -> ParamVector:
    """One weighted gradient step: params - lr * weight * grad.

    The input vector is never modified; callers rely on keeping the old
    parameters for rollback and copies.
    """
    if grad.arch != params.arch:
        raise ValueError("gradient and parameters have mismatched architectures")
    if lr < 0.0 or not np.isfinite(lr):
        raise ValueError(f"lr must be a finite nonnegative real, got {lr}")
    if not (0.0 <= weight <= 1.0):
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    # ParamVector construction re-checks finiteness, so an overflowing update
    # surfaces as NumericalError here.
    return ParamVector(params.values - lr * weight * grad.values, params.arch)


@dataclass(frozen=True)
class Normalizer:
    """Frozen per-dimension input/target whitening statistics."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        for name in ("in_mean", "in_std", "out_mean", "out_std"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True).ravel()
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"normalizer field {name} is non-finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.in_std <= 0.0) or np.any(self.out_std <= 0.0):
            raise ValueError("normalizer stds must be positive")

    @classmethod
    def identity(cls, input_dim: int, output_dim: int) -> "Normalizer":
        return cls(
            np.zeros(input_dim), np.ones(input_dim), np.zeros(output_dim), np.ones(output_dim)
        )

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray, floor: float = 1e-6) -> "Normalizer":
        """Per-dimension mean/std from raw (input, target) rows; stds floored."""
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        return cls(
            inputs.mean(axis=0),
            np.maximum(inputs.std(axis=0), floor),
            targets.mean(axis=0),
            np.maximum(targets.std(axis=0), floor),
        )

    def norm_in(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.in_mean) / self.in_std

    def norm_out(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.out_mean) / self.out_std

    def denorm_out(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.out_std + self.out_mean


@dataclass(frozen=True)
class DynamicsModel:
    """Architecture + noise model + normalization, bridging raw and model space.

    Networks always see whitened inputs/targets; raw-space callers (planner,
    trial loop) go through predict_batch / window.
    """

    arch: NetArchitecture
    lik: LikelihoodConfig
    normalizer: Normalizer

    def predict_batch(
        self, params: ParamVector, states: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return self.normalizer.denorm_out(forward_batch(params, self.normalizer.norm_in(x)))

    def predict(self, params: ParamVector, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return self.predict_batch(params, state[None, :], action[None, :])[0]

    def window(
        self, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray
    ) -> TransitionWindow:
        """Build a whitened TransitionWindow from raw transition arrays."""
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return TransitionWindow(
            self.normalizer.norm_in(x), self.normalizer.norm_out(np.atleast_2d(next_states))
        )


# ---------------------------------------------------------------------------
# Checkpoint serialization (exact byte layout documented in FORMATS.md)

def _write_model_header(f, arch: NetArchitecture, lik: LikelihoodConfig, normalizer: Normalizer):
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<III", arch.input_dim, arch.output_dim, len(arch.hidden_dims)))
    f.write(struct.pack(f"<{len(arch.hidden_dims)}I", *arch.hidden_dims))
    f.write(struct.pack("<d", lik.variance))
    for field in (normalizer.in_mean, normalizer.in_std, normalizer.out_mean, normalizer.out_std):
        f.write(np.asarray(field, dtype="<f8").tobytes())


def _read_model_header(f) -> tuple[NetArchitecture, LikelihoodConfig, Normalizer]:
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"bad checkpoint magic {magic!r}")
    input_dim, output_dim, n_hidden = struct.unpack("<III", f.read(12))
    hidden = struct.unpack(f"<{n_hidden}I", f.read(4 * n_hidden))
    arch = NetArchitecture(input_dim, output_dim, tuple(hidden))
    (variance,) = struct.unpack("<d", f.read(8))
    fields = []
    for dim in (input_dim, input_dim, output_dim, output_dim):
        fields.append(np.frombuffer(f.read(8 * dim), dtype="<f8"))
    return arch, LikelihoodConfig(variance), Normalizer(*fields)


def _write_params(f, params: ParamVector):
    f.write(struct.pack("<Q", params.values.size))
    f.write(params.values.astype("<f8").tobytes())


def _read_params(f, arch: NetArchitecture) -> ParamVector:
    (count,) = struct.unpack("<Q", f.read(8))
    if count != arch.param_count:
        raise ConfigError(f"checkpoint has {count} params, architecture wants {arch.param_count}")
    return ParamVector(np.frombuffer(f.read(8 * count), dtype="<f8"), arch)


def save_checkpoint(path, params: ParamVector, lik: LikelihoodConfig, normalizer: Normalizer):
    """Write a model checkpoint: header + little-endian float64 parameters."""
    with open(path, "wb") as f:
        _write_model_header(f, params.arch, lik, normalizer)
        _write_params(f, params)


def load_checkpoint(path) -> tuple[ParamVector, LikelihoodConfig, Normalizer]:
    with open(path, "rb") as f:
        arch, lik, normalizer = _read_model_header(f)
        params = _read_params(f, arch)
    return params, lik, normalizer
