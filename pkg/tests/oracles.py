"""Independent reference implementations used only by the test suite.

Everything here deliberately avoids the library's own computation paths:
forward passes are plain Python loops, gradients come from finite
differences, posteriors from direct Bayes arithmetic on closed-form
densities.
"""

import math

import numpy as np

from dynmix.net import NetArchitecture, ParamVector, nll


def naive_forward(params: ParamVector, x):
    """Loop-based MLP evaluation, no vectorized matmul."""
    arch = params.arch
    vals = params.values
    widths = [arch.input_dim, *arch.hidden_dims, arch.output_dim]
    h = [float(v) for v in x]
    off = 0
    for li in range(len(widths) - 1):
        fi, fo = widths[li], widths[li + 1]
        w = vals[off : off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = vals[off : off + fo]
        off += fo
        out = []
        for j in range(fo):
            acc = float(b[j])
            for i in range(fi):
                acc += h[i] * float(w[i, j])
            if li < len(widths) - 2:
                acc = max(acc, 0.0)
            out.append(acc)
        h = out
    return np.array(h)


def rowwise_gaussian_nll(params: ParamVector, window, variance: float) -> float:
    """Sum of per-row isotropic Gaussian negative log densities."""
    total = 0.0
    for x, y in zip(window.inputs, window.targets):
        mean = naive_forward(params, x)
        for m, t in zip(mean, y):
            total -= math.log(
                math.exp(-((t - m) ** 2) / (2.0 * variance))
                / math.sqrt(2.0 * math.pi * variance)
            )
    return total


def fd_gradient(fn, values: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(values)
    for i in range(values.size):
        up = values.copy()
        dn = values.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (fn(up) - fn(dn)) / (2.0 * step)
    return g


def fd_nll_gradient(params: ParamVector, window, lik, step: float = 1e-5) -> np.ndarray:
    return fd_gradient(
        lambda v: nll(ParamVector(v, params.arch), window, lik), params.values.copy(), step
    )


def linear_embed_arch(in_dim: int, out_dim: int) -> NetArchitecture:
    return NetArchitecture(in_dim, out_dim, (2 * in_dim,))


def linear_embed_params(matrix: np.ndarray, arch: NetArchitecture) -> ParamVector:
    """Network computing exactly y = M x via relu(x) - relu(-x) = x."""
    m = np.asarray(matrix, dtype=np.float64)
    out_dim, in_dim = m.shape
    assert arch.input_dim == in_dim and arch.output_dim == out_dim
    assert arch.hidden_dims == (2 * in_dim,)
    w1 = np.concatenate([np.eye(in_dim), -np.eye(in_dim)], axis=1)  # (in, 2in)
    b1 = np.zeros(2 * in_dim)
    w2 = np.concatenate([m.T, -m.T], axis=0)  # (2in, out)
    b2 = np.zeros(out_dim)
    return ParamVector(
        np.concatenate([w1.ravel(), b1, w2.ravel(), b2]), arch
    )


def lin_transition_matrix(task) -> np.ndarray:
    """[A | B] so that next_state = M @ concat(state, action)."""
    return np.concatenate([task.a(), task.b()], axis=1)


class CrpBayesOracle:
    """Brute-force Bayes-with-CRP tracker over closed-form mode densities.

    Mirrors the documented algorithm semantics (first-step anchoring,
    renormalized mass assignment, strictly-greater spawning) but computes
    likelihoods directly from the linear-Gaussian formulas instead of any
    network, and keeps its own mass accounting.
    """

    def __init__(self, mode_matrices, prior_matrix, alpha, variance):
        self.modes = [np.asarray(m, dtype=np.float64) for m in mode_matrices]
        self.prior_matrix = np.asarray(prior_matrix, dtype=np.float64)
        self.alpha = alpha
        self.variance = variance
        self.masses = [0.0 for _ in self.modes]
        self.steps = 0

    def _log_lik(self, matrix, inputs, targets) -> float:
        total = 0.0
        d = targets.shape[1]
        const = d * 0.5 * math.log(2.0 * math.pi * self.variance)
        for x, y in zip(inputs, targets):
            r = y - matrix @ x
            total += -float(r @ r) / (2.0 * self.variance) - const
        return total

    def step(self, inputs, targets, candidate_enabled=True):
        """Returns (probs, new_prob, spawned) and updates masses."""
        if self.steps == 0:
            probs = np.zeros(len(self.modes))
            probs[0] = 1.0
            self.masses[0] += 1.0
            self.steps = 1
            return probs, 0.0, False
        logs = []
        for m, mass in zip(self.modes, self.masses):
            logs.append(
                self._log_lik(m, inputs, targets)
                + (math.log(mass) if mass > 0 else -math.inf)
            )
        if candidate_enabled and self.alpha > 0:
            logs.append(self._log_lik(self.prior_matrix, inputs, targets) + math.log(self.alpha))
        else:
            logs.append(-math.inf)
        peak = max(logs)
        weights = [math.exp(v - peak) if v > -math.inf else 0.0 for v in logs]
        total = sum(weights)
        probs = np.array(weights[:-1]) / total
        new_prob = weights[-1] / total
        spawned = candidate_enabled and new_prob > probs.max()
        if spawned:
            # candidate joins with prior weight alpha (frozen models: its
            # parameters stay the prior matrix)
            self.modes.append(self.prior_matrix)
            member_logs = logs[:-1] + [
                self._log_lik(self.prior_matrix, inputs, targets) + math.log(self.alpha)
            ]
            peak = max(member_logs)
            weights = [math.exp(v - peak) for v in member_logs]
            total = sum(weights)
            probs = np.array(weights) / total
            new_prob = 0.0
            self.masses.append(0.0)
        assign = probs / probs.sum()
        assign = assign / assign.sum()
        for i in range(len(self.masses)):
            self.masses[i] += assign[i]
        self.steps += 1
        return probs, new_prob, spawned
