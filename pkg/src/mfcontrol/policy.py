"""Neural feedback control and its pathwise gradient.

A single multilayer perceptron, conditioned on (normalized) time, maps
per-particle features to controls:

    features (t/T, v)        when beta = 0   (input dim d+1)
    features (t/T, x, v)     when beta > 0   (input dim 2d+1)

`rollout_cost_and_grad` differentiates the empirical objective of a full
M-step particle rollout with respect to every weight and bias, holding the
Brownian increments fixed (pathwise derivative).  The backward sweep is a
hand-derived adjoint recursion over the Euler update; it propagates through
the interaction term (every particle's state influences every other's drift
when beta > 0) and through the empirical means inside the cost.  Finite
differences validate it; see the test suite.

Determinism under data parallelism: the network forward/backward always
splits particles into fixed-size chunks (CHUNK rows) and reduces per-chunk
gradients in chunk-index order.  A worker pool only changes which thread
computes a chunk, never the arithmetic, so any worker count yields
bit-identical results.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core import Ensemble, SeededStream, TimeGrid
from .dynamics import CsParams, _interaction

__all__ = [
    "CHUNK",
    "MlpPolicy",
    "AdamState",
    "LrSchedule",
    "init_policy",
    "mlp_forward",
    "flatten_params",
    "replace_params",
    "feature_dim",
    "policy_features",
    "feedback_from_mlp",
    "rollout_cost_and_grad",
    "adam_step",
    "init_adam_state",
    "lr_at",
    "save_policy",
    "load_policy",
]

CHUNK = 256  # fixed data-parallel chunk length (particles per network call)

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpPolicy:
    """Fully connected network; hidden activation relu (default) or tanh,
    identity on the output layer.  Weights are (fan_in, fan_out)."""

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    hidden_activation: str = "relu"

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {self.layer_dims}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("need one weight matrix and bias vector per layer")
        ws, bs = [], []
        for l, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            w = np.asarray(self.weights[l], dtype=np.float64)
            b = np.asarray(self.biases[l], dtype=np.float64)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape} "
                                 f"inconsistent with dims {dims}")
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_policy(dims: Sequence[int], seed: int, hidden_activation: str = "relu") -> MlpPolicy:
    """Weights uniform on +-sqrt(6/(fan_in+fan_out)), biases zero."""
    stream = SeededStream(seed, "mlp-init")
    dims = tuple(int(d) for d in dims)
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        u = stream.uniforms(step=l, n=fan_in, d=fan_out)
        weights.append((2.0 * u - 1.0) * limit)
        biases.append(np.zeros(fan_out))
    return MlpPolicy(layer_dims=dims, weights=tuple(weights), biases=tuple(biases),
                     hidden_activation=hidden_activation)


def flatten_params(policy: MlpPolicy) -> np.ndarray:
    """All parameters as one vector: W0 row-major, b0, W1, b1, ..."""
    parts = []
    for w, b in zip(policy.weights, policy.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def replace_params(policy: MlpPolicy, theta: np.ndarray) -> MlpPolicy:
    """Rebuild a policy from a flat parameter vector (inverse of flatten_params)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (policy.n_params,):
        raise ValueError(f"expected {policy.n_params} parameters, got {theta.shape}")
    weights, biases, pos = [], [], 0
    for w, b in zip(policy.weights, policy.biases):
        weights.append(theta[pos : pos + w.size].reshape(w.shape))
        pos += w.size
        biases.append(theta[pos : pos + b.size])
        pos += b.size
    return replace(policy, weights=tuple(weights), biases=tuple(biases))


def _chunk_bounds(n: int) -> list[tuple[int, int]]:
    return [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def _map_chunks(fn, n: int, workers: int) -> list:
    bounds = _chunk_bounds(n)
    if workers <= 1 or len(bounds) == 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def _forward_chunk(policy: MlpPolicy, X: np.ndarray) -> np.ndarray:
    a = X
    n_layers = len(policy.weights)
    for l in range(n_layers - 1):
        z = a @ policy.weights[l] + policy.biases[l]
        a = np.maximum(z, 0.0) if policy.hidden_activation == "relu" else np.tanh(z)
    return a @ policy.weights[-1] + policy.biases[-1]


def mlp_forward(policy: MlpPolicy, inputs, workers: int = 1) -> np.ndarray:
    """Network output for a single feature vector or a (B, input_dim) batch."""
    X = np.asarray(inputs, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != policy.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != network input dim {policy.input_dim}")
    outs = _map_chunks(lambda lo, hi: _forward_chunk(policy, X[lo:hi]), X.shape[0], workers)
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


def _vjp_chunk(policy: MlpPolicy, X: np.ndarray, lam_out: np.ndarray):
    """Per-chunk reverse pass.  Recomputes activations (cheap) so the forward
    pass never has to retain them across time steps.  Returns per-layer
    (dW, db) and the cotangent of the chunk inputs."""
    relu = policy.hidden_activation == "relu"
    acts = [X]
    a = X
    for l in range(len(policy.weights) - 1):
        z = a @ policy.weights[l] + policy.biases[l]
        a = np.maximum(z, 0.0) if relu else np.tanh(z)
        acts.append(a)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(policy.weights)
    delta = lam_out
    for l in range(len(policy.weights) - 1, -1, -1):
        grads[l] = (acts[l].T @ delta, delta.sum(axis=0))
        delta = delta @ policy.weights[l].T
        if l > 0:
            gate = (acts[l] > 0.0).astype(np.float64) if relu else 1.0 - acts[l] ** 2
            delta = delta * gate
    return grads, delta


def _mlp_vjp(policy: MlpPolicy, X: np.ndarray, lam_out: np.ndarray, workers: int):
    """Chunked vector-Jacobian product: returns (flat parameter gradient,
    input cotangents), reduced over chunks in fixed index order."""
    results = _map_chunks(
        lambda lo, hi: _vjp_chunk(policy, X[lo:hi], lam_out[lo:hi]), X.shape[0], workers
    )
    lam_X = np.concatenate([r[1] for r in results], axis=0)
    grad = np.zeros(policy.n_params)
    for layer_grads, _ in results:
        pos = 0
        for dw, db in layer_grads:
            grad[pos : pos + dw.size] += dw.ravel()
            pos += dw.size
            grad[pos : pos + db.size] += db
            pos += db.size
    return grad, lam_X


def feature_dim(p: CsParams) -> int:
    """Network input dimension implied by the model: d+1 features (t/T, v)
    when beta = 0, 2d+1 features (t/T, x, v) otherwise."""
    return p.d + 1 if p.beta == 0.0 else 2 * p.d + 1


def policy_features(t: float, x: np.ndarray, v: np.ndarray, p: CsParams) -> np.ndarray:
    tcol = np.full((v.shape[0], 1), t / p.T)
    if p.beta == 0.0:
        return np.concatenate([tcol, v], axis=1)
    return np.concatenate([tcol, x, v], axis=1)


def feedback_from_mlp(policy: MlpPolicy, p: CsParams, workers: int = 1):
    """Wrap a network as a control map (t, ensemble) -> (N, d)."""
    expected = feature_dim(p)
    if policy.input_dim != expected:
        raise ValueError(
            f"network input dim {policy.input_dim} does not match the "
            f"feature set for beta={p.beta} (expected {expected})"
        )
    if policy.output_dim != p.d:
        raise ValueError(f"network output dim {policy.output_dim} != model dimension {p.d}")

    def control(t: float, e: Ensemble) -> np.ndarray:
        return mlp_forward(policy, policy_features(t, e.x, e.v, p), workers=workers)

    return control


def _interaction_vjp(x, v, lam, Phi: float, beta: float):
    """Cotangents of sum_i <lam_i, I_i(x, v)> for the kernel average I."""
    if Phi == 0.0:
        return np.zeros_like(x), np.zeros_like(v)
    if beta == 0.0:
        return np.zeros_like(x), Phi * (lam.mean(axis=0) - lam)
    N = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    r = np.einsum("ijc,ijc->ij", diff, diff)
    base = 1.0 + r
    w = base ** (-beta)
    u = base ** (-beta - 1.0)
    s = w.sum(axis=1)
    lam_v = (Phi / N) * (w @ lam - s[:, None] * lam)
    # dS/dx through the weights: P_ij = <lam_i, v_j - v_i>
    P = lam @ v.T - np.sum(lam * v, axis=1)[:, None]
    Q = (P + P.T) * u
    q = Q.sum(axis=1)
    lam_x = (-2.0 * beta * Phi / N) * (q[:, None] * x - Q @ x)
    return lam_x, lam_v


def rollout_cost_and_grad(
    policy: MlpPolicy,
    e0: Ensemble,
    grid: TimeGrid,
    p: CsParams,
    seed: int = 0,
    *,
    noise: np.ndarray | None = None,
    workers: int = 1,
    cost_scale: float = 1.0,
):
    """Empirical cost of one rollout and its exact gradient in theta.

    The forward pass runs the same Euler recursion as module dynamics and
    accumulates the same cost that empirical_cs_cost would report on the
    recorded trajectory (bit-identical, asserted in tests).  The backward
    pass runs the adjoint recursion with the noise frozen:

        lam_a[m]  = h*lam_v[m+1] + (2*h*gamma1/N) a_m        (control cotangent)
        lam_v[m]  = lam_v[m+1] + h*lam_x[m+1] + d(interaction) + d(features)
                    + (2h/N)(v_m - vbar_m)                    (running cost)
        lam_x[m]  = lam_x[m+1] + d(interaction) + d(features)

    seeded at lam_v[M] = (2/N)(v_M - vbar_M).  Every mean over particles
    contributes its centering term, which is what makes the gradient exact
    for the *empirical* objective rather than its mean-field limit.

    Returns (cost, grad) with grad flat in flatten_params order, scaled by
    cost_scale (the gradient is linear in the objective).
    """
    expected = feature_dim(p)
    if policy.input_dim != expected or policy.output_dim != p.d:
        raise ValueError(
            f"network dims ({policy.input_dim} -> {policy.output_dim}) do not match "
            f"the model (features {expected}, controls {p.d})"
        )
    M, N, d = grid.M, e0.N, e0.d
    h = grid.h
    if noise is None:
        stream = SeededStream(seed, "rollout-noise")
        sqrt_h = np.sqrt(h)
        noise_arr = np.empty((M, N, d))
        for m in range(M):
            noise_arr[m] = sqrt_h * stream.normals(m, N, d)
    else:
        noise_arr = np.asarray(noise, dtype=np.float64)
        if noise_arr.shape != (M, N, d):
            raise ValueError(f"noise must have shape {(M, N, d)}, got {noise_arr.shape}")

    xs = [e0.x]
    vs = [e0.v]
    controls = np.empty((M, N, d))
    running_state = 0.0
    running_control = 0.0
    x, v = e0.x, e0.v
    for m in range(M):
        dev = v - v.mean(axis=0)
        running_state += h * float(np.mean(np.sum(dev * dev, axis=1)))
        feats = policy_features(float(grid.nodes[m]), x, v, p)
        outs = _map_chunks(lambda lo, hi: _forward_chunk(policy, feats[lo:hi]), N, workers)
        a = np.concatenate(outs, axis=0)
        running_control += h * p.gamma1 * float(np.mean(np.sum(a * a, axis=1)))
        controls[m] = a
        inter = _interaction(x, v, p.Phi, p.beta)
        x, v = x + h * v, v + h * (a + inter) + p.sigma * noise_arr[m]
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            raise RuntimeError(f"non-finite state after step {m}")
        xs.append(x)
        vs.append(v)
    dev = v - v.mean(axis=0)
    terminal = float(np.mean(np.sum(dev * dev, axis=1)))
    total = running_state + running_control + terminal

    two_over_n = 2.0 * cost_scale / N
    lam_v = two_over_n * (vs[M] - vs[M].mean(axis=0))
    lam_x = np.zeros((N, d))
    grad = np.zeros(policy.n_params)
    for m in range(M - 1, -1, -1):
        x_m, v_m, a_m = xs[m], vs[m], controls[m]
        lam_a = h * lam_v + (h * p.gamma1 * two_over_n) * a_m
        feats = policy_features(float(grid.nodes[m]), x_m, v_m, p)
        g_step, lam_feats = _mlp_vjp(policy, feats, lam_a, workers)
        grad += g_step
        lam_int_x, lam_int_v = _interaction_vjp(x_m, v_m, h * lam_v, p.Phi, p.beta)
        new_lam_v = (
            lam_v
            + h * lam_x
            + lam_int_v
            + (two_over_n * h) * (v_m - v_m.mean(axis=0))
        )
        new_lam_x = lam_x + lam_int_x
        if p.beta == 0.0:
            new_lam_v = new_lam_v + lam_feats[:, 1:]
        else:
            new_lam_x = new_lam_x + lam_feats[:, 1 : 1 + d]
            new_lam_v = new_lam_v + lam_feats[:, 1 + d :]
        lam_v, lam_x = new_lam_v, new_lam_x
        if not (np.isfinite(lam_v).all() and np.isfinite(lam_x).all() and np.isfinite(grad).all()):
            raise RuntimeError(f"non-finite gradient at step {m}")
    return cost_scale * total, grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.m.shape != self.v.shape:
            raise ValueError("moment accumulators must share shape")
        if np.any(self.v < 0):
            raise ValueError("second-moment accumulator must be nonnegative")
        if self.step < 0:
            raise ValueError("step counter must be nonnegative")


def init_adam_state(n_params: int, beta1: float = 0.9, beta2: float = 0.999,
                    eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), step=0,
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One standard bias-corrected update on flat parameter vectors."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("theta, grad, and optimizer state must share shape")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    theta_new = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_new, replace(state, m=m, v=v, step=step)


@dataclass(frozen=True)
class LrSchedule:
    lr0: float = 0.001
    decay: float = 0.617
    period: int = 50

    def __post_init__(self) -> None:
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.lr0 * schedule.decay ** (epoch // schedule.period)


_CHECKPOINT_MAGIC = "mfcontrol-policy-v1"


def save_policy(policy: MlpPolicy, path) -> None:
    """Text checkpoint: magic line, dims, activation, then one parameter per
    line in flatten_params order (full round-trip precision)."""
    lines = [
        _CHECKPOINT_MAGIC,
        "dims " + " ".join(str(d) for d in policy.layer_dims),
        f"activation {policy.hidden_activation}",
    ]
    lines.extend(repr(float(x)) for x in flatten_params(policy))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_policy(path) -> MlpPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise ValueError(f"not a policy checkpoint: {path}")
    if not lines[1].startswith("dims ") or not lines[2].startswith("activation "):
        raise ValueError(f"malformed checkpoint header in {path}")
    dims = tuple(int(tok) for tok in lines[1].split()[1:])
    activation = lines[2].split()[1]
    theta = np.array([float(tok) for tok in lines[3:]])
    template = init_policy(dims, seed=0, hidden_activation=activation)
    if theta.size != template.n_params:
        raise ValueError(
            f"checkpoint has {theta.size} parameters, dims {dims} need {template.n_params}"
        )
    return replace_params(template, theta)
