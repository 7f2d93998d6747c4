"""Interacting-particle dynamics with velocity alignment.

The model: N particles with positions x and velocities v.  Positions
integrate velocity; velocities feel a per-particle control plus the
empirical average of the alignment kernel

    kappa(x, v, x', v') = Phi * (v' - v) / (1 + |x' - x|^2)^beta

over the whole ensemble (self-term included, it is zero), plus diagonal
Gaussian noise.  One explicit Euler-Maruyama step per grid cell, controls
held constant on each cell, all particles updated synchronously from the
pre-step ensemble.

For beta = 0 the kernel average collapses algebraically to
Phi * (mean_v - v_i), which is what the code computes then (O(N) instead of
O(N^2)).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    Ensemble,
    GenericMfcProblem,
    SampleLaw,
    SeededStream,
    TimeGrid,
)
from .riccati import RiccatiSolution, exact_lq_feedback

__all__ = [
    "CsParams",
    "Trajectory",
    "cs_kernel",
    "cs_interaction",
    "cs_drift",
    "cs_euler_step",
    "generic_euler_step",
    "make_cs_generic_problem",
    "sample_initial_ensemble",
    "rollout",
    "zero_control",
    "feedback_from_riccati",
    "hold_piecewise",
]

ControlFn = Callable[[float, Ensemble], np.ndarray]


@dataclass(frozen=True)
class CsParams:
    """Model coefficients: alignment strength Phi, decay exponent beta,
    noise level sigma, control penalty gamma1, horizon T, dimension d."""

    Phi: float = 1.0
    beta: float = 0.0
    sigma: float = 0.1
    gamma1: float = 0.1
    T: float = 1.0
    d: int = 1

    def __post_init__(self) -> None:
        if self.Phi < 0 or self.beta < 0 or self.sigma < 0 or self.gamma1 < 0:
            raise ValueError("Phi, beta, sigma, gamma1 must all be nonnegative")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")


@dataclass(frozen=True)
class Trajectory:
    """One rollout: M+1 ensembles, the M piecewise-constant controls, and the
    Brownian increments that drove the path (kept so costs and gradients can
    be recomputed under frozen randomness)."""

    grid: TimeGrid
    states: tuple[Ensemble, ...]
    controls: np.ndarray  # (M, N, d), controls[m] applied on [t_m, t_{m+1})
    noise: np.ndarray  # (M, N, d) increments, each ~ N(0, h)

    def __post_init__(self) -> None:
        M = self.grid.M
        if len(self.states) != M + 1:
            raise ValueError(f"expected {M + 1} states, got {len(self.states)}")
        N, d = self.states[0].N, self.states[0].d
        if self.controls.shape != (M, N, d) or self.noise.shape != (M, N, d):
            raise ValueError("controls/noise shape inconsistent with grid and ensemble")


def cs_kernel(x, v, xp, vp, Phi: float, beta: float):
    """Alignment kernel Phi*(vp - v)/(1 + |xp - x|^2)^beta, vectorized over
    leading axes; the position dependence drops out entirely at beta = 0."""
    x, v = np.asarray(x, dtype=np.float64), np.asarray(v, dtype=np.float64)
    xp, vp = np.asarray(xp, dtype=np.float64), np.asarray(vp, dtype=np.float64)
    dv = Phi * (vp - v)
    if beta == 0.0:
        return dv
    r = np.sum((xp - x) ** 2, axis=-1, keepdims=True)
    return dv / (1.0 + r) ** beta


def _interaction(x: np.ndarray, v: np.ndarray, Phi: float, beta: float) -> np.ndarray:
    # (1/N) sum_j kappa(x_i, v_i, x_j, v_j) for every i, shape (N, d)
    if Phi == 0.0:
        return np.zeros_like(v)
    if beta == 0.0:
        return Phi * (v.mean(axis=0) - v)
    diff = x[:, None, :] - x[None, :, :]
    r = np.einsum("ijc,ijc->ij", diff, diff)
    w = (1.0 + r) ** (-beta)
    s = w.sum(axis=1)
    return (Phi / x.shape[0]) * (w @ v - s[:, None] * v)


def cs_interaction(e: Ensemble, p: CsParams) -> np.ndarray:
    """Empirical kernel average for all particles at once."""
    return _interaction(e.x, e.v, p.Phi, p.beta)


def cs_drift(e: Ensemble, i: int, a_i, p: CsParams) -> np.ndarray:
    """Velocity drift of particle i: control plus the kernel average over all
    particles (self-term included; it vanishes)."""
    if not 0 <= i < e.N:
        raise IndexError(f"particle index {i} out of range for N={e.N}")
    a_i = np.asarray(a_i, dtype=np.float64)
    if p.Phi == 0.0:
        return a_i + np.zeros(e.d)
    if p.beta == 0.0:
        return a_i + p.Phi * (e.v.mean(axis=0) - e.v[i])
    r = np.sum((e.x - e.x[i]) ** 2, axis=1)
    w = (1.0 + r) ** (-p.beta)
    return a_i + (p.Phi / e.N) * (w @ e.v - w.sum() * e.v[i])


def cs_euler_step(
    e: Ensemble, controls: np.ndarray, p: CsParams, h: float, noise: np.ndarray
) -> Ensemble:
    """One synchronous explicit step.

    x <- x + h*v;  v <- v + h*(control + interaction) + sigma*noise.
    `noise` carries the already-scaled Brownian increments (N(0, h) entries);
    this operation never draws randomness itself.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got h={h}")
    controls = np.asarray(controls, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if controls.shape != e.v.shape or noise.shape != e.v.shape:
        raise ValueError(
            f"controls {controls.shape} and noise {noise.shape} must match state shape {e.v.shape}"
        )
    drift = controls + cs_interaction(e, p)
    x_new = e.x + h * e.v
    v_new = e.v + h * drift + p.sigma * noise
    return Ensemble(x=x_new, v=v_new)


def generic_euler_step(
    states: np.ndarray,
    controls: np.ndarray,
    prob: GenericMfcProblem,
    t: float,
    h: float,
    noise: np.ndarray,
) -> np.ndarray:
    """Explicit step for a coefficient-form problem.

    Coefficients see the empirical joint law of (state, control) through a
    SampleLaw over the full ensemble; all particles update synchronously.
    """
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    N = states.shape[0]
    if states.shape != (N, prob.n) or controls.shape != (N, prob.k):
        raise ValueError("states/controls shapes inconsistent with problem dimensions")
    if noise.shape != (N, prob.dw):
        raise ValueError(f"noise must be (N, {prob.dw}), got {noise.shape}")
    if h <= 0:
        raise ValueError(f"step size must be positive, got h={h}")
    law = SampleLaw(states=states, controls=controls)
    b = np.asarray(prob.drift(t, states, controls, law), dtype=np.float64)
    if b.shape != states.shape:
        raise ValueError(f"drift returned shape {b.shape}, expected {states.shape}")
    if not np.isfinite(b).all():
        bad = int(np.argwhere(~np.isfinite(b).all(axis=1))[0, 0])
        raise RuntimeError(f"non-finite drift at t={t}, particle {bad}")
    sig = np.asarray(prob.diffusion(t, states, controls, law), dtype=np.float64)
    if sig.shape == (prob.n, prob.dw):
        noisy = noise @ sig.T
    elif sig.shape == (N, prob.n, prob.dw):
        noisy = np.einsum("nij,nj->ni", sig, noise)
    else:
        raise ValueError(f"diffusion returned shape {sig.shape}")
    if not np.isfinite(noisy).all():
        bad = int(np.argwhere(~np.isfinite(noisy).all(axis=1))[0, 0])
        raise RuntimeError(f"non-finite diffusion at t={t}, particle {bad}")
    return states + h * b + noisy


def make_cs_generic_problem(p: CsParams) -> GenericMfcProblem:
    """The alignment model in coefficient form, state (x, v) stacked as 2d
    columns.  Shares the interaction code with cs_euler_step so the two step
    implementations agree bit-for-bit on common inputs."""
    d = p.d
    sig_mat = np.zeros((2 * d, d))
    sig_mat[d:, :] = p.sigma * np.eye(d)

    def drift(t, states, controls, law):
        x, v = states[:, :d], states[:, d:]
        return np.concatenate([v, controls + _interaction(x, v, p.Phi, p.beta)], axis=1)

    def diffusion(t, states, controls, law):
        return sig_mat

    def running_cost(t, states, controls, law):
        dev = states[:, d:] - law.mean_state[d:]
        return np.sum(dev * dev, axis=1) + p.gamma1 * np.sum(controls * controls, axis=1)

    def terminal_cost(states, law):
        dev = states[:, d:] - law.mean_state[d:]
        return np.sum(dev * dev, axis=1)

    return GenericMfcProblem(
        n=2 * d,
        k=d,
        dw=d,
        drift=drift,
        diffusion=diffusion,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
    )


def sample_initial_ensemble(n_particles: int, d: int, stream: SeededStream) -> Ensemble:
    """Positions and velocities i.i.d. uniform on [0, 1)^d."""
    if n_particles < 1:
        raise ValueError(f"need at least one particle, got {n_particles}")
    u = stream.uniforms(step=0, n=n_particles, d=2 * d)
    return Ensemble(x=u[:, :d], v=u[:, d:])


def zero_control(t: float, e: Ensemble) -> np.ndarray:
    return np.zeros_like(e.v)


def feedback_from_riccati(ric: RiccatiSolution, gamma1: float) -> ControlFn:
    """Exact benchmark feedback -(nu(t)/(2*gamma1)) (v - mean_v) as a control map."""

    def control(t: float, e: Ensemble) -> np.ndarray:
        return exact_lq_feedback(t, e.v, e.v.mean(axis=0), ric, gamma1)

    return control


def hold_piecewise(control_fn: ControlFn, coarse_grid: TimeGrid) -> ControlFn:
    """Wrap a control map so query times snap to the latest coarse node at or
    before t (left-endpoint hold).  Lets a control designed for a coarse grid
    drive a finer simulation grid."""

    nodes = coarse_grid.nodes

    def control(t: float, e: Ensemble) -> np.ndarray:
        idx = int(np.searchsorted(nodes, t, side="right")) - 1
        idx = min(max(idx, 0), coarse_grid.M - 1)
        return control_fn(float(nodes[idx]), e)

    return control


def _as_control_fn(policy, p: CsParams, workers: int) -> ControlFn:
    if callable(policy):
        return policy
    from .policy import MlpPolicy, feedback_from_mlp  # deferred: policy builds on dynamics

    if isinstance(policy, MlpPolicy):
        return feedback_from_mlp(policy, p, workers=workers)
    raise TypeError(f"policy must be a control callable or MlpPolicy, got {type(policy)!r}")


def rollout(
    e0: Ensemble,
    policy,
    grid: TimeGrid,
    p: CsParams,
    seed: int = 0,
    *,
    noise: np.ndarray | None = None,
    workers: int = 1,
) -> Trajectory:
    """Simulate all M steps under a feedback policy and record everything.

    `policy` is either a control map (t, ensemble) -> (N, d) or an MlpPolicy
    (then features are assembled per the model's beta).  Noise defaults to
    fresh increments from the seeded stream; pass `noise` explicitly to reuse
    increments across runs (common-random-number studies).  Output is a pure
    function of (e0, policy, grid, p, seed/noise) regardless of `workers`.
    """
    if e0.d != p.d:
        raise ValueError(f"ensemble dimension {e0.d} != model dimension {p.d}")
    control_fn = _as_control_fn(policy, p, workers)
    M, N, d = grid.M, e0.N, e0.d
    if noise is None:
        stream = SeededStream(seed, "rollout-noise")
        sqrt_h = np.sqrt(grid.h)
        noise_arr = np.empty((M, N, d))
        for m in range(M):
            noise_arr[m] = sqrt_h * stream.normals(m, N, d)
    else:
        noise_arr = np.asarray(noise, dtype=np.float64)
        if noise_arr.shape != (M, N, d):
            raise ValueError(f"noise must have shape {(M, N, d)}, got {noise_arr.shape}")
    controls = np.empty((M, N, d))
    states = [e0]
    e = e0
    for m in range(M):
        a = np.asarray(control_fn(float(grid.nodes[m]), e), dtype=np.float64)
        if a.shape != (N, d):
            raise ValueError(f"policy output shape {a.shape}, expected {(N, d)}")
        controls[m] = a
        e = cs_euler_step(e, a, p, grid.h, noise_arr[m])
        states.append(e)
    controls.flags.writeable = False
    noise_arr.flags.writeable = False
    return Trajectory(grid=grid, states=tuple(states), controls=controls, noise=noise_arr)
