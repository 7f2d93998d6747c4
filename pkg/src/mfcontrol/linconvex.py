"""Closed-form optimal feedback for the scalar linear-convex family.

For running costs quadratic in the control,

    f = (1/2)(f1(t,x,law) + q a^2 + qbar (a - r abar)^2 + 2 c x a),

with drift-control coefficient b2 and mean-control coefficient gamma, the
pointwise optimality condition

    b2 y + gamma E[y] + (q + qbar) a + qbar r (r-2) E[a] + c x = 0

is solved exactly by the linear feedback

    a_hat(x, y, E[x], E[y]) = [-c x - b2 y + psi E[x] + (-gamma + zeta) E[y]] / (q + qbar)

where psi and zeta carry the mean-correction factor qbar r (r-2) / D with
D = q + qbar (r-1)^2.  `optimality_residual` evaluates the condition on
samples with empirical means, which is the executable form of that claim:
it vanishes identically under `hat_alpha_lq` controls at any sample size
because the identity is linear.

Also here: the left-endpoint-hold projection of a control path onto a
coarser grid, the discretization whose cost gap the convergence study
measures.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import TimeGrid

__all__ = [
    "LinConvexCoeffs",
    "psi_zeta",
    "hat_alpha_lq",
    "optimality_residual",
    "project_piecewise_constant",
]

CoeffFn = Callable[[float], float] | float


class CoeffValues(NamedTuple):
    b2: float
    gamma: float
    q: float
    qbar: float
    r: float
    c: float


@dataclass(frozen=True)
class LinConvexCoeffs:
    """Time-dependent coefficients, each a constant or a callable of t.

    q(t) must stay >= q_floor > 0; qbar(t) >= 0.  Both are checked at every
    evaluation time (they are the convexity constants everything divides by).
    """

    b2: CoeffFn = 0.0
    gamma: CoeffFn = 0.0
    q: CoeffFn = 1.0
    qbar: CoeffFn = 0.0
    r: CoeffFn = 0.0
    c: CoeffFn = 0.0
    q_floor: float = 1e-12

    def at(self, t: float) -> CoeffValues:
        def ev(f):
            return float(f(t)) if callable(f) else float(f)

        vals = CoeffValues(ev(self.b2), ev(self.gamma), ev(self.q), ev(self.qbar), ev(self.r), ev(self.c))
        if vals.q < self.q_floor:
            raise ValueError(f"q(t={t}) = {vals.q} below the configured floor {self.q_floor}")
        if vals.qbar < 0:
            raise ValueError(f"qbar(t={t}) = {vals.qbar} must be nonnegative")
        return vals


def psi_zeta(t: float, coeffs: LinConvexCoeffs) -> tuple[float, float]:
    """Mean-correction coefficients psi = c*qbar*r*(r-2)/D and
    zeta = (b2+gamma)*qbar*r*(r-2)/D with D = q + qbar*(r-1)^2."""
    v = coeffs.at(t)
    denom = v.q + v.qbar * (v.r - 1.0) ** 2
    if denom <= 0:
        raise ValueError(f"q + qbar*(r-1)^2 = {denom} must be positive at t={t}")
    factor = v.qbar * v.r * (v.r - 2.0) / denom
    return v.c * factor, (v.b2 + v.gamma) * factor


def hat_alpha_lq(t: float, x, y, mean_x: float, mean_y: float, coeffs: LinConvexCoeffs):
    """The optimal feedback; linear in (x, y, mean_x, mean_y) jointly.

    Scalar in the model dimension; array x, y are handled componentwise.
    """
    v = coeffs.at(t)
    if v.q + v.qbar <= 0:
        raise ValueError(f"q + qbar = {v.q + v.qbar} must be positive at t={t}")
    psi, zeta = psi_zeta(t, coeffs)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = (-v.c * x - v.b2 * y + psi * mean_x + (-v.gamma + zeta) * mean_y) / (v.q + v.qbar)
    return float(out) if out.ndim == 0 else out


def _split_samples(samples):
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[0]) >= 1:
        xs, ys = samples
    else:
        pairs = list(samples)
        if not pairs:
            raise ValueError("empty sample set")
        xs = [p[0] for p in pairs]
        ys = [p[1] for p in pairs]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("empty sample set")
    if xs.shape != ys.shape:
        raise ValueError(f"sample arrays must share shape, got {xs.shape} and {ys.shape}")
    return xs, ys


def optimality_residual(samples, t: float, coeffs: LinConvexCoeffs, controls) -> np.ndarray:
    """Per-sample residual of the pointwise optimality condition, with the
    expectation terms replaced by empirical means over the supplied set."""
    xs, ys = _split_samples(samples)
    a = np.asarray(controls, dtype=np.float64)
    if a.shape != xs.shape:
        raise ValueError(f"controls shape {a.shape} must match samples shape {xs.shape}")
    v = coeffs.at(t)
    return (
        v.b2 * ys
        + v.gamma * ys.mean()
        + (v.q + v.qbar) * a
        + v.qbar * v.r * (v.r - 2.0) * a.mean()
        + v.c * xs
    )


def project_piecewise_constant(path, fine_grid: TimeGrid, coarse_grid: TimeGrid) -> np.ndarray:
    """Left-endpoint hold of a fine-node path onto the coarse cells.

    Every fine node inside a coarse cell (and the terminal node) takes the
    path value at the cell's left endpoint.  Grids must be nested: same
    span, fine step count a multiple of the coarse one.
    """
    path = np.asarray(path, dtype=np.float64)
    if path.shape[0] != fine_grid.M + 1:
        raise ValueError(f"path has {path.shape[0]} rows, fine grid has {fine_grid.M + 1} nodes")
    if fine_grid.t0 != coarse_grid.t0 or fine_grid.T != coarse_grid.T:
        raise ValueError("grids must share the same span")
    if fine_grid.M % coarse_grid.M != 0:
        raise ValueError(
            f"fine step count {fine_grid.M} is not a multiple of coarse {coarse_grid.M}"
        )
    ratio = fine_grid.M // coarse_grid.M
    cell = np.minimum(np.arange(fine_grid.M + 1) // ratio, coarse_grid.M - 1)
    return path[cell * ratio]
