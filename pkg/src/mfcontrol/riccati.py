"""Exact benchmark for the linear-quadratic alignment problem.

With no position coupling in the kernel the velocity components decouple and
the optimal cost is available in closed form through a scalar Riccati ODE

    nu'(t) = 2*Phi*nu(t) + nu(t)^2/(2*gamma1) - 2,   nu(T) = 2,

solved backward in time.  The optimal feedback is
a*(t, v) = -(nu(t)/(2*gamma1)) (v - E[v]), and the value of the problem for
velocity components of variance var_v0 is

    d * [ (nu(0)/2) * var_v0 + (sigma^2/2) * int_0^T nu(t) dt ].

The value formula comes from the standard quadratic value-to-go ansatz
W(t) = (nu(t)/2) Var(v_t) + c(t), matched to the same running/terminal cost
that the particle simulation measures; it must (and does) agree with direct
Monte-Carlo evaluation under the feedback, which is the cross-check the
acceptance suite runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import TimeGrid, make_uniform_grid

__all__ = [
    "LqParams",
    "RiccatiSolution",
    "solve_riccati",
    "ode_residual",
    "exact_lq_feedback",
    "exact_lq_value",
]


@dataclass(frozen=True)
class LqParams:
    """Coefficients of the benchmark problem.

    var_v0 defaults to 1/12, the per-component variance of velocities drawn
    uniformly on [0, 1).
    """

    Phi: float = 1.0
    gamma1: float = 0.1
    sigma: float = 0.1
    T: float = 1.0
    d: int = 1
    var_v0: float = 1.0 / 12.0

    def __post_init__(self) -> None:
        if self.gamma1 <= 0:
            raise ValueError(f"gamma1 must be positive, got {self.gamma1}")
        if self.Phi < 0 or self.sigma < 0 or self.var_v0 < 0:
            raise ValueError("Phi, sigma, var_v0 must be nonnegative")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")


@dataclass(frozen=True)
class RiccatiSolution:
    """nu(t) sampled on a fine uniform grid over [0, T]; nu[-1] == 2 exactly."""

    grid: TimeGrid
    nu: np.ndarray
    Phi: float
    gamma1: float

    def __post_init__(self) -> None:
        nu = np.asarray(self.nu, dtype=np.float64)
        if nu.shape != (self.grid.M + 1,):
            raise ValueError("nu must hold one value per grid node")
        if not np.isfinite(nu).all():
            raise ValueError("Riccati solution blew up (non-finite values)")
        nu = nu.copy()
        nu.flags.writeable = False
        object.__setattr__(self, "nu", nu)

    def nu_at(self, t):
        """Linearly interpolated nu(t); rejects t outside [t0, T]."""
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < self.grid.t0) or np.any(t_arr > self.grid.T):
            raise ValueError(f"t={t} outside grid span [{self.grid.t0}, {self.grid.T}]")
        out = np.interp(t_arr, self.grid.nodes, self.nu)
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def _rhs(nu: float, Phi: float, gamma1: float) -> float:
    return 2.0 * Phi * nu + nu * nu / (2.0 * gamma1) - 2.0


def solve_riccati(p: LqParams, steps: int = 4096) -> RiccatiSolution:
    """Backward sweep with the classical 4th-order one-step method, fixed step.

    The terminal node carries the boundary value 2 bit-exactly; each sweep
    step fills the previous node.  Fixed-step integration keeps the output a
    pure function of (p, steps), which downstream determinism tests rely on.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    grid = make_uniform_grid(0.0, p.T, steps)
    h = grid.h
    nu = np.empty(steps + 1, dtype=np.float64)
    nu[steps] = 2.0
    y = 2.0
    for k in range(steps, 0, -1):
        k1 = _rhs(y, p.Phi, p.gamma1)
        k2 = _rhs(y - 0.5 * h * k1, p.Phi, p.gamma1)
        k3 = _rhs(y - 0.5 * h * k2, p.Phi, p.gamma1)
        k4 = _rhs(y - h * k3, p.Phi, p.gamma1)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(y):
            raise RuntimeError(f"Riccati sweep blew up at node {k - 1} (t={grid.nodes[k - 1]})")
        nu[k - 1] = y
    return RiccatiSolution(grid=grid, nu=nu, Phi=p.Phi, gamma1=p.gamma1)


def ode_residual(sol: RiccatiSolution) -> np.ndarray:
    """Pointwise ODE residual nu' - 2*Phi*nu - nu^2/(2*gamma1) + 2 at interior nodes.

    nu' is reconstructed with the 6th-order centered seven-point stencil.  The
    stencil order must exceed the integrator's order: a low-order stencil's own
    truncation error (e.g. h^2/6 * nu''' for the 3-point one, large near t=T
    where the solution has a boundary layer) would dominate the quantity being
    verified and mask the solution's actual accuracy.  Returns the residual at
    nodes 3..M-3.
    """
    nu = sol.nu
    h = sol.grid.h
    if sol.grid.M < 6:
        raise ValueError("residual stencil needs at least 6 steps")
    dnu = (
        -nu[:-6] + 9.0 * nu[1:-5] - 45.0 * nu[2:-4] + 45.0 * nu[4:-2] - 9.0 * nu[5:-1] + nu[6:]
    ) / (60.0 * h)
    mid = nu[3:-3]
    return dnu - 2.0 * sol.Phi * mid - mid * mid / (2.0 * sol.gamma1) + 2.0


def exact_lq_feedback(t: float, v, mean_v, ric: RiccatiSolution, gamma1: float):
    """Optimal feedback -(nu(t)/(2*gamma1)) * (v - mean_v); linear in the deviation."""
    if gamma1 <= 0:
        raise ValueError(f"gamma1 must be positive, got {gamma1}")
    nu_t = ric.nu_at(t)
    return (-nu_t / (2.0 * gamma1)) * (np.asarray(v, dtype=np.float64) - mean_v)


def exact_lq_value(p: LqParams, ric: RiccatiSolution) -> float:
    """Exact optimal cost d * [(nu(0)/2) var_v0 + (sigma^2/2) int nu dt].

    The integral uses the trapezoid rule on the solution grid; at the default
    4096 steps the quadrature error is far below every tolerance in play.
    Components decouple, so the value is exactly d times the scalar value.
    """
    if (ric.Phi, ric.gamma1) != (p.Phi, p.gamma1) or ric.grid.T != p.T:
        raise ValueError("Riccati solution was solved with different coefficients")
    integral = float(np.trapezoid(ric.nu, ric.grid.nodes))
    base = 0.5 * float(ric.nu[0]) * p.var_v0 + 0.5 * p.sigma**2 * integral
    return p.d * base
