"""Cost functionals over simulated trajectories.

The alignment objective splits into a running velocity-disagreement term, a
running quadratic control penalty, and a terminal disagreement term:

    (1/N) sum_i [ sum_{m<M} h (|v^i_m - vbar_m|^2 + gamma1 |a^i_m|^2)
                  + |v^i_M - vbar_M|^2 ]

with vbar_m the empirical mean at node m.  Running sums use the left
endpoint of each cell (nodes 0..M-1); the terminal term uses node M and its
own empirical mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GenericMfcProblem, SampleLaw, TimeGrid
from .dynamics import Trajectory

__all__ = ["CostBreakdown", "empirical_cs_cost", "generic_discrete_cost"]


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    running_state: float
    running_control: float
    terminal: float

    @classmethod
    def from_parts(cls, running_state: float, running_control: float, terminal: float):
        return cls(
            total=running_state + running_control + terminal,
            running_state=running_state,
            running_control=running_control,
            terminal=terminal,
        )


def _mean_sq_deviation(v: np.ndarray) -> float:
    dev = v - v.mean(axis=0)
    return float(np.mean(np.sum(dev * dev, axis=1)))


def empirical_cs_cost(traj: Trajectory, gamma1: float) -> CostBreakdown:
    """Evaluate the alignment objective on a recorded trajectory."""
    h = traj.grid.h
    running_state = 0.0
    running_control = 0.0
    for m in range(traj.grid.M):
        running_state += h * _mean_sq_deviation(traj.states[m].v)
        a = traj.controls[m]
        running_control += h * gamma1 * float(np.mean(np.sum(a * a, axis=1)))
    terminal = _mean_sq_deviation(traj.states[-1].v)
    return CostBreakdown.from_parts(running_state, running_control, terminal)


def generic_discrete_cost(
    states, controls, grid: TimeGrid, prob: GenericMfcProblem
) -> float:
    """Left-endpoint Riemann sum of the running cost plus the terminal cost,
    both averaged over particles, for a coefficient-form problem.

    `states` holds M+1 sample arrays (N, n); `controls` holds M arrays (N, k).
    """
    if len(states) != grid.M + 1 or len(controls) != grid.M:
        raise ValueError("states/controls counts inconsistent with the grid")
    h = grid.h
    total = 0.0
    for m in range(grid.M):
        x_m = np.asarray(states[m], dtype=np.float64)
        a_m = np.asarray(controls[m], dtype=np.float64)
        law = SampleLaw(states=x_m, controls=a_m)
        f = np.asarray(prob.running_cost(float(grid.nodes[m]), x_m, a_m, law))
        if not np.isfinite(f).all():
            raise RuntimeError(f"non-finite running cost at node {m} (t={grid.nodes[m]})")
        total += h * float(f.mean())
    x_T = np.asarray(states[-1], dtype=np.float64)
    g = np.asarray(prob.terminal_cost(x_T, SampleLaw(states=x_T)))
    if not np.isfinite(g).all():
        raise RuntimeError("non-finite terminal cost")
    return total + float(g.mean())
