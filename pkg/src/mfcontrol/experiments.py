"""Drivers: policy-gradient training, Monte-Carlo evaluation, convergence study.

`train` runs the sampled-gradient loop (fresh particles and noise every
iteration, Adam on the flat parameter vector).  `evaluate_policy` estimates
the cost of a frozen control over independent repetitions.
`convergence_study` measures the time-discretization error over a ladder of
step counts with common random numbers: one Brownian path per repetition,
generated on the finest grid and summed over coarse cells, so the values at
different M differ only through the discretization.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core import Ensemble, SeededStream, TimeGrid, derive_seed, make_uniform_grid
from .cost import empirical_cs_cost
from .dynamics import CsParams, feedback_from_riccati, rollout, sample_initial_ensemble
from .policy import (
    LrSchedule,
    MlpPolicy,
    adam_step,
    feature_dim,
    flatten_params,
    init_adam_state,
    init_policy,
    lr_at,
    replace_params,
    rollout_cost_and_grad,
)
from .riccati import LqParams, solve_riccati

__all__ = [
    "TrainConfig",
    "ConvergenceReport",
    "train",
    "evaluate_policy",
    "convergence_study",
    "coarsen_increments",
    "fit_loglog_slope",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on; two equal configs give
    bit-identical runs."""

    cs: CsParams = CsParams()
    N: int = 1000
    M: int = 128
    K: int = 800
    seed: int = 0
    schedule: LrSchedule = LrSchedule()
    hidden: tuple[int, ...] = (110, 110)
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        for name in ("N", "M", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(w < 1 for w in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (feature_dim(self.cs), *self.hidden, self.cs.d)

    @property
    def feature_tag(self) -> str:
        """Which inputs the network sees: time+velocity, or also positions."""
        return "t,v" if self.cs.beta == 0.0 else "t,x,v"


def _map_ordered(fn: Callable, items: Sequence, workers: int) -> list:
    # executor.map preserves submission order, so downstream reductions see
    # the same sequence no matter how many workers ran.
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def train(
    cfg: TrainConfig,
    *,
    workers: int = 1,
    callback: Callable[[int, float, float], None] | None = None,
) -> tuple[MlpPolicy, list[tuple[int, float, float]]]:
    """Run K sampled-gradient iterations and return the trained policy.

    Each iteration draws a fresh initial ensemble and a fresh noise record
    from seeds derived per iteration, computes the pathwise cost gradient,
    and applies one Adam update.  History rows are (iteration, cost, lr)
    with the cost measured before the update, so row k is an unbiased
    estimate of the objective at the iterate theta_k.
    """
    grid = make_uniform_grid(0.0, cfg.cs.T, cfg.M)
    policy = init_policy(
        cfg.layer_dims,
        seed=derive_seed(cfg.seed, "policy-init"),
        hidden_activation=cfg.activation,
    )
    theta = flatten_params(policy)
    adam = init_adam_state(theta.size)
    history: list[tuple[int, float, float]] = []
    for k in range(cfg.K):
        iter_seed = derive_seed(cfg.seed, "train-iter", k)
        e0 = sample_initial_ensemble(cfg.N, cfg.cs.d, SeededStream(iter_seed, "train-init"))
        try:
            cost, grad = rollout_cost_and_grad(policy, e0, grid, cfg.cs, seed=iter_seed, workers=workers)
        except RuntimeError as exc:
            raise RuntimeError(f"training aborted at iteration {k}: {exc}") from exc
        if not (math.isfinite(cost) and bool(np.all(np.isfinite(grad)))):
            raise RuntimeError(f"training aborted at iteration {k}: non-finite cost or gradient")
        lr = lr_at(cfg.schedule, k)
        history.append((k, float(cost), float(lr)))
        theta, adam = adam_step(theta, grad, adam, lr)
        policy = replace_params(policy, theta)
        if callback is not None:
            callback(k, float(cost), float(lr))
    return policy, history


def evaluate_policy(
    policy,
    cs: CsParams = CsParams(),
    N: int = 1000,
    M: int = 128,
    seed: int = 0,
    reps: int = 8,
    *,
    workers: int = 1,
    initial: Ensemble | None = None,
) -> tuple[float, float]:
    """Mean empirical cost of a frozen control and its standard error.

    `policy` is a control map (t, ensemble) -> (N, d) or an MlpPolicy.
    Repetition r owns the seed derived with tag ("eval-rep", r), so rep 0
    is the same run whether reps=1 or reps=100.  `initial` overrides the
    default uniform initial sampling with a fixed ensemble (noise still
    varies per rep).  Standard error is 0.0 for reps=1.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    grid = make_uniform_grid(0.0, cs.T, M)

    def one_rep(r: int) -> float:
        rep_seed = derive_seed(seed, "eval-rep", r)
        if initial is None:
            e0 = sample_initial_ensemble(N, cs.d, SeededStream(rep_seed, "eval-init"))
        else:
            e0 = initial
        traj = rollout(e0, policy, grid, cs, seed=rep_seed, workers=workers)
        return empirical_cs_cost(traj, cs.gamma1).total

    costs = np.asarray(_map_ordered(one_rep, range(reps), workers))
    mean = float(costs.mean())
    stderr = 0.0 if reps == 1 else float(costs.std(ddof=1) / math.sqrt(reps))
    return mean, stderr


def coarsen_increments(noise: np.ndarray, coarse_M: int) -> np.ndarray:
    """Sum fine Brownian increments over coarse cells.

    Power-of-two ratios reduce by repeated pairwise halving, so the records
    produced for M and 2M from the same fine path are bitwise nested: each
    coarse increment is literally the sum of its two children.  An odd
    leftover factor is summed in one reshape.
    """
    noise = np.asarray(noise)
    fine_M = noise.shape[0]
    if coarse_M < 1 or fine_M % coarse_M:
        raise ValueError(f"coarse step count {coarse_M} must divide the fine count {fine_M}")
    out = noise
    m = fine_M
    while m > coarse_M and m % 2 == 0 and (m // 2) % coarse_M == 0:
        out = out[0::2] + out[1::2]
        m //= 2
    if m > coarse_M:
        out = out.reshape(coarse_M, m // coarse_M, *out.shape[1:]).sum(axis=1)
    return out


def fit_loglog_slope(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares line through (log h, log err); returns (slope, intercept)."""
    pts = [(float(h), float(e)) for h, e in pairs]
    if len(pts) < 2:
        raise ValueError(f"need at least 2 (h, err) pairs, got {len(pts)}")
    for h, e in pts:
        if not (h > 0 and e > 0):
            raise ValueError(f"h and err must be positive, got ({h}, {e})")
    log_h = np.log([h for h, _ in pts])
    log_e = np.log([e for _, e in pts])
    slope, intercept = np.polyfit(log_h, log_e, 1)
    return float(slope), float(intercept)


@dataclass(frozen=True)
class ConvergenceReport:
    """Rows are (M, h, value, reference, abs_error), sorted by M ascending.

    `flags` carries (M, message) notes: rows excluded from the slope fit
    (zero error) and rows where refining did not shrink the error, which at
    desk scale means the discretization error fell below the Monte-Carlo
    noise.
    """

    rows: tuple[tuple[int, float, float, float, float], ...]
    slope: float
    intercept: float
    flags: tuple[tuple[int, str], ...] = ()

    def __post_init__(self) -> None:
        ms = [row[0] for row in self.rows]
        if ms != sorted(ms) or len(set(ms)) != len(ms):
            raise ValueError("rows must be strictly sorted by M ascending")
        if any(row[4] < 0 for row in self.rows):
            raise ValueError("abs_error must be nonnegative")
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("slope and intercept must be finite")


def _exact_projection_evaluator(cs: CsParams, workers: int):
    # The benchmark feedback is linear only without position coupling.
    if cs.beta != 0.0:
        raise ValueError("exact-projection protocol requires beta = 0")
    lq = LqParams(Phi=cs.Phi, gamma1=cs.gamma1, sigma=cs.sigma, T=cs.T, d=cs.d)
    control = feedback_from_riccati(solve_riccati(lq), cs.gamma1)

    def evaluate(grid: TimeGrid, e0: Ensemble, noise: np.ndarray) -> float:
        traj = rollout(e0, control, grid, cs, noise=noise, workers=workers)
        return empirical_cs_cost(traj, cs.gamma1).total

    return evaluate


def _trained_evaluator(cs: CsParams, policies: dict[int, MlpPolicy], workers: int):
    def evaluate(grid: TimeGrid, e0: Ensemble, noise: np.ndarray) -> float:
        traj = rollout(e0, policies[grid.M], grid, cs, noise=noise, workers=workers)
        return empirical_cs_cost(traj, cs.gamma1).total

    return evaluate


def convergence_study(
    M_list: Sequence[int],
    cs: CsParams = CsParams(),
    reference: float | None = None,
    evaluator: Callable[[TimeGrid, Ensemble, np.ndarray], float] | None = None,
    seed: int = 0,
    *,
    N: int = 1000,
    reps: int = 4,
    workers: int = 1,
    protocol: str = "exact-projection",
    train_config: TrainConfig | None = None,
) -> ConvergenceReport:
    """Value-vs-stepcount study with common random numbers.

    Per repetition, one initial ensemble and one Brownian record on the
    finest grid are drawn; every M sees that record summed over its own
    cells (`coarsen_increments`), so values differ across M only through
    time discretization.  With a finite `reference`, abs_error is
    |value - reference|.  With reference None, each row is compared against
    the value at the next larger M (Cauchy differences; the finest M then
    appears only as the last reference).  The slope comes from a log-log
    least-squares fit; zero-error rows are excluded from the fit and
    flagged, as are rows where refining failed to shrink the error.

    `evaluator(grid, e0, noise) -> cost` overrides the protocol entirely.
    Otherwise "exact-projection" rolls out the exact benchmark feedback held
    constant on each cell of the M-grid, and "trained" first trains one
    policy per M from `train_config`.
    """
    Ms = sorted({int(M) for M in M_list})
    if len(Ms) < 2:
        raise ValueError(f"need at least 2 distinct step counts, got {Ms}")
    if Ms[0] < 1:
        raise ValueError(f"step counts must be >= 1, got {Ms[0]}")
    fine_M = Ms[-1]
    for M in Ms:
        if fine_M % M:
            raise ValueError(f"M = {M} does not divide the finest count {fine_M}; refinement must nest")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    if reference is not None and not math.isfinite(reference):
        raise ValueError(f"reference must be finite, got {reference}")

    if evaluator is None:
        if protocol == "exact-projection":
            evaluator = _exact_projection_evaluator(cs, workers)
        elif protocol == "trained":
            base = train_config if train_config is not None else TrainConfig(cs=cs, seed=seed)
            policies = {M: train(replace(base, cs=cs, M=M), workers=workers)[0] for M in Ms}
            evaluator = _trained_evaluator(cs, policies, workers)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")

    grids = {M: make_uniform_grid(0.0, cs.T, M) for M in Ms}
    fine_h = grids[fine_M].h
    ensembles: list[Ensemble] = []
    fine_noise: list[np.ndarray] = []
    for r in range(reps):
        rep_seed = derive_seed(seed, "conv-rep", r)
        ensembles.append(sample_initial_ensemble(N, cs.d, SeededStream(rep_seed, "conv-init")))
        stream = SeededStream(rep_seed, "conv-noise")
        steps = [math.sqrt(fine_h) * stream.normals(step=m, n=N, d=cs.d) for m in range(fine_M)]
        fine_noise.append(np.stack(steps, axis=0))

    tasks = [(r, M) for r in range(reps) for M in Ms]

    def run(task: tuple[int, int]) -> float:
        r, M = task
        return evaluator(grids[M], ensembles[r], coarsen_increments(fine_noise[r], M))

    results = _map_ordered(run, tasks, workers)
    by_M: dict[int, list[float]] = {M: [] for M in Ms}
    for (r, M), cost in zip(tasks, results):
        by_M[M].append(cost)
    values = {M: float(np.mean(by_M[M])) for M in Ms}

    rows: list[tuple[int, float, float, float, float]] = []
    if reference is not None:
        for M in Ms:
            rows.append((M, grids[M].h, values[M], float(reference), abs(values[M] - reference)))
    else:
        for M, M_next in zip(Ms[:-1], Ms[1:]):
            rows.append((M, grids[M].h, values[M], values[M_next], abs(values[M] - values[M_next])))

    flags: list[tuple[int, str]] = []
    fit_pairs: list[tuple[float, float]] = []
    for M, h, _value, _ref, err in rows:
        if err == 0.0:
            flags.append((M, "zero error, excluded from slope fit"))
        else:
            fit_pairs.append((h, err))
    for (M0, _, _, _, e0), (M1, _, _, _, e1) in zip(rows[:-1], rows[1:]):
        if e1 > e0 > 0.0:
            flags.append((M1, "error grew under refinement, likely below Monte-Carlo noise"))
    if len(fit_pairs) < 2:
        raise RuntimeError("fewer than 2 rows with nonzero error; cannot fit a slope")
    slope, intercept = fit_loglog_slope(fit_pairs)
    return ConvergenceReport(rows=tuple(rows), slope=slope, intercept=intercept, flags=tuple(flags))
