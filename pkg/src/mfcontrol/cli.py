"""Command-line entry point: flat key=value configs, subcommands, CSV output.

Every run resolves one root seed and prints it with the full configuration to
standard error, so any CSV this tool emits can be regenerated from the banner
alone.  CSV goes to --out or standard output; diagnostics never mix into it.

Exit codes: 0 success (and any built-in check passed), 1 numerical failure or
a failed check, 2 usage or configuration errors.

The only environment variable honored is MFCONTROL_WORKERS, an optional
worker-count override for the chunked policy evaluation and independent
repetitions; results are bit-identical for any worker count.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .core import SeededStream, derive_seed, make_uniform_grid
from .cost import empirical_cs_cost
from .dynamics import (
    CsParams,
    feedback_from_riccati,
    rollout,
    sample_initial_ensemble,
    zero_control,
)
from .experiments import TrainConfig, convergence_study, evaluate_policy, train
from .linconvex import LinConvexCoeffs, hat_alpha_lq, optimality_residual
from .policy import (
    LrSchedule,
    feature_dim,
    flatten_params,
    init_policy,
    load_policy,
    replace_params,
    rollout_cost_and_grad,
    save_policy,
)
from .riccati import LqParams, exact_lq_value, ode_residual, solve_riccati

__all__ = ["CliConfig", "RunConfig", "ConfigError", "parse_config", "render_config", "main"]


class ConfigError(Exception):
    """Raised for malformed or invalid configuration input."""


@dataclass(frozen=True)
class CliConfig:
    """Typed run configuration; the defaults are the d=1, beta=0 benchmark."""

    phi: float = 1.0
    beta: float = 0.0
    sigma: float = 0.1
    gamma1: float = 0.1
    T: float = 1.0
    d: int = 1
    N: int = 1000
    M: int = 128
    K: int = 800
    lr0: float = 0.001
    decay: float = 0.617
    period: int = 50
    hidden: int = 110
    layers: int = 2
    seed: int = 0
    reps: int = 8
    m_list: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    activation: str = "relu"
    riccati_steps: int = 4096

    def cs_params(self) -> CsParams:
        return CsParams(Phi=self.phi, beta=self.beta, sigma=self.sigma,
                        gamma1=self.gamma1, T=self.T, d=self.d)

    def lq_params(self) -> LqParams:
        return LqParams(Phi=self.phi, gamma1=self.gamma1, sigma=self.sigma,
                        T=self.T, d=self.d, var_v0=1.0 / 12.0)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            cs=self.cs_params(), N=self.N, M=self.M, K=self.K, seed=seed,
            schedule=LrSchedule(lr0=self.lr0, decay=self.decay, period=self.period),
            hidden=(self.hidden,) * self.layers, activation=self.activation,
        )


@dataclass(frozen=True)
class RunConfig:
    """One resolved invocation: what to run, from which file, where to write."""

    subcommand: str
    config_path: str | None
    seed_override: int | None
    out_path: str | None


def _parse_int(val: str) -> int:
    try:
        return int(val, 10)
    except ValueError:
        raise ValueError("an integer") from None


def _parse_float(val: str) -> float:
    try:
        out = float(val)
    except ValueError:
        raise ValueError("a number") from None
    if not math.isfinite(out):
        raise ValueError("a finite number")
    return out


def _parse_m_list(val: str) -> tuple[int, ...]:
    try:
        items = tuple(int(part.strip(), 10) for part in val.split(",") if part.strip())
    except ValueError:
        raise ValueError("a comma-separated integer list") from None
    if not items:
        raise ValueError("a nonempty integer list")
    return items


def _parse_str(val: str) -> str:
    return val


# key -> value parser; kept explicit so the config surface is greppable
_PARSERS = {
    "phi": _parse_float,
    "beta": _parse_float,
    "sigma": _parse_float,
    "gamma1": _parse_float,
    "T": _parse_float,
    "d": _parse_int,
    "N": _parse_int,
    "M": _parse_int,
    "K": _parse_int,
    "lr0": _parse_float,
    "decay": _parse_float,
    "period": _parse_int,
    "hidden": _parse_int,
    "layers": _parse_int,
    "seed": _parse_int,
    "reps": _parse_int,
    "m_list": _parse_m_list,
    "activation": _parse_str,
    "riccati_steps": _parse_int,
}

# key -> (predicate, requirement shown in the error)
_CHECKS = {
    "phi": (lambda v: v >= 0, "must be >= 0"),
    "beta": (lambda v: v >= 0, "must be >= 0"),
    "sigma": (lambda v: v >= 0, "must be >= 0"),
    "gamma1": (lambda v: v > 0, "must be > 0"),
    "T": (lambda v: v > 0, "must be > 0"),
    "d": (lambda v: v >= 1, "must be >= 1"),
    "N": (lambda v: v >= 1, "must be >= 1"),
    "M": (lambda v: v >= 1, "must be >= 1"),
    "K": (lambda v: v >= 1, "must be >= 1"),
    "lr0": (lambda v: v > 0, "must be > 0"),
    "decay": (lambda v: 0 < v <= 1, "must be in (0, 1]"),
    "period": (lambda v: v >= 1, "must be >= 1"),
    "hidden": (lambda v: v >= 1, "must be >= 1"),
    "layers": (lambda v: v >= 1, "must be >= 1"),
    "reps": (lambda v: v >= 1, "must be >= 1"),
    "m_list": (lambda v: all(m >= 1 for m in v), "entries must be >= 1"),
    "activation": (lambda v: v in ("relu", "tanh"), "must be relu or tanh"),
    "riccati_steps": (lambda v: v >= 1, "must be >= 1"),
}


def parse_config(text: str) -> CliConfig:
    """Parse `key = value` lines into a CliConfig.

    Blank lines, full-line and trailing `#` comments, and bracketed section
    headers are accepted; keys are flat.  Unknown keys, unparseable values,
    duplicate keys, and invariant violations all report the offending key and
    line number.
    """
    seen: dict[str, int] = {}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            parsed = _PARSERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: key {key!r} expects {exc}, got {val!r}") from None
        check, requirement = _CHECKS.get(key, (lambda v: True, ""))
        if not check(parsed):
            raise ConfigError(f"line {lineno}: key {key!r} {requirement}, got {val!r}")
        values[key] = parsed
    return CliConfig(**values)


def render_config(cfg: CliConfig) -> str:
    """Inverse of parse_config: parse(render(cfg)) == cfg."""
    lines = []
    for f in fields(CliConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(m) for m in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from None
    return parse_config(text)


def _workers_from_env() -> int:
    raw = os.environ.get("MFCONTROL_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        workers = int(raw, 10)
    except ValueError:
        raise ConfigError(f"MFCONTROL_WORKERS must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ConfigError(f"MFCONTROL_WORKERS must be >= 1, got {workers}")
    return workers


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv(header: str, rows) -> str:
    lines = [header]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (int, str)) else _fmt(c) for c in row))
    return "\n".join(lines) + "\n"


def _banner(run: RunConfig, cfg: CliConfig, seed: int, workers: int) -> None:
    print(f"mfcontrol {run.subcommand}: seed = {seed}, workers = {workers}", file=sys.stderr)
    for line in render_config(cfg).rstrip("\n").splitlines():
        print(f"  {line}", file=sys.stderr)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ commands

def _cmd_riccati(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    sol = solve_riccati(cfg.lq_params(), steps=cfg.riccati_steps)
    rows = list(zip(sol.grid.nodes.tolist(), sol.nu.tolist()))
    text = _csv("t,nu", rows)
    terminal_ok = sol.nu[-1] == 2.0
    residual = float(np.abs(ode_residual(sol)).max())
    doubled = solve_riccati(cfg.lq_params(), steps=2 * cfg.riccati_steps)
    drift = abs(float(sol.nu[0]) - float(doubled.nu[0]))
    _note(f"terminal value 2: {'ok' if terminal_ok else 'VIOLATED'}")
    _note(f"max ODE residual: {residual:.3e} (require < 1e-06)")
    _note(f"nu(0) drift under step doubling: {drift:.3e} (require < 1e-09)")
    ok = terminal_ok and residual < 1e-6 and drift < 1e-9
    return text, 0 if ok else 1


def _cmd_simulate(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    cs = cfg.cs_params()
    if args.policy is not None:
        control = load_policy(args.policy)
        expected = feature_dim(cs)
        if control.input_dim != expected:
            raise ConfigError(
                f"policy {args.policy!r} takes {control.input_dim} inputs, "
                f"this configuration produces {expected}"
            )
    elif args.control == "exact":
        if cfg.beta != 0.0:
            raise ConfigError("--control exact requires beta = 0")
        control = feedback_from_riccati(solve_riccati(cfg.lq_params(), steps=cfg.riccati_steps), cfg.gamma1)
    else:
        control = zero_control
    grid = make_uniform_grid(0.0, cfg.T, cfg.M)
    e0 = sample_initial_ensemble(cfg.N, cfg.d, SeededStream(derive_seed(seed, "sim-init"), "init"))
    traj = rollout(e0, control, grid, cs, seed=derive_seed(seed, "sim-noise"), workers=workers)
    header = "t," + ",".join(f"mean_v_{c}" for c in range(cfg.d)) + ",var_v"
    rows = []
    for m, e in enumerate(traj.states):
        mean_v = e.v.mean(axis=0)
        dev = e.v - mean_v
        var_v = float(np.mean(np.sum(dev * dev, axis=1)))
        rows.append((grid.nodes[m], *[float(c) for c in mean_v], var_v))
    breakdown = empirical_cs_cost(traj, cfg.gamma1)
    _note(f"cost: total {breakdown.total!r} (state {breakdown.running_state!r}, "
          f"control {breakdown.running_control!r}, terminal {breakdown.terminal!r})")
    return _csv(header, rows), 0


def _cmd_train(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    tc = cfg.train_config(seed)

    def progress(k: int, cost: float, lr: float) -> None:
        if k % cfg.period == 0 or k == tc.K - 1:
            _note(f"iter {k}: cost {cost:.6f}, lr {lr:g}")

    policy, history = train(tc, workers=workers, callback=progress)
    if args.save_policy is not None:
        save_policy(policy, args.save_policy)
        _note(f"saved policy to {args.save_policy}")
    tail = history[-min(50, len(history)):]
    tail_avg = sum(c for _, c, _ in tail) / len(tail)
    _note(f"final {len(tail)}-iteration average cost: {tail_avg!r}")
    if cfg.beta == 0.0:
        exact = exact_lq_value(cfg.lq_params(), solve_riccati(cfg.lq_params(), steps=cfg.riccati_steps))
        _note(f"exact benchmark value: {exact!r} (gap {abs(tail_avg - exact) / exact:.2%})")
    return _csv("iteration,cost,lr", history), 0


def _cmd_converge(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    cs = cfg.cs_params()
    reference = None
    if cfg.beta == 0.0:
        reference = exact_lq_value(cfg.lq_params(), solve_riccati(cfg.lq_params(), steps=cfg.riccati_steps))
    protocol = "trained" if args.protocol == "trained" else "exact-projection"
    report = convergence_study(
        cfg.m_list, cs, reference, None, seed,
        N=cfg.N, reps=cfg.reps, workers=workers,
        protocol=protocol, train_config=cfg.train_config(seed),
    )
    for M, msg in report.flags:
        _note(f"note: M={M}: {msg}")
    _note(f"slope {report.slope!r}, intercept {report.intercept!r}")
    text = _csv("M,h,value,reference,abs_error", report.rows)
    text += f"slope,{_fmt(report.slope)}\n"
    return text, 0


def _cmd_lqvalue(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    if cfg.beta != 0.0:
        raise ConfigError("lqvalue requires beta = 0")
    lq = cfg.lq_params()
    sol = solve_riccati(lq, steps=cfg.riccati_steps)
    exact = exact_lq_value(lq, sol)
    control = feedback_from_riccati(sol, cfg.gamma1)
    mc_mean, mc_stderr = evaluate_policy(
        control, cfg.cs_params(), N=cfg.N, M=cfg.M, seed=seed, reps=cfg.reps, workers=workers
    )
    gap = abs(mc_mean - exact) / exact
    rows = [
        ("nu0", float(sol.nu[0])),
        ("exact_value", exact),
        ("mc_mean", mc_mean),
        ("mc_stderr", mc_stderr),
        ("rel_gap", gap),
    ]
    _note(f"exact {exact!r} vs Monte-Carlo {mc_mean!r}: relative gap {gap:.4%} (require < 2%)")
    return _csv("quantity,value", rows), 0 if gap < 0.02 else 1


def _cmd_lqcheck(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    stream = SeededStream(seed, "lqcheck")
    worst = 0.0
    for k in range(100):
        u = stream.uniforms(2 * k, 6, 1).ravel()
        coeffs = LinConvexCoeffs(
            b2=4.0 * u[0] - 2.0,
            gamma=4.0 * u[1] - 2.0,
            q=0.1 + 3.0 * u[2],
            qbar=3.0 * u[3],
            r=6.0 * u[4] - 3.0,
            c=4.0 * u[5] - 2.0,
        )
        size = 1 + int(stream.uniforms(2 * k + 1, 1, 1)[0, 0] * 64)
        xy = stream.normals(10_000 + k, size, 2) * 3.0
        xs, ys = xy[:, 0], xy[:, 1]
        a = hat_alpha_lq(0.0, xs, ys, xs.mean(), ys.mean(), coeffs)
        res = optimality_residual((xs, ys), 0.0, coeffs, a)
        scale = max(1.0, np.abs(xs).max(), np.abs(ys).max(), np.abs(a).max())
        worst = max(worst, float(np.abs(res).max()) / scale)
    _note(f"max relative optimality residual over 100 draws: {worst:.3e} (require < 1e-12)")
    return _csv("quantity,value", [("max_rel_residual", worst)]), 0 if worst < 1e-12 else 1


def _cmd_gradcheck(cfg: CliConfig, seed: int, workers: int, args) -> tuple[str, int]:
    # small fixed problem; the check is about the gradient engine, not scale
    cs = cfg.cs_params()
    N, M = 8, 4
    dims = (feature_dim(cs), *((cfg.hidden,) * cfg.layers), cfg.d)
    policy = init_policy(dims, seed=derive_seed(seed, "gradcheck-init"), hidden_activation=cfg.activation)
    e0 = sample_initial_ensemble(N, cfg.d, SeededStream(derive_seed(seed, "gradcheck-e0"), "init"))
    grid = make_uniform_grid(0.0, cfg.T, M)
    stream = SeededStream(derive_seed(seed, "gradcheck-noise"), "noise")
    noise = np.stack([math.sqrt(grid.h) * stream.normals(step=m, n=N, d=cfg.d) for m in range(M)])
    _, grad = rollout_cost_and_grad(policy, e0, grid, cs, noise=noise, workers=workers)
    theta = flatten_params(policy)

    def cost_at(vec: np.ndarray) -> float:
        traj = rollout(e0, replace_params(policy, vec), grid, cs, noise=noise, workers=workers)
        return empirical_cs_cost(traj, cs.gamma1).total

    target = min(24, theta.size)
    picks = SeededStream(derive_seed(seed, "gradcheck-coords"), "coords").uniforms(0, 2 * target, 1).ravel()
    coords = list(dict.fromkeys((picks * theta.size).astype(int).tolist()))[:target]
    for j in range(theta.size):  # top up if the draws collided
        if len(coords) == target:
            break
        if j not in coords:
            coords.append(j)
    h_fd = 1e-5
    worst = 0.0
    for j in coords:
        up, down = theta.copy(), theta.copy()
        up[j] += h_fd
        down[j] -= h_fd
        fd = (cost_at(up) - cost_at(down)) / (2 * h_fd)
        rel = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-8)
        worst = max(worst, rel)
    _note(f"max relative error over {len(coords)} coordinates: {worst:.3e} (require < 1e-05)")
    return _csv("quantity,value", [("max_rel_error", worst)]), 0 if worst < 1e-5 else 1


_COMMANDS = {
    "riccati": _cmd_riccati,
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "converge": _cmd_converge,
    "lqvalue": _cmd_lqvalue,
    "lqcheck": _cmd_lqcheck,
    "gradcheck": _cmd_gradcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfcontrol",
        description="Interacting-particle control: simulation, training, benchmarks.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="|".join(_COMMANDS))
    helps = {
        "riccati": "solve the benchmark ODE and emit (t, nu)",
        "simulate": "roll out the particle system and emit per-node statistics",
        "train": "run the policy-gradient loop and emit the cost history",
        "converge": "run the step-count convergence study and emit the error table",
        "lqvalue": "compare the closed-form value with a Monte-Carlo estimate",
        "lqcheck": "verify the optimality identity on random coefficient draws",
        "gradcheck": "compare the pathwise gradient against finite differences",
    }
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="PATH", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", metavar="PATH", default=None, help="write CSV here instead of stdout")
        if name == "train":
            p.add_argument("--save-policy", metavar="PATH", default=None,
                           help="write the trained policy checkpoint here")
        if name == "simulate":
            p.add_argument("--policy", metavar="PATH", default=None,
                           help="drive the rollout with this policy checkpoint")
            p.add_argument("--control", choices=("zero", "exact"), default="zero",
                           help="built-in control when no checkpoint is given")
        if name == "converge":
            p.add_argument("--protocol", choices=("exact", "trained"), default="exact",
                           help="evaluate the projected benchmark control, or train per step count")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    run = RunConfig(subcommand=args.subcommand, config_path=args.config,
                    seed_override=args.seed, out_path=args.out)
    try:
        cfg = _load_config(run.config_path)
        workers = _workers_from_env()
    except ConfigError as exc:
        print(f"mfcontrol: error: {exc}", file=sys.stderr)
        return 2
    seed = run.seed_override if run.seed_override is not None else cfg.seed
    _banner(run, cfg, seed, workers)
    try:
        text, code = _COMMANDS[run.subcommand](cfg, seed, workers, args)
    except ConfigError as exc:
        print(f"mfcontrol: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"mfcontrol: error: {exc}", file=sys.stderr)
        return 1
    try:
        if run.out_path is not None:
            with open(run.out_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    except OSError as exc:
        print(f"mfcontrol: error: cannot write output: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
