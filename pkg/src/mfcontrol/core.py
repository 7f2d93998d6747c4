"""Shared domain types: time grids, particle ensembles, counter-based random
streams, and the generic controlled interacting-particle problem descriptor.

Everything downstream (dynamics, costs, training, benchmarks) builds on the
types here.  Two conventions are global:

* all floating computation is float64 (gradient checks at 1e-5 relative
  tolerance are hopeless in float32);
* randomness is counter-based: every Gaussian variate is a pure function of
  (seed, purpose, step, particle, component), so parallel and sequential
  executions consume identical numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import ndtri

__all__ = [
    "TimeGrid",
    "Ensemble",
    "EnsembleMoments",
    "SampleLaw",
    "SeededStream",
    "GenericMfcProblem",
    "make_uniform_grid",
    "empirical_moments",
    "gaussian_increment",
    "derive_seed",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_MULT_1 = 0xBF58476D1CE4E5B9
_MIX_MULT_2 = 0x94D049BB133111EB
_U53 = np.uint64(11)
_TWO_NEG_53 = 2.0**-53
_TWO_NEG_54 = 2.0**-54


def _fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a short label, used to key stream purposes."""
    acc = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        acc ^= byte
        acc = (acc * 0x100000001B3) & _MASK64
    return acc


def _mix64(z: int) -> int:
    # SplitMix64 finalizer on plain Python ints (masked to 64 bits).
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_MULT_1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_MULT_2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # Same finalizer, vectorized; uint64 arithmetic wraps modulo 2**64.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_MULT_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_MULT_2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, purpose: str, index: int = 0) -> int:
    """Derive a child seed from (seed, purpose, index), deterministically.

    Used to give independent repetitions / training iterations their own
    root seeds without any sequential state.
    """
    z = _mix64((seed & _MASK64) ^ _GOLDEN)
    z = _mix64(z ^ _fnv1a64(purpose))
    return _mix64(z ^ (index & _MASK64))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t0, T] into M cells.

    nodes[i] = t0 + i*h with h = (T - t0)/M; node spacing is uniform up to
    one float rounding per node (exact when t0, T, h are exactly
    representable, e.g. [0, 1] with M a power of two).
    """

    t0: float
    T: float
    M: int
    h: float = field(init=False)
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not float(self.T) > float(self.t0):
            raise ValueError(f"grid needs T > t0, got t0={self.t0}, T={self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"grid needs a positive integer step count, got M={self.M}")
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "M", int(self.M))
        h = (self.T - self.t0) / self.M
        if not np.isfinite(h) or h <= 0.0:
            raise ValueError(f"degenerate step size h={h}")
        nodes = self.t0 + h * np.arange(self.M + 1, dtype=np.float64)
        nodes.flags.writeable = False
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "nodes", nodes)


def make_uniform_grid(t0: float, T: float, M: int) -> TimeGrid:
    return TimeGrid(t0=t0, T=T, M=M)


@dataclass(frozen=True)
class Ensemble:
    """N particles with positions x and velocities v, both (N, d) float64.

    1-D inputs of length N are accepted as a convenience and treated as d=1.
    Entries must be finite; blow-ups are caught at construction.
    """

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if v.ndim == 1:
            v = v[:, None]
        if x.ndim != 2 or v.ndim != 2 or x.shape != v.shape:
            raise ValueError(f"x and v must share shape (N, d), got {x.shape} and {v.shape}")
        if x.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            raise ValueError("ensemble entries must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


class EnsembleMoments(NamedTuple):
    mean_x: np.ndarray
    mean_v: np.ndarray
    var_v: float


def empirical_moments(e: Ensemble) -> EnsembleMoments:
    """Empirical mean position/velocity and velocity spread.

    var_v = (1/N) sum_i |v_i - mean_v|^2 with |.| the Euclidean norm over
    components (a scalar for any d).
    """
    mean_x = e.x.mean(axis=0)
    mean_v = e.v.mean(axis=0)
    dev = e.v - mean_v
    var_v = float(np.mean(np.sum(dev * dev, axis=1)))
    return EnsembleMoments(mean_x=mean_x, mean_v=mean_v, var_v=var_v)


class SeededStream:
    """Counter-based Gaussian/uniform source.

    Each variate is a pure function of (seed, purpose, step, particle,
    component): the tag components are folded through a SplitMix64
    finalizer chain and the resulting 53-bit uniform is mapped through the
    inverse normal CDF.  Random access by tag means any scheduling of
    consumers sees identical numbers; there is no sequential state at all.
    """

    def __init__(self, seed: int, purpose: str) -> None:
        self.seed = seed & _MASK64
        self.purpose = purpose
        z = _mix64(self.seed ^ _GOLDEN)
        self._base = _mix64(z ^ _fnv1a64(purpose))

    def _bits(self, step: int, n: int, d: int, first_particle: int) -> np.ndarray:
        zs = np.uint64(_mix64(self._base ^ (step & _MASK64)))
        particles = np.arange(first_particle, first_particle + n, dtype=np.uint64)[:, None]
        components = np.arange(d, dtype=np.uint64)[None, :]
        z = _mix64_array(zs ^ particles)
        return _mix64_array(z ^ components)

    def uniforms(self, step: int, n: int, d: int, first_particle: int = 0) -> np.ndarray:
        """(n, d) block of uniforms on [0, 1), tagged by (step, particle, component)."""
        return (self._bits(step, n, d, first_particle) >> _U53) * _TWO_NEG_53

    def normals(self, step: int, n: int, d: int, first_particle: int = 0) -> np.ndarray:
        """(n, d) block of standard normals, same tag layout as `uniforms`.

        The uniform is shifted into the open interval (0, 1) before the
        inverse CDF so the output is always finite.
        """
        u = (self._bits(step, n, d, first_particle) >> _U53) * _TWO_NEG_53 + _TWO_NEG_54
        return ndtri(u)

    def normal(self, step: int, particle: int, component: int) -> float:
        """Scalar access; bit-identical to the matching block entry."""
        z = _mix64(self._base ^ (step & _MASK64))
        z = _mix64(z ^ (particle & _MASK64))
        z = _mix64(z ^ (component & _MASK64))
        u = (z >> 11) * _TWO_NEG_53 + _TWO_NEG_54
        return float(ndtri(u))


def gaussian_increment(
    stream: SeededStream, h: float, step: int, particle: int, d: int
) -> np.ndarray:
    """One particle's Brownian increment over a cell of length h.

    Returns sqrt(h) * Z with Z the d standard normals at tag
    (step, particle, 0..d-1); h = 0 gives the zero vector exactly.
    """
    if h < 0:
        raise ValueError(f"negative step size h={h}")
    return np.sqrt(h) * stream.normals(step, 1, d, first_particle=particle)[0]


@dataclass(frozen=True)
class SampleLaw:
    """Empirical joint law of (state, control), carried as the sample arrays.

    Coefficients only ever consume means or pairwise sums of these samples,
    so the means are precomputed once per evaluation node.
    """

    states: np.ndarray
    controls: np.ndarray | None = None
    mean_state: np.ndarray = field(init=False, repr=False, compare=False)
    mean_control: np.ndarray | None = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.float64)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "mean_state", states.mean(axis=0))
        if self.controls is None:
            object.__setattr__(self, "mean_control", None)
        else:
            controls = np.asarray(self.controls, dtype=np.float64)
            object.__setattr__(self, "controls", controls)
            object.__setattr__(self, "mean_control", controls.mean(axis=0))


@dataclass(frozen=True)
class GenericMfcProblem:
    """Controlled interacting-particle problem in coefficient form.

    The law arguments of drift/diffusion/costs are represented by a
    `SampleLaw` over the whole ensemble (empirical-measure convention).
    Coefficients are evaluated on the full batch for efficiency:

      drift(t, states (N,n), controls (N,k), law)        -> (N, n)
      diffusion(t, states, controls, law)                -> (n, dw) or (N, n, dw)
      running_cost(t, states, controls, law)             -> (N,)
      terminal_cost(states, law)                         -> (N,)

    A constant (n, dw) diffusion matrix is broadcast across particles.
    """

    n: int
    k: int
    dw: int
    drift: Callable[[float, np.ndarray, np.ndarray, SampleLaw], np.ndarray]
    diffusion: Callable[[float, np.ndarray, np.ndarray, SampleLaw], np.ndarray]
    running_cost: Callable[[float, np.ndarray, np.ndarray, SampleLaw], np.ndarray]
    terminal_cost: Callable[[np.ndarray, SampleLaw], np.ndarray]

    def __post_init__(self) -> None:
        if self.n < 1 or self.k < 1 or self.dw < 1:
            raise ValueError("state, control, and noise dimensions must be >= 1")
