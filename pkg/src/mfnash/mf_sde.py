"""Interacting-particle Euler-Maruyama simulation of scalar mean-field SDEs.

The law dependence of the coefficients enters only through ``E[X(s)]``,
which is replaced by the synchronous ensemble mean of all ``M`` particles.
Strategies are vectorised callables ``phi(s, y) -> control`` acting on an
array of particle states.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import CoefficientError, DivergenceError, GridError, PairingError, WindowError
from .rng import NoiseStream

OVERFLOW_GUARD = 1e12
_GRID_TOL = 1e-9


class ClampWarning(UserWarning):
    """Strategy output fell outside the declared control set and was clamped."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 + k*dt`` for ``k = 0..n_steps``."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.T)) or not self.t0 < self.T:
            raise GridError(f"need finite t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise GridError(f"n_steps must be a positive integer, got {self.n_steps}")

    @classmethod
    def from_dt(cls, t0, T, dt):
        n = round((T - t0) / dt)
        if n < 1 or abs(n * dt - (T - t0)) > 1e-9 * max(1.0, abs(T - t0)):
            raise GridError(f"dt={dt} does not divide [{t0}, {T}]")
        return cls(float(t0), float(T), int(n))

    @property
    def dt(self):
        return (self.T - self.t0) / self.n_steps

    @property
    def points(self):
        return self.t0 + np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t):
        """Index ``k`` with ``t0 + k*dt == t`` (to rounding), else GridError."""
        k = round((t - self.t0) / self.dt)
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.dt - t) > _GRID_TOL * max(1.0, self.dt):
            raise GridError(f"time {t} is not a point of {self}")
        return int(k)

    def tail(self, k):
        """The grid restricted to ``[t_k, T]`` with the same step."""
        if not 0 <= k < self.n_steps:
            raise GridError(f"cannot start a sub-grid at index {k} of {self.n_steps}")
        return TimeGrid(self.t0 + k * self.dt, self.T, self.n_steps - k)


@dataclass(frozen=True)
class MeanFieldDynamics:
    """Coefficient pair ``(s, y, z, v) -> real`` with ``z`` the mean state."""

    drift: Callable
    diffusion: Callable
    control_set: Optional[tuple] = None

    def clamp(self, u):
        if self.control_set is None:
            return u, 0
        lo, hi = self.control_set
        bad = int(np.count_nonzero((u < lo) | (u > hi)))
        return (np.clip(u, lo, hi) if bad else u), bad


@dataclass(frozen=True)
class FeedbackStrategy:
    """Deterministic feedback map ``phi(s, y)``; vectorised over ``y``."""

    phi: Callable
    name: str = ""

    def __call__(self, s, y):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(self.phi(s, y), dtype=float), y.shape)

    def value(self, s, x):
        """Scalar control at a single state."""
        return float(self(s, np.array([float(x)]))[0])

    @classmethod
    def constant(cls, v):
        v = float(v)
        return cls(lambda s, y: np.full(np.shape(y), v), name=f"const({v:g})")

    def shifted(self, delta):
        base = self.phi
        return FeedbackStrategy(lambda s, y: base(s, y) + delta, name=f"{self.name}+{delta:g}")


@dataclass(frozen=True)
class SpikeStrategy:
    """A base strategy overridden on the window ``[t, t + eps)``.

    ``mode="override"``: inside the window the control is ``override``
    (a strategy or a constant).  ``mode="shift"``: inside the window the
    control is the base control plus the constant ``override``, the
    open-loop form ``u + nu * 1_[t, t+eps]``.

    ``continuation="open_loop"`` evaluates the base strategy along the
    unperturbed trajectory driven by the same noise, so that the perturbed
    control equals the equilibrium control process outside the window.
    ``continuation="feedback"`` re-evaluates the base map on the perturbed
    state.
    """

    base: FeedbackStrategy
    override: Union[FeedbackStrategy, float]
    t: float
    eps: float
    mode: str = "override"
    continuation: str = "open_loop"

    def __post_init__(self):
        if self.eps < 0:
            raise WindowError(f"eps must be >= 0, got {self.eps}")
        if self.mode not in ("override", "shift"):
            raise ValueError(f"unknown spike mode {self.mode!r}")
        if self.continuation not in ("open_loop", "feedback"):
            raise ValueError(f"unknown continuation {self.continuation!r}")

    def window(self, grid):
        """Global index range ``[k_start, k_end)`` of grid points in the window."""
        if self.eps == 0:
            return (0, 0)
        k0 = grid.index_of(self.t)
        if self.eps < grid.dt * (1 - _GRID_TOL):
            raise WindowError(f"eps={self.eps} shorter than dt={grid.dt}")
        n = math.ceil(self.eps / grid.dt - _GRID_TOL)
        if k0 + n > grid.n_steps:
            raise WindowError(f"window [{self.t}, {self.t}+{self.eps}] runs past T={grid.T}")
        return (k0, k0 + n)

    def effective_eps(self, grid):
        k0, k1 = self.window(grid)
        return (k1 - k0) * grid.dt


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``M`` particle paths on ``grid`` plus the per-step ensemble mean.

    ``controls`` holds the applied (clamped) controls, shape ``(M, n_steps)``,
    when the simulation stored them.  ``source_grid`` and ``step_offset``
    locate the ensemble in the grid the noise was addressed on.
    """

    grid: TimeGrid
    paths: np.ndarray
    ensemble_mean: np.ndarray
    seed: int
    M: int
    x0: float
    source_grid: TimeGrid
    step_offset: int
    controls: Optional[np.ndarray] = None
    n_clamped: int = 0
    control_set: Optional[tuple] = field(default=None, repr=False)

    @property
    def terminal(self):
        return self.paths[:, -1]

    @property
    def times(self):
        return self.grid.points


def _check_finite(arr, what, s):
    if not np.all(np.isfinite(arr)):
        raise CoefficientError(f"{what} returned a non-finite value at s = {s:g}")


def _coeff(fn, s, y, z, u, what):
    out = np.broadcast_to(np.asarray(fn(s, y, z, u), dtype=float), y.shape)
    _check_finite(out, what, s)
    return out


def simulate(dynamics, strategy, t, x, grid, M, seed, *, store_controls=True, threads=None):
    """Simulate ``M`` interacting particles from ``X(t) = x`` on ``grid``.

    Each step uses the ensemble mean formed from all particles before the
    update::

        X[k+1] = X[k] + b(s_k, X[k], mean_k, u_k) dt + sigma(...) sqrt(dt) Z[m, k]

    with ``Z`` addressed by ``(seed, path, global step)``.  Raises
    CoefficientError on non-finite coefficients and DivergenceError once
    any ``|X|`` exceeds :data:`OVERFLOW_GUARD`.
    """
    M = int(M)
    if M < 2:
        raise ValueError("M must be >= 2")
    k0 = grid.index_of(t)
    if k0 >= grid.n_steps:
        raise GridError(f"start time {t} leaves no steps before T={grid.T}")
    sub = grid.tail(k0)
    n = sub.n_steps
    dt = grid.dt
    sqdt = math.sqrt(dt)
    times = sub.points
    noise = NoiseStream(seed, threads=threads)

    spike = strategy if isinstance(strategy, SpikeStrategy) else None
    if spike is None and not callable(strategy):
        raise TypeError("strategy must be a FeedbackStrategy or SpikeStrategy")
    if spike is not None:
        w0, w1 = spike.window(grid)
        w0, w1 = w0 - k0, w1 - k0
        if spike.eps > 0 and w0 < 0:
            raise WindowError(f"spike window starts at {spike.t} before the simulation start {t}")
        shadow = spike.continuation == "open_loop" and w1 > w0
        base = spike.base
        override = spike.override
    else:
        w0 = w1 = 0
        shadow = False

    paths = np.empty((M, n + 1))
    means = np.empty(n + 1)
    controls = np.empty((M, n)) if store_controls else None
    X = np.full(M, float(x))
    Xh = X.copy() if shadow else None
    paths[:, 0] = X
    clamped = 0

    chunk = 16
    Z_chunk = None
    for j in range(n):
        if j % chunk == 0:
            Z_chunk = noise.normals_steps(range(k0 + j, k0 + min(j + chunk, n)), M)
        Z = Z_chunk[j % chunk]
        s = times[j]
        m = X.mean()
        means[j] = m

        if spike is None:
            u = strategy(s, X)
        else:
            ref = Xh if shadow else X
            in_win = w0 <= j < w1
            if not in_win:
                u = base(s, ref)
            elif spike.mode == "shift":
                u = base(s, ref) + float(override)
            elif callable(override):
                u = override(s, X)
            else:
                u = np.full(M, float(override))
        _check_finite(u, "strategy", s)
        u, bad = dynamics.clamp(u)
        clamped += bad

        if shadow:
            mh = Xh.mean()
            uh, bad_h = dynamics.clamp(base(s, Xh))
            bh = _coeff(dynamics.drift, s, Xh, mh, uh, "drift")
            sh = _coeff(dynamics.diffusion, s, Xh, mh, uh, "diffusion")

        b = _coeff(dynamics.drift, s, X, m, u, "drift")
        sg = _coeff(dynamics.diffusion, s, X, m, u, "diffusion")
        X = X + b * dt + sg * sqdt * Z
        if shadow:
            Xh = Xh + bh * dt + sh * sqdt * Z
        if not np.all(np.abs(X) <= OVERFLOW_GUARD):
            raise DivergenceError(k0 + j + 1, times[j + 1], OVERFLOW_GUARD)
        if store_controls:
            controls[:, j] = u
        paths[:, j + 1] = X
    means[n] = X.mean()

    if clamped:
        warnings.warn(f"{clamped} control values clamped to {dynamics.control_set}", ClampWarning,
                      stacklevel=2)
    return PathEnsemble(grid=sub, paths=paths, ensemble_mean=means, seed=noise.seed, M=M,
                        x0=float(x), source_grid=grid, step_offset=k0, controls=controls,
                        n_clamped=clamped, control_set=dynamics.control_set)


def resample_with_same_noise(ensemble, dynamics, alt_strategy, *, grid=None, M=None, seed=None,
                             store_controls=True, threads=None):
    """Re-simulate ``ensemble``'s start point under ``alt_strategy`` with identical increments.

    ``grid``, ``M`` and ``seed`` may be passed to assert the pairing; any
    mismatch raises PairingError.
    """
    if grid is not None and grid != ensemble.source_grid:
        raise PairingError(f"grid {grid} differs from the ensemble's {ensemble.source_grid}")
    if M is not None and int(M) != ensemble.M:
        raise PairingError(f"M={M} differs from the ensemble's M={ensemble.M}")
    if seed is not None and int(seed) != ensemble.seed:
        raise PairingError(f"seed={seed} differs from the ensemble's seed={ensemble.seed}")
    return simulate(dynamics, alt_strategy, ensemble.grid.t0, ensemble.x0, ensemble.source_grid,
                    ensemble.M, ensemble.seed, store_controls=store_controls, threads=threads)
