"""Mean-field LQG game: limiting problem, consistency fixed point, N-player simulation.

Player ``i`` controls ``dX_i = (a X_i + b u_i) ds + sigma dW_i`` and pays::

    1/2 E int u_i^2 ds + gamma/2 E[X_i(T) - Gamma1 x_i - Gamma2 X^(-i)(T)]^2

where ``X^(-i)`` is the average of the other players.  In the limiting
problem ``X^(-i)(T)`` is frozen at the deterministic ``Xbar_T``, which has
to be consistent with the mean of the resulting closed-loop state.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError, RiccatiBlowupError, SingularConsistencyError
from .lq_equilibria import W_FLOOR, LQRParams, lqr_beta, solve_lqr_vw
from .mf_sde import OVERFLOW_GUARD, FeedbackStrategy, TimeGrid
from .rng import NoiseStream

SINGULARITY_FLOOR = 1e-10


@dataclass(frozen=True)
class GameParams:
    a: float
    b: float
    sigma: float
    gamma: float
    Gamma1: float
    Gamma2: float
    T: float
    y0: float
    N: int = 16

    def __post_init__(self):
        if self.Gamma1 == 0 or self.Gamma2 == 0:
            raise ValueError("Gamma1 and Gamma2 must be nonzero")
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def with_N(self, N):
        d = asdict(self)
        d["N"] = int(N)
        return GameParams(**d)

    @property
    def lqr(self):
        return LQRParams(self.a, self.b, self.sigma, self.gamma, self.T)


@dataclass(frozen=True, eq=False)
class LimitingSolution:
    """Coefficients ``alpha_s, beta_s`` on ``grid`` and the feedback family."""

    params: GameParams
    grid: TimeGrid
    alpha: np.ndarray
    beta: np.ndarray

    def coeffs(self, s):
        pts = self.grid.points
        return np.interp(s, pts, self.alpha), np.interp(s, pts, self.beta)

    def gain(self, s):
        """Closed-loop state gain ``-b (alpha_s - beta_s Gamma1)``."""
        al, be = self.coeffs(s)
        return -self.params.b * (al - be * self.params.Gamma1)

    def offset(self, s, xbar_T):
        _, be = self.coeffs(s)
        return self.params.b * be * self.params.Gamma2 * xbar_T

    def feedback(self, xbar_T):
        """``u(s, y) = -b (alpha_s - beta_s Gamma1) y + b beta_s Gamma2 Xbar_T``."""
        return FeedbackStrategy(lambda s, y: self.gain(s) * y + self.offset(s, xbar_T),
                                name="lqg_equilibrium")

    def ansatz_adjoint_at(self, t, x, xbar_T):
        """``(p, q, P)`` read off the affine ansatz ``p = beta (Gamma1 x + Gamma2 Xbar_T) - alpha y``.

        The ansatz solves the first-order adjoint equation only when
        ``Gamma1 = 1`` and ``Gamma2 Xbar_T = 0``; otherwise the closed loop
        leaves a drift residual ``b^2 alpha beta ((1 - Gamma1) y - Gamma2 Xbar_T)``.
        ConsistencySolution.adjoint_at gives the exact value.
        """
        pr = self.params
        al, be = self.coeffs(t)
        al, be = float(al), float(be)
        p = be * (pr.Gamma1 * x + pr.Gamma2 * xbar_T) - al * x
        return p, -pr.sigma * al, -pr.gamma * math.exp(2 * pr.a * (pr.T - t))

    def ansatz_spike_limit(self, t, x, v, xbar_T):
        """``H(v) - H(u)`` with the ansatz adjoint, which reduces to ``-(v - u(t, x))^2 / 2``."""
        u = self.feedback(xbar_T).value(t, x)
        p, q, P = self.ansatz_adjoint_at(t, x, xbar_T)
        b = self.params.b
        # H(v) - H(u) with constant diffusion; the second-order term vanishes.
        return b * p * (v - u) - 0.5 * (v * v - u * u)


def solve_limiting_problem(p, grid):
    """Backward ODEs for ``alpha, beta`` with terminal value ``gamma``.

    Uses the same linearised system as the single-agent regulator.
    """
    lp = p.lqr
    VW = solve_lqr_vw(lp, grid)
    w = VW[:, 1]
    bad = np.flatnonzero(np.abs(w) < W_FLOOR)
    if bad.size:
        raise RiccatiBlowupError(float(grid.points[bad[-1]]), float(w[bad[-1]]))
    alpha = VW[:, 0] / w
    beta = lqr_beta(lp, grid.points)
    beta[-1] = p.gamma
    return LimitingSolution(p, grid, alpha, beta)


@dataclass(frozen=True, eq=False)
class ConsistencySolution:
    """Consistent terminal mean and its closed-loop transition structure.

    ``mean_traj`` is sampled on ``grid``; ``phi_T0`` is ``Phi(T, 0)``.
    """

    xbar_T: float
    mass: float
    phi_T0: float
    grid: TimeGrid
    mean_traj: np.ndarray
    log_phi: np.ndarray = field(repr=False)
    limiting: LimitingSolution = field(repr=False)
    unit_traj: np.ndarray = field(repr=False, default=None)

    def phi_kernel(self, t, s):
        """Transition function ``Phi(t, s) = exp(int_s^t closed-loop coefficient)``."""
        pts = self.grid.points
        return np.exp(np.interp(t, pts, self.log_phi) - np.interp(s, pts, self.log_phi))

    def fixed_point_residual(self):
        return abs(self.xbar_T - self.phi_T0 * self.params.y0 - self.mass * self.xbar_T)

    @property
    def params(self):
        return self.limiting.params

    def mean_at(self, s):
        return np.interp(s, self.grid.points, self.mean_traj)

    def strategy(self):
        return self.limiting.feedback(self.xbar_T)

    def terminal_mean_from(self, t, x):
        """``E X(T)`` of the closed loop restarted at ``(t, x)`` with ``t`` on the grid.

        Linear in ``x``: ``Phi(T, t) x + Xbar_T int_t^T Phi(T, s) b^2 beta_s Gamma2 ds``,
        where the integral is ``mass - Phi(T, t) mu(t)`` and ``mu`` is the
        unit-forcing mean started from zero at time 0.
        """
        k = self.grid.index_of(t)
        phi = math.exp(self.log_phi[-1] - self.log_phi[k])
        tail = self.mass - phi * self.unit_traj[k]
        return phi * x + self.xbar_T * tail

    def adjoint_at(self, t, x):
        """Exact ``(p, q, P)`` of the limiting problem at ``s = t`` from ``x``.

        ``dp = -a p ds + q dW`` with ``p(T) = -gamma (X(T) - Gamma1 x - Gamma2 Xbar_T)``
        gives ``E p(t) = -gamma e^{a (T - t)} (E X(T) - Gamma1 x - Gamma2 Xbar_T)``.
        """
        pr = self.params
        grow = math.exp(pr.a * (pr.T - t))
        D = self.terminal_mean_from(t, x) - pr.Gamma1 * x - pr.Gamma2 * self.xbar_T
        al, be = self.limiting.coeffs(t)
        return -pr.gamma * grow * D, -pr.sigma * float(al), -pr.gamma * grow * grow

    def spike_limit(self, t, x, v):
        """``H(v) - H(u(t, x))`` of the limiting problem: ``b p (v - u) - (v^2 - u^2) / 2``.

        With constant diffusion the second-order adjoint does not enter.
        """
        u = self.strategy().value(t, x)
        p, _, _ = self.adjoint_at(t, x)
        return self.params.b * p * (v - u) - 0.5 * (v * v - u * u)

    def to_dict(self):
        return {"xbar_T": self.xbar_T, "mass": self.mass, "phi_T0": self.phi_T0,
                "params": asdict(self.params), "grid": asdict(self.grid),
                "s": self.grid.points.tolist(), "m": self.mean_traj.tolist()}


def _mean_ode(lim, n, forcing, y_init):
    """RK4 for ``m' = c_s m + forcing * b^2 beta_s Gamma2`` on the coarse grid.

    ``c_s = a - b^2 (alpha_s - beta_s Gamma1)`` is the closed-loop
    coefficient; the forcing is the equilibrium offset ``b beta_s Gamma2 Xbar_T``
    entering the drift through ``b``.

    ``lim`` lives on a grid with twice the resolution, so the RK4 stages
    read the coefficients exactly at ``s_k, s_{k+1/2}, s_{k+1}``.
    """
    p = lim.params
    c = p.a - p.b ** 2 * (lim.alpha - lim.beta * p.Gamma1)
    f = p.b ** 2 * lim.beta * p.Gamma2 * forcing
    h = 2 * lim.grid.dt
    m = np.empty(n + 1)
    m[0] = y = float(y_init)
    for k in range(n):
        i = 2 * k
        k1 = c[i] * y + f[i]
        k2 = c[i + 1] * (y + h / 2 * k1) + f[i + 1]
        k3 = c[i + 1] * (y + h / 2 * k2) + f[i + 1]
        k4 = c[i + 2] * (y + h * k3) + f[i + 2]
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        m[k + 1] = y
    return m


def _log_phi(lim, n):
    """Integrated closed-loop coefficient ``int_0^s c`` by Simpson on each coarse cell."""
    p = lim.params
    c = p.a - p.b ** 2 * (lim.alpha - lim.beta * p.Gamma1)
    h = 2 * lim.grid.dt
    cells = h / 6 * (c[0:-1:2] + 4 * c[1::2] + c[2::2])
    return np.concatenate([[0.0], np.cumsum(cells)])[: n + 1]


def solve_consistency(p, grid, floor=SINGULARITY_FLOOR):
    """Solve ``Xbar_T = Phi(T,0) y0 + mass * Xbar_T`` directly.

    ``mass = b^2 Gamma2 int_0^T Phi(T, s) beta_s ds``.

    ``Phi(T, 0)`` and ``mass`` come from two RK4 integrations of the
    closed-loop mean ODE (homogeneous from 1, and from 0 with unit
    forcing).  Raises SingularConsistencyError when ``|1 - mass| <= floor``.
    """
    fine = TimeGrid(grid.t0, grid.T, 2 * grid.n_steps)
    lim = solve_limiting_problem(p, fine)
    n = grid.n_steps
    phi_T0 = _mean_ode(lim, n, 0.0, 1.0)[-1]
    unit = _mean_ode(lim, n, 1.0, 0.0)
    mass = unit[-1]
    if not abs(1.0 - mass) > floor:
        raise SingularConsistencyError(float(mass), floor)
    xbar = phi_T0 * p.y0 / (1.0 - mass)
    m = _mean_ode(lim, n, xbar, p.y0)
    coarse = LimitingSolution(p, grid, lim.alpha[::2].copy(), lim.beta[::2].copy())
    return ConsistencySolution(float(xbar), float(mass), float(phi_T0), grid, m,
                               _log_phi(lim, n), coarse, unit)


def picard_consistency(p, grid, x_init=0.0, tol=1e-13, max_iter=10000):
    """Oracle: iterate ``X <- m_X(T)``, re-integrating the mean ODE each time."""
    fine = TimeGrid(grid.t0, grid.T, 2 * grid.n_steps)
    lim = solve_limiting_problem(p, fine)
    x = float(x_init)
    for it in range(1, max_iter + 1):
        nxt = _mean_ode(lim, grid.n_steps, x, p.y0)[-1]
        if abs(nxt - x) <= tol * max(1.0, abs(nxt)):
            return float(nxt), it
        x = nxt
    raise SingularConsistencyError(float("nan"), tol)


# ---------------------------------------------------------------------------
# N-player simulation


@dataclass(frozen=True, eq=False)
class GameSimulation:
    """Replicated population run: ``costs[r, i]`` and terminal states ``X_T[r, i]``."""

    N: int
    M_mc: int
    X_T: np.ndarray
    costs: np.ndarray
    paths: Optional[np.ndarray] = None
    pop_means: Optional[np.ndarray] = None

    def others_mean_T(self):
        """``X^(-i)(T)`` per replication and player."""
        tot = self.X_T.sum(axis=1, keepdims=True)
        return (tot - self.X_T) / (self.N - 1)

    def cost_estimates(self):
        """Per-player mean cost and its standard error over replications."""
        return self.costs.mean(axis=0), self.costs.std(axis=0, ddof=1) / math.sqrt(self.M_mc)


def _population(p, grid, M_mc, seed, strategies, lanes, *, t_index=0, x0=None, store_paths=False,
                threads=None):
    """Advance ``len(lanes)`` decentralised players; returns ``(X_T, control_cost, paths, means)``.

    Player ``j`` reads noise lane ``lanes[j]`` and replication index ``r``.
    ``strategies`` is one callable or a list with one entry per player.
    """
    noise = NoiseStream(seed, threads=threads)
    n_pl = len(lanes)
    n = grid.n_steps
    dt = grid.dt
    sq = math.sqrt(dt)
    pts = grid.points
    start = p.y0 if x0 is None else x0
    X = np.broadcast_to(np.asarray(start, dtype=float), (M_mc, n_pl)).copy()
    ctl = np.zeros((M_mc, n_pl))
    paths = np.empty((n - t_index + 1, M_mc, n_pl)) if store_paths else None
    means = np.empty(n - t_index + 1)
    if store_paths:
        paths[0] = X
    means[0] = X.mean()
    per_player = isinstance(strategies, (list, tuple))
    for j, k in enumerate(range(t_index, n)):
        s = pts[k]
        if per_player:
            u = np.column_stack([strategies[c](s, X[:, c]) for c in range(n_pl)])
        else:
            u = strategies(s, X)
        Z = noise.normals_lanes(k, M_mc, lanes)
        ctl += 0.5 * u * u * dt
        X = X + (p.a * X + p.b * u) * dt + p.sigma * sq * Z
        if not np.all(np.abs(X) <= OVERFLOW_GUARD):
            raise DivergenceError(k + 1, pts[k + 1], OVERFLOW_GUARD)
        if store_paths:
            paths[j + 1] = X
        means[j + 1] = X.mean()
    return X, ctl, paths, means


def simulate_game(p, grid, M_mc, seed, strategies=None, *, consistency=None, store_paths=False,
                  threads=None):
    """Simulate ``M_mc`` replications of the whole ``N``-player population from ``y0``.

    ``strategies`` defaults to the equilibrium feedback for every player;
    a list gives one decentralised feedback per player.  Costs use the
    exact within-replication average of the other players.
    """
    if strategies is None:
        consistency = consistency or solve_consistency(p, grid)
        strategies = consistency.strategy()
    if isinstance(strategies, (list, tuple)) and len(strategies) != p.N:
        raise ValueError(f"need {p.N} strategies, got {len(strategies)}")
    X_T, ctl, paths, means = _population(p, grid, M_mc, seed, strategies, range(p.N),
                                         store_paths=store_paths, threads=threads)
    others = (X_T.sum(axis=1, keepdims=True) - X_T) / (p.N - 1)
    costs = ctl + 0.5 * p.gamma * (X_T - p.Gamma1 * p.y0 - p.Gamma2 * others) ** 2
    return GameSimulation(p.N, int(M_mc), X_T, costs, paths, means)


def _loglog_fit(x, y, z=1.96):
    """Least-squares slope of ``log y`` on ``log x`` with a normal CI."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    dof = len(lx) - 2
    if dof > 0:
        s2 = float(resid @ resid) / dof
        se = math.sqrt(s2 * np.linalg.inv(A.T @ A)[1, 1])
    else:
        se = float("nan")
    return float(coef[1]), float(coef[0]), (float(coef[1] - z * se), float(coef[1] + z * se))


@dataclass
class MeanFieldErrorReport:
    N_list: list
    errors: list
    error_se: list
    slope: float
    slope_ci: tuple

    def to_dict(self):
        return asdict(self)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "error", "error_se", "error_times_n_minus_1"])
        for N, e, se in zip(self.N_list, self.errors, self.error_se):
            w.writerow([N, repr(e), repr(se), repr(e * (N - 1))])
        return buf.getvalue()


def discrete_mean(p, grid, strategy):
    """Exact mean of the Euler closed loop for a feedback affine in the state."""
    m = np.empty(grid.n_steps + 1)
    m[0] = y = float(p.y0)
    dt = grid.dt
    for k, s in enumerate(grid.points[:-1]):
        u = strategy(s, np.array([y]))[0]
        y = y + (p.a * y + p.b * u) * dt
        m[k + 1] = y
    return m


def mean_field_error_sweep(p, N_list, grid, M_mc, seed, *, threads=None):
    """``sup_s E|X^(-i)(s) - Xbar(s)|^2`` per ``N`` and its log-log slope in ``N - 1``.

    ``Xbar(s)`` is the exact mean of the simulated (Euler) closed loop
    under the consistent equilibrium, so the measured error is pure
    population sampling error without an ``O(dt)`` discretisation floor.
    The expectation is averaged over replications and players; the
    standard error at the maximising time treats replications as
    independent clusters.
    """
    if len(N_list) < 2:
        raise ValueError("N_list needs at least two entries")
    sol = solve_consistency(p, grid)
    strat = sol.strategy()
    mbar = discrete_mean(p, grid, strat)
    errs, ses = [], []
    for N in N_list:
        N = int(N)
        pN = p.with_N(N)
        _, _, paths, _ = _population(pN, grid, M_mc, seed, strat, range(N), store_paths=True,
                                     threads=threads)
        tot = paths.sum(axis=2, keepdims=True)
        others = (tot - paths) / (N - 1)
        sq = ((others - mbar[:, None, None]) ** 2).mean(axis=2)   # (steps, M_mc)
        e = sq.mean(axis=1)
        k = int(np.argmax(e))
        errs.append(float(e[k]))
        ses.append(float(sq[k].std(ddof=1) / math.sqrt(M_mc)))
    if all(e > 0 for e in errs):
        slope, _, ci = _loglog_fit(np.array(N_list) - 1, errs)
    else:
        slope, ci = float("nan"), (float("nan"), float("nan"))
    return MeanFieldErrorReport([int(N) for N in N_list], errs, ses, slope, ci)


NASH_CSV_COLUMNS = ["N", "epsilon", "gap", "gap_se", "limiting_diff", "d_N", "d_N_se", "verdict"]


@dataclass
class NashCell:
    N: int
    epsilon: float
    effective_epsilon: float
    gap: float
    gap_se: float
    limiting_diff: float
    limiting_diff_se: float
    d_N: float
    d_N_se: float
    d_N_rms: float
    inconclusive: bool
    passed: Optional[bool] = None

    @property
    def verdict(self):
        if self.passed is None:
            return "INCONCLUSIVE" if self.inconclusive else "n/a"
        return "PASS" if self.passed else "FAIL"


@dataclass
class NashGapReport:
    """Unilateral-deviation gaps over an ``(N, eps)`` grid with fitted rates."""

    t: float
    x: float
    v: float
    cells: list
    C: float
    slope_N: float
    slope_N_ci: tuple
    slope_eps: Optional[float]
    slope_eps_ci: Optional[tuple]
    analytic_limit: float
    passed: bool
    ansatz_limit: Optional[float] = None

    @property
    def verdict(self):
        return "PASS" if self.passed else "FAIL"

    def to_dict(self):
        d = asdict(self)
        for c, cell in zip(d["cells"], self.cells):
            c["verdict"] = cell.verdict
        d["verdict"] = self.verdict
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(NASH_CSV_COLUMNS)
        for c in self.cells:
            w.writerow([c.N, repr(c.epsilon), repr(c.gap), repr(c.gap_se), repr(c.limiting_diff),
                        repr(c.d_N), repr(c.d_N_se), c.verdict])
        return buf.getvalue()


def _own_paths(p, grid, M_mc, seed, N, uhat, t_index, x, window, nu, threads):
    """Player paths restarted at ``(t, x)`` under the equilibrium and under the spike.

    The spike adds ``nu`` on the window while the continuation follows the
    equilibrium control of the unperturbed path (same noise).  Returns
    ``(X_hat_T, cost_hat_ctl, X_eps_T, cost_eps_ctl)`` for every window.
    """
    noise = NoiseStream(seed, threads=threads)
    n = grid.n_steps
    dt = grid.dt
    sq = math.sqrt(dt)
    pts = grid.points
    Xh = np.full((M_mc, N), float(x))
    ch = np.zeros((M_mc, N))
    Xe = [Xh.copy() for _ in window]
    ce = [np.zeros((M_mc, N)) for _ in window]
    for k in range(t_index, n):
        s = pts[k]
        u = uhat(s, Xh)
        Z = noise.normals_lanes(k, M_mc, range(N))
        for w, (k0, k1) in enumerate(window):
            ue = u + nu if k0 <= k < k1 else u
            ce[w] += 0.5 * ue * ue * dt
            Xe[w] = Xe[w] + (p.a * Xe[w] + p.b * ue) * dt + p.sigma * sq * Z
        ch += 0.5 * u * u * dt
        Xh = Xh + (p.a * Xh + p.b * u) * dt + p.sigma * sq * Z
        if not np.all(np.abs(Xh) <= OVERFLOW_GUARD):
            raise DivergenceError(k + 1, pts[k + 1], OVERFLOW_GUARD)
    return Xh, ch, Xe, ce


def nash_gap_sweep(p, v, t, N_list, eps_list, grid, M_mc, seed, x=None, *, threads=None,
                   tol_se=3.0):
    """Paired unilateral-deviation gaps ``J(uhat) - J(uhat_-i, u_i^eps)``.

    Every player in every replication is treated as the deviator in turn;
    because strategies are decentralised the other players' paths are the
    equilibrium population from ``(0, y0)``.  Each sample splits exactly
    into the limiting-problem difference (``X^(-i)(T)`` replaced by
    ``Xbar_T``) minus the remainder::

        d_N = gamma Gamma2 E[(X_hat_i(T) - X_i(T)) (X^(-i)(T) - Xbar_T)]

    ``d_N_rms`` is the root-mean-square of the per-sample remainder; its
    log-log slope in ``N - 1`` is the reported rate.  A single constant
    ``C`` (geometric mean of ``d_N_rms sqrt(N-1) / eps`` over the cells)
    defines the band ``C eps / sqrt(N-1)``; a cell passes iff
    ``gap <= C eps / sqrt(N-1) + tol_se * SE``.
    """
    sol = solve_consistency(p, grid)
    uhat = sol.strategy()
    xbar = sol.xbar_T
    x = p.y0 if x is None else float(x)
    t_index = grid.index_of(t)
    nu = float(v) - uhat.value(t, x)
    windows, effs = [], []
    for eps in eps_list:
        n_w = math.ceil(eps / grid.dt - 1e-9)
        if n_w < 1 or t_index + n_w > grid.n_steps:
            raise ValueError(f"window [t, t + {eps}] does not fit the grid")
        windows.append((t_index, t_index + n_w))
        effs.append(n_w * grid.dt)
    cells = []
    for N in N_list:
        N = int(N)
        if N < 2:
            raise ValueError("N must be >= 2")
        pN = p.with_N(N)
        pop_T, _, _, _ = _population(pN, grid, M_mc, seed, uhat, range(N), threads=threads)
        lam = (pop_T.sum(axis=1, keepdims=True) - pop_T) / (N - 1) - xbar
        Xh, ch, Xe, ce = _own_paths(pN, grid, M_mc, seed, N, uhat, t_index, x, windows, nu,
                                    threads)
        Dh = Xh - p.Gamma1 * x - p.Gamma2 * xbar
        for eps, eff, X_e, c_e in zip(eps_list, effs, Xe, ce):
            De = X_e - p.Gamma1 * x - p.Gamma2 * xbar
            lim = ch - c_e + 0.5 * p.gamma * (Dh * Dh - De * De)
            rem = p.gamma * p.Gamma2 * (Xh - X_e) * lam
            gap = lim - rem
            def est(a):
                per_rep = a.mean(axis=1)
                return float(per_rep.mean()), float(per_rep.std(ddof=1) / math.sqrt(M_mc))
            g, gse = est(gap)
            l, lse = est(lim)
            d, dse = est(rem)
            rms = float(math.sqrt(np.mean(rem * rem)))
            cells.append(NashCell(N, float(eps), float(eff), g, gse, l, lse, d, dse, rms,
                                  inconclusive=bool(gse > 0.5 * abs(g))))
    pos = [c for c in cells if c.d_N_rms > 0]
    C = (float(np.exp(np.mean([np.log(c.d_N_rms * math.sqrt(c.N - 1) / c.epsilon) for c in pos])))
         if pos else 0.0)
    ok = True
    for c in cells:
        band = C * c.epsilon / math.sqrt(c.N - 1)
        c.passed = bool(c.gap <= band + tol_se * c.gap_se)
        ok &= c.passed
    ns = sorted({c.N for c in cells})
    slope_N, ci_N = float("nan"), (float("nan"), float("nan"))
    if len(ns) >= 2 and pos:
        e0 = cells[0].epsilon
        sel = [c for c in cells if c.epsilon == e0 and c.d_N_rms > 0]
        if len(sel) >= 2:
            slope_N, _, ci_N = _loglog_fit([c.N - 1 for c in sel], [c.d_N_rms for c in sel])
    slope_e, ci_e = None, None
    if len(eps_list) >= 2:
        n0 = cells[0].N
        sel = [c for c in cells if c.N == n0 and c.d_N_rms > 0]
        if len(sel) >= 2:
            slope_e, _, ci_e = _loglog_fit([c.epsilon for c in sel], [c.d_N_rms for c in sel])
    analytic = sol.spike_limit(t, x, float(v))
    ansatz = sol.limiting.ansatz_spike_limit(t, x, float(v), xbar)
    return NashGapReport(float(t), x, float(v), cells, C, slope_N, ci_N, slope_e, ci_e,
                         float(analytic), bool(ok), float(ansatz))
