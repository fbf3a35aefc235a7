"""Monte Carlo cost evaluation and spike-variation equilibrium checks.

Costs have the form::

    J = E[ sum_k h(s_k, X_k, m_k, u_k) dt + g(X_T, m_T) ] + mean_adjust(m_T)

where ``m_k`` is the ensemble mean.  Standard errors come from the
influence function of this estimator: the pathwise terms plus the linear
sensitivity of the mean-dependent terms to each particle.  Without the
second part the large common factor in variance-type costs (e.g.
``gamma/2 (y^2 - z^2)``) would dominate and mask the spike difference.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import GridError, WindowError
from .mf_sde import FeedbackStrategy, SpikeStrategy, simulate

_FD_REL = 1e-6


@dataclass(frozen=True)
class CostFunctional:
    """Running cost ``h(s, y, z, v)``, terminal ``g(y, z)`` and ``mean_adjust(z)``.

    ``context`` records the ``(t, x)`` the cost was built for when it
    depends on the evaluation point; ``horizon`` when set must match the
    ensemble's terminal time.
    """

    running: Optional[Callable] = None
    terminal: Optional[Callable] = None
    mean_adjust: Optional[Callable] = None
    context: Optional[tuple] = None
    horizon: Optional[float] = None


def resolve_cost(cost, t, x):
    """Return a CostFunctional; ``cost`` may be a ``(t, x) -> CostFunctional`` family."""
    if isinstance(cost, CostFunctional):
        return cost
    return cost(t, x)


@dataclass(frozen=True)
class CostEstimate:
    value: float
    std_error: float
    M: int
    paired: bool = False
    seed: Optional[int] = None


def _dz(fn, *args, z, tail=()):
    """Central difference of ``fn(*args, z, *tail)`` in ``z``."""
    h = _FD_REL * max(1.0, abs(z))
    return (np.asarray(fn(*args, z + h, *tail), dtype=float)
            - np.asarray(fn(*args, z - h, *tail), dtype=float)) / (2 * h)


def _per_path(ensemble, cost, strategy=None):
    """Point estimate and per-path influence values of the cost."""
    if cost.horizon is not None and abs(cost.horizon - ensemble.grid.T) > 1e-12:
        raise GridError(f"cost horizon {cost.horizon} != ensemble horizon {ensemble.grid.T}")
    X = ensemble.paths
    mean = ensemble.ensemble_mean
    M = ensemble.M
    n = ensemble.grid.n_steps
    dt = ensemble.grid.dt
    times = ensemble.times
    pathwise = np.zeros(M)
    linear = np.zeros(M)

    if cost.running is not None:
        U = ensemble.controls
        if U is None:
            if strategy is None:
                raise ValueError("running cost needs stored controls or the strategy")
            U = np.column_stack([strategy(times[k], X[:, k]) for k in range(n)])
            if ensemble.control_set is not None:
                U = np.clip(U, *ensemble.control_set)
        for k in range(n):
            s, y, z, u = times[k], X[:, k], mean[k], U[:, k]
            pathwise += np.broadcast_to(np.asarray(cost.running(s, y, z, u), dtype=float), (M,)) * dt
            hz = float(np.mean(_dz(cost.running, s, y, z=z, tail=(u,))))
            if hz:
                linear += hz * (y - z) * dt

    yT, zT = X[:, -1], mean[-1]
    if cost.terminal is not None:
        pathwise += np.broadcast_to(np.asarray(cost.terminal(yT, zT), dtype=float), (M,))
        gz = float(np.mean(_dz(cost.terminal, yT, z=zT)))
        if gz:
            linear += gz * (yT - zT)
    value = float(pathwise.mean())
    if cost.mean_adjust is not None:
        value += float(cost.mean_adjust(zT))
        linear += float(_dz(cost.mean_adjust, z=zT)) * (yT - zT)
    if not (math.isfinite(value) and np.all(np.isfinite(pathwise))):
        raise ValueError("cost evaluated to a non-finite value")
    return value, pathwise + linear


def _se(influence):
    M = influence.shape[0]
    return float(np.std(influence, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")


def evaluate_cost(ensemble, cost, strategy=None):
    """Monte Carlo estimate of the cost of ``ensemble``.

    ``strategy`` is only needed for running costs when the ensemble did
    not store its controls.
    """
    value, infl = _per_path(ensemble, resolve_cost(cost, ensemble.grid.t0, ensemble.x0), strategy)
    return CostEstimate(value=value, std_error=_se(infl), M=ensemble.M, seed=ensemble.seed)


def spike_strategy(uhat, v, t, x, eps, continuation="open_loop"):
    """Spike of ``uhat`` on ``[t, t+eps)`` that starts at control ``v`` from state ``x``.

    The deviation is the constant shift ``v - uhat(t, x)``, so ``v =
    uhat(t, x)`` reproduces ``uhat`` exactly.
    """
    nu = float(v) - uhat.value(t, x)
    return SpikeStrategy(uhat, nu, t, eps, mode="shift", continuation=continuation)


class _SpikeRun:
    """Base ensemble at one ``(t, x)`` reused for every deviation and epsilon."""

    def __init__(self, dynamics, cost, uhat, t, x, grid, M, seed, continuation, threads):
        self.dynamics = dynamics
        self.cost = resolve_cost(cost, t, x)
        self.uhat = uhat
        self.t, self.x = float(t), float(x)
        self.grid, self.M, self.seed = grid, int(M), int(seed)
        self.continuation = continuation
        self.threads = threads
        store = self.cost.running is not None
        self.store = store
        base = simulate(dynamics, uhat, t, x, grid, M, seed, store_controls=store, threads=threads)
        self.base_value, self.base_infl = _per_path(base, self.cost)
        self.base_terminal = base.terminal.copy()
        del base

    def ratio(self, v, eps):
        """Paired ratio estimate, effective epsilon and per-path influence."""
        spike = spike_strategy(self.uhat, v, self.t, self.x, eps, self.continuation)
        if eps < self.grid.dt * (1 - 1e-9):
            raise WindowError(f"eps={eps} shorter than dt={self.grid.dt}")
        eff = spike.effective_eps(self.grid)
        alt = simulate(self.dynamics, spike, self.t, self.x, self.grid, self.M, self.seed,
                       store_controls=self.store, threads=self.threads)
        value, infl = _per_path(alt, self.cost)
        return (self.base_value - value) / eff, eff, (self.base_infl - infl) / eff


def spike_cost_ratio(dynamics, cost, uhat, v, t, x, eps, grid, M, seed, *,
                     continuation="open_loop", threads=None):
    """Common-random-number estimate of ``(J(t,x,uhat) - J(t,x,u_eps)) / eps``.

    The ratio divides by the realised window length (a whole number of
    steps).  Raises WindowError when ``eps < dt``.
    """
    if eps < grid.dt * (1 - 1e-9):
        raise WindowError(f"eps={eps} shorter than dt={grid.dt}")
    run = _SpikeRun(dynamics, cost, uhat, t, x, grid, M, seed, continuation, threads)
    value, _, infl = run.ratio(v, eps)
    return CostEstimate(value=value, std_error=_se(infl), M=run.M, paired=True, seed=run.seed)


def extrapolation_weights(eps):
    """Weights ``w`` with ``sum(w * r)`` the intercept of the least-squares line ``r ~ L + c*eps``."""
    eps = np.asarray(eps, dtype=float)
    if eps.size == 1:
        return np.ones(1)
    A = np.column_stack([np.ones_like(eps), eps])
    return np.linalg.pinv(A)[0]


@dataclass
class SpikeLimitReport:
    t: float
    x: float
    v: float
    epsilons: list
    ratios: list
    ratio_std_errors: list
    extrapolated_limit: float
    extrapolated_std_error: float
    analytic_limit: Optional[float] = None
    non_monotone: bool = False
    passed: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass
class EquilibriumCheck:
    reports: list
    tol_se: float
    passed: bool

    @property
    def verdict(self):
        return "PASS" if self.passed else "FAIL"

    def to_dict(self):
        return {"verdict": self.verdict, "tol_se": self.tol_se,
                "reports": [r.to_dict() for r in self.reports]}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


REPORT_CSV_COLUMNS = ["t", "x", "v", "epsilon", "ratio", "ratio_se", "extrapolated_limit",
                      "extrapolated_se", "analytic_limit", "verdict"]


def reports_to_csv(reports):
    """One row per ``(t, x, v, epsilon)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_COLUMNS)
    for r in reports:
        for e, ratio, se in zip(r.epsilons, r.ratios, r.ratio_std_errors):
            w.writerow([repr(r.t), repr(r.x), repr(r.v), repr(e), repr(ratio), repr(se),
                        repr(r.extrapolated_limit), repr(r.extrapolated_std_error),
                        "" if r.analytic_limit is None else repr(r.analytic_limit),
                        "PASS" if r.passed else "FAIL"])
    return buf.getvalue()


def verify_equilibrium(dynamics, cost, uhat, t, x, deviations, epsilons, grid, M, seed, tol_se=3.0,
                       *, equilibrium=None, continuation="open_loop", threads=None):
    """Check the spike-limit inequality at ``(t, x)`` for each deviation control.

    For every ``v`` the ratios over ``epsilons`` are extrapolated linearly
    to ``eps = 0``; the check passes iff every extrapolated limit is at
    most ``tol_se`` standard errors above zero.  ``equilibrium`` (anything
    with a ``spike_limit(t, x, v)`` method) supplies analytic limits.
    """
    deviations = list(deviations)
    if not deviations:
        raise ValueError("need at least one deviation")
    eps = [float(e) for e in epsilons]
    if any(a <= b for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    run = _SpikeRun(dynamics, cost, uhat, t, x, grid, M, seed, continuation, threads)
    reports = []
    for v in deviations:
        vals, effs, infls = [], [], []
        for e in eps:
            val, eff, infl = run.ratio(v, e)
            vals.append(val)
            effs.append(eff)
            infls.append(infl)
        w = extrapolation_weights(effs)
        limit = float(np.dot(w, vals))
        limit_se = _se(np.tensordot(w, np.array(infls), axes=1))
        ses = [_se(i) for i in infls]
        diffs = np.diff(vals)
        non_mono = bool(np.any(diffs > 0) and np.any(diffs < 0))
        analytic = None if equilibrium is None else float(equilibrium.spike_limit(t, x, v))
        reports.append(SpikeLimitReport(
            t=float(t), x=float(x), v=float(v), epsilons=effs, ratios=vals, ratio_std_errors=ses,
            extrapolated_limit=limit, extrapolated_std_error=limit_se, analytic_limit=analytic,
            non_monotone=non_mono, passed=limit <= tol_se * limit_se))
    return EquilibriumCheck(reports=reports, tol_se=float(tol_se),
                            passed=all(r.passed for r in reports))


def hamiltonian(s, x, v, p, q, dynamics, cost):
    """``b p + sigma q - h`` at state ``x`` with mean ``x`` (deterministic start)."""
    y = np.array([float(x)])
    u = np.array([float(v)])
    b = float(np.asarray(dynamics.drift(s, y, float(x), u)).ravel()[0])
    sg = float(np.asarray(dynamics.diffusion(s, y, float(x), u)).ravel()[0])
    h = 0.0
    if cost is not None and cost.running is not None:
        h = float(np.asarray(cost.running(s, y, float(x), u)).ravel()[0])
    return b * p + sg * q - h


def h_function(t, x, v, p, q, P, uhat_val, dynamics, cost):
    """The second-order augmented Hamiltonian whose maximiser in ``v`` is the equilibrium control.

    ``H(t,x,v,p,q) - P sigma(uhat)^2 / 2 + P (sigma(v) - sigma(uhat))^2 / 2``.
    """
    y = np.array([float(x)])

    def sig(c):
        return float(np.asarray(dynamics.diffusion(t, y, float(x), np.array([float(c)]))).ravel()[0])

    s_hat = sig(uhat_val)
    return (hamiltonian(t, x, v, p, q, dynamics, cost)
            - 0.5 * P * s_hat ** 2 + 0.5 * P * (sig(v) - s_hat) ** 2)
