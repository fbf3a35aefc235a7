"""Closed-form and ODE-solved equilibria of the linear-quadratic examples.

Three families are provided:

* ``mv_constant``: mean-variance portfolio with constant risk aversion,
  ``u(s) = (alpha - r) / sigma^2 * C_s / A_s``;
* ``mv_state_dep``: mean-variance with risk aversion ``gamma / x``,
  linear feedback ``u(s, y) = (alpha - r) / (gamma sigma^2) * C_s / A_s * y``;
* ``lqr``: time-inconsistent regulator ``u(s, y) = b (beta_s - alpha_s) y``
  with a Riccati equation for ``alpha`` solved through its linearisation
  ``alpha = v / w``.

Each solver integrates the coefficient ODEs backward with RK4 and attaches
the closed form where one exists.
"""

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .cost import CostFunctional, h_function
from .errors import OdeError, RiccatiBlowupError
from .mf_sde import FeedbackStrategy, MeanFieldDynamics, TimeGrid, simulate

W_FLOOR = 1e-12
FOC_FLOOR = 1e-12


def rk4_solve(f, y_init, grid, terminal=False):
    """Classical RK4 on a uniform grid.

    ``f(s, y)`` returns the derivative.  With ``terminal=True`` ``y_init``
    is the value at ``grid.T`` and the integration runs backward.  Returns
    an array indexed by grid point, shape ``(n_steps + 1,) + shape(y)``;
    the boundary value is stored exactly.
    """
    y = np.array(y_init, dtype=float)
    n = grid.n_steps
    s_pts = grid.points
    out = np.empty((n + 1,) + y.shape)
    h = -grid.dt if terminal else grid.dt
    order = range(n, 0, -1) if terminal else range(n)
    idx0 = n if terminal else 0
    out[idx0] = y

    def F(s, yy):
        d = np.asarray(f(s, yy), dtype=float)
        if not np.all(np.isfinite(d)):
            raise OdeError(f"vector field non-finite at s = {s:g}")
        return d

    for k in order:
        s = s_pts[k]
        k1 = F(s, y)
        k2 = F(s + h / 2, y + h / 2 * k1)
        k3 = F(s + h / 2, y + h / 2 * k2)
        k4 = F(s + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k - 1 if terminal else k + 1] = y
    return out


@dataclass(frozen=True)
class MVParams:
    r: float
    alpha: float
    sigma: float
    gamma: float
    T: float
    gamma_mode: str = "constant"

    def __post_init__(self):
        if self.sigma == 0:
            raise ValueError("sigma must be nonzero")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.gamma_mode not in ("constant", "inverse_state"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")


@dataclass(frozen=True)
class LQRParams:
    a: float
    b: float
    sigma: float
    gamma: float
    T: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")


def mv_model(p):
    """Wealth dynamics and the (t, x)-indexed mean-variance cost family."""
    r, exc, sig, gam = p.r, p.alpha - p.r, p.sigma, p.gamma
    dyn = MeanFieldDynamics(drift=lambda s, y, z, v: r * y + exc * v,
                            diffusion=lambda s, y, z, v: sig * v)

    def cost(t, x):
        if p.gamma_mode == "inverse_state":
            if not x > 0:
                raise ValueError(f"risk aversion gamma/x needs x > 0, got {x}")
            g = gam / x
        else:
            g = gam
        return CostFunctional(terminal=lambda y, z: 0.5 * g * y * y - y,
                              mean_adjust=lambda z: -0.5 * g * z * z,
                              context=(t, x), horizon=p.T)

    return dyn, cost


def lqr_model(p):
    """Regulator dynamics and the cost family targeting the current state."""
    a, b, sig, gam = p.a, p.b, p.sigma, p.gamma
    dyn = MeanFieldDynamics(drift=lambda s, y, z, v: a * y + b * v,
                            diffusion=lambda s, y, z, v: np.full(np.shape(y), sig))

    def cost(t, x):
        return CostFunctional(running=lambda s, y, z, v: 0.5 * v * v,
                              terminal=lambda y, z: 0.5 * gam * (y - x) ** 2,
                              context=(t, x), horizon=p.T)

    return dyn, cost


@dataclass(frozen=True, eq=False)
class LQEquilibrium:
    """Solved coefficient functions and the induced equilibrium feedback.

    ``A``/``C`` hold ``(A_s, C_s)`` for the mean-variance families and
    ``(alpha_s, beta_s)`` for the regulator, sampled on ``grid``; values in
    between are interpolated linearly.
    """

    family: str
    params: object
    grid: TimeGrid
    A: np.ndarray
    C: np.ndarray
    closed_form: Optional[dict] = None

    def coeffs(self, s):
        pts = self.grid.points
        return float(np.interp(s, pts, self.A)), float(np.interp(s, pts, self.C))

    def _coeff_arrays(self, s):
        pts = self.grid.points
        return np.interp(s, pts, self.A), np.interp(s, pts, self.C)

    @property
    def phi(self):
        p = self.params
        if self.family == "mv_constant":
            k = (p.alpha - p.r) / p.sigma ** 2

            def phi(s, y):
                A, C = self._coeff_arrays(s)
                return np.full(np.shape(y), k * C / A)
        elif self.family == "mv_state_dep":
            k = (p.alpha - p.r) / (p.gamma * p.sigma ** 2)

            def phi(s, y):
                A, C = self._coeff_arrays(s)
                return k * C / A * y
        else:
            def phi(s, y):
                al, be = self._coeff_arrays(s)
                return p.b * (be - al) * y
        return FeedbackStrategy(phi, name=self.family)

    def feedback_gain(self, s):
        """Control per unit state (``mv_constant``: the control itself)."""
        p = self.params
        A, C = self._coeff_arrays(s)
        if self.family == "mv_constant":
            return (p.alpha - p.r) / p.sigma ** 2 * C / A
        if self.family == "mv_state_dep":
            return (p.alpha - p.r) / (p.gamma * p.sigma ** 2) * C / A
        return p.b * (C - A)

    def P(self, s, x=None):
        """Deterministic second-order adjoint of the cost at context ``x``."""
        p = self.params
        if self.family == "mv_constant":
            return -p.gamma * math.exp(2 * p.r * (p.T - s))
        if self.family == "mv_state_dep":
            return -(p.gamma / x) * math.exp(2 * p.r * (p.T - s))
        return -p.gamma * math.exp(2 * p.a * (p.T - s))

    def model(self):
        return mv_model(self.params) if self.family.startswith("mv") else lqr_model(self.params)

    def adjoint_at(self, t, x):
        """First- and second-order adjoint values ``(p, q, P)`` at ``s = t`` from state ``x``."""
        pr = self.params
        A, C = self.coeffs(t)
        u = self.phi.value(t, x)
        if self.family == "mv_constant":
            return C, -A * pr.sigma * u, self.P(t)
        if self.family == "mv_state_dep":
            g = pr.gamma / x
            return C, -g * A * pr.sigma * u, self.P(t, x)
        return (C - A) * x, -pr.sigma * A, self.P(t)

    def spike_limit(self, t, x, v):
        """Analytic limit of ``(J(uhat) - J(u_eps)) / eps`` for deviation control ``v``."""
        dyn, cost = self.model()
        c = cost(t, x)
        p, q, P = self.adjoint_at(t, x)
        u = self.phi.value(t, x)
        return (h_function(t, x, v, p, q, P, u, dyn, c)
                - h_function(t, x, u, p, q, P, u, dyn, c))

    def first_order_violation(self, t, x):
        """Residual of the first-order condition at ``s = t``."""
        pr = self.params
        p, q, _ = self.adjoint_at(t, x)
        if self.family.startswith("mv"):
            return abs((pr.alpha - pr.r) * p + pr.sigma * q)
        return abs(self.phi.value(t, x) - pr.b * p)

    def to_dict(self):
        names = ("alpha", "beta") if self.family == "lqr" else ("A", "C")
        return {"family": self.family, "params": asdict(self.params),
                "grid": asdict(self.grid), "s": self.grid.points.tolist(),
                names[0]: self.A.tolist(), names[1]: self.C.tolist(),
                "closed_form": self.closed_form is not None}


def mv_constant_closed_form(p):
    exc = p.alpha - p.r
    return {
        "A": lambda s: p.gamma * np.exp(2 * p.r * (p.T - np.asarray(s))),
        "C": lambda s: np.exp(p.r * (p.T - np.asarray(s))),
        "phi": lambda s: exc / (p.gamma * p.sigma ** 2) * np.exp(-p.r * (p.T - np.asarray(s))),
        "P": lambda s: -p.gamma * np.exp(2 * p.r * (p.T - np.asarray(s))),
    }


def solve_mv_constant(p, grid):
    """Backward RK4 for ``A' = -2rA, C' = -rC`` with ``A_T = gamma, C_T = 1``."""
    r = p.r
    Y = rk4_solve(lambda s, y: np.array([-2 * r * y[0], -r * y[1]]), [p.gamma, 1.0], grid,
                  terminal=True)
    return LQEquilibrium("mv_constant", p, grid, Y[:, 0], Y[:, 1], mv_constant_closed_form(p))


def _growth_integral(r, tau):
    """``(e^{2 r tau} - e^{r tau}) / r`` with its ``r -> 0`` limit ``tau``."""
    tau = np.asarray(tau, dtype=float)
    if r == 0:
        return tau.copy()
    return np.exp(r * tau) * np.expm1(r * tau) / r


def mv_state_dep_closed_form(p):
    r = p.r
    k = (p.alpha - r) ** 2 / (p.gamma * p.sigma ** 2)
    gain = (p.alpha - r) / (p.gamma * p.sigma ** 2)

    def A(s):
        tau = p.T - np.asarray(s, dtype=float)
        return np.exp(2 * r * tau) + k * _growth_integral(r, tau)

    def C(s):
        return np.exp(r * (p.T - np.asarray(s, dtype=float)))

    return {"A": A, "C": C, "phi_gain": lambda s: gain * C(s) / A(s)}


def solve_mv_state_dep(p, grid):
    """Backward RK4 for ``A' = -2rA - (alpha-r)^2/(gamma sigma^2) C, C' = -rC``, ``A_T = C_T = 1``."""
    r = p.r
    k = (p.alpha - r) ** 2 / (p.gamma * p.sigma ** 2)
    Y = rk4_solve(lambda s, y: np.array([-2 * r * y[0] - k * y[1], -r * y[1]]), [1.0, 1.0], grid,
                  terminal=True)
    pp = MVParams(p.r, p.alpha, p.sigma, p.gamma, p.T, "inverse_state")
    return LQEquilibrium("mv_state_dep", pp, grid, Y[:, 0], Y[:, 1], mv_state_dep_closed_form(pp))


def lqr_beta(p, s):
    return p.gamma * np.exp(p.a * (p.T - np.asarray(s, dtype=float)))


def solve_lqr_vw(p, grid):
    """The linear system ``v' = -2a v, w' = -b^2 v + b^2 beta_s w`` backward from ``(gamma, 1)``."""
    a, b2 = p.a, p.b ** 2

    def f(s, y):
        return np.array([-2 * a * y[0], -b2 * y[0] + b2 * lqr_beta(p, s) * y[1]])

    return rk4_solve(f, [p.gamma, 1.0], grid, terminal=True)


def solve_lqr(p, grid, w_floor=W_FLOOR):
    """Regulator equilibrium; ``alpha = v / w`` from :func:`solve_lqr_vw`.

    Raises RiccatiBlowupError when ``|w_s| < w_floor`` somewhere on the grid.
    """
    VW = solve_lqr_vw(p, grid)
    w = VW[:, 1]
    bad = np.flatnonzero(np.abs(w) < w_floor)
    if bad.size:
        k = bad[-1]
        raise RiccatiBlowupError(float(grid.points[k]), float(w[k]))
    alpha = VW[:, 0] / w
    beta = lqr_beta(p, grid.points)
    beta[-1] = p.gamma
    return LQEquilibrium("lqr", p, grid, alpha, beta, {"beta": lambda s: lqr_beta(p, s)})


def solve_lqr_riccati_direct(p, grid):
    """Direct RK4 on ``alpha' = -(2a + b^2 beta) alpha + b^2 alpha^2``, ``alpha_T = gamma``."""
    a, b2 = p.a, p.b ** 2
    return rk4_solve(lambda s, al: -(2 * a + b2 * lqr_beta(p, s)) * al + b2 * al * al,
                     p.gamma, grid, terminal=True)


@dataclass
class ResidualReport:
    t_slices: list
    drift_residual: float
    drift_residual_se: float
    worst_t: float
    worst_s: float
    first_order_violation: float
    check_tol: float
    tol_se: float
    passed: bool


def adjoint_residual_check(eq, grid, M, seed, *, t_slices=(0.0, 0.5), x=1.0, check_tol=None,
                           tol_se=3.0, threads=None):
    """Monte Carlo check that the ansatz adjoint has the prescribed drift.

    For each start time ``t`` the closed-loop ensemble is simulated, the
    adjoint ``p(s)`` is formed from the solved coefficients and the
    per-step residual ``|E[p_{k+1} - p_k] / dt + c * (p_k + p_{k+1}) / 2|``
    (``c = r`` or ``a``) is compared with ``tol_se`` standard errors plus
    ``check_tol``.  The default ``check_tol = 10 * dt * (1 + c^2)``
    absorbs the first-order bias of Euler-Maruyama.  The first-order
    condition at ``s = t`` must hold within ``check_tol`` too (never
    tighter than :data:`FOC_FLOOR`, which covers rounding).
    """
    pr = eq.params
    dyn, _ = eq.model()
    c = pr.r if eq.family.startswith("mv") else pr.a
    dt = grid.dt
    if check_tol is None:
        check_tol = 10 * dt * (1 + c * c)
    worst = (-np.inf, 0.0, 0.0, 0.0, 0.0)
    foc = 0.0
    for t in t_slices:
        ens = simulate(dyn, eq.phi, t, x, grid, M, seed, store_controls=False, threads=threads)
        s = ens.times
        A, C = eq._coeff_arrays(s)
        X = ens.paths
        if eq.family == "mv_constant":
            p = C - A * (X - ens.ensemble_mean)
        elif eq.family == "mv_state_dep":
            p = C - (pr.gamma / x) * A * (X - ens.ensemble_mean)
        else:
            p = C * x - A * X
        incr = (p[:, 1:] - p[:, :-1]) / dt + c * 0.5 * (p[:, 1:] + p[:, :-1])
        res = np.abs(incr.mean(axis=0))
        se = incr.std(axis=0, ddof=1) / math.sqrt(M)
        excess = res - tol_se * se
        k = int(np.argmax(excess))
        if excess[k] > worst[0]:
            worst = (excess[k], res[k], se[k], float(t), float(s[k]))
        foc = max(foc, eq.first_order_violation(t, x))
    passed = bool(worst[0] <= check_tol and foc <= max(check_tol, FOC_FLOOR))
    return ResidualReport(t_slices=[float(t) for t in t_slices], drift_residual=float(worst[1]),
                          drift_residual_se=float(worst[2]), worst_t=worst[3], worst_s=worst[4],
                          first_order_violation=float(foc), check_tol=float(check_tol),
                          tol_se=float(tol_se), passed=passed)
