"""Stationary HJB solver (implicit upwind + policy iteration) and a DP oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.linalg import solve_banded

from .dynamics import bounds, h_eta
from .model import ModelParams


class SolverError(RuntimeError):
    def __init__(self, msg: str, residual: float = math.nan):
        super().__init__(msg)
        self.residual = residual


SCHEMES = ("upwind_implicit", "upwind_dc")


@dataclass(frozen=True)
class GridSpec:
    x_lo: float
    x_hi: float
    n: int = 2048
    scheme: str = "upwind_implicit"
    tol: float = 1e-10
    max_iter: int = 500

    def __post_init__(self) -> None:
        if self.n < 64:
            raise ValueError("grid needs at least 64 nodes")
        if not self.x_lo < self.x_hi:
            raise ValueError("x_lo must be below x_hi")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.n)


def default_grid(m: ModelParams, n: int = 2048, **kw) -> GridSpec:
    """Grid on [x_initial, x_u], nudged strictly above x_sup so the top node drifts down."""
    db = bounds(m)
    x_hi = max(db.x_u, db.x_sup * (1.0 + 1e-3))
    return GridSpec(m.x_initial, x_hi, n, **kw)


@dataclass(frozen=True)
class ValueFunction:
    nodes: np.ndarray
    values: np.ndarray
    derivative: np.ndarray
    eta: float
    residual: float = 0.0
    iterations: int = 0

    def __call__(self, x):
        return np.interp(x, self.nodes, self.values)

    def dpi(self, x):
        return np.interp(x, self.nodes, self.derivative)


@dataclass(frozen=True)
class PolicyTable:
    nodes: np.ndarray
    zeta: np.ndarray
    interpolation: str = "monotone_cubic"
    lambda_sup: float = math.inf

    def __post_init__(self) -> None:
        if self.interpolation not in ("monotone_cubic", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.nodes[0] - 1e-12) or np.any(x > self.nodes[-1] + 1e-12):
            raise ValueError("policy table evaluated outside its grid")
        if self.interpolation == "linear":
            out = np.interp(x, self.nodes, self.zeta)
        else:
            out = self._pchip(x)
        return np.clip(out, 0.0, self.lambda_sup)

    @property
    def _pchip(self):
        f = self.__dict__.get("_pchip_cache")
        if f is None:
            f = PchipInterpolator(self.nodes, self.zeta, extrapolate=True)
            object.__setattr__(self, "_pchip_cache", f)
        return f


def _policy(m: ModelParams, p: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        lam = m.c_spec.dinv(p)
    return np.clip(np.nan_to_num(lam, nan=0.0), 0.0, m.lambda_sup)


def _upwind(m: ModelParams, x, V, dx, h, b):
    """Upwind choice at every node: returns (lam, mu, direction, dpi).

    direction is +1 (forward difference), -1 (backward) or 0 (zero drift).
    """
    n = len(x)
    pF = np.empty(n)
    pB = np.empty(n)
    pF[:-1] = (V[1:] - V[:-1]) / dx
    pF[-1] = pF[-2]
    pB[1:] = pF[:-1]
    pB[0] = pB[1]
    lamF, lamB = _policy(m, pF), _policy(m, pB)
    muF, muB = h + lamF, h + lamB
    c = m.c_spec
    HF = b - c(lamF) + pF * muF
    HB = b - c(lamB) + pB * muB
    useF = muF > 0
    useB = muB < 0
    useF[-1] = False
    useB[0] = False
    both = useF & useB
    useF = useF & ~(both & (HB > HF))
    useB = useB & ~useF
    direction = np.where(useF, 1, np.where(useB, -1, 0))
    lam0 = np.clip(-h, 0.0, m.lambda_sup)
    lam = np.where(useF, lamF, np.where(useB, lamB, lam0))
    mu = np.where(direction == 0, 0.0, h + lam)
    dpi = np.where(useF, pF, np.where(useB, pB, c.d1(lam0)))
    return lam, mu, direction, dpi


def _generator_bands(mu, direction, dx, rho):
    """Banded form of (rho*I - A) for scipy.linalg.solve_banded((1, 1), ...)."""
    n = len(mu)
    ab = np.zeros((3, n))
    up = np.where(direction > 0, mu / dx, 0.0)      # coefficient on V[i+1]
    lo = np.where(direction < 0, -mu / dx, 0.0)     # coefficient on V[i-1]
    ab[1] = rho + up + lo
    ab[0, 1:] = -up[:-1]
    ab[2, :-1] = -lo[1:]
    return ab


def _apply(ab, V):
    out = ab[1] * V
    out[:-1] += ab[0, 1:] * V[1:]
    out[1:] += ab[2, :-1] * V[:-1]
    return out


def _central(V, dx):
    """Second-order derivative estimate (one-sided three-point at the ends)."""
    p = np.empty_like(V)
    p[1:-1] = (V[2:] - V[:-2]) / (2.0 * dx)
    p[0] = (-3.0 * V[0] + 4.0 * V[1] - V[2]) / (2.0 * dx)
    p[-1] = (3.0 * V[-1] - 4.0 * V[-2] + V[-3]) / (2.0 * dx)
    return p


def _dc_terms(m, V, dx, h, b):
    """Control, drift, direction and defect term of the corrected scheme."""
    p2 = _central(V, dx)
    lam = _policy(m, p2)
    mu = h + lam
    direction = np.where(mu > 0, 1, np.where(mu < 0, -1, 0))
    direction[0], direction[-1] = 1, -1
    d = np.diff(V) / dx
    pup = p2.copy()
    pup[:-1] = np.where(direction[:-1] > 0, d, pup[:-1])
    pup[1:] = np.where(direction[1:] < 0, d, pup[1:])
    return p2, lam, mu, direction, mu * (p2 - pup)


def solve_hjb(
    m: ModelParams, g: GridSpec | None = None, eta: float | None = None
) -> tuple[ValueFunction, PolicyTable]:
    """Policy iteration on the implicit upwind discretisation.

    Each sweep fixes the KKT control implied by the current one-sided
    derivatives, then solves the linear system (rho - A) V = b - c(lam).
    With ``scheme="upwind_dc"`` the upwind fixed point is then refined by
    defect correction towards the centred (second-order) scheme, keeping the
    monotone upwind matrix as the implicit operator.
    """
    g = default_grid(m) if g is None else g
    eta = m.eta if eta is None else float(eta)
    x = g.nodes
    dx = x[1] - x[0]
    h = h_eta(m, x, eta)
    b = m.b_spec(x)
    if h[0] <= 0:
        raise SolverError("drift at x_lo is not positive; grid must start at x_initial")
    if h[-1] + m.lambda_sup >= 0:
        raise SolverError("maximal drift at x_hi is not negative; extend x_hi beyond x_sup")

    V = b / m.rho
    residual = math.inf
    for it in range(1, g.max_iter + 1):
        lam, mu, direction, _ = _upwind(m, x, V, dx, h, b)
        ab = _generator_bands(mu, direction, dx, m.rho)
        V_new = solve_banded((1, 1), ab, b - m.c_spec(lam))
        change = float(np.max(np.abs(V_new - V)))
        V = V_new
        if change <= g.tol * (1.0 + float(np.max(np.abs(V)))):
            lam, mu, direction, dpi = _upwind(m, x, V, dx, h, b)
            ab = _generator_bands(mu, direction, dx, m.rho)
            res = _apply(ab, V) - (b - m.c_spec(lam))
            residual = float(np.max(np.abs(res[1:-1])))
            if residual <= g.tol * (1.0 + float(np.max(np.abs(V)))):
                break
    else:
        raise SolverError(
            f"policy iteration did not converge in {g.max_iter} iterations", residual
        )

    if g.scheme == "upwind_dc":
        dc_max = 10 * g.max_iter
        for k in range(1, dc_max + 1):
            _, lam, mu, direction, corr = _dc_terms(m, V, dx, h, b)
            ab = _generator_bands(mu, direction, dx, m.rho)
            V_new = solve_banded((1, 1), ab, b - m.c_spec(lam) + corr)
            change = float(np.max(np.abs(V_new - V)))
            V = V_new
            if change <= g.tol * (1.0 + float(np.max(np.abs(V)))):
                break
        else:
            raise SolverError(f"defect correction did not converge in {dc_max} sweeps", change)
        it += k
        dpi, lam, mu, _, _ = _dc_terms(m, V, dx, h, b)
        res = m.rho * V - (b - m.c_spec(lam) + mu * dpi)
        residual = float(np.max(np.abs(res[1:-1])))

    vf = ValueFunction(x, V, dpi, eta, residual, it)
    interp = "linear" if m.b_spec.family == "s_shaped_benefit" else "monotone_cubic"
    return vf, PolicyTable(x, lam, interp, m.lambda_sup)


def hjb_residual(m: ModelParams, v: ValueFunction, p: PolicyTable, scheme: str = "upwind_implicit"):
    """Discrete HJB residual at every node for a given (values, policy) pair."""
    x = v.nodes
    dx = x[1] - x[0]
    h = h_eta(m, x, v.eta)
    b = m.b_spec(x)
    lam = p.zeta
    if scheme == "upwind_dc":
        return m.rho * v.values - (b - m.c_spec(lam) + (h + lam) * _central(v.values, dx))
    _, _, direction, _ = _upwind(m, x, v.values, dx, h, b)
    mu = np.where(direction == 0, 0.0, h + lam)
    ab = _generator_bands(mu, direction, dx, m.rho)
    return _apply(ab, v.values) - (b - m.c_spec(lam))


def policy_interior_check(v: ValueFunction, m: ModelParams, x_hi: float | None = None) -> bool:
    """True iff c'(0) < dPi/dx < c'(lambda_sup) at every node in [x_initial, x_hi]."""
    x_hi = bounds(m).x_u if x_hi is None else x_hi
    sel = (v.nodes >= m.x_initial - 1e-12) & (v.nodes <= x_hi + 1e-12)
    d = v.derivative[sel]
    lo = float(m.c_spec.d1(0.0))
    hi = float(m.c_spec.d1(m.lambda_sup))
    return bool(np.all(d > lo) and np.all(d < hi))


@numba.njit(cache=True)
def _dp_backward(x, h, b, lam, cost, dt, steps, beta):
    n = x.shape[0]
    L = lam.shape[0]
    x0 = x[0]
    dx = x[1] - x[0]
    V = np.zeros(n)
    Vn = np.empty(n)
    for _ in range(steps):
        for i in range(n):
            best = -np.inf
            for k in range(L):
                y = x[i] + dt * (h[i] + lam[k])
                if y <= x0:
                    v = V[0]
                elif y >= x[n - 1]:
                    v = V[n - 1]
                else:
                    s = (y - x0) / dx
                    j = int(s)
                    if j >= n - 1:
                        j = n - 2
                    w = s - j
                    v = (1.0 - w) * V[j] + w * V[j + 1]
                val = dt * (b[i] - cost[k]) + beta * v
                if val > best:
                    best = val
            Vn[i] = best
        for i in range(n):
            V[i] = Vn[i]
    return V


def oracle_dp(
    m: ModelParams,
    g: GridSpec,
    dt: float,
    horizon: float,
    n_lambda: int = 101,
    eta: float | None = None,
) -> ValueFunction:
    """Finite-horizon discrete-time Bellman recursion with zero terminal value.

    Independent of the HJB solver: Euler state update, a fixed control lattice
    and linear interpolation of the continuation value.
    """
    eta = m.eta if eta is None else float(eta)
    if n_lambda < 101:
        raise ValueError("need at least 101 control levels")
    if horizon < 10.0 / m.rho:
        raise ValueError("horizon must be at least 10/rho")
    x = g.nodes
    dx = x[1] - x[0]
    h = h_eta(m, x, eta)
    max_drift = float(np.max(np.abs(h) + m.lambda_sup))
    if dt <= 0 or dt * max_drift >= 4.0 * dx:
        raise ValueError(f"dt too large: dt*max|drift| = {dt * max_drift} >= 4*dx = {4 * dx}")
    lam = np.linspace(0.0, m.lambda_sup, n_lambda)
    cost = np.asarray(m.c_spec(lam), dtype=float)
    steps = int(math.ceil(horizon / dt))
    V = _dp_backward(x, h, np.asarray(m.b_spec(x), dtype=float), lam, cost, dt, steps,
                     math.exp(-m.rho * dt))
    return ValueFunction(x, V, np.gradient(V, x), eta)
