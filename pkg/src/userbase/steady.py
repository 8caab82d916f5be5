"""Steady state, comparative-statics thresholds and sign tests in eta."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import dynamics as dyn
from .dynamics import bounds, h_eta
from .hjb import GridSpec, PolicyTable, ValueFunction, default_grid, solve_hjb
from .model import ModelParams

log = logging.getLogger(__name__)

SCAN_NODES = 4096


class SteadyStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class SteadyState:
    x_s: float
    lam_s: float
    residual: float
    sign_changes: int


def steady_residual(m: ModelParams, x, eta: float | None = None):
    """R(x) = b'(x)/(rho - h'(x)) - c'(-h(x)); zero at a steady state."""
    return m.b_spec.d1(x) / (m.rho - dyn.dh_dx(m, x, eta)) - m.c_spec.d1(-h_eta(m, x, eta))


def _h_zero(m: ModelParams, x_hi: float, eta: float | None) -> float:
    """First point above x_initial where h turns negative."""
    if h_eta(m, m.x_initial, eta) <= 0:
        return m.x_initial
    hi = m.x_initial
    step = max(m.x_initial, 1e-3)
    while h_eta(m, hi, eta) > 0:
        hi += step
        step *= 2.0
        if hi > 1e3 * x_hi:
            raise SteadyStateError("h never becomes negative")
    lo = max(m.x_initial, hi - step / 2.0)
    return optimize.brentq(lambda x: float(h_eta(m, x, eta)), lo, hi, xtol=1e-15, rtol=1e-15)


def solve_steady(m: ModelParams, eta: float | None = None) -> SteadyState:
    """Bracketing solve of R(x) = 0 on [zero of h, x_u]: bisection then secant."""
    x_u = bounds(m).x_u
    lo = _h_zero(m, x_u, eta)
    hi = x_u
    if not lo < hi:
        raise SteadyStateError("empty search interval")
    xs = np.linspace(lo, hi, SCAN_NODES)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = steady_residual(m, xs, eta)
    if np.any(m.rho - dyn.dh_dx(m, xs, eta) <= 0):
        raise SteadyStateError("rho <= h'(x) on the search interval")
    s = np.sign(r)
    nz = s != 0
    sign_changes = int(np.count_nonzero(np.diff(s[nz]) != 0)) + int(np.count_nonzero(~nz[1:-1]))
    idx = np.nonzero(s[:-1] * s[1:] <= 0)[0]
    if idx.size == 0:
        raise SteadyStateError("no interior steady state")
    a, b = float(xs[idx[0]]), float(xs[idx[0] + 1])

    def R(x):
        return float(steady_residual(m, x, eta))

    ra = R(a)
    # bisection down to a tight bracket
    for _ in range(200):
        if b - a <= 1e-6 * max(1.0, abs(a)):
            break
        mid = 0.5 * (a + b)
        rm = R(mid)
        if rm == 0.0:
            a = b = mid
            break
        if (rm > 0) == (ra > 0):
            a, ra = mid, rm
        else:
            b = mid
    # secant polish, safeguarded by the bracket
    if a == b:
        x_s = a
    else:
        x_s = optimize.newton(R, a, x1=b, tol=1e-15, maxiter=100, disp=False)
        if not (a - 1e-12 <= x_s <= b + 1e-12) or not math.isfinite(x_s):
            x_s = optimize.brentq(R, a, b, xtol=1e-15, rtol=1e-15)
    lam_s = -float(h_eta(m, x_s, eta))
    res = abs(R(x_s))
    scale = 1.0 + abs(float(m.c_spec.d1(lam_s)))
    if res > 1e-12 * scale:
        # newton may stall a few ulps away; brentq is exact to the bracket
        x_s = optimize.brentq(R, a, b, xtol=1e-15, rtol=1e-15)
        lam_s = -float(h_eta(m, x_s, eta))
        res = abs(R(x_s))
    if not 0.0 < lam_s < m.lambda_sup:
        raise SteadyStateError("boundary steady state outside interior regime")
    return SteadyState(float(x_s), lam_s, res, sign_changes)


def cross_validate(
    ss: SteadyState,
    v: ValueFunction,
    p: PolicyTable,
    tol: float,
    m: ModelParams,
    x_limit: float | None = None,
) -> bool:
    """Check that steady state, value derivative and closed-loop limit agree.

    ``x_limit`` is the integrated trajectory limit; it is computed here when
    not supplied.
    """
    if x_limit is None:
        from .trajectory import integrate

        tr = integrate(m, p, 50.0 / m.rho, eta=v.eta)
        x_limit = float(tr.x[-1])
    ok_policy = abs(float(p(ss.x_s)) - ss.lam_s) <= tol
    ok_deriv = abs(float(m.c_spec.d1(ss.lam_s)) - float(v.dpi(ss.x_s))) <= tol
    ok_limit = abs(x_limit - ss.x_s) <= tol
    return bool(ok_policy and ok_deriv and ok_limit)


# --- sign of d lam_s / d eta ---------------------------------------------------

def _k_term(m: ModelParams, x, eta=None):
    """dh'/deta * dh/dx - d2h/dx2 * dh/deta."""
    return dyn.d2h_dxdeta(m, x, eta) * dyn.dh_dx(m, x, eta) - dyn.d2h_dx2(m, x, eta) * dyn.dh_deta(
        m, x, eta
    )


def sign_expression(m: ModelParams, x, eta: float | None = None):
    """b''h_eta - b'/(rho - h') * K, whose sign is the sign of d lam_s/d eta at x = x_s."""
    d = m.rho - dyn.dh_dx(m, x, eta)
    return m.b_spec.d2(x) * dyn.dh_deta(m, x, eta) - m.b_spec.d1(x) / d * _k_term(m, x, eta)


@dataclass(frozen=True)
class SignResult:
    sign: int
    value: float
    fd: float
    agree: bool


def sign_dlam_s_deta(m: ModelParams, delta: float = 1e-4) -> SignResult:
    ss = solve_steady(m)
    value = float(sign_expression(m, ss.x_s))
    lo = solve_steady(m, m.eta - delta).lam_s
    hi = solve_steady(m, m.eta + delta).lam_s
    fd = (hi - lo) / (2.0 * delta)
    sign = int(np.sign(value))
    agree = abs(value) <= 1e-8 or int(np.sign(fd)) == sign
    return SignResult(sign, value, fd, bool(agree))


# --- thresholds -----------------------------------------------------------------

SolverHandle = Callable[[ModelParams, float], tuple[ValueFunction, PolicyTable]]


def default_handle(grid: GridSpec | None = None) -> SolverHandle:
    def run(m: ModelParams, eta: float):
        return solve_hjb(m, grid or default_grid(m), eta=eta)

    return run


@dataclass
class Thresholds:
    rho_l: float
    rho_u: float
    x1: float
    x2: float
    theta_cap: float
    delta_cap: float
    zeta_sup: float
    zeta_prime_inf: float
    zeta_tilde_inf: float
    zeta_tilde_prime_sup: float
    rho_lb: float
    rho_1l: float
    rho_1u: float
    delta: float
    m_profile: tuple[np.ndarray, np.ndarray] = field(repr=False)
    m_excluded: int = 0
    curvature_sup: float = math.nan
    curvature_inf: float = math.nan

    def benefit_type(self) -> str:
        """'heterogeneous', 'homogeneous' or 'unclassified' by b''x/b' against Theta/Delta."""
        if self.curvature_sup < self.theta_cap:
            return "heterogeneous"
        if self.curvature_inf > self.delta_cap:
            return "homogeneous"
        return "unclassified"

    def as_row(self) -> dict[str, float]:
        keys = (
            "rho_l", "rho_u", "x1", "x2", "theta_cap", "delta_cap", "zeta_sup",
            "zeta_prime_inf", "zeta_tilde_inf", "zeta_tilde_prime_sup", "rho_lb",
            "rho_1l", "rho_1u", "delta", "m_excluded", "curvature_sup", "curvature_inf",
        )
        return {k: getattr(self, k) for k in keys}


def dpi_deta(
    m: ModelParams, eta: float, hjb: SolverHandle, step: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Central difference of the solved value in eta; returns (nodes, dPi/deta)."""
    step = 1e-3 * m.eta_sup if step is None else step
    lo_eta = max(eta - step, 0.0)
    v_hi, _ = hjb(m, eta + step)
    v_lo, _ = hjb(m, lo_eta)
    return v_hi.nodes, (v_hi.values - v_lo.values) / (eta + step - lo_eta)


def v_prime(m: ModelParams, lam: float) -> float:
    """Derivative of v(l) = c((c')^{-1}(l)), i.e. l * q'(l)."""
    q = float(m.c_spec.dinv(lam))
    return lam / float(m.c_spec.d2(q))


def compute_x1(m: ModelParams, x2: float) -> float:
    """Largest x with h >= v'(lambda_sup) on [x_initial, x], clamped to [x_initial, x2]."""
    target = v_prime(m, m.lambda_sup)
    xs = np.linspace(m.x_initial, x2, SCAN_NODES)
    gap = h_eta(m, xs) - target
    if gap[0] < 0:
        return m.x_initial
    below = np.nonzero(gap < 0)[0]
    if below.size == 0:
        return x2
    j = int(below[0])
    return float(optimize.brentq(lambda x: float(h_eta(m, x)) - target, xs[j - 1], xs[j]))


def compute_thresholds(
    m: ModelParams,
    eta_grid: Sequence[float],
    hjb: SolverHandle | None = None,
    n_x: int = 2048,
) -> Thresholds:
    eta_grid = [float(e) for e in eta_grid]
    if len(eta_grid) < 3 or any(not 0.0 < e < m.eta_sup for e in eta_grid):
        raise ValueError("eta_grid needs at least 3 points strictly inside (0, eta_sup)")
    hjb = default_handle() if hjb is None else hjb
    db = bounds(m)

    dpis = []
    nodes = None
    for e in eta_grid:
        nodes, d = dpi_deta(m, e, hjb)
        sel = (nodes >= m.x_initial) & (nodes <= db.x_u + 1e-12)
        dpis.append(d[sel])
    dpis_a = np.concatenate(dpis)
    zeta_sup = float(np.max(dpis_a))
    zeta_tilde_inf = float(np.min(dpis_a))

    xs = np.linspace(m.x_initial, db.x_u, n_x)
    he = np.concatenate([dyn.dh_deta(m, xs, e) for e in eta_grid])
    zeta_prime_inf = float(np.min(he))
    zeta_tilde_prime_sup = float(np.max(he))

    c_inf = float(m.c_spec.d1(0.0))
    rho_lb = c_inf * zeta_prime_inf / zeta_sup if zeta_sup > 0 else math.inf
    delta = rho_lb

    # m(x) profile at the model eta
    he0 = dyn.dh_deta(m, xs)
    b1, b2 = m.b_spec.d1(xs), m.b_spec.d2(xs)
    ok = (np.abs(b2) > 1e-14 * np.maximum(1.0, np.abs(b1))) & (he0 > 0)
    mvals = np.full_like(xs, np.nan)
    mvals[ok] = dyn.dh_dx(m, xs[ok]) + _k_term(m, xs[ok]) * b1[ok] / (b2[ok] * he0[ok])
    excluded = int(np.count_nonzero(~ok))
    if excluded:
        log.info("m(x): %d of %d nodes excluded (b''=0 or dh/deta=0)", excluded, len(xs))
    rho_1l = float(np.min(mvals[ok])) if ok.any() else math.inf
    rho_1u = float(np.max(mvals[ok])) if ok.any() else -math.inf

    rho_l = min(rho_lb, delta, rho_1l)
    if zeta_tilde_inf > 0:
        rho_u = max(rho_1u, float(m.c_spec.d1(m.lambda_sup)) * zeta_tilde_prime_sup / zeta_tilde_inf)
    else:
        rho_u = math.inf

    # Theta / Delta over x and eta
    rhs = []
    for e in eta_grid:
        d = m.rho - dyn.dh_dx(m, xs, e)
        hde = dyn.dh_deta(m, xs, e)
        good = (d > 0) & (hde > 0)
        rhs.append((_k_term(m, xs, e) * xs / (d * hde))[good])
    rhs_a = np.concatenate(rhs)
    theta_cap = float(np.min(rhs_a))
    delta_cap = float(np.max(rhs_a))
    curv = b2 * xs / b1

    return Thresholds(
        rho_l=rho_l,
        rho_u=rho_u,
        x1=compute_x1(m, db.x2 if db.x2 >= m.x_initial else db.x_u),
        x2=max(db.x2, m.x_initial),
        theta_cap=theta_cap,
        delta_cap=delta_cap,
        zeta_sup=zeta_sup,
        zeta_prime_inf=zeta_prime_inf,
        zeta_tilde_inf=zeta_tilde_inf,
        zeta_tilde_prime_sup=zeta_tilde_prime_sup,
        rho_lb=rho_lb,
        rho_1l=rho_1l,
        rho_1u=rho_1u,
        delta=delta,
        m_profile=(xs, mvals),
        m_excluded=excluded,
        curvature_sup=float(np.max(curv)),
        curvature_inf=float(np.min(curv)),
    )


@dataclass(frozen=True)
class RegimeReport:
    x: float
    delta_zeta: float
    patience: str      # "patient" | "impatient" | "neither"
    size: str          # "small" | "large" | "middle"
    prediction: str    # "increase" | "decrease" | "uncovered"
    agreement: bool | None


def theorem4_prediction(m: ModelParams, th: Thresholds, x: float) -> tuple[str, str, str]:
    """Predicted direction of zeta under a fall in eta; strict regimes only."""
    if m.rho < th.rho_l:
        patience = "patient"
    elif m.rho > th.rho_u:
        patience = "impatient"
    else:
        patience = "neither"
    if x < th.x1 or (x == th.x1 == m.x_initial):
        size = "small"
    elif x > th.x2:
        size = "large"
    else:
        size = "middle"
    table = {
        ("patient", "small"): "increase",
        ("patient", "large"): "decrease",
        ("impatient", "small"): "decrease",
        ("impatient", "large"): "increase",
    }
    return patience, size, table.get((patience, size), "uncovered")


def classify_theorem4(
    m: ModelParams,
    th: Thresholds,
    x: float,
    eta_pair: tuple[float, float],
    hjb: SolverHandle | None = None,
) -> RegimeReport:
    eta_hi, eta_lo = map(float, eta_pair)
    if not eta_hi > eta_lo:
        raise ValueError("eta_pair must be (eta_hi, eta_lo) with eta_hi > eta_lo")
    db = bounds(m)
    if not m.x_initial <= x <= db.x_u:
        raise ValueError("x outside [x_initial, x_u]")
    hjb = default_handle() if hjb is None else hjb
    _, p_hi = hjb(m, eta_hi)
    _, p_lo = hjb(m, eta_lo)
    dz = float(p_lo(x)) - float(p_hi(x))
    patience, size, pred = theorem4_prediction(m, th, x)
    if pred == "uncovered":
        agree = None
    else:
        agree = (dz > 0) if pred == "increase" else (dz < 0)
    return RegimeReport(x, dz, patience, size, pred, agree)
