"""User-base drift, its derivatives, entry-fraction variant and population bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .model import ModelParams


def _eta(m: ModelParams, eta: float | None) -> float:
    return m.eta if eta is None else float(eta)


def stay_time(m: ModelParams, x, eta: float | None = None):
    """Expected stay time eta_tilde + eta*g(x)."""
    return m.eta_tilde + _eta(m, eta) * m.g_spec(x)


def h_eta(m: ModelParams, x, eta: float | None = None):
    """Net drift without marketing: f(x) - x / (eta_tilde + eta*g(x))."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("population must be non-negative")
    return m.f_spec(x) - x / stay_time(m, x, eta)


def dh_dx(m: ModelParams, x, eta: float | None = None):
    e = _eta(m, eta)
    x = np.asarray(x, dtype=float)
    s = m.eta_tilde + e * m.g_spec(x)
    ds = e * m.g_spec.d1(x)
    return m.f_spec.d1(x) - (1.0 / s - x * ds / s**2)


def d2h_dx2(m: ModelParams, x, eta: float | None = None):
    e = _eta(m, eta)
    x = np.asarray(x, dtype=float)
    s = m.eta_tilde + e * m.g_spec(x)
    ds = e * m.g_spec.d1(x)
    d2s = e * m.g_spec.d2(x)
    u2 = -2.0 * ds / s**2 - x * d2s / s**2 + 2.0 * x * ds**2 / s**3
    return m.f_spec.d2(x) - u2


def dh_deta(m: ModelParams, x, eta: float | None = None):
    x = np.asarray(x, dtype=float)
    s = stay_time(m, x, eta)
    return m.g_spec(x) * x / s**2


def d2h_dxdeta(m: ModelParams, x, eta: float | None = None):
    e = _eta(m, eta)
    x = np.asarray(x, dtype=float)
    g, dg = m.g_spec(x), m.g_spec.d1(x)
    s = m.eta_tilde + e * g
    return g / s**2 + x * dg / s**2 - 2.0 * x * e * g * dg / s**3


def drift(m: ModelParams, x, lam, eta: float | None = None):
    lam_a = np.asarray(lam, dtype=float)
    if np.any(lam_a < 0) or np.any(lam_a > m.lambda_sup):
        raise ValueError(f"lambda must lie in [0, {m.lambda_sup}]")
    return h_eta(m, x, eta) + lam_a


@dataclass(frozen=True)
class DerivedBounds:
    x_sup: float
    x_u: float
    x_m: float
    q_sup: float
    k_tilde: float
    x2: float


def _q_objective(m: ModelParams):
    c = m.c_spec

    def phi(y):
        q = c.dinv(y)
        dq = 1.0 / c.d2(q)
        return y * dq - c.d1(dq)

    return phi


def q_sup(m: ModelParams, n: int = 4096) -> float:
    """Supremum of y*q'(y) - c'(q'(y)) over [c'(0), c'(lambda_sup)], q = (c')^-1."""
    lo = float(m.c_spec.d1(0.0))
    hi = float(m.c_spec.d1(m.lambda_sup))
    phi = _q_objective(m)
    ys = np.linspace(lo, hi, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.asarray(phi(ys), dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    best = float(vals[i])
    a, b = ys[max(i - 1, 0)], ys[min(i + 1, n - 1)]
    if b > a:
        res = optimize.minimize_scalar(
            lambda y: -float(phi(y)), bounds=(a, b), method="bounded",
            options={"xatol": 1e-6 * max(1.0, abs(ys[i]))},
        )
        if res.success and -res.fun > best:
            best = float(-res.fun)
    return best


def bounds(m: ModelParams, k_tilde: float | None = None) -> DerivedBounds:
    s_sup = m.eta_tilde + m.eta_sup * m.g_sup
    x_sup = (m.f_sup + m.lambda_sup) * s_sup
    qs = q_sup(m)
    x2 = (m.f_sup + qs + m.lambda_sup) * s_sup
    if k_tilde is None:
        k_tilde = 1e-3 * abs(x2)
    if k_tilde <= 0:
        raise ValueError("k_tilde must be positive")
    x_m = x2 + k_tilde
    return DerivedBounds(
        x_sup=x_sup, x_u=max(x_sup, x_m), x_m=x_m, q_sup=qs, k_tilde=k_tilde, x2=x2
    )


@dataclass(frozen=True)
class EntryModel:
    """Uniform preferences on [alpha_min, alpha_max]; users join only if their
    preference exceeds the per-capita entry cost c_enter/x."""

    c_enter: float
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    kappa: float = 0.1

    def __post_init__(self) -> None:
        if not self.alpha_min < self.alpha_max:
            raise ValueError("alpha_min must be below alpha_max")
        if self.c_enter < 0 or not math.isfinite(self.c_enter):
            raise ValueError("c_enter must be finite and non-negative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


def entry_fraction(e: EntryModel, x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("entry fraction needs x > 0")
    thresh = np.maximum(e.alpha_min, e.c_enter / x)
    w = (e.alpha_max - thresh) / (e.alpha_max - e.alpha_min)
    return np.clip(w, 0.0, 1.0)


def drift_with_entry(m: ModelParams, e: EntryModel, x, lam, eta: float | None = None):
    x = np.asarray(x, dtype=float)
    floor = e.c_enter * (1.0 + e.kappa)
    if np.any(x <= floor) and e.c_enter > 0:
        raise ValueError(f"population must exceed c_enter*(1+kappa) = {floor}")
    lam_a = np.asarray(lam, dtype=float)
    if np.any(lam_a < 0) or np.any(lam_a > m.lambda_sup):
        raise ValueError(f"lambda must lie in [0, {m.lambda_sup}]")
    w = entry_fraction(e, x)
    return (m.f_spec(x) + lam_a) * w - x / stay_time(m, x, eta)
