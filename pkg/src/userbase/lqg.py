"""Linear-quadratic model with multiplicative noise: closed form and Monte Carlo.

Dynamics dX = (theta + lam - lambda_d X) dt + sigma X dW, benefit
2*Gamma*x - x**2 and cost c*lam**2.  The value is quadratic,
Pi(x) = A x**2 + B x + C, and the optimal feedback is affine in x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np


class LqgError(ValueError):
    pass


@dataclass(frozen=True)
class LqgParams:
    theta: float
    gamma_cap: float
    c: float
    lambda_d: float
    rho: float
    sigma: float = 0.0
    x0: float = 1.0
    eta: float | None = None  # time per interaction, only for the capacity check

    def __post_init__(self) -> None:
        for k in ("theta", "gamma_cap", "c", "lambda_d", "rho", "x0"):
            v = getattr(self, k)
            if not (math.isfinite(v) and v > 0):
                raise LqgError(f"{k} must be positive and finite, got {v!r}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise LqgError("sigma must be non-negative")
        if self.eta is not None and self.gamma_cap < self.theta * self.eta:
            raise LqgError("capacity condition Gamma >= theta*eta violated")

    @property
    def sigma_below_rho(self) -> bool:
        """Regime in which the monotone comparative statics in sigma are claimed."""
        return self.sigma <= self.rho

    def with_(self, **kw) -> LqgParams:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return LqgParams(**d)


@dataclass(frozen=True)
class LqgSolution:
    a_coef: float
    b_coef: float
    c_coef: float
    decay: float
    steady_mean: float
    residuals: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.a_coef * x * x + self.b_coef * x + self.c_coef


def _k(p: LqgParams) -> float:
    return 2.0 * p.lambda_d + p.rho - p.sigma**2


def a_coefficient(p: LqgParams) -> float:
    """Negative root of A**2/c - k A - 1 = 0 in a cancellation-free form."""
    k = _k(p)
    root = math.hypot(k, 2.0 / math.sqrt(p.c))
    # c*(k - root)/2 == -2/(k + root) since (k - root)(k + root) = -4/c
    return -2.0 / (k + root)


def coefficient_residuals(p: LqgParams, a: float, b: float, c0: float) -> tuple[float, float, float]:
    """Residuals of the x**2, x and constant terms of the stationary HJB."""
    r2 = a * a / p.c - _k(p) * a - 1.0
    r1 = b * (p.rho + p.lambda_d - a / p.c) - 2.0 * (a * p.theta + p.gamma_cap)
    r0 = p.rho * c0 - (b * p.theta + b * b / (4.0 * p.c))
    return r2, r1, r0


def solve_lqg(p: LqgParams) -> LqgSolution:
    a = a_coefficient(p)
    b = 2.0 * (a * p.theta + p.gamma_cap) / (p.rho + p.lambda_d - a / p.c)
    c0 = (b * p.theta + b * b / (4.0 * p.c)) / p.rho
    decay = p.lambda_d - a / p.c
    if not (a < 0 and decay > 0):
        raise LqgError("closed loop is not mean reverting")
    inflow = p.theta + b / (2.0 * p.c)
    if inflow <= 0:
        raise LqgError("closed-loop inflow theta + B/(2c) is not positive")
    return LqgSolution(a, b, c0, decay, inflow / decay, coefficient_residuals(p, a, b, c0))


def feedback_policy(s: LqgSolution, p: LqgParams, x):
    """Optimal (unconstrained) rate (A/c) x + B/(2c); may be negative."""
    return s.a_coef / p.c * np.asarray(x, dtype=float) + s.b_coef / (2.0 * p.c)


def expected_trajectory(s: LqgSolution, p: LqgParams, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    e = np.exp(-s.decay * t)
    ex = s.steady_mean * (1.0 - e) + p.x0 * e
    return ex, feedback_policy(s, p, ex)


# --- sensitivities -----------------------------------------------------------------

@dataclass
class Sensitivities:
    dA_dsigma2: float
    dA_dlambda_d: float
    dB_dlambda_d: float
    fd_dA_dsigma2: float
    fd_dA_dlambda_d: float
    fd_dB_dlambda_d: float
    agree: dict[str, bool] = field(default_factory=dict)


def _rel_close(a: float, b: float, rel: float) -> bool:
    return abs(a - b) <= rel * max(abs(a), abs(b), 1e-300)


def sensitivities(p: LqgParams, step: float = 1e-6, rel: float = 1e-4) -> Sensitivities:
    k = _k(p)
    root = math.sqrt(k * k + 4.0 / p.c)
    dA_dk = 0.5 * p.c * (1.0 - k / root)
    dA_ds2 = -dA_dk
    dA_dl = 2.0 * dA_dk

    s = solve_lqg(p)
    a, b = s.a_coef, s.b_coef
    num = 2.0 * (a * p.theta + p.gamma_cap)
    den = p.rho + p.lambda_d - a / p.c
    dB_dl = (2.0 * p.theta * dA_dl * den - num * (1.0 - dA_dl / p.c)) / den**2

    def central(fn, x, h):
        return (fn(x + h) - fn(x - h)) / (2.0 * h)

    s2 = p.sigma**2
    h_s = step * max(1.0, s2)
    if s2 - h_s < 0:
        # second-order forward stencil near sigma = 0
        a2 = solve_lqg(p.with_(sigma=math.sqrt(s2 + 2 * h_s))).a_coef
        a1 = solve_lqg(p.with_(sigma=math.sqrt(s2 + h_s))).a_coef
        fd_s = (-3.0 * a + 4.0 * a1 - a2) / (2.0 * h_s)
    else:
        fd_s = central(lambda v: solve_lqg(p.with_(sigma=math.sqrt(v))).a_coef, s2, h_s)
    h_l = step * max(1.0, p.lambda_d)
    fd_al = central(lambda v: solve_lqg(p.with_(lambda_d=v)).a_coef, p.lambda_d, h_l)
    fd_bl = central(lambda v: solve_lqg(p.with_(lambda_d=v)).b_coef, p.lambda_d, h_l)
    return Sensitivities(
        dA_ds2, dA_dl, dB_dl, fd_s, fd_al, fd_bl,
        agree={
            "dA_dsigma2": _rel_close(dA_ds2, fd_s, rel),
            "dA_dlambda_d": _rel_close(dA_dl, fd_al, rel),
            "dB_dlambda_d": _rel_close(dB_dl, fd_bl, rel),
        },
    )


# --- Monte Carlo -------------------------------------------------------------------

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


@numba.njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _MASK32) + (hl & _MASK32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, a * b


@numba.njit
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64 with 10 rounds; returns the four output words."""
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


@numba.njit
def philox_block(counter, key0, key1):
    out = np.empty(4, dtype=np.uint64)
    out[0], out[1], out[2], out[3] = philox4x64(
        np.uint64(counter), np.uint64(0), np.uint64(0), np.uint64(0),
        np.uint64(key0), np.uint64(key1),
    )
    return out


_TWO_M53 = 1.0 / 9007199254740992.0
_S11 = np.uint64(11)


@numba.njit(inline="always")
def _unit(u):
    # strictly inside (0, 1)
    return (float(u >> _S11) + 0.5) * _TWO_M53


@numba.njit(parallel=True)
def _simulate(x0, x_star, shrink, noise, n_steps, rec_steps, n_paths, seed):
    n_rec = rec_steps.shape[0]
    out = np.empty((n_paths, n_rec))
    clips = np.zeros(n_paths, dtype=np.int64)
    key0 = np.uint64(seed)
    two_pi = 2.0 * np.pi
    for path in numba.prange(n_paths):
        key1 = np.uint64(path)
        x = x0
        r = 0
        z = np.empty(4)
        for step in range(n_steps):
            j = step & 3
            if noise != 0.0 and j == 0:
                u0, u1, u2, u3 = philox4x64(
                    np.uint64(step >> 2), np.uint64(0), np.uint64(0), np.uint64(0), key0, key1
                )
                ra = math.sqrt(-2.0 * math.log(_unit(u0)))
                rb = math.sqrt(-2.0 * math.log(_unit(u2)))
                ta = two_pi * _unit(u1)
                tb = two_pi * _unit(u3)
                z[0] = ra * math.cos(ta)
                z[1] = ra * math.sin(ta)
                z[2] = rb * math.cos(tb)
                z[3] = rb * math.sin(tb)
            x_new = x_star + (x - x_star) * shrink
            if noise != 0.0:
                x_new += noise * x * z[j]
            if x_new < 0.0:
                x_new = 0.0
                clips[path] += 1
            x = x_new
            while r < n_rec and rec_steps[r] == step + 1:
                out[path, r] = x
                r += 1
    return out, clips


@dataclass(frozen=True)
class McStats:
    times: np.ndarray
    mean_x: np.ndarray
    mean_lam: np.ndarray
    ci_half_width: np.ndarray
    ci_half_width_lam: np.ndarray
    n_paths: int
    seed: int
    clipped: int = 0


Z99 = 2.5758293035489004  # two-sided 99% normal quantile


def _mean_ci(v: np.ndarray) -> tuple[float, float]:
    n = v.shape[0]
    mean = math.fsum(v) / n
    var = math.fsum((v - mean) ** 2) / (n - 1)
    return mean, Z99 * math.sqrt(var / n)


def simulate_sde(
    s: LqgSolution,
    p: LqgParams,
    t_end: float,
    dt: float,
    n_paths: int,
    seed: int,
    n_record: int = 10,
) -> McStats:
    """Monte Carlo of the closed-loop SDE.

    Each step applies the exact flow of the linear drift over ``dt`` and adds the
    Euler-Maruyama noise increment sigma * X * dW.  Normals come from a
    Philox4x64-10 stream keyed by (seed, path index) with the step block as the
    counter, so results do not depend on thread scheduling.
    """
    if dt <= 0 or dt > 1e-3 / max(s.decay, p.lambda_d) * (1 + 1e-12):
        raise ValueError("dt must satisfy 0 < dt <= 1e-3/max(decay, lambda_d)")
    if n_paths < 10_000:
        raise ValueError("n_paths must be at least 1e4")
    if t_end <= 0 or n_record < 1:
        raise ValueError("t_end and n_record must be positive")
    if not 0 <= seed < 2**63:
        raise ValueError("seed must be a non-negative 63-bit integer")
    n_steps = int(round(t_end / dt))
    if n_steps < n_record:
        raise ValueError("t_end/dt must exceed the number of recorded times")
    rec = np.array([round(n_steps * (i + 1) / n_record) for i in range(n_record)], dtype=np.int64)
    x_star = s.steady_mean
    shrink = math.exp(-s.decay * dt)
    noise = p.sigma * math.sqrt(dt)
    out, clips = _simulate(float(p.x0), x_star, shrink, noise, n_steps, rec, int(n_paths), int(seed))
    mx, mlam, ci, ci_l = [], [], [], []
    for j in range(n_record):
        col = out[:, j]
        m_, h_ = _mean_ci(col)
        ml, hl = _mean_ci(feedback_policy(s, p, col))
        mx.append(m_)
        ci.append(h_)
        mlam.append(ml)
        ci_l.append(hl)
    return McStats(
        times=rec * dt,
        mean_x=np.array(mx),
        mean_lam=np.array(mlam),
        ci_half_width=np.array(ci),
        ci_half_width_lam=np.array(ci_l),
        n_paths=int(n_paths),
        seed=int(seed),
        clipped=int(clips.sum()),
    )
