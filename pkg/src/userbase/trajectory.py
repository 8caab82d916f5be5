"""Closed-loop integration of the user base under a tabulated feedback policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45

from .dynamics import bounds, h_eta
from .hjb import PolicyTable
from .model import ModelParams


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    converged_at: float | None = None
    x_limit: float | None = None


@dataclass
class MonotoneReport:
    x_decreases: list[tuple[int, float, float]] = field(default_factory=list)
    lam_increases: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.x_decreases and not self.lam_increases


def integrate(
    m: ModelParams,
    p: PolicyTable,
    t_end: float,
    rtol: float = 1e-9,
    x0: float | None = None,
    eta: float | None = None,
    persist: int = 10,
    t_eval: np.ndarray | None = None,
) -> Trajectory:
    """Integrate dx/dt = h(x) + zeta(x) from ``x0`` (default x_initial) with RK45.

    ``converged_at`` is the time at which ``|dx/dt| < rtol*(1+x)`` has held for
    ``persist`` consecutive accepted steps; integration still runs to ``t_end``.
    With ``t_eval`` the path is reported at those times (dense output) instead
    of at the accepted steps.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    x0 = m.x_initial if x0 is None else float(x0)
    lo, hi = p.nodes[0], p.nodes[-1]
    if not lo <= x0 <= hi:
        raise IntegrationError("initial state outside the policy table")

    def rhs(_t, y):
        xv = y[0]
        if xv < lo - 1e-9 or xv > hi + 1e-9:
            raise IntegrationError(f"state {xv} left the policy table domain [{lo}, {hi}]")
        xv = min(max(xv, lo), hi)
        return np.array([float(h_eta(m, xv, eta)) + float(p(xv))])

    solver = RK45(rhs, 0.0, np.array([x0]), t_end, rtol=rtol, atol=rtol * 1e-2 * max(1.0, x0))
    ts, xs = [0.0], [x0]
    streak = 0
    converged_at = None
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if np.any(np.diff(t_eval) < 0) or t_eval[0] < 0 or t_eval[-1] > t_end:
            raise ValueError("t_eval must be sorted within [0, t_end]")
        x_eval = np.empty_like(t_eval)
        x_eval[t_eval == 0.0] = x0
        k = int(np.searchsorted(t_eval, 0.0, side="right"))
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"integration failed: {msg}")
        xv = float(solver.y[0])
        if t_eval is not None:
            j = int(np.searchsorted(t_eval, solver.t, side="right"))
            if j > k:
                x_eval[k:j] = solver.dense_output()(t_eval[k:j])[0]
                k = j
        ts.append(float(solver.t))
        xs.append(xv)
        if converged_at is None:
            if abs(rhs(solver.t, solver.y)[0]) < rtol * (1.0 + abs(xv)):
                streak += 1
                if streak >= persist:
                    converged_at = float(solver.t)
            else:
                streak = 0
    x_limit = float(xs[-1]) if converged_at is not None else None
    if t_eval is not None:
        ts, xs = t_eval, x_eval
    x = np.asarray(xs)
    lam = np.asarray(p(np.clip(x, lo, hi)), dtype=float)
    return Trajectory(
        times=np.asarray(ts),
        x=x,
        lam=lam,
        converged_at=converged_at,
        x_limit=x_limit,
    )


def check_monotone(tr: Trajectory, tol: float = 1e-8) -> MonotoneReport:
    """List steps where x falls or lam rises by more than ``tol``."""
    rep = MonotoneReport()
    dx = np.diff(tr.x)
    dl = np.diff(tr.lam)
    for i in np.nonzero(dx < -tol)[0]:
        rep.x_decreases.append((int(i + 1), float(tr.x[i + 1]), float(dx[i])))
    for i in np.nonzero(dl > tol)[0]:
        rep.lam_increases.append((int(i + 1), float(tr.x[i + 1]), float(dl[i])))
    return rep


def check_invariant_region(m: ModelParams, tr: Trajectory, tol: float = 1e-9) -> bool:
    """True iff the path stays in [x_initial, x_sup] and lam in [0, lambda_sup]."""
    x_sup = bounds(m).x_sup
    lo = min(m.x_initial, float(tr.x[0]))
    return bool(
        np.all(tr.x >= lo - tol)
        and np.all(tr.x <= x_sup + tol)
        and np.all(tr.lam >= -tol)
        and np.all(tr.lam <= m.lambda_sup + tol)
    )
