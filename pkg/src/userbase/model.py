"""Parametric function families and validated model instances.

Every role in the growth model (direct arrivals ``f``, interactions ``g``,
benefit ``b``, marketing cost ``c``) is a :class:`FunctionSpec`: a closed-form
family with analytic first and second derivatives.  Arbitrary callables are
deliberately not accepted so derivative code paths stay testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import integrate

FAMILIES = (
    "constant",
    "affine_saturating",
    "logistic",
    "power",
    "power_benefit",
    "quadratic",
    "s_shaped_benefit",
    "ramp",
)

# required and optional parameters per family
_PARAMS: dict[str, tuple[tuple[str, ...], dict[str, float]]] = {
    "constant": (("value",), {}),
    "affine_saturating": (("lo", "hi", "k"), {}),
    "logistic": (("lo", "hi", "slope", "mid"), {}),
    "power": (("scale", "exponent"), {}),
    "power_benefit": (("a",), {}),
    "quadratic": (("c",), {"lin": 0.0}),
    "s_shaped_benefit": (("t_threshold",), {"a": 0.5, "scale": 1.0}),
    "ramp": (("level", "slope"), {}),
}

COST_FAMILIES = ("quadratic", "power")


class ModelError(ValueError):
    """Raised when a configuration cannot produce a valid model instance."""


@dataclass(frozen=True)
class FunctionSpec:
    """A closed-form scalar function with analytic derivatives.

    ``params`` is stored as a sorted tuple of ``(name, value)`` pairs so specs
    are hashable; use :attr:`p` for dictionary access.
    """

    family: str
    params: tuple[tuple[str, float], ...]
    domain_lo: float = 0.0
    domain_hi: float = math.inf

    def __post_init__(self) -> None:
        if self.family not in _PARAMS:
            raise ModelError(f"unknown function family {self.family!r}")
        required, optional = _PARAMS[self.family]
        given = dict(self.params)
        missing = [k for k in required if k not in given]
        unknown = [k for k in given if k not in required and k not in optional]
        if missing:
            raise ModelError(f"{self.family}: missing parameters {missing}")
        if unknown:
            raise ModelError(f"{self.family}: unknown parameters {unknown}")
        full = {**optional, **given}
        for k, v in full.items():
            if not math.isfinite(v):
                raise ModelError(f"{self.family}: parameter {k} must be finite")
        object.__setattr__(self, "params", tuple(sorted((k, float(v)) for k, v in full.items())))
        _check_family(self.family, full)
        if not self.domain_lo < self.domain_hi:
            raise ModelError("domain_lo must be below domain_hi")

    @classmethod
    def make(cls, family: str, **params: float) -> FunctionSpec:
        return cls(family, tuple(params.items()))

    @property
    def p(self) -> dict[str, float]:
        return dict(self.params)

    def __call__(self, x):
        return _EVAL[self.family][0](self.p, np.asarray(x, dtype=float))

    def d1(self, x):
        return _EVAL[self.family][1](self.p, np.asarray(x, dtype=float))

    def d2(self, x):
        return _EVAL[self.family][2](self.p, np.asarray(x, dtype=float))

    def dinv(self, y):
        """Inverse of the first derivative; defined for cost families only."""
        p = self.p
        y = np.asarray(y, dtype=float)
        if self.family == "quadratic":
            return (y - p["lin"]) / (2.0 * p["c"])
        if self.family == "power":
            k, e = p["scale"], p["exponent"]
            u = np.abs(y) / (k * e)
            return np.sign(y) * u ** (1.0 / (e - 1.0))
        raise ModelError(f"{self.family} has no derivative inverse")

    def breakpoints(self) -> list[float]:
        """Points where the second derivative is discontinuous."""
        p = self.p
        if self.family == "s_shaped_benefit":
            return [p["t_threshold"]]
        if self.family == "ramp" and p["slope"] > 0:
            return [p["level"] / p["slope"]]
        return []

    def inf_sup(self, lo: float = 0.0, hi: float = math.inf) -> tuple[float, float]:
        """Infimum and supremum over ``[lo, hi]`` for monotone families."""
        if self.family == "constant":
            v = self.p["value"]
            return v, v
        if self.family in ("affine_saturating", "logistic") and math.isinf(hi):
            return float(self(lo)), self.p["hi"]
        a, b = float(self(lo)), float(self(hi))
        return min(a, b), max(a, b)


def _check_family(family: str, p: Mapping[str, float]) -> None:
    if family == "affine_saturating":
        if p["k"] <= 0 or p["hi"] < p["lo"]:
            raise ModelError("affine_saturating needs k > 0 and hi >= lo")
    elif family == "logistic":
        if p["slope"] <= 0 or p["hi"] < p["lo"]:
            raise ModelError("logistic needs slope > 0 and hi >= lo")
    elif family == "power_benefit":
        if not 0.0 < p["a"] <= 1.0:
            raise ModelError(f"power_benefit requires 0 < a <= 1, got a={p['a']}")
    elif family == "quadratic":
        if p["c"] <= 0:
            raise ModelError("quadratic cost needs c > 0 (strict convexity)")
    elif family == "s_shaped_benefit":
        if p["t_threshold"] <= 0 or not 0.0 < p["a"] <= 1.0 or p["scale"] <= 0:
            raise ModelError("s_shaped_benefit needs t_threshold > 0, 0 < a <= 1, scale > 0")
    elif family == "ramp":
        if p["level"] < 0 or p["slope"] < 0:
            raise ModelError("ramp needs level >= 0 and slope >= 0")


def _logistic(p, x):
    z = np.exp(-p["slope"] * (x - p["mid"]))
    return 1.0 / (1.0 + z)


def _s_shaped(p, x, order):
    t, a, s = p["t_threshold"], p["a"], p["scale"]
    r = np.maximum(x, 0.0) / t
    if order == 0:
        low = s * t * r * r / 2.0
        if a == 1.0:
            high = s * t * (0.5 + (r - 1.0))
        else:
            high = s * t * (0.5 + (r**a - 1.0) / a)
    elif order == 1:
        low = s * r
        high = s * r ** (a - 1.0)
    else:
        low = np.full_like(r, s / t)
        high = s * (a - 1.0) / t * r ** (a - 2.0)
    return np.where(x <= t, low, high)


_EVAL = {
    "constant": (
        lambda p, x: np.full_like(x, p["value"]),
        lambda p, x: np.zeros_like(x),
        lambda p, x: np.zeros_like(x),
    ),
    "affine_saturating": (
        lambda p, x: p["lo"] + (p["hi"] - p["lo"]) * x / (x + p["k"]),
        lambda p, x: (p["hi"] - p["lo"]) * p["k"] / (x + p["k"]) ** 2,
        lambda p, x: -2.0 * (p["hi"] - p["lo"]) * p["k"] / (x + p["k"]) ** 3,
    ),
    "logistic": (
        lambda p, x: p["lo"] + (p["hi"] - p["lo"]) * _logistic(p, x),
        lambda p, x: (p["hi"] - p["lo"]) * p["slope"] * _logistic(p, x) * (1 - _logistic(p, x)),
        lambda p, x: (p["hi"] - p["lo"])
        * p["slope"] ** 2
        * _logistic(p, x)
        * (1 - _logistic(p, x))
        * (1 - 2 * _logistic(p, x)),
    ),
    "power": (
        lambda p, x: p["scale"] * np.abs(x) ** p["exponent"],
        lambda p, x: p["scale"] * p["exponent"] * np.sign(x) * np.abs(x) ** (p["exponent"] - 1.0),
        lambda p, x: p["scale"]
        * p["exponent"]
        * (p["exponent"] - 1.0)
        * np.abs(x) ** (p["exponent"] - 2.0),
    ),
    "power_benefit": (
        lambda p, x: x ** p["a"],
        lambda p, x: p["a"] * x ** (p["a"] - 1.0),
        lambda p, x: p["a"] * (p["a"] - 1.0) * x ** (p["a"] - 2.0),
    ),
    "quadratic": (
        lambda p, x: p["c"] * x * x + p["lin"] * x,
        lambda p, x: 2.0 * p["c"] * x + p["lin"],
        lambda p, x: np.full_like(x, 2.0 * p["c"]),
    ),
    "s_shaped_benefit": (
        lambda p, x: _s_shaped(p, x, 0),
        lambda p, x: _s_shaped(p, x, 1),
        lambda p, x: _s_shaped(p, x, 2),
    ),
    "ramp": (
        lambda p, x: np.maximum(0.0, p["level"] - p["slope"] * x),
        lambda p, x: np.where(p["level"] - p["slope"] * x > 0, -p["slope"], 0.0),
        lambda p, x: np.zeros_like(x),
    ),
}


# Convenience constructors -------------------------------------------------

def constant(value: float) -> FunctionSpec:
    return FunctionSpec.make("constant", value=value)


def affine_saturating(lo: float, hi: float, k: float) -> FunctionSpec:
    return FunctionSpec.make("affine_saturating", lo=lo, hi=hi, k=k)


def logistic(lo: float, hi: float, slope: float, mid: float) -> FunctionSpec:
    return FunctionSpec.make("logistic", lo=lo, hi=hi, slope=slope, mid=mid)


def power(scale: float, exponent: float) -> FunctionSpec:
    return FunctionSpec.make("power", scale=scale, exponent=exponent)


def power_benefit(a: float) -> FunctionSpec:
    return FunctionSpec.make("power_benefit", a=a)


def quadratic(c: float, lin: float = 0.0) -> FunctionSpec:
    return FunctionSpec.make("quadratic", c=c, lin=lin)


def s_shaped_benefit(t_threshold: float, a: float = 0.5, scale: float = 1.0) -> FunctionSpec:
    return FunctionSpec.make("s_shaped_benefit", t_threshold=t_threshold, a=a, scale=scale)


def ramp(level: float, slope: float) -> FunctionSpec:
    return FunctionSpec.make("ramp", level=level, slope=slope)


@dataclass(frozen=True)
class ModelParams:
    """A complete deterministic model instance.

    ``f_inf``, ``f_sup``, ``g_sup`` and ``eta_sup`` are populated by
    :func:`build_model` from the function specs unless given explicitly.
    """

    f_spec: FunctionSpec
    g_spec: FunctionSpec
    b_spec: FunctionSpec
    c_spec: FunctionSpec
    eta_tilde: float
    eta: float
    rho: float
    lambda_sup: float
    x_initial: float
    f_sup: float
    f_inf: float
    g_sup: float
    eta_sup: float
    c_enter: float | None = None

    @property
    def c_inf(self) -> float:
        """Lower bound of the marginal cost on ``[0, lambda_sup]``."""
        return float(self.c_spec.d1(0.0))

    def with_(self, **changes: Any) -> ModelParams:
        """Copy with scalar fields replaced (re-validated through build_model)."""
        cfg = self.to_config()
        for k, v in changes.items():
            cfg[k] = v
        # bounds follow the specs unless the caller pins them
        for k in ("f_sup", "f_inf", "g_sup"):
            if k not in changes and any(s in changes for s in ("f", "g")):
                cfg.pop(k, None)
        if "eta" in changes and "eta_sup" not in changes:
            cfg["eta_sup"] = max(self.eta_sup, float(changes["eta"]))
        return build_model(cfg)

    def to_config(self) -> dict[str, Any]:
        cfg: dict[str, Any] = {
            "f": self.f_spec,
            "g": self.g_spec,
            "b": self.b_spec,
            "c": self.c_spec,
        }
        for k in (
            "eta_tilde", "eta", "rho", "lambda_sup", "x_initial",
            "f_sup", "f_inf", "g_sup", "eta_sup",
        ):
            cfg[k] = getattr(self, k)
        if self.c_enter is not None:
            cfg["c_enter"] = self.c_enter
        return cfg


@dataclass
class AssumptionReport:
    h_concave: bool
    b_class: str  # "concave" | "s_shaped_ok" | "rejected"
    c_strictly_convex: bool
    x_initial_ok: bool
    violations: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (
            self.h_concave
            and self.b_class != "rejected"
            and self.c_strictly_convex
            and self.x_initial_ok
            and not self.violations
        )


_SCALARS = ("eta_tilde", "eta", "rho", "lambda_sup", "x_initial")


def spec_from_config(value: Any) -> FunctionSpec:
    """Accept a FunctionSpec or a mapping ``{"family": ..., <params>}``."""
    if isinstance(value, FunctionSpec):
        return value
    if isinstance(value, Mapping):
        d = dict(value)
        try:
            family = d.pop("family")
        except KeyError:
            raise ModelError("function spec needs a 'family' key") from None
        lo = float(d.pop("domain_lo", 0.0))
        hi = float(d.pop("domain_hi", math.inf))
        return FunctionSpec(str(family), tuple((k, float(v)) for k, v in d.items()), lo, hi)
    raise ModelError(f"cannot interpret {value!r} as a function spec")


def build_model(config: Mapping[str, Any], strict: bool = True) -> ModelParams:
    """Assemble and validate a :class:`ModelParams` from a flat mapping.

    ``config`` holds one spec per role under keys ``f``, ``g``, ``b``, ``c`` and
    the scalars ``eta_tilde``, ``eta``, ``rho``, ``lambda_sup``, ``x_initial``.
    ``f_sup``, ``f_inf``, ``g_sup`` default to the family bounds on
    ``[0, inf)``; ``eta_sup`` defaults to ``eta``.  ``strict=False`` skips the
    x_initial bound so that :func:`validate_assumptions` can report it instead.
    """
    try:
        f, g, b, c = (spec_from_config(config[k]) for k in ("f", "g", "b", "c"))
    except KeyError as exc:
        raise ModelError(f"missing function spec {exc.args[0]!r}") from None
    scal: dict[str, float] = {}
    for k in _SCALARS:
        if k not in config:
            raise ModelError(f"missing scalar {k!r}")
        scal[k] = float(config[k])
        if not math.isfinite(scal[k]) or scal[k] < 0:
            raise ModelError(f"{k} must be a finite non-negative number, got {config[k]!r}")
    if scal["rho"] <= 0:
        raise ModelError("rho must be positive")
    if scal["lambda_sup"] <= 0:
        raise ModelError("lambda_sup must be positive")
    if scal["x_initial"] <= 0:
        raise ModelError("x_initial must be positive")

    if c.family not in COST_FAMILIES:
        raise ModelError(f"cost family {c.family!r} is not strictly convex")
    if c.family == "power" and (c.p["exponent"] <= 1.0 or c.p["scale"] <= 0):
        raise ModelError("power cost needs exponent > 1 and scale > 0 (strict convexity)")
    if float(c.d1(0.0)) < 0:
        raise ModelError("cost must be non-decreasing on [0, inf)")

    f_lo, f_hi = f.inf_sup()
    _, g_hi = g.inf_sup()
    f_inf = float(config.get("f_inf", f_lo))
    f_sup = float(config.get("f_sup", f_hi))
    g_sup = float(config.get("g_sup", g_hi))
    eta_sup = float(config.get("eta_sup", scal["eta"]))
    for name, v in (("f_inf", f_inf), ("f_sup", f_sup), ("g_sup", g_sup), ("eta_sup", eta_sup)):
        if not math.isfinite(v) or v < 0:
            raise ModelError(f"{name} must be finite and non-negative")
    if f_inf <= 0:
        raise ModelError("f_inf must be positive")
    if f_inf > f_lo + 1e-12 or f_sup < f_hi - 1e-12:
        raise ModelError("declared f bounds do not contain f on [0, inf)")
    if g_sup < g_hi - 1e-12:
        raise ModelError("declared g_sup is below sup g")
    if g.inf_sup()[0] < 0:
        raise ModelError("g must be non-negative")
    if scal["eta"] > eta_sup:
        raise ModelError("eta exceeds eta_sup")
    if strict and scal["x_initial"] >= f_inf * scal["eta_tilde"]:
        raise ModelError(
            "x_initial < f_inf*eta_tilde violated: "
            f"{scal['x_initial']} >= {f_inf * scal['eta_tilde']}"
        )
    c_enter = config.get("c_enter")
    if c_enter is not None:
        c_enter = float(c_enter)
        if c_enter < 0:
            raise ModelError("c_enter must be non-negative")
    return ModelParams(
        f_spec=f, g_spec=g, b_spec=b, c_spec=c,
        f_sup=f_sup, f_inf=f_inf, g_sup=g_sup, eta_sup=eta_sup,
        c_enter=c_enter, **scal,
    )


def lq_benchmark(**overrides: Any) -> ModelParams:
    """The linear-benefit / quadratic-cost instance used throughout the tests."""
    cfg: dict[str, Any] = {
        "f": constant(1.0),
        "g": constant(1.0),
        "b": power_benefit(1.0),
        "c": quadratic(1.0),
        "eta_tilde": 0.5,
        "eta": 0.5,
        "rho": 0.1,
        "lambda_sup": 10.0,
        "x_initial": 0.4,
    }
    cfg.update(overrides)
    return build_model(cfg)


def _rel_tol(values: np.ndarray, rel: float) -> float:
    return rel * max(1.0, float(np.max(np.abs(values))))


def validate_assumptions(
    m: ModelParams,
    interval: tuple[float, float],
    grid_n: int = 512,
    rel_tol: float = 1e-9,
) -> AssumptionReport:
    """Check the standing assumptions on a uniform grid over ``interval``.

    Never raises on a failed assumption; failures are listed in the report.
    """
    from .dynamics import h_eta  # local import: dynamics depends on this module

    x_lo, x_hi = map(float, interval)
    if not x_lo < x_hi:
        raise ValueError("interval must satisfy x_lo < x_hi")
    if grid_n < 16:
        raise ValueError("grid_n must be at least 16")
    xs = np.linspace(x_lo, x_hi, grid_n)
    violations: list[tuple[str, float, float]] = []

    h = h_eta(m, xs)
    d2h = h[2:] - 2 * h[1:-1] + h[:-2]
    tol = _rel_tol(h, rel_tol)
    bad = np.nonzero(d2h > tol)[0]
    for i in bad:
        violations.append(("h_concave", float(xs[i + 1]), float(d2h[i])))
    h_concave = bad.size == 0

    b = m.b_spec(xs)
    d2b = b[2:] - 2 * b[1:-1] + b[:-2]
    btol = _rel_tol(b, rel_tol)
    db = np.diff(b)
    if np.any(db < -btol):
        i = int(np.argmin(db))
        violations.append(("b_increasing", float(xs[i]), float(db[i])))
    if m.b_spec.family == "s_shaped_benefit":
        t = m.b_spec.p["t_threshold"]
        limit = m.f_inf * m.eta_tilde
        tail = xs[:-2] >= t  # whole stencil past the kink
        if t >= limit:
            b_class = "rejected"
            violations.append(("t_threshold < f_inf*eta_tilde", t, t - limit))
        elif np.any(d2b[tail] > btol):
            b_class = "rejected"
            i = int(np.argmax(np.where(tail, d2b, -np.inf)))
            violations.append(("b_concave_beyond_threshold", float(xs[i + 1]), float(d2b[i])))
        else:
            b_class = "s_shaped_ok"
    else:
        bad_b = np.nonzero(d2b > btol)[0]
        if bad_b.size:
            b_class = "rejected"
            for i in bad_b[:8]:
                violations.append(("b_concave", float(xs[i + 1]), float(d2b[i])))
        else:
            b_class = "concave"

    lam = np.linspace(0.0, m.lambda_sup, grid_n)
    dc = np.diff(m.c_spec.d1(lam))
    c_ok = bool(np.all(dc > 0))
    if not c_ok:
        i = int(np.argmin(dc))
        violations.append(("c_strictly_convex", float(lam[i]), float(dc[i])))

    x_ok = 0 < m.x_initial < m.f_inf * m.eta_tilde
    if not x_ok:
        violations.append(
            ("x_initial < f_inf*eta_tilde", m.x_initial, m.x_initial - m.f_inf * m.eta_tilde)
        )

    fx = m.f_spec(xs)
    gx = m.g_spec(xs)
    ftol = _rel_tol(fx, rel_tol)
    if np.any(fx < m.f_inf - ftol) or np.any(fx > m.f_sup + ftol):
        i = int(np.argmax(np.maximum(m.f_inf - fx, fx - m.f_sup)))
        violations.append(("f_bounds", float(xs[i]), float(max(m.f_inf - fx[i], fx[i] - m.f_sup))))
    if np.any(gx < -ftol) or np.any(gx > m.g_sup + ftol):
        i = int(np.argmax(np.maximum(-gx, gx - m.g_sup)))
        violations.append(("g_bounds", float(xs[i]), float(max(-gx[i], gx[i] - m.g_sup))))

    return AssumptionReport(
        h_concave=h_concave,
        b_class=b_class,
        c_strictly_convex=c_ok,
        x_initial_ok=x_ok,
        violations=violations,
    )


def benefit_from_preferences(pr: FunctionSpec, x: float, epsabs: float = 1e-13) -> float:
    """Total benefit of the ``x`` most-interested users: the integral of ``pr`` on ``[0, x]``.

    Users join in decreasing order of preference, so ``pr`` must be
    non-increasing; the result is then concave in ``x``.
    """
    x = float(x)
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    probe = np.linspace(0.0, x, 65)[1:]
    if np.any(np.diff(pr(probe)) > 1e-12 * max(1.0, float(np.max(np.abs(pr(probe)))))):
        raise ValueError("preference function must be non-increasing")
    if pr.family == "power" and pr.p["exponent"] < 0:
        # algebraic endpoint singularity at 0: integrate s**exponent * 1 exactly weighted
        e = pr.p["exponent"]
        val, _ = integrate.quad(
            lambda s: pr.p["scale"], 0.0, x, weight="alg", wvar=(e, 0.0),
            epsabs=epsabs, epsrel=1e-13,
        )
        return float(val)
    pts = [p for p in pr.breakpoints() if 0.0 < p < x]
    val, _ = integrate.quad(
        lambda s: float(pr(s)), 0.0, x, points=pts or None,
        epsabs=epsabs, epsrel=1e-13, limit=200,
    )
    return float(val)
