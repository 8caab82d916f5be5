"""Command-line front end: ``userbase <command> --config run.toml [--out DIR]``.

Every command writes ``<prefix>manifest.json`` before any heavy work and
rewrites it on exit with the status, output files and wall-clock duration.
CSV files carry a header row, '\\n' line endings and floats printed with 17
significant digits, so identical inputs give byte-identical files.

Exit codes: 0 success, 1 numerical or model failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
import warnings
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, spec_to_dict
from .dynamics import bounds
from .hjb import GridSpec, SolverError, default_grid, policy_interior_check, solve_hjb
from .lqg import (
    LqgError,
    LqgParams,
    expected_trajectory,
    feedback_policy,
    sensitivities,
    simulate_sde,
    solve_lqg,
)
from .model import FunctionSpec, ModelError, ModelParams, build_model, validate_assumptions
from .steady import (
    SteadyStateError,
    compute_thresholds,
    sign_dlam_s_deta,
    solve_steady,
    theorem4_prediction,
)
from .trajectory import IntegrationError, check_monotone, integrate

log = logging.getLogger("userbase")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MODEL_SWEEP_SCALARS = ("eta_tilde", "eta", "rho", "lambda_sup", "x_initial")
LQG_SWEEP_SCALARS = ("theta", "gamma_cap", "c", "lambda_d", "rho", "sigma", "x0")
SWEEP_ALIASES = {"a": "b.a", "c": "c.c"}  # model kind only


# --- output helpers ----------------------------------------------------------------

def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _jsonable(v: Any) -> Any:
    if isinstance(v, FunctionSpec):
        return spec_to_dict(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    return v


class Manifest:
    def __init__(self, out_dir: Path, prefix: str, command: str, cfg: RunConfig, argv: list[str]):
        self.path = out_dir / f"{prefix}manifest.json"
        self.t0 = time.monotonic()
        self.data: dict[str, Any] = {
            "command": command,
            "argv": argv,
            "version": __version__,
            "config_file": cfg.source,
            "config": _jsonable(cfg.resolved()),
            "status": "running",
            "files": [],
            "results": {},
        }
        self._write()

    def _write(self) -> None:
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    def add_file(self, p: Path) -> None:
        self.data["files"].append(p.name)

    def result(self, **kw: Any) -> None:
        self.data["results"].update(_jsonable(kw))

    def finalize(self, code: int, error: str | None = None) -> None:
        self.data["status"] = "ok" if code == EXIT_OK else "failed"
        self.data["exit_code"] = code
        if error:
            self.data["error"] = error
        self.data["duration_s"] = time.monotonic() - self.t0
        self._write()


class Context:
    def __init__(self, cfg: RunConfig, args: argparse.Namespace, manifest: Manifest, out: Path):
        self.cfg = cfg
        self.args = args
        self.manifest = manifest
        self.out = out
        self.prefix = cfg.output["prefix"]

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        p = write_csv(self.out / f"{self.prefix}{name}", header, rows)
        self.manifest.add_file(p)
        return p


# --- setup helpers -------------------------------------------------------------------

def _model(cfg: RunConfig) -> ModelParams:
    if cfg.model is None:
        raise ConfigError("this command needs a [model] section")
    return cfg.model_params()


def _grid(cfg: RunConfig, m: ModelParams) -> GridSpec:
    g = dict(cfg.grid)
    try:
        n = int(g.pop("n", 2048))
        lo, hi = g.pop("x_lo", None), g.pop("x_hi", None)
        base = default_grid(m, n, **g)
        return GridSpec(
            float(base.x_lo if lo is None else lo),
            float(base.x_hi if hi is None else hi),
            n, base.scheme, base.tol, base.max_iter,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ConfigError(f"[grid]: {exc}") from None


def _lqg_params(cfg: RunConfig) -> LqgParams:
    if cfg.lqg is None:
        raise ConfigError("this command needs an [lqg] section")
    keys = ("theta", "gamma_cap", "c", "lambda_d", "rho", "sigma", "x0", "eta")
    kw = {k: cfg.lqg[k] for k in keys}
    for k, v in kw.items():
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"lqg.{k} must be a number")
    return LqgParams(**{k: (None if v is None else float(v)) for k, v in kw.items()})


def _positive(name: str, v: Any, integer: bool = False) -> Any:
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{name} must be positive, got {v!r}")
    if integer:
        if int(v) != v:
            raise ConfigError(f"{name} must be an integer")
        return int(v)
    return float(v)


# --- commands -----------------------------------------------------------------------

def cmd_validate(ctx: Context) -> int:
    cfg = ctx.cfg
    if cfg.model is None:
        raise ConfigError("validate needs a [model] section")
    m = build_model(cfg.model, strict=False)
    x_hi = bounds(m).x_u
    rep = validate_assumptions(m, (m.x_initial, x_hi))
    checks = [
        ("h_concave", rep.h_concave, ""),
        ("b_class", rep.b_class != "rejected", rep.b_class),
        ("c_strictly_convex", rep.c_strictly_convex, ""),
        ("x_initial < f_inf*eta_tilde", rep.x_initial_ok, f"{m.x_initial:g} vs {m.f_inf * m.eta_tilde:g}"),
    ]
    rows = [("summary", name, ok, detail, None, None) for name, ok, detail in checks]
    rows += [("violation", name, False, "", x, amount) for name, x, amount in rep.violations]
    ctx.csv("validation.csv", ("kind", "check", "passed", "detail", "x", "amount"), rows)

    width = max(len(r[1]) for r in rows)
    print(f"{'check':<{width}}  result  detail")
    for name, ok, detail in checks:
        print(f"{name:<{width}}  {'pass' if ok else 'FAIL':<6}  {detail}")
    for name, x, amount in rep.violations:
        print(f"{name:<{width}}  FAIL    at x={x:.6g} (amount {amount:.3g})")
    ctx.manifest.result(ok=rep.ok, n_violations=len(rep.violations))
    return EXIT_OK if rep.ok else EXIT_FAIL


def _solve(ctx: Context, m: ModelParams, eta: float | None = None):
    grid = _grid(ctx.cfg, m)
    return solve_hjb(m, grid, eta=eta)


def cmd_solve(ctx: Context) -> int:
    m = _model(ctx.cfg)
    _grid(ctx.cfg, m)  # surface grid errors before the manifest records progress
    v, p = _solve(ctx, m)
    ctx.csv("value.csv", ("x", "pi", "dpi_dx"), zip(v.nodes, v.values, v.derivative))
    ctx.csv("policy.csv", ("x", "zeta"), zip(p.nodes, p.zeta))
    interior = policy_interior_check(v, m)
    ctx.manifest.result(
        residual=v.residual, iterations=v.iterations, policy_interior=interior, n=len(v.nodes)
    )
    if not interior:
        log.warning("dPi/dx leaves (c'(0), c'(lambda_sup)) on [x_initial, x_u]")
    return EXIT_OK


def cmd_trajectory(ctx: Context) -> int:
    m = _model(ctx.cfg)
    run = ctx.cfg.run
    t_end = _positive("run.t_end", run["t_end"]) or 50.0 / m.rho
    rtol = _positive("run.rtol", run["rtol"])
    n_out = _positive("run.n_out", run["n_out"], integer=True)
    if n_out < 2:
        raise ConfigError("run.n_out must be at least 2")
    _grid(ctx.cfg, m)
    _, p = _solve(ctx, m)
    t = np.linspace(0.0, t_end, n_out)
    tr = integrate(m, p, t_end, rtol=rtol, t_eval=t)
    ctx.csv("trajectory.csv", ("t", "x", "lambda"), zip(tr.times, tr.x, tr.lam))
    mono = check_monotone(tr)
    ctx.manifest.result(
        t_end=t_end,
        converged_at=tr.converged_at,
        x_limit=tr.x_limit,
        x_decreases=len(mono.x_decreases),
        lambda_increases=len(mono.lam_increases),
    )
    if tr.converged_at is None:
        log.warning("trajectory has not settled by t_end=%g; converged_at left empty", t_end)
    return EXIT_OK


def cmd_statics(ctx: Context) -> int:
    m = _model(ctx.cfg)
    run = ctx.cfg.run
    eta_lo = ctx.args.eta_lo if ctx.args.eta_lo is not None else run["eta_lo"]
    eta_hi = ctx.args.eta_hi if ctx.args.eta_hi is not None else run["eta_hi"]
    if eta_lo is None or eta_hi is None:
        raise ConfigError("statics needs eta_lo and eta_hi (flags or [run])")
    eta_lo, eta_hi = float(eta_lo), float(eta_hi)
    if not 0.0 < eta_lo < eta_hi <= m.eta_sup:
        raise ConfigError(f"need 0 < eta_lo < eta_hi <= eta_sup={m.eta_sup:g}")
    n_x = _positive("run.n_x", run["n_x"], integer=True)
    grid = _grid(ctx.cfg, m)
    if run["eta_grid"] is not None:
        eta_grid = [float(e) for e in run["eta_grid"]]
    else:
        top = min(eta_hi, m.eta_sup * (1.0 - 2e-3))
        eta_grid = list(np.linspace(eta_lo, top, 3))
    if len(eta_grid) < 3 or any(not 0.0 < e < m.eta_sup for e in eta_grid):
        raise ConfigError("eta_grid needs at least 3 points strictly inside (0, eta_sup)")

    cache: dict[float, Any] = {}

    def hjb(mm: ModelParams, eta: float):
        key = float(eta)
        if key not in cache:
            cache[key] = solve_hjb(mm, grid, eta=key)
        return cache[key]

    th = compute_thresholds(m, eta_grid, hjb)
    row = th.as_row()
    row["benefit_type"] = th.benefit_type()
    ctx.csv("thresholds.csv", list(row), [list(row.values())])

    _, p_hi = hjb(m, eta_hi)
    _, p_lo = hjb(m, eta_lo)
    xs = np.linspace(m.x_initial, min(bounds(m).x_u, grid.x_hi), n_x)
    rows = []
    for x in xs:
        z_hi, z_lo = float(p_hi(x)), float(p_lo(x))
        dz = z_lo - z_hi
        _, _, pred = theorem4_prediction(m, th, float(x))
        if pred == "uncovered":
            agree = "na"
        else:
            agree = (dz > 0) if pred == "increase" else (dz < 0)
        rows.append((x, z_hi, z_lo, dz, pred, agree))
    ctx.csv(
        "statics.csv",
        ("x", "zeta_eta_hi", "zeta_eta_lo", "delta_zeta", "theorem4_prediction", "agreement"),
        rows,
    )
    sign = sign_dlam_s_deta(m)
    ctx.manifest.result(
        eta_lo=eta_lo, eta_hi=eta_hi, eta_grid=eta_grid,
        dlam_s_deta_sign=sign.sign, dlam_s_deta_value=sign.value,
        dlam_s_deta_fd=sign.fd, sign_agrees_with_fd=sign.agree,
    )
    return EXIT_OK


def cmd_lqg(ctx: Context) -> int:
    p = _lqg_params(ctx.cfg)
    q = ctx.cfg.lqg
    assert q is not None
    seed = ctx.args.seed if ctx.args.seed is not None else q["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**63:
        raise ConfigError("seed must be a non-negative 63-bit integer")
    n_paths = _positive("lqg.n_paths", q["n_paths"], integer=True)
    n_record = _positive("lqg.n_record", q["n_record"], integer=True)
    n_out = _positive("lqg.n_out", q["n_out"], integer=True)
    dt = _positive("lqg.dt", q["dt"])
    t_end = _positive("lqg.t_end", q["t_end"])

    s = solve_lqg(p)
    sens = sensitivities(p)
    dt = 1e-4 / s.decay if dt is None else dt
    t_end = 1.0 / s.decay if t_end is None else t_end
    ctx.csv(
        "lqg_solution.csv",
        (
            "a_coef", "b_coef", "c_coef", "decay", "steady_mean",
            "residual_x2", "residual_x1", "residual_x0",
            "dA_dsigma2", "dA_dsigma2_fd", "dA_dlambda_d", "dA_dlambda_d_fd",
            "dB_dlambda_d", "dB_dlambda_d_fd",
        ),
        [(
            s.a_coef, s.b_coef, s.c_coef, s.decay, s.steady_mean, *s.residuals,
            sens.dA_dsigma2, sens.fd_dA_dsigma2, sens.dA_dlambda_d, sens.fd_dA_dlambda_d,
            sens.dB_dlambda_d, sens.fd_dB_dlambda_d,
        )],
    )
    t = np.linspace(0.0, t_end, n_out)
    ex, el = expected_trajectory(s, p, t)
    ctx.csv("lqg_expected.csv", ("t", "expected_x", "expected_lambda"), zip(t, ex, el))

    try:
        mc = simulate_sde(s, p, t_end, dt, n_paths, seed, n_record)
    except ValueError as exc:
        raise ConfigError(f"[lqg] Monte Carlo settings: {exc}") from None
    ex_m, el_m = expected_trajectory(s, p, mc.times)
    rows = []
    inside = 0
    for j in range(len(mc.times)):
        tol = max(mc.ci_half_width[j], 1e-8 * max(1.0, abs(ex_m[j])))
        ok = abs(mc.mean_x[j] - ex_m[j]) <= tol
        inside += ok
        rows.append((
            mc.times[j], mc.mean_x[j], mc.ci_half_width[j], ex_m[j],
            mc.mean_lam[j], mc.ci_half_width_lam[j], el_m[j], ok,
        ))
    ctx.csv(
        "lqg_mc.csv",
        (
            "t", "mc_mean_x", "ci_half_width_x", "expected_x",
            "mc_mean_lambda", "ci_half_width_lambda", "expected_lambda", "within_ci",
        ),
        rows,
    )
    ctx.manifest.result(
        seed=seed, n_paths=n_paths, dt=dt, t_end=t_end, clipped=mc.clipped,
        times_within_ci=inside, n_record=n_record,
        sensitivities_agree=sens.agree,
    )
    return EXIT_OK


def _parse_values(text: str | None, fallback: Any) -> list[float]:
    if text is not None:
        try:
            return [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse sweep values {text!r}") from None
    if fallback is None:
        return []
    if not isinstance(fallback, list):
        raise ConfigError("run.sweep_values must be an array")
    return [float(v) for v in fallback]


def _set_model_param(m: ModelParams, name: str, value: float) -> ModelParams:
    if name in MODEL_SWEEP_SCALARS:
        return m.with_(**{name: value})
    role, _, key = name.partition(".")
    spec: FunctionSpec = getattr(m, f"{role}_spec")
    params = dict(spec.params)
    params[key] = value
    new = FunctionSpec(spec.family, tuple(params.items()), spec.domain_lo, spec.domain_hi)
    return m.with_(**{role: new})


def cmd_sweep(ctx: Context) -> int:
    cfg = ctx.cfg
    run = cfg.run
    name = ctx.args.param or run["sweep_parameter"]
    values = _parse_values(ctx.args.values, run["sweep_values"])
    kind = ctx.args.kind or run["kind"] or ("model" if cfg.model is not None else "lqg")
    if not name:
        raise ConfigError("sweep needs a parameter (--param or run.sweep_parameter)")
    if len(values) < 2:
        raise ConfigError("sweep needs at least two values")
    if kind not in ("model", "lqg"):
        raise ConfigError("sweep kind must be 'model' or 'lqg'")

    rows: list[tuple] = []
    failed = 0
    if kind == "model":
        m0 = _model(cfg)
        name = SWEEP_ALIASES.get(name, name)
        role, _, key = name.partition(".")
        if name not in MODEL_SWEEP_SCALARS:
            if role not in ("f", "g", "b", "c") or key not in getattr(m0, f"{role}_spec").p:
                raise ConfigError(f"{name!r} is not a sweepable model parameter")
        header = ("parameter", "value", "x_s", "lam_s", "dlam_s_deta_sign", "dlam_s_deta_value", "status")
        for v in values:
            try:
                m = _set_model_param(m0, name, v)
                ss = solve_steady(m)
                sg = sign_dlam_s_deta(m)
                rows.append((name, v, ss.x_s, ss.lam_s, sg.sign, sg.value, "ok"))
            except (ModelError, SteadyStateError, ValueError, ArithmeticError) as exc:
                failed += 1
                rows.append((name, v, math.nan, math.nan, None, math.nan, f"error:{type(exc).__name__}"))
    else:
        p0 = _lqg_params(cfg)
        if name not in LQG_SWEEP_SCALARS:
            raise ConfigError(f"{name!r} is not a sweepable LQG parameter")
        header = (
            "parameter", "value", "a_coef", "b_coef", "c_coef", "decay",
            "steady_mean", "value_x0", "policy_x0", "status",
        )
        for v in values:
            try:
                p = p0.with_(**{name: v})
                s = solve_lqg(p)
                rows.append((
                    name, v, s.a_coef, s.b_coef, s.c_coef, s.decay, s.steady_mean,
                    float(s.value(p.x0)), float(feedback_policy(s, p, p.x0)), "ok",
                ))
            except (LqgError, ValueError, ArithmeticError) as exc:
                failed += 1
                rows.append((name, v) + (math.nan,) * 7 + (f"error:{type(exc).__name__}",))
    ctx.csv("sweep.csv", header, rows)
    ctx.manifest.result(kind=kind, parameter=name, n_values=len(values), n_failed=failed)
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "trajectory": cmd_trajectory,
    "statics": cmd_statics,
    "lqg": cmd_lqg,
    "sweep": cmd_sweep,
}


# --- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="TOML run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    common.add_argument("--threads", type=int, metavar="N", help="numba worker threads")
    common.add_argument("--seed", type=int, metavar="N", help="Monte Carlo seed (overrides [lqg] seed)")

    ap = argparse.ArgumentParser(prog="userbase", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check model assumptions")
    sub.add_parser("solve", parents=[common], help="solve the HJB equation")
    sub.add_parser("trajectory", parents=[common], help="integrate the optimal path")
    st = sub.add_parser("statics", parents=[common], help="eta comparative statics")
    st.add_argument("--eta-lo", type=float)
    st.add_argument("--eta-hi", type=float)
    sub.add_parser("lqg", parents=[common], help="closed form and Monte Carlo of the LQ model")
    sw = sub.add_parser("sweep", parents=[common], help="steady state over a parameter grid")
    sw.add_argument("--param", help="scalar name, e.g. eta, rho, sigma, a, c, b.a")
    sw.add_argument("--values", help="comma-separated values")
    sw.add_argument("--kind", choices=("model", "lqg"))
    return ap


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    import numba

    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise ConfigError(f"--threads must be in [1, {numba.config.NUMBA_NUM_THREADS}]")
    numba.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # numba reports an old TBB at import time and falls back to another layer
    warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING, format="userbase: %(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    manifest = None
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.output["dir"] = args.out
        _set_threads(args.threads)
        out = Path(cfg.output["dir"])
        out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(out, cfg.output["prefix"], args.command, cfg, argv)
        code = COMMANDS[args.command](Context(cfg, args, manifest, out))
        manifest.finalize(code)
        return code
    except ConfigError as exc:
        print(f"userbase: config error: {exc}", file=sys.stderr)
        code, msg = EXIT_USAGE, str(exc)
    except SolverError as exc:
        print(f"userbase: solver failed: {exc} (residual {exc.residual:.3g})", file=sys.stderr)
        code, msg = EXIT_FAIL, str(exc)
    except (ModelError, LqgError, SteadyStateError, IntegrationError) as exc:
        print(f"userbase: {type(exc).__name__}: {exc}", file=sys.stderr)
        code, msg = EXIT_FAIL, str(exc)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"userbase: numerical failure: {exc}", file=sys.stderr)
        code, msg = EXIT_FAIL, str(exc)
    except OSError as exc:
        print(f"userbase: I/O error: {exc}", file=sys.stderr)
        code, msg = EXIT_USAGE, str(exc)
    if manifest is not None:
        manifest.finalize(code, msg)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
