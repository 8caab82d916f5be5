"""TOML run configuration: parsing, key checking and default resolution.

Layout::

    [model]            scalars of ModelParams
    [model.f]          family = "...", plus that family's parameters
    [model.g] [model.b] [model.c]
    [grid]             x_lo, x_hi, n, scheme, tol, max_iter
    [run]              command options (t_end, eta_lo, sweep_parameter, ...)
    [lqg]              LqgParams fields plus seed, n_paths, dt, t_end, n_record
    [output]           dir, prefix
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .model import FunctionSpec, ModelError, ModelParams, build_model, spec_from_config


class ConfigError(ValueError):
    pass


MODEL_SCALARS = (
    "eta_tilde", "eta", "rho", "lambda_sup", "x_initial",
    "f_sup", "f_inf", "g_sup", "eta_sup", "c_enter",
)
MODEL_SPECS = ("f", "g", "b", "c")
GRID_KEYS = ("x_lo", "x_hi", "n", "scheme", "tol", "max_iter")
RUN_KEYS = (
    "t_end", "rtol", "n_out", "eta_lo", "eta_hi", "eta_grid", "n_x",
    "sweep_parameter", "sweep_values", "kind",
)
LQG_KEYS = (
    "theta", "gamma_cap", "c", "lambda_d", "rho", "sigma", "x0", "eta",
    "seed", "n_paths", "dt", "t_end", "n_record", "n_out",
)
OUTPUT_KEYS = ("dir", "prefix")
SECTIONS = ("model", "grid", "run", "lqg", "output")

RUN_DEFAULTS: dict[str, Any] = {
    "t_end": None,  # trajectory: 50/rho
    "rtol": 1e-9,
    "n_out": 201,
    "eta_lo": None,
    "eta_hi": None,
    "eta_grid": None,
    "n_x": 9,
    "sweep_parameter": None,
    "sweep_values": None,
    "kind": None,
}
LQG_DEFAULTS: dict[str, Any] = {
    "sigma": 0.0,
    "x0": 1.0,
    "eta": None,
    "seed": 0,
    "n_paths": 100_000,
    "dt": None,  # 1e-4 / decay
    "t_end": None,  # 1 / decay
    "n_record": 10,
    "n_out": 101,
}


def _unknown(section: str, got: dict, allowed: tuple[str, ...]) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")


@dataclass
class RunConfig:
    model: dict[str, Any] | None
    grid: dict[str, Any]
    run: dict[str, Any]
    lqg: dict[str, Any] | None
    output: dict[str, Any]
    source: str | None = None
    _model_cache: ModelParams | None = field(default=None, repr=False)

    def model_params(self) -> ModelParams:
        if self.model is None:
            raise ConfigError("config has no [model] section")
        if self._model_cache is None:
            self._model_cache = build_model(self.model)
        return self._model_cache

    def resolved(self) -> dict[str, Any]:
        """Plain-data view of the config with defaults filled in."""
        out: dict[str, Any] = {}
        if self.model is not None:
            md: dict[str, Any] = {}
            for k, v in self.model.items():
                md[k] = spec_to_dict(v) if isinstance(v, FunctionSpec) else v
            try:
                m = self.model_params()
                for k in ("f_sup", "f_inf", "g_sup", "eta_sup"):
                    md.setdefault(k, getattr(m, k))
            except (ModelError, ConfigError):
                pass
            out["model"] = md
        out["grid"] = dict(self.grid)
        out["run"] = dict(self.run)
        if self.lqg is not None:
            out["lqg"] = dict(self.lqg)
        out["output"] = dict(self.output)
        return out


def spec_to_dict(s: FunctionSpec) -> dict[str, Any]:
    d: dict[str, Any] = {"family": s.family}
    d.update(dict(s.params))
    if s.domain_lo != 0.0:
        d["domain_lo"] = s.domain_lo
    if math.isfinite(s.domain_hi):
        d["domain_hi"] = s.domain_hi
    return d


def parse_config(data: dict[str, Any], source: str | None = None) -> RunConfig:
    _unknown("top level", data, SECTIONS)
    for sec in SECTIONS:
        if sec in data and not isinstance(data[sec], dict):
            raise ConfigError(f"[{sec}] must be a table")

    model = None
    if "model" in data:
        raw = dict(data["model"])
        _unknown("model", raw, MODEL_SCALARS + MODEL_SPECS)
        model = {}
        for k, v in raw.items():
            if k in MODEL_SPECS:
                if not isinstance(v, dict):
                    raise ConfigError(f"[model.{k}] must be a table with a 'family' key")
                try:
                    model[k] = spec_from_config(v)
                except (ModelError, ValueError, TypeError) as exc:
                    raise ConfigError(f"[model.{k}]: {exc}") from None
            else:
                model[k] = _number(f"model.{k}", v)
        missing = [k for k in MODEL_SPECS + MODEL_SCALARS[:5] if k not in model]
        if missing:
            raise ConfigError(f"[model] is missing: {', '.join(missing)}")

    grid = dict(data.get("grid", {}))
    _unknown("grid", grid, GRID_KEYS)

    run = dict(data.get("run", {}))
    _unknown("run", run, RUN_KEYS)
    run = {**RUN_DEFAULTS, **run}

    lqg = None
    if "lqg" in data:
        lqg = dict(data["lqg"])
        _unknown("lqg", lqg, LQG_KEYS)
        missing = [k for k in ("theta", "gamma_cap", "c", "lambda_d", "rho") if k not in lqg]
        if missing:
            raise ConfigError(f"[lqg] is missing: {', '.join(missing)}")
        lqg = {**LQG_DEFAULTS, **lqg}

    output = dict(data.get("output", {}))
    _unknown("output", output, OUTPUT_KEYS)
    output.setdefault("dir", "out")
    output.setdefault("prefix", "")
    if not isinstance(output["prefix"], str) or "/" in output["prefix"]:
        raise ConfigError("[output] prefix must be a plain string")
    return RunConfig(model, grid, run, lqg, output, source)


def _number(name: str, v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    return float(v)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        with p.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc.strerror or exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return parse_config(data, str(p))
