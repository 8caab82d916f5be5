import csv
import json
import math

import pytest

from userbase.cli import main
from userbase.config import ConfigError, parse_config

MODEL = """
[model]
eta_tilde = 0.5
eta = 0.5
eta_sup = 1.0
rho = {rho}
lambda_sup = 10.0
x_initial = {x_initial}
[model.f]
family = "constant"
value = 1.0
[model.g]
family = "constant"
value = 1.0
[model.b]
family = "power_benefit"
a = {a}
[model.c]
family = "quadratic"
c = 1.0
[grid]
n = {n}
"""

LQG = """
[lqg]
theta = 1.0
gamma_cap = 5.0
c = {c}
lambda_d = 1.0
rho = 1.0
sigma = {sigma}
n_paths = 10000
t_end = 0.02
n_record = 4
"""


def _write(tmp_path, text, name="cfg.toml", **kw):
    p = tmp_path / name
    p.write_text(text.format(**kw))
    return str(p)


def _model(tmp_path, rho=0.1, x_initial=0.4, a=1.0, n=256, extra=""):
    return _write(tmp_path, MODEL + extra, rho=rho, x_initial=x_initial, a=a, n=n)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_validate_ok(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["validate", "--config", _model(tmp_path), "--out", str(out)]) == 0
    assert "h_concave" in capsys.readouterr().out
    rows = _rows(out / "validation.csv")
    assert all(r["passed"] == "true" for r in rows)
    man = _manifest(out)
    assert man["status"] == "ok" and man["exit_code"] == 0
    assert man["config"]["model"]["b"] == {"family": "power_benefit", "a": 1.0}
    assert man["version"] and man["duration_s"] >= 0


def test_validate_bad_x_initial(tmp_path):
    out = tmp_path / "o"
    assert main(["validate", "--config", _model(tmp_path, x_initial=0.6), "--out", str(out)]) == 1
    rows = _rows(out / "validation.csv")
    bad = [r for r in rows if r["kind"] == "violation"]
    assert bad and bad[0]["check"] == "x_initial < f_inf*eta_tilde"
    assert _manifest(out)["status"] == "failed"


@pytest.mark.parametrize(
    "text",
    ["[model\n", "[model]\nfoo = 1\n", "[nonsense]\n", "[model]\neta = 'x'\n", "[grid]\nn=10\n[model]\n"],
)
def test_config_errors_exit_2(tmp_path, text):
    assert main(["validate", "--config", _write(tmp_path, text)]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main(["solve"]) == 2
    assert main(["frobnicate", "--config", "x"]) == 2
    assert main(["validate", "--config", str(tmp_path / "missing.toml")]) == 2
    cfg = _model(tmp_path)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_solve_writes_value_and_policy(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", _model(tmp_path, n=64), "--out", str(out)]) == 0
    val = _rows(out / "value.csv")
    pol = _rows(out / "policy.csv")
    assert list(val[0]) == ["x", "pi", "dpi_dx"] and list(pol[0]) == ["x", "zeta"]
    assert len(val) == len(pol) == 64
    xs = [float(r["x"]) for r in pol]
    i = min(range(len(xs)), key=lambda j: abs(xs[j] - 1.4545))
    assert math.isclose(float(pol[i]["zeta"]), 1 / 2.2, rel_tol=1e-6)
    # 17 significant digits and unix newlines
    raw = (out / "policy.csv").read_bytes()
    assert b"\r" not in raw and len(raw.splitlines()[1].split(b",")[0]) >= 17


def test_solve_failure_exit_1(tmp_path, capsys):
    extra = "x_hi = 3.0\n"
    cfg = _model(tmp_path, extra=extra)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "solver failed" in capsys.readouterr().err


def test_trajectory(tmp_path):
    out = tmp_path / "o"
    assert main(["trajectory", "--config", _model(tmp_path), "--out", str(out)]) == 0
    rows = _rows(out / "trajectory.csv")
    assert list(rows[0]) == ["t", "x", "lambda"]
    x = [float(r["x"]) for r in rows]
    lam = [float(r["lambda"]) for r in rows]
    assert all(b >= a - 1e-8 for a, b in zip(x, x[1:]))
    assert all(b <= a + 1e-8 for a, b in zip(lam, lam[1:]))
    res = _manifest(out)["results"]
    assert res["converged_at"] is not None and math.isclose(res["x_limit"], 1 + 1 / 2.2, rel_tol=1e-6)


def test_trajectory_short_horizon_warns(tmp_path, caplog):
    extra = "[run]\nt_end = 0.5\n"
    out = tmp_path / "o"
    assert main(["trajectory", "--config", _model(tmp_path, extra=extra), "--out", str(out)]) == 0
    assert _manifest(out)["results"]["converged_at"] is None
    assert "not settled" in caplog.text


def test_statics(tmp_path):
    out = tmp_path / "o"
    cfg = _model(tmp_path, a=0.2, rho=0.5)
    assert main(["statics", "--config", cfg, "--out", str(out), "--eta-lo", "0.4", "--eta-hi", "0.6"]) == 0
    th = _rows(out / "thresholds.csv")
    assert len(th) == 1 and th[0]["benefit_type"] == "heterogeneous"
    rows = _rows(out / "statics.csv")
    assert list(rows[0]) == [
        "x", "zeta_eta_hi", "zeta_eta_lo", "delta_zeta", "theorem4_prediction", "agreement"
    ]
    assert all(r["theorem4_prediction"] in ("increase", "decrease", "uncovered") for r in rows)
    assert _manifest(out)["results"]["dlam_s_deta_sign"] == -1


def test_statics_equal_etas_exit_2(tmp_path):
    cfg = _model(tmp_path)
    args = ["statics", "--config", cfg, "--out", str(tmp_path / "o")]
    assert main(args + ["--eta-lo", "0.5", "--eta-hi", "0.5"]) == 2
    assert main(args) == 2  # no etas given anywhere


def test_sweep_model(tmp_path):
    out = tmp_path / "o"
    cfg = _model(tmp_path, a=0.2, rho=0.5)
    assert main(["sweep", "--config", cfg, "--out", str(out), "--param", "eta", "--values", "0.6,0.5,0.4,0.3"]) == 0
    rows = _rows(out / "sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.6, 0.5, 0.4, 0.3]
    lam = [float(r["lam_s"]) for r in rows]
    assert all(b > a for a, b in zip(lam, lam[1:]))  # shorter interactions, more ads


def test_sweep_alias_and_errors(tmp_path):
    cfg = _model(tmp_path)
    out = tmp_path / "o"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--param", "a", "--values", "0.5,1.5"]) == 1
    rows = _rows(out / "sweep.csv")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("error:")
    assert rows[1]["x_s"] == "nan"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--param", "eta", "--values", "0.5"]) == 2
    assert main(["sweep", "--config", cfg, "--out", str(out), "--param", "zzz", "--values", "1,2"]) == 2


def test_sweep_lqg_sigma(tmp_path):
    cfg = _write(tmp_path, LQG, c=1.0, sigma=0.0)
    out = tmp_path / "o"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--param", "sigma", "--values", "0,0.25,0.5,0.75,1"]) == 0
    means = [float(r["steady_mean"]) for r in _rows(out / "sweep.csv")]
    assert all(b <= a for a, b in zip(means, means[1:]))


def test_lqg_outputs(tmp_path):
    out = tmp_path / "o"
    cfg = _write(tmp_path, LQG, c=1.0, sigma=0.0)
    assert main(["lqg", "--config", cfg, "--out", str(out), "--seed", "4"]) == 0
    sol = _rows(out / "lqg_solution.csv")[0]
    assert math.isclose(float(sol["a_coef"]), -0.3027756377, rel_tol=1e-9)
    mc = _rows(out / "lqg_mc.csv")
    assert len(mc) == 4 and all(r["within_ci"] == "true" for r in mc)
    for r in mc:
        assert abs(float(r["mc_mean_x"]) - float(r["expected_x"])) < 1e-8
    assert _manifest(out)["results"]["seed"] == 4
    assert len(_rows(out / "lqg_expected.csv")) == 101


def test_lqg_invalid_parameters_exit_1(tmp_path):
    cfg = _write(tmp_path, LQG, c=-1.0, sigma=0.0)
    assert main(["lqg", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_lqg_bad_mc_settings_exit_2(tmp_path):
    cfg = _write(tmp_path, LQG + "dt = 0.5\n", c=1.0, sigma=0.1)
    assert main(["lqg", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_prefix_and_manifest_first(tmp_path):
    cfg = _model(tmp_path, extra='[output]\nprefix = "run1_"\n')
    out = tmp_path / "nested" / "dir"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["run1_manifest.json", "run1_policy.csv", "run1_value.csv"]


def test_parse_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"run": {"speed": 1}})
    with pytest.raises(ConfigError, match="missing"):
        parse_config({"lqg": {"theta": 1.0}})
    cfg = parse_config({})
    assert cfg.output == {"dir": "out", "prefix": ""}
