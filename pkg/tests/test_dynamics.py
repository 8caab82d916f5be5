import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import sweep_instances
from userbase import dynamics as dyn
from userbase.model import lq_benchmark, power

INSTS = sweep_instances()


@pytest.mark.parametrize("i", range(0, len(INSTS), 3))
@given(x=st.floats(0.1, 15.0))
@settings(max_examples=25, deadline=None)
def test_h_derivatives(i, x):
    m = INSTS[i]
    h = 1e-5
    fd1 = (dyn.h_eta(m, x + h) - dyn.h_eta(m, x - h)) / (2 * h)
    assert abs(fd1 - dyn.dh_dx(m, x)) <= 1e-7 * (1 + abs(fd1))
    fd2 = (dyn.dh_dx(m, x + h) - dyn.dh_dx(m, x - h)) / (2 * h)
    assert abs(fd2 - dyn.d2h_dx2(m, x)) <= 1e-6 * (1 + abs(fd2))
    e = m.eta
    fde = (dyn.h_eta(m, x, e + h) - dyn.h_eta(m, x, e - h)) / (2 * h)
    assert abs(fde - dyn.dh_deta(m, x)) <= 1e-7 * (1 + abs(fde))
    fdxe = (dyn.dh_dx(m, x, e + h) - dyn.dh_dx(m, x, e - h)) / (2 * h)
    assert abs(fdxe - dyn.d2h_dxdeta(m, x)) <= 1e-6 * (1 + abs(fdxe))


def test_lq_drift_closed_form():
    m = lq_benchmark()
    xs = np.linspace(0.0, 5.0, 11)
    assert np.allclose(dyn.h_eta(m, xs), 1.0 - xs)
    assert np.allclose(dyn.drift(m, xs, 0.5), 1.5 - xs)
    assert np.allclose(dyn.h_eta(m, xs, eta=1.5), 1.0 - xs / 2.0)


def test_drift_rejects_bad_inputs():
    m = lq_benchmark()
    with pytest.raises(ValueError):
        dyn.drift(m, 1.0, -0.1)
    with pytest.raises(ValueError):
        dyn.drift(m, 1.0, m.lambda_sup + 1)
    with pytest.raises(ValueError, match="non-negative"):
        dyn.h_eta(m, -1.0)


@given(eta=st.floats(0.05, 2.0), x=st.floats(0.0, 10.0))
def test_longer_interactions_raise_drift(eta, x):
    m = lq_benchmark(eta_sup=3.0)
    assert dyn.h_eta(m, x, eta + 0.1) >= dyn.h_eta(m, x, eta)


def test_lq_bounds():
    b = dyn.bounds(lq_benchmark())
    assert b.x_sup == 11.0
    assert math.isclose(b.q_sup, 9.0, rel_tol=1e-9)
    assert math.isclose(b.x2, 20.0, rel_tol=1e-9)
    assert math.isclose(b.x_u, 20.02, rel_tol=1e-9)
    assert b.x_m == b.x_u
    with pytest.raises(ValueError):
        dyn.bounds(lq_benchmark(), k_tilde=0.0)


def test_population_cannot_exceed_x_sup():
    for m in INSTS:
        b = dyn.bounds(m)
        # above x_sup even full marketing pushes the population down
        assert dyn.h_eta(m, b.x_sup * 1.0001) + m.lambda_sup < 0


def test_q_sup_matches_closed_form_for_power_cost():
    m = lq_benchmark(c=power(1.0, 3.0), lambda_sup=2.0)
    # q = (c')^-1, y q'(y) - c'(q'(y)) on [0, c'(2)] evaluated on a dense grid
    ys = np.linspace(0.0, 12.0, 200001)[1:]
    q1 = 1.0 / (6.0 * np.sqrt(ys / 3.0))
    vals = ys * q1 - 3.0 * q1**2
    assert math.isclose(dyn.q_sup(m), float(np.max(vals)), rel_tol=1e-6)


def test_entry_fraction():
    e = dyn.EntryModel(c_enter=0.2)
    assert dyn.entry_fraction(e, 0.1) == 0.0
    assert math.isclose(float(dyn.entry_fraction(e, 0.4)), 0.5)
    assert dyn.entry_fraction(e, 1e9) > 0.999
    with pytest.raises(ValueError):
        dyn.entry_fraction(e, 0.0)
    with pytest.raises(ValueError):
        dyn.EntryModel(c_enter=0.2, alpha_min=1.0, alpha_max=0.5)


def test_drift_with_entry():
    m = lq_benchmark()
    e = dyn.EntryModel(c_enter=0.1)
    x, lam = 1.0, 0.5
    expected = (1.0 + lam) * 0.9 - x
    assert math.isclose(float(dyn.drift_with_entry(m, e, x, lam)), expected)
    with pytest.raises(ValueError, match="c_enter"):
        dyn.drift_with_entry(m, e, 0.105, lam)
    # no entry cost reduces to the plain drift
    e0 = dyn.EntryModel(c_enter=0.0)
    assert math.isclose(float(dyn.drift_with_entry(m, e0, 2.0, lam)), float(dyn.drift(m, 2.0, lam)))
