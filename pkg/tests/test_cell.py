"""Cell electro-thermal model against hand-computed oracles."""

import math

import pytest
from hypothesis import given, strategies as st

from packmhe.cell import (CellParams, CellState, default_cell, ocv, soc_step,
                          temp_step, terminal_voltage)

P = default_cell()  # 2.5 Ah, 31.3 mOhm, 40.23 J/K, 41.05 K/W, 298 K

REL = 1e-12


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-30)


def test_ocv_intercept():
    assert ocv(P, 0.0) == pytest.approx(3.2, rel=REL)


def test_ocv_nominal_midpoint():
    # defaults are calibrated so half charge reads the 3.6 V nominal
    assert ocv(P, 0.5) == pytest.approx(3.6, rel=REL)


def test_ocv_affine_point():
    assert ocv(P, 0.9) == pytest.approx(3.92, rel=REL)


def test_terminal_voltage_under_load():
    assert terminal_voltage(P, 0.9, 2.0, 0.0) == pytest.approx(3.8574, rel=REL)


def test_terminal_voltage_open_circuit():
    assert terminal_voltage(P, 0.37, 0.0, 0.0) == ocv(P, 0.37)


def test_terminal_voltage_isc_acts_like_load():
    assert terminal_voltage(P, 0.9, 0.0, 2.0) == pytest.approx(3.8574, rel=REL)


def test_soc_step_hand_euler():
    s = CellState(soc=0.9, temp=298.0)
    assert soc_step(P, s, 2.0, 0.0, 30.0) == pytest.approx(0.9 - 60.0 / 9000.0,
                                                           rel=REL)


def test_soc_step_zero_current():
    s = CellState(soc=0.42, temp=300.0)
    assert soc_step(P, s, 0.0, 0.0, 30.0) == 0.42


def test_soc_step_doubled_current():
    s = CellState(soc=0.9, temp=298.0)
    assert soc_step(P, s, 2.0, 2.0, 30.0) == pytest.approx(
        0.9 - 120.0 / 9000.0, rel=REL)


def test_temp_step_hand_value():
    s = CellState(soc=0.9, temp=298.0)
    expected = 298.0 + (30.0 / 40.23) * (31.3e-3 * 4.0)
    assert temp_step(P, s, 2.0, 0.0, 30.0) == pytest.approx(expected, rel=REL)


def test_temp_step_equilibrium():
    s = CellState(soc=0.9, temp=P.t_env)
    assert temp_step(P, s, 0.0, 0.0, 30.0) == P.t_env


def test_temp_step_cooling_sign():
    s = CellState(soc=0.9, temp=P.t_env + 5.0)
    out = temp_step(P, s, 0.0, 0.0, 30.0)
    assert P.t_env < out < s.temp


def _integrate(dt, t_end, i=2.0):
    s = CellState(0.9, 299.0)
    t = 0.0
    while t < t_end - 1e-9:
        s = CellState(soc_step(P, s, i, 0.0, dt), temp_step(P, s, i, 0.0, dt))
        t += dt
    return s


def test_forward_euler_order():
    """Halving dt quarters the error against a dt/64 reference."""
    ref = _integrate(30.0 / 64.0, 300.0)
    err_full = abs(_integrate(30.0, 300.0).temp - ref.temp)
    err_half = abs(_integrate(15.0, 300.0).temp - ref.temp)
    assert err_full / err_half == pytest.approx(2.0, abs=0.3)
    # note: SoC is exact under Euler for constant current
    assert _integrate(30.0, 300.0).soc == pytest.approx(ref.soc, rel=1e-12)


def test_isc_equivalence():
    """Dynamics depend only on the current sum i_cell + i_isc."""
    s = CellState(0.8, 301.0)
    assert soc_step(P, s, 1.5, 0.7, 30.0) == soc_step(P, s, 2.2, 0.0, 30.0)
    assert temp_step(P, s, 1.5, 0.7, 30.0) == temp_step(P, s, 2.2, 0.0, 30.0)


def test_thermal_steady_state():
    """Constant current settles at t_env + r_conv * r_int * i^2."""
    i = 6.0
    s = CellState(0.9, 298.0)
    for _ in range(5000):
        s = CellState(s.soc, temp_step(P, s, i, 0.0, 30.0))
    expected = P.t_env + P.r_convection * P.r_internal * i * i
    assert rel_err(s.temp, expected) < 1e-3


@given(st.floats(0.0, 1.0), st.floats(-10.0, 10.0), st.floats(-10.0, 10.0),
       st.floats(0.01, 10.0))
def test_terminal_voltage_monotone_in_current(soc, i1, i2, gap):
    assert terminal_voltage(P, soc, i1 + gap, i2) < \
        terminal_voltage(P, soc, i1, i2)


def test_params_validation():
    with pytest.raises(ValueError):
        CellParams(-1.0, 0.03, 3.2, 0.8, 40.0, 41.0, 298.0)
    with pytest.raises(ValueError):
        CellParams(2.5, 0.03, 3.2, -0.1, 40.0, 41.0, 298.0)
    with pytest.raises(ValueError):
        soc_step(P, CellState(0.5, 298.0), 1.0, 0.0, 0.0)
