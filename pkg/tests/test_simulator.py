"""Simulator: fault scheduling, noise generation, trace round-trips."""

import numpy as np
import pytest

from packmhe.cell import default_cell
from packmhe.pack import PackKind, PackState, PackTopology
from packmhe.simulate import (FaultEvent, LoadProfile, NoiseConfig,
                              make_noise, read_trace_csv, simulate,
                              write_trace_csv)

P = default_cell()


def ps_topology():
    return PackTopology.uniform(PackKind.PARALLEL_SERIES, 2, 3, P)


def sp_topology():
    return PackTopology.uniform(PackKind.SERIES_PARALLEL, 3, 2, P)


def uniform_init(top, soc=0.9):
    return PackState(np.full((top.n, top.m), soc),
                     np.full((top.n, top.m), 298.0))


def run(top, schedule=(), noise=None, duration=900.0, seed=0, **kw):
    return simulate(top, uniform_init(top), LoadProfile.constant(6.0),
                    list(schedule), noise or NoiseConfig.zero(), 30.0,
                    duration, seed=seed, **kw)


# --- make_noise ---

def test_make_noise_zero_bounds():
    assert np.all(make_noise(0.0, 0.0, (100,)) == 0.0)


def test_make_noise_bounded_and_centered():
    s = make_noise(-3.0, 3.0, (20000,), seed=5)
    assert np.all(np.abs(s) <= 3.0)
    assert abs(np.mean(s)) < 0.05


def test_make_noise_gaussian_truncated():
    s = make_noise(-1.0, 1.0, (20000,), distribution="gaussian", seed=5)
    assert np.all(np.abs(s) <= 1.0)
    assert np.std(s) == pytest.approx(1.0 / 3.0, rel=0.05)


def test_make_noise_deterministic():
    a = make_noise(-1.0, 1.0, (50, 3), seed=9)
    b = make_noise(-1.0, 1.0, (50, 3), seed=9)
    np.testing.assert_array_equal(a, b)


def test_make_noise_inverted_bounds():
    with pytest.raises(ValueError):
        make_noise(1.0, -1.0, (10,))


# --- simulate basics ---

def test_symmetric_discharge_hand_euler():
    trace = run(ps_topology(), duration=300.0)
    # each parallel cell carries 2 A; ten 30 s steps
    assert trace.soc[10, 0, 0] == pytest.approx(
        0.9 - 10 * (30.0 * 2.0) / (3600.0 * 2.5), rel=1e-12)
    np.testing.assert_allclose(trace.i_cell, 2.0, rtol=1e-12)


def test_trace_length_boundary():
    trace = run(ps_topology(), duration=30.0)
    assert len(trace) == 2


def test_esc_window_timing():
    ev = FaultEvent("esc", 250.0, 600.0, index=0, magnitude=2.0)
    trace = run(ps_topology(), [ev])
    module_totals = trace.i_cell.sum(axis=2)
    inside = (trace.time >= 250.0) & (trace.time < 600.0)
    np.testing.assert_allclose(module_totals[inside, 0], 8.0, rtol=1e-12)
    np.testing.assert_allclose(module_totals[~inside, 0], 6.0, rtol=1e-12)
    np.testing.assert_allclose(module_totals[:, 1], 6.0, rtol=1e-12)
    # fault-window exactness on the recorded fault signal
    np.testing.assert_allclose(trace.f_esc[inside, 0], 2.0)
    np.testing.assert_allclose(trace.f_esc[~inside, 0], 0.0)


def test_determinism_bit_identical():
    noise = NoiseConfig()
    a = run(ps_topology(), noise=noise, seed=7)
    b = run(ps_topology(), noise=noise, seed=7)
    np.testing.assert_array_equal(a.soc, b.soc)
    np.testing.assert_array_equal(a.v_meas, b.v_meas)
    c = run(ps_topology(), noise=noise, seed=8)
    assert not np.array_equal(a.v_meas, c.v_meas)


def test_noise_bounds_respected():
    noise = NoiseConfig()
    trace = run(sp_topology(), noise=noise, seed=3)
    assert np.all(np.abs(trace.w_soc) <= noise.w_soc)
    assert np.all(np.abs(trace.w_temp) <= noise.w_temp)
    nv = trace.topology.n_voltage_sensors
    nt = trace.topology.n_temp_sensors
    assert np.all(np.abs(trace.z[:, :nv]) <= noise.z_voltage)
    assert np.all(np.abs(trace.z[:, nv:nv + nt]) <= noise.z_temp)
    assert np.all(np.abs(trace.z[:, -1]) <= noise.z_current)


def test_charge_conservation():
    """Fault-free constant discharge removes exactly i_L*T/3600 Ah/module."""
    trace = run(ps_topology(), duration=900.0)
    for i in range(2):
        ah0 = sum(P.capacity * trace.soc[0, i, j] for j in range(3))
        ah1 = sum(P.capacity * trace.soc[-1, i, j] for j in range(3))
        assert ah0 - ah1 == pytest.approx(6.0 * 900.0 / 3600.0, rel=1e-12)


def test_isc_resistance_mode_consistency():
    """Resistance-mode ISC current equals local voltage / ohms every step."""
    ev = FaultEvent("isc", 120.0, None, index=(0, 0), mode="resistance",
                    resistance=10.0)
    trace = run(sp_topology(), [ev])
    for k in range(len(trace)):
        if trace.time[k] < 120.0:
            assert trace.f_isc[k, 0, 0] == 0.0
            continue
        p = trace.topology.cells[0][0]
        v_local = (p.ocv_intercept + p.ocv_slope * trace.soc[k, 0, 0]
                   - p.r_internal * (trace.i_cell[k, 0, 0]
                                     + trace.f_isc[k, 0, 0]))
        assert trace.f_isc[k, 0, 0] == pytest.approx(v_local / 10.0,
                                                     rel=1e-12)


def test_esc_resistance_mode_consistency():
    ev = FaultEvent("esc", 0.0, None, index=0, mode="resistance",
                    resistance=2.0)
    trace = run(ps_topology(), [ev])
    # module voltage = esc current * ohms at every step
    np.testing.assert_allclose(trace.f_esc[:, 0] * 2.0, trace.v_meas[:, 0],
                               rtol=1e-12)


def test_voltage_sensor_fault_additive():
    ev = FaultEvent("voltage_sensor", 100.0, 200.0, index=1, magnitude=1.0)
    clean = run(ps_topology())
    faulty = run(ps_topology(), [ev])
    inside = (clean.time >= 100.0) & (clean.time < 200.0)
    np.testing.assert_allclose(
        faulty.v_meas[inside, 1] - clean.v_meas[inside, 1], 1.0, rtol=1e-12)
    np.testing.assert_array_equal(faulty.v_meas[~inside], clean.v_meas[~inside])


def test_current_sensor_fault():
    ev = FaultEvent("current_sensor", 0.0, None, magnitude=2.0)
    trace = run(sp_topology(), [ev])
    np.testing.assert_allclose(trace.i_meas, 8.0, rtol=1e-12)


def test_nsmp_string_split_under_isc():
    """An ISC depletes its string faster; the split adapts each step."""
    ev = FaultEvent("isc", 0.0, None, index=(0, 0), magnitude=1.0)
    trace = run(sp_topology(), [ev], duration=600.0)
    string_currents = trace.i_cell[:, 0, :]
    np.testing.assert_allclose(string_currents.sum(axis=1), 6.0, rtol=1e-12)
    # string 0 weakens over time, so it carries less external current
    assert string_currents[-1, 0] < string_currents[-1, 1]
    assert trace.soc[-1, 0, 0] < trace.soc[-1, 0, 1]


def test_substeps_reduce_euler_error():
    fine = run(ps_topology(), duration=900.0, substeps=64)
    mid = run(ps_topology(), duration=900.0, substeps=2)
    coarse = run(ps_topology(), duration=900.0, substeps=1)
    err_c = abs(coarse.temp[-1, 0, 0] - fine.temp[-1, 0, 0])
    err_m = abs(mid.temp[-1, 0, 0] - fine.temp[-1, 0, 0])
    assert err_m < err_c


def test_deep_discharge_warning():
    with pytest.warns(RuntimeWarning):
        simulate(ps_topology(), uniform_init(ps_topology(), soc=0.01),
                 LoadProfile.constant(6.0), [], NoiseConfig.zero(),
                 30.0, 3600.0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        FaultEvent("esc", 100.0, 50.0, index=0, magnitude=1.0)
    with pytest.raises(ValueError):
        FaultEvent("isc", 0.0, None, index=(0, 0), mode="resistance",
                   resistance=-1.0)
    with pytest.raises(ValueError):
        FaultEvent("voltage_sensor", 0.0, None, index=0, mode="resistance",
                   resistance=5.0)
    bad = FaultEvent("isc", 0.0, None, index=(9, 9), magnitude=1.0)
    with pytest.raises(ValueError):
        run(ps_topology(), [bad], duration=60.0)


def test_load_profile_validation():
    with pytest.raises(ValueError):
        LoadProfile((0.0, 0.0), (1.0, 2.0))
    prof = LoadProfile((0.0, 100.0), (6.0, 3.0))
    assert prof.current(50.0) == 6.0
    assert prof.current(100.0) == 3.0


def test_trace_csv_roundtrip(tmp_path):
    trace = run(ps_topology(), [FaultEvent("esc", 250.0, 600.0, index=0,
                                           magnitude=2.0)],
                noise=NoiseConfig(), seed=4, duration=300.0)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    back = read_trace_csv(path, trace.topology)
    np.testing.assert_array_equal(back.soc, trace.soc)
    np.testing.assert_array_equal(back.v_meas, trace.v_meas)
    np.testing.assert_array_equal(back.f_esc, trace.f_esc)
    assert back.dt == trace.dt


def test_trace_csv_topology_mismatch(tmp_path):
    trace = run(ps_topology(), duration=300.0)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    with pytest.raises(ValueError):
        read_trace_csv(path, sp_topology())
