"""Module lumping rules and lumped/full-pack equivalence."""

import itertools

import numpy as np
import pytest

from packmhe.cell import CellParams, CellState, default_cell, ocv, soc_step, \
    temp_step
from packmhe.lumping import LumpKind, lump_parallel, lump_series, \
    lump_thermal_step, lump_topology
from packmhe.pack import PackKind, PackState, PackTopology
from packmhe.simulate import LoadProfile, NoiseConfig, simulate

P = default_cell()


def make_cell(r, alpha=3.2, beta=0.8, q=2.5):
    return CellParams(q, r, alpha, beta, 40.23, 41.05, 298.0)


def test_lump_parallel_identical():
    lump = lump_parallel([P, P, P])
    assert lump.params.capacity == pytest.approx(7.5)
    assert lump.params.r_internal == pytest.approx(31.3e-3 / 3.0, rel=1e-12)
    assert lump.params.ocv_intercept == pytest.approx(3.2)
    assert lump.params.ocv_slope == pytest.approx(0.8)
    assert lump.params.heat_capacity == pytest.approx(3 * 40.23)
    assert lump.params.r_convection == pytest.approx(41.05 / 3.0)


def test_lump_parallel_weighted_ocv():
    a = make_cell(0.030, alpha=3.2)
    b = make_cell(0.060, alpha=3.3)
    lump = lump_parallel([a, b])
    assert lump.params.r_internal == pytest.approx(0.020, rel=1e-12)
    assert lump.params.ocv_intercept == pytest.approx(
        0.020 * (3.2 / 0.030 + 3.3 / 0.060), rel=1e-12)


def test_lump_parallel_single_identity():
    lump = lump_parallel([P])
    assert lump.params == P
    assert lump.kind is LumpKind.PARALLEL


def test_lump_series_sums():
    lump = lump_series([P, P, P])
    assert lump.params.capacity == pytest.approx(2.5)
    assert lump.params.r_internal == pytest.approx(93.9e-3, rel=1e-12)
    assert lump.params.ocv_intercept == pytest.approx(9.6)
    assert lump.params.ocv_slope == pytest.approx(2.4)


def test_lump_series_min_capacity():
    cells = [make_cell(0.03, q=2.5), make_cell(0.03, q=2.4),
             make_cell(0.03, q=2.5)]
    assert lump_series(cells).params.capacity == pytest.approx(2.4)


def test_lump_series_single_identity():
    assert lump_series([P]).params == P


def test_lump_empty_rejected():
    with pytest.raises(ValueError):
        lump_parallel([])
    with pytest.raises(ValueError):
        lump_series([])


def test_lump_permutation_invariance():
    cells = [make_cell(0.03), make_cell(0.05, alpha=3.25), make_cell(0.04)]
    for perm in itertools.permutations(cells):
        assert lump_parallel(list(perm)).params.capacity == \
            pytest.approx(lump_parallel(cells).params.capacity, rel=1e-14)
        assert lump_series(list(perm)).params.r_internal == \
            pytest.approx(lump_series(cells).params.r_internal, rel=1e-14)


def test_lump_thermal_heat_term():
    """Lumped 3P module at 6 A: heat = R_lump * i^2 = 0.3756 W."""
    lump = lump_parallel([P, P, P])
    p = lump.params
    t0 = p.t_env
    t1 = lump_thermal_step(lump, t0, 6.0, 0.0, 0.0, 30.0)
    heat = (t1 - t0) * p.heat_capacity / 30.0
    assert heat == pytest.approx(0.0104333 * 36.0, rel=1e-4)


def test_lump_thermal_equilibrium():
    lump = lump_parallel([P, P])
    assert lump_thermal_step(lump, P.t_env, 0.0, 0.0, 0.0, 30.0) == P.t_env


def test_lump_thermal_esc_sum_then_square():
    lump = lump_parallel([P, P, P])
    p = lump.params
    t1 = lump_thermal_step(lump, p.t_env, 6.0, 0.0, 2.0, 30.0)
    heat = (t1 - p.t_env) * p.heat_capacity / 30.0
    assert heat == pytest.approx(p.r_internal * 64.0, rel=1e-12)


def test_lump_thermal_series_ignores_esc():
    lump = lump_series([P, P])
    assert lump_thermal_step(lump, 300.0, 5.0, 0.1, 2.0, 30.0) == \
        lump_thermal_step(lump, 300.0, 5.0, 0.1, 0.0, 30.0)


def test_lump_topology_shapes():
    ps = PackTopology.uniform(PackKind.PARALLEL_SERIES, 2, 3, P)
    sp = PackTopology.uniform(PackKind.SERIES_PARALLEL, 3, 2, P)
    lps = lump_topology(ps)
    lsp = lump_topology(sp)
    assert len(lps) == 2 and all(l.kind is LumpKind.PARALLEL for l in lps)
    assert len(lsp) == 2 and all(l.kind is LumpKind.SERIES for l in lsp)
    assert lps[0].member_index == ((0, 0), (0, 1), (0, 2))
    assert lsp[1].member_index == ((0, 1), (1, 1), (2, 1))


def test_fault_free_equivalence_parallel_lump():
    """Identical cells at equal SoC: lumped trajectory == module trajectory.

    One-hour 6 A discharge of a 3P2S pack versus the lumped single-cell
    model stepped with the same load.  For identical cells this is an exact
    arithmetic identity, not an approximation.
    """
    top = PackTopology.uniform(PackKind.PARALLEL_SERIES, 2, 3, P)
    init = PackState(np.full((2, 3), 0.9), np.full((2, 3), 298.0))
    trace = simulate(top, init, LoadProfile.constant(6.0), [],
                     NoiseConfig.zero(), 30.0, 3600.0)

    lump = lump_topology(top)[0]
    q, t = 0.9, 298.0
    for k in range(len(trace)):
        assert abs(q - trace.soc[k, 0, 0]) < 1e-9 * max(abs(q), 1.0)
        assert abs(t - trace.temp[k, 0, 0]) < 1e-9 * max(abs(t), 1.0)
        # module terminal voltage matches the lumped prediction
        v_lump = ocv(lump.params, q) - lump.params.r_internal * 6.0
        assert abs(v_lump - trace.v_meas[k, 0]) < 1e-9
        cs = CellState(q, t)
        q = soc_step(lump.params, cs, 6.0, 0.0, 30.0)
        t = lump_thermal_step(lump, t, 6.0, 0.0, 0.0, 30.0)


def test_lumped_equilibrium_temperature_matches_pack():
    """R_conv scaling reproduces the uniform pack's steady temperature."""
    lump = lump_parallel([P, P, P])
    i = 6.0
    t_lump = lump.params.t_env + lump.params.r_convection * \
        lump.params.r_internal * i * i
    # per-cell equilibrium at i/3 each
    t_cell = P.t_env + P.r_convection * P.r_internal * (i / 3.0) ** 2
    assert t_lump == pytest.approx(t_cell, rel=1e-12)
