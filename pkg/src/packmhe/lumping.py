"""Module lumping: collapse each module into one equivalent cell.

Parallel modules aggregate capacity additively and resistance harmonically;
because the OCV map is affine, the resistance-weighted OCV combination is
exact and reduces to resistance-weighted (intercept, slope) coefficients.
Series modules take the minimum capacity and add resistances and OCVs
(valid under the equal-SoC uniformity assumption).  Heat capacities add;
convective resistances combine harmonically (each member keeps its own
path to ambient), which reproduces the uniform pack's equilibrium
temperature.

Lumping a mPnS pack yields its 1PnS equivalent (n lumped cells in series);
lumping a nSmP pack yields 1SmP (m lumped cells in parallel).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cell import CellParams
from .pack import PackKind, PackTopology


class LumpKind(enum.Enum):
    PARALLEL = "parallel"
    SERIES = "series"


@dataclass(frozen=True)
class LumpedModule:
    """One module collapsed to a single equivalent cell."""

    params: CellParams
    member_index: tuple  # (i, j) cell indices aggregated by this lump
    kind: LumpKind


def _common_t_env(members) -> float:
    envs = {p.t_env for p in members}
    if len(envs) != 1:
        raise ValueError("members must share the same environment temperature")
    return envs.pop()


def lump_parallel(members, member_index=()) -> LumpedModule:
    """Aggregate parallel cells: capacities add, conductances add."""
    if len(members) == 0:
        raise ValueError("empty member list")
    g = np.array([1.0 / p.r_internal for p in members])
    r = 1.0 / np.sum(g)
    params = CellParams(
        capacity=sum(p.capacity for p in members),
        r_internal=r,
        ocv_intercept=r * sum(p.ocv_intercept / p.r_internal for p in members),
        ocv_slope=r * sum(p.ocv_slope / p.r_internal for p in members),
        heat_capacity=sum(p.heat_capacity for p in members),
        r_convection=1.0 / sum(1.0 / p.r_convection for p in members),
        t_env=_common_t_env(members),
    )
    return LumpedModule(params, tuple(member_index), LumpKind.PARALLEL)


def lump_series(members, member_index=()) -> LumpedModule:
    """Aggregate series cells: min capacity, resistances and OCVs add."""
    if len(members) == 0:
        raise ValueError("empty member list")
    params = CellParams(
        capacity=min(p.capacity for p in members),
        r_internal=sum(p.r_internal for p in members),
        ocv_intercept=sum(p.ocv_intercept for p in members),
        ocv_slope=sum(p.ocv_slope for p in members),
        heat_capacity=sum(p.heat_capacity for p in members),
        r_convection=1.0 / sum(1.0 / p.r_convection for p in members),
        t_env=_common_t_env(members),
    )
    return LumpedModule(params, tuple(member_index), LumpKind.SERIES)


def lump_thermal_step(module: LumpedModule, temp: float, current: float,
                      i_isc: float, i_esc: float, dt: float) -> float:
    """Euler step of the lumped thermal dynamics.

    Parallel lumps heat with the full (i + i_isc + i_esc) sum squared; the
    series variant has no module ESC path and omits i_esc.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    p = module.params
    i_total = current + i_isc
    if module.kind is LumpKind.PARALLEL:
        i_total += i_esc
    heat = p.r_internal * i_total * i_total
    cooling = (temp - p.t_env) / p.r_convection
    return temp + dt * (heat - cooling) / p.heat_capacity


def lump_topology(topology: PackTopology) -> list:
    """Lump every module of the pack; returns one LumpedModule per module."""
    lumps = []
    for k in range(topology.module_count):
        idx = topology.module_cells(k)
        members = [topology.cells[i][j] for i, j in idx]
        if topology.kind is PackKind.PARALLEL_SERIES:
            lumps.append(lump_parallel(members, idx))
        else:
            lumps.append(lump_series(members, idx))
    return lumps
