"""Pack topology, current distribution and the sensor model.

Two configurations are supported (cells are always indexed (i, j) with
i = 0..n-1 and j = 0..m-1, 0-based):

* parallel-series (mPnS): n series modules, each of m parallel cells.
  Module i is row i.  Sensors: one voltage and one temperature sensor per
  module plus one pack current sensor.  Each module can carry an external
  short (ESC) path.
* series-parallel (nSmP): m parallel strings, each of n series cells.
  Module j is column j (a string).  Sensors: one voltage sensor per cell,
  one temperature sensor per string, one pack current sensor.  A single ESC
  path bypasses the whole pack.

Sign convention: positive pack current = discharge.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .cell import CellParams, ocv


class PackKind(enum.Enum):
    SERIES_PARALLEL = "nSmP"   # m parallel strings of n series cells
    PARALLEL_SERIES = "mPnS"   # n series modules of m parallel cells


@dataclass(frozen=True)
class PackTopology:
    """Structural description of the pack: kind, shape and cell parameters."""

    kind: PackKind
    n: int
    m: int
    cells: tuple  # tuple of n tuples of m CellParams

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("pack dimensions must satisfy n >= 1, m >= 1")
        if len(self.cells) != self.n or any(len(r) != self.m for r in self.cells):
            raise ValueError(f"cells must be an {self.n}x{self.m} grid")

    @classmethod
    def uniform(cls, kind: PackKind, n: int, m: int,
                params: CellParams) -> "PackTopology":
        return cls(kind, n, m, tuple(tuple(params for _ in range(m))
                                     for _ in range(n)))

    @property
    def n_cells(self) -> int:
        return self.n * self.m

    @property
    def module_count(self) -> int:
        """Modules: rows for mPnS, strings (columns) for nSmP."""
        return self.n if self.kind is PackKind.PARALLEL_SERIES else self.m

    def module_cells(self, k: int) -> list:
        """(i, j) indices of the cells belonging to module k."""
        if self.kind is PackKind.PARALLEL_SERIES:
            return [(k, j) for j in range(self.m)]
        return [(i, k) for i in range(self.n)]

    @property
    def n_voltage_sensors(self) -> int:
        if self.kind is PackKind.PARALLEL_SERIES:
            return self.n
        return self.n * self.m

    @property
    def n_temp_sensors(self) -> int:
        return self.module_count

    @property
    def esc_dim(self) -> int:
        """ESC channels: one per module for mPnS, one for the pack for nSmP."""
        return self.n if self.kind is PackKind.PARALLEL_SERIES else 1


@dataclass
class PackState:
    """True SoC and temperature of every cell, as (n, m) arrays."""

    soc: np.ndarray
    temp: np.ndarray

    def copy(self) -> "PackState":
        return PackState(self.soc.copy(), self.temp.copy())


@dataclass
class FaultVector:
    """Stacked fault signal [f_ISC; f_ESC; f_{v,i}].

    i_isc: per-cell ISC current, shape (n, m) [A]
    i_esc: per-module ESC current for mPnS (length n) or length-1 for nSmP [A]
    f_v:   per-voltage-sensor offset (length n for mPnS, n*m for nSmP) [V]
    f_i:   current-sensor offset [A]
    """

    i_isc: np.ndarray
    i_esc: np.ndarray
    f_v: np.ndarray
    f_i: float = 0.0

    @classmethod
    def zeros(cls, topology: PackTopology) -> "FaultVector":
        return cls(
            i_isc=np.zeros((topology.n, topology.m)),
            i_esc=np.zeros(topology.esc_dim),
            f_v=np.zeros(topology.n_voltage_sensors),
            f_i=0.0,
        )

    def stacked(self) -> np.ndarray:
        """Flat [f_ISC; f_ESC; f_v; f_i] in row-major cell order."""
        return np.concatenate([self.i_isc.ravel(), self.i_esc,
                               self.f_v, [self.f_i]])

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.stacked()) <= tol))


@dataclass
class Measurement:
    """One sensor snapshot: voltages, module temperatures, pack current."""

    voltages: np.ndarray
    temperatures: np.ndarray
    pack_current: float

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.voltages, self.temperatures,
                               [self.pack_current]])


def parallel_group_solve(a: np.ndarray, b: np.ndarray,
                         total_current: float) -> tuple:
    """Split a total current over parallel branches with v = a_k - b_k * i_k.

    Enforces equal branch terminal voltage and KCL (sum of branch currents
    equals total_current).  Returns (branch currents, common voltage).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        raise ValueError("empty parallel group")
    if np.any(b <= 0.0):
        raise ValueError("branch resistances must be > 0")
    g = 1.0 / b
    v = (np.dot(a, g) - total_current) / np.sum(g)
    return (a - v) * g, v


def distribute_parallel_currents(group, total_current: float,
                                 i_isc=None) -> np.ndarray:
    """Per-cell currents for parallel cells sharing a terminal voltage.

    group is a list of (CellParams, soc).  Optional i_isc gives each cell's
    internal short current (it deepens that cell's internal drop).  The split
    solves the equal-voltage / KCL linear system exactly.
    """
    if len(group) == 0:
        raise ValueError("empty parallel group")
    if i_isc is None:
        i_isc = np.zeros(len(group))
    a = np.array([ocv(p, q) - p.r_internal * isc
                  for (p, q), isc in zip(group, i_isc)])
    b = np.array([p.r_internal for p, _ in group])
    currents, _ = parallel_group_solve(a, b, total_current)
    return currents


def apply_esc(topology: PackTopology, load_current: float,
              esc_currents) -> np.ndarray:
    """Effective group total currents under ESC.

    mPnS: returns length-n module totals i_L + i_ESC,i.
    nSmP: returns a length-1 array with the joint string total i_L + i_ESC.
    """
    esc = np.atleast_1d(np.asarray(esc_currents, dtype=float))
    if esc.shape != (topology.esc_dim,):
        raise ValueError(
            f"esc_currents must have length {topology.esc_dim}, got {esc.shape}")
    return load_current + esc


def module_temperature(topology: PackTopology, temp: np.ndarray,
                       k: int) -> float:
    """Capacity-weighted mean temperature of module k's cells.

    The sensor model assumes near-uniform temperature within a module; the
    weighted mean stays well-defined when a fault makes cells diverge and
    reduces to the common value when they do not.
    """
    cells = topology.module_cells(k)
    w = np.array([topology.cells[i][j].capacity for i, j in cells])
    t = np.array([temp[i, j] for i, j in cells])
    return float(np.dot(w, t) / np.sum(w))


def measure(topology: PackTopology, states: PackState,
            cell_currents: np.ndarray, fault: FaultVector,
            noise=None) -> Measurement:
    """Evaluate the full sensor model, including sensor faults and noise.

    cell_currents is the (n, m) array of external cell currents; the ISC
    currents come from the fault vector.  noise, when given, is the stacked
    measurement disturbance [z_v...; z_T...; z_i].
    """
    n, m = topology.n, topology.m
    if cell_currents.shape != (n, m):
        raise ValueError(f"cell_currents must have shape {(n, m)}")

    def vterm(i, j):
        p = topology.cells[i][j]
        return (ocv(p, states.soc[i, j])
                - p.r_internal * (cell_currents[i, j] + fault.i_isc[i, j]))

    if topology.kind is PackKind.PARALLEL_SERIES:
        # one sensor per module, reading the common parallel-group voltage
        volts = np.array([
            np.mean([vterm(i, j) for j in range(m)]) for i in range(n)])
    else:
        volts = np.array([vterm(i, j) for i in range(n) for j in range(m)])
    volts = volts + fault.f_v

    temps = np.array([module_temperature(topology, states.temp, k)
                      for k in range(topology.module_count)])
    i_meas = cell_currents_to_load(topology, cell_currents, fault) + fault.f_i

    meas = Measurement(volts, temps, i_meas)
    if noise is not None:
        z = np.asarray(noise, dtype=float)
        expected = topology.n_voltage_sensors + topology.n_temp_sensors + 1
        if z.shape != (expected,):
            raise ValueError(f"noise must have length {expected}")
        nv, nt = topology.n_voltage_sensors, topology.n_temp_sensors
        meas = Measurement(meas.voltages + z[:nv],
                           meas.temperatures + z[nv:nv + nt],
                           meas.pack_current + z[-1])
    return meas


def cell_currents_to_load(topology: PackTopology, cell_currents: np.ndarray,
                          fault: FaultVector) -> float:
    """Recover the true load current from cell currents via the ESC KCL."""
    if topology.kind is PackKind.PARALLEL_SERIES:
        # every module satisfies sum_j i_ij = i_L + i_ESC,i; use module 0
        return float(np.sum(cell_currents[0, :]) - fault.i_esc[0])
    return float(np.sum(cell_currents[0, :]) - fault.i_esc[0])
