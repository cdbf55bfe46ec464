"""Hierarchical moving-horizon fault diagnosis for lithium-ion battery packs.

Simulates series-parallel and parallel-series packs under injected faults
(internal/external short circuits, voltage/current sensor offsets) and
recovers the fault signals by solving constrained moving-horizon estimation
problems at module and cell level.
"""

from .cell import CellParams, CellState, default_cell, ocv, soc_step, \
    temp_step, terminal_voltage
from .pack import (FaultVector, Measurement, PackKind, PackState,
                   PackTopology, apply_esc, distribute_parallel_currents,
                   measure)
from .lumping import LumpedModule, LumpKind, lump_parallel, lump_series, \
    lump_thermal_step, lump_topology
from .simulate import (FaultEvent, LoadProfile, NoiseConfig, SimTrace,
                       make_noise, read_trace_csv, simulate, write_trace_csv)

__version__ = "0.1.0"
