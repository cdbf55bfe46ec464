"""Estimation-side pack models for the windowed fault estimators.

Each model describes a collection of K "units" (lumped modules, the cells
of one module, or every cell of the pack), its fault channels, its sensor
outputs and any auxiliary current variables with their coupling
constraints.  The per-step maps are written with jax.numpy so the window
assembler can differentiate through them; called eagerly with plain numpy
inputs they double as the decode-time recomputation path.

State layout per model: x = [q_1..q_K, T_1..T_K].
Fault row layout:       f = [isc (n_isc), esc (n_esc), f_v (n_v), f_i].
Measurement row:        y = [voltages (nv), temperatures (nt), current].
"""

from __future__ import annotations

import numpy as np

import jax
jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402

from .cell import AH_TO_AS  # noqa: E402
from .lumping import lump_topology  # noqa: E402
from .pack import PackKind, PackTopology  # noqa: E402


class EstimationModel:
    """Shared plumbing: parameter arrays, fault slicing, the Euler step."""

    uses_share = False
    isc_suspicion_gain = 1.0

    def __init__(self, name, params_list, n_isc, n_esc, n_v, n_aux, nv, nt):
        self.name = name
        self.K = len(params_list)
        self.capacity = np.array([p.capacity for p in params_list])
        self.r_internal = np.array([p.r_internal for p in params_list])
        self.alpha = np.array([p.ocv_intercept for p in params_list])
        self.beta = np.array([p.ocv_slope for p in params_list])
        self.heat_capacity = np.array([p.heat_capacity for p in params_list])
        self.r_convection = np.array([p.r_convection for p in params_list])
        self.t_env = params_list[0].t_env
        self.n_isc = n_isc
        self.n_esc = n_esc
        self.n_v = n_v
        self.nf = n_isc + n_esc + n_v + 1
        self.n_aux = n_aux
        self.nv = nv
        self.nt = nt
        self.nz = nv + nt + 1
        # per-channel multipliers on the base measurement-noise bounds
        # (aggregated sensors accumulate noise)
        self.z_scale = np.ones(self.nz)
        # multipliers on the base process-noise bounds [q..., T...]
        self.w_scale = np.ones(2 * self.K)
        # multiplier on the base voltage-sensor fault bounds
        self.fv_bound_scale = 1.0
        # per-channel scale applied inside the sparsity penalty norms
        self.penalty_scale = np.ones(self.nf)

    # --- fault slicing ---

    def split_f(self, f):
        isc = f[:self.n_isc]
        esc = f[self.n_isc:self.n_isc + self.n_esc]
        fv = f[self.n_isc + self.n_esc:self.n_isc + self.n_esc + self.n_v]
        return isc, esc, fv, f[-1]

    def fault_groups(self, per_signal=False):
        """Index groups for the mixed-norm penalty: ISC / ESC / sensors."""
        if per_signal:
            return [np.array([i]) for i in range(self.nf)]
        a = self.n_isc
        b = a + self.n_esc
        return [np.arange(0, a), np.arange(a, b), np.arange(b, self.nf)]

    def group_names(self, per_signal=False):
        if not per_signal:
            return ["isc", "esc", "sensor"]
        names = [f"isc_{i + 1}" for i in range(self.n_isc)]
        names += [f"esc_{i + 1}" for i in range(self.n_esc)]
        names += [f"f_v_{i + 1}" for i in range(self.n_v)]
        return names + ["f_i"]

    def i_load(self, f, z, i_meas):
        """True load current implied by the measured current."""
        return i_meas - f[-1] - z[-1]

    # --- dynamics ---

    def step(self, x, f, aux, i_load, share, dt):
        """One forward-Euler step of all units (before process noise)."""
        i_dyn = self.unit_currents(x, f, aux, i_load, share)
        q = x[:self.K]
        temp = x[self.K:]
        q2 = q - dt * i_dyn / (AH_TO_AS * self.capacity)
        heat = self.r_internal * i_dyn * i_dyn
        t2 = temp + dt * (heat - (temp - self.t_env) / self.r_convection) \
            / self.heat_capacity
        return jnp.concatenate([q2, t2])

    def unit_terminal(self, x, f, aux, i_load, share):
        """Per-unit terminal voltage (without sensor faults)."""
        i_dyn = self.unit_currents(x, f, aux, i_load, share)
        return self.alpha + self.beta * x[:self.K] - self.r_internal * i_dyn

    # --- hooks implemented by concrete models ---

    def unit_currents(self, x, f, aux, i_load, share):
        raise NotImplementedError

    def outputs(self, x, f, aux, i_load, share):
        """Predicted [voltages (nv); temperatures (nt)] before noise."""
        raise NotImplementedError

    def extra_constraints(self, x, f, aux, i_load, share):
        """KCL / equal-voltage equality residuals; shape (n_extra,)."""
        return jnp.zeros(0)

    n_extra = 0
    # unit kind of each extra row ("current" or "voltage"), used to scale
    # the rows so their multipliers stay O(1)
    extra_row_kinds = ()

    def extract_y(self, v_meas, t_meas, i_meas):
        """Model-level measurement row from pack-level sensor readings."""
        raise NotImplementedError

    def initial_state_guess(self, y):
        """Fault-free state inversion of one measurement row."""
        raise NotImplementedError

    def aux_guess(self, y):
        return np.zeros(self.n_aux)

    def _weighted_mean_temp(self, temp, idx):
        w = self.capacity[idx]
        return jnp.dot(w, temp[idx]) / jnp.sum(w)


class InterParallelSeries(EstimationModel):
    """Lumped mPnS pack: n parallel-lumped modules in series (1PnS).

    Each lump carries the full load plus its ISC/ESC fault currents; one
    voltage and one temperature sensor per module.
    """

    def __init__(self, topology: PackTopology):
        if topology.kind is not PackKind.PARALLEL_SERIES:
            raise ValueError("expected a mPnS topology")
        lumps = lump_topology(topology)
        n = topology.n
        super().__init__("inter_mpns", [l.params for l in lumps],
                         n_isc=n, n_esc=n, n_v=n, n_aux=0, nv=n, nt=n)
        self.topology = topology

    def unit_currents(self, x, f, aux, i_load, share):
        isc, esc, _, _ = self.split_f(f)
        return i_load + isc + esc

    def outputs(self, x, f, aux, i_load, share):
        _, _, fv, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share) + fv
        return jnp.concatenate([v, x[self.K:]])

    def extract_y(self, v_meas, t_meas, i_meas):
        return np.concatenate([v_meas, t_meas, [i_meas]])

    def initial_state_guess(self, y):
        v = y[:self.nv]
        t = y[self.nv:self.nv + self.nt]
        q = (v + self.r_internal * y[-1] - self.alpha) / self.beta
        return np.concatenate([np.clip(q, 0.0, 1.0), t])


class InterSeriesParallel(EstimationModel):
    """Lumped nSmP pack: m series-lumped strings in parallel (1SmP).

    String currents are auxiliary variables tied by the pack KCL and the
    equal-terminal-voltage condition.  The model-level voltage measurement
    of a string is the sum of its n per-cell sensor readings, so both the
    noise bound and the sensor-fault bound scale by n.
    """

    def __init__(self, topology: PackTopology):
        if topology.kind is not PackKind.SERIES_PARALLEL:
            raise ValueError("expected a nSmP topology")
        lumps = lump_topology(topology)
        m = topology.m
        super().__init__("inter_nsmp", [l.params for l in lumps],
                         n_isc=m, n_esc=1, n_v=m, n_aux=m, nv=m, nt=m)
        self.topology = topology
        n = topology.n
        self.z_scale[:m] = n
        self.fv_bound_scale = n
        # a single-cell ISC appears 1/n attenuated at string level: the lump
        # applies the short through the whole string resistance and OCV
        self.isc_suspicion_gain = n
        self.w_scale[:self.K] = 3.0
        self.w_scale[self.K:] = 10.0
        self.n_extra = m  # KCL + (m-1) equal-voltage rows
        self.extra_row_kinds = ("current",) + ("voltage",) * (m - 1)

    def unit_currents(self, x, f, aux, i_load, share):
        isc, _, _, _ = self.split_f(f)
        return aux + isc

    def outputs(self, x, f, aux, i_load, share):
        _, _, fv, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share) + fv
        return jnp.concatenate([v, x[self.K:]])

    def extra_constraints(self, x, f, aux, i_load, share):
        _, esc, _, _ = self.split_f(f)
        kcl = jnp.sum(aux) - (i_load + esc[0])
        v = self.unit_terminal(x, f, aux, i_load, share)
        return jnp.concatenate([jnp.array([kcl]), v[1:] - v[0]])

    def extract_y(self, v_meas, t_meas, i_meas):
        n, m = self.topology.n, self.topology.m
        v_string = v_meas.reshape(n, m).sum(axis=0)
        return np.concatenate([v_string, t_meas, [i_meas]])

    def initial_state_guess(self, y):
        i_str = y[-1] / self.K
        v = y[:self.nv]
        t = y[self.nv:self.nv + self.nt]
        q = (v + self.r_internal * i_str - self.alpha) / self.beta
        return np.concatenate([np.clip(q, 0.0, 1.0), t])

    def aux_guess(self, y):
        return np.full(self.n_aux, y[-1] / self.K)


class IntraParallelModule(EstimationModel):
    """One mPnS module at cell level: m parallel cells, one voltage and one
    temperature sensor, per-cell currents as auxiliary variables."""

    def __init__(self, topology: PackTopology, module: int):
        if topology.kind is not PackKind.PARALLEL_SERIES:
            raise ValueError("expected a mPnS topology")
        if not 0 <= module < topology.module_count:
            raise ValueError(f"module index {module} out of range")
        cells = [topology.cells[i][j]
                 for i, j in topology.module_cells(module)]
        m = topology.m
        super().__init__(f"intra_mpns_{module + 1}", cells,
                         n_isc=m, n_esc=1, n_v=1, n_aux=m, nv=1, nt=1)
        self.topology = topology
        self.module = module
        self.n_extra = m  # KCL + (m-1) equal-voltage rows
        self.extra_row_kinds = ("current",) + ("voltage",) * (m - 1)

    def unit_currents(self, x, f, aux, i_load, share):
        isc, _, _, _ = self.split_f(f)
        return aux + isc

    def outputs(self, x, f, aux, i_load, share):
        _, _, fv, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share)
        t_mean = self._weighted_mean_temp(x[self.K:], np.arange(self.K))
        return jnp.concatenate([jnp.mean(v)[None] + fv, t_mean[None]])

    def extra_constraints(self, x, f, aux, i_load, share):
        _, esc, _, _ = self.split_f(f)
        kcl = jnp.sum(aux) - (i_load + esc[0])
        v = self.unit_terminal(x, f, aux, i_load, share)
        return jnp.concatenate([jnp.array([kcl]), v[1:] - v[0]])

    def extract_y(self, v_meas, t_meas, i_meas):
        return np.array([v_meas[self.module], t_meas[self.module], i_meas])

    def initial_state_guess(self, y):
        i_cell = y[-1] / self.K
        q = (y[0] + self.r_internal * i_cell - self.alpha) / self.beta
        return np.concatenate([np.clip(q, 0.0, 1.0),
                               np.full(self.K, y[1])])

    def aux_guess(self, y):
        return np.full(self.n_aux, y[-1] / self.K)


class IntraSeriesString(EstimationModel):
    """One nSmP string at cell level: n series cells sharing the string
    current, one voltage sensor per cell, one temperature sensor.

    The string's share of the pack current is an exogenous input (from the
    inter-module stage, or 1/m when unavailable), so the string current is
    share * (i_load + i_esc) rather than a free variable.
    """

    uses_share = True

    def __init__(self, topology: PackTopology, module: int):
        if topology.kind is not PackKind.SERIES_PARALLEL:
            raise ValueError("expected a nSmP topology")
        if not 0 <= module < topology.module_count:
            raise ValueError(f"string index {module} out of range")
        cells = [topology.cells[i][j]
                 for i, j in topology.module_cells(module)]
        n = topology.n
        super().__init__(f"intra_nsmp_{module + 1}", cells,
                         n_isc=n, n_esc=1, n_v=n, n_aux=0, nv=n, nt=1)
        self.topology = topology
        self.module = module

    def unit_currents(self, x, f, aux, i_load, share):
        isc, esc, _, _ = self.split_f(f)
        return share * (i_load + esc[0]) + isc

    def outputs(self, x, f, aux, i_load, share):
        _, _, fv, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share) + fv
        t_mean = self._weighted_mean_temp(x[self.K:], np.arange(self.K))
        return jnp.concatenate([v, t_mean[None]])

    def extract_y(self, v_meas, t_meas, i_meas):
        n, m = self.topology.n, self.topology.m
        v = v_meas.reshape(n, m)[:, self.module]
        return np.concatenate([v, [t_meas[self.module]], [i_meas]])

    def initial_state_guess(self, y):
        i_str = y[-1] / self.topology.m
        v = y[:self.nv]
        q = (v + self.r_internal * i_str - self.alpha) / self.beta
        return np.concatenate([np.clip(q, 0.0, 1.0),
                               np.full(self.K, y[self.nv])])


class FullParallelSeries(EstimationModel):
    """Monolithic mPnS pack: every cell a unit, per-cell currents auxiliary,
    module-level sensors.  Reference model for decomposition checks."""

    def __init__(self, topology: PackTopology):
        if topology.kind is not PackKind.PARALLEL_SERIES:
            raise ValueError("expected a mPnS topology")
        n, m = topology.n, topology.m
        cells = [topology.cells[i][j] for i in range(n) for j in range(m)]
        super().__init__("full_mpns", cells, n_isc=n * m, n_esc=n, n_v=n,
                         n_aux=n * m, nv=n, nt=n)
        self.topology = topology
        self.n_extra = n * m  # per module: KCL + (m-1) equal-voltage rows
        self.extra_row_kinds = (("current",) + ("voltage",) * (m - 1)) * n

    def unit_currents(self, x, f, aux, i_load, share):
        isc, _, _, _ = self.split_f(f)
        return aux + isc

    def outputs(self, x, f, aux, i_load, share):
        n, m = self.topology.n, self.topology.m
        _, _, fv, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share).reshape(n, m)
        temp = x[self.K:]
        v_mod = jnp.mean(v, axis=1) + fv
        t_mod = jnp.stack([
            self._weighted_mean_temp(temp, np.arange(i * m, (i + 1) * m))
            for i in range(n)])
        return jnp.concatenate([v_mod, t_mod])

    def extra_constraints(self, x, f, aux, i_load, share):
        n, m = self.topology.n, self.topology.m
        _, esc, _, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share).reshape(n, m)
        kcl = jnp.sum(aux.reshape(n, m), axis=1) - (i_load + esc)
        eqv = (v[:, 1:] - v[:, :1]).ravel()
        return jnp.concatenate([kcl, eqv])

    def extract_y(self, v_meas, t_meas, i_meas):
        return np.concatenate([v_meas, t_meas, [i_meas]])

    def initial_state_guess(self, y):
        n, m = self.topology.n, self.topology.m
        i_cell = y[-1] / m
        v = y[:n]
        q = (np.repeat(v, m) + self.r_internal * i_cell - self.alpha) \
            / self.beta
        return np.concatenate([np.clip(q, 0.0, 1.0),
                               np.repeat(y[n:n + n], m)])

    def aux_guess(self, y):
        return np.full(self.n_aux, y[-1] / self.topology.m)


class FullSeriesParallel(EstimationModel):
    """Monolithic nSmP pack: every cell a unit, string currents auxiliary,
    per-cell voltage sensors and per-string temperature sensors."""

    def __init__(self, topology: PackTopology):
        if topology.kind is not PackKind.SERIES_PARALLEL:
            raise ValueError("expected a nSmP topology")
        n, m = topology.n, topology.m
        cells = [topology.cells[i][j] for i in range(n) for j in range(m)]
        super().__init__("full_nsmp", cells, n_isc=n * m, n_esc=1,
                         n_v=n * m, n_aux=m, nv=n * m, nt=m)
        self.topology = topology
        self.n_extra = m  # KCL + (m-1) equal-string-voltage rows
        self.extra_row_kinds = ("current",) + ("voltage",) * (m - 1)

    def unit_currents(self, x, f, aux, i_load, share):
        n, m = self.topology.n, self.topology.m
        isc, _, _, _ = self.split_f(f)
        return jnp.tile(aux, n) + isc

    def outputs(self, x, f, aux, i_load, share):
        n, m = self.topology.n, self.topology.m
        _, _, fv, _ = self.split_f(f)
        v = self.unit_terminal(x, f, aux, i_load, share) + fv
        temp = x[self.K:]
        t_mod = jnp.stack([
            self._weighted_mean_temp(temp, np.arange(j, n * m, m))
            for j in range(m)])
        return jnp.concatenate([v, t_mod])

    def extra_constraints(self, x, f, aux, i_load, share):
        n, m = self.topology.n, self.topology.m
        _, esc, _, _ = self.split_f(f)
        kcl = jnp.sum(aux) - (i_load + esc[0])
        v_str = jnp.sum(
            self.unit_terminal(x, f, aux, i_load, share).reshape(n, m),
            axis=0)
        return jnp.concatenate([jnp.array([kcl]), v_str[1:] - v_str[0]])

    def extract_y(self, v_meas, t_meas, i_meas):
        return np.concatenate([v_meas, t_meas, [i_meas]])

    def initial_state_guess(self, y):
        n, m = self.topology.n, self.topology.m
        i_str = y[-1] / m
        v = y[:n * m]
        q = (v + self.r_internal * i_str - self.alpha) / self.beta
        return np.concatenate([np.clip(q, 0.0, 1.0),
                               np.tile(y[n * m:n * m + m], n)])

    def aux_guess(self, y):
        return np.full(self.n_aux, y[-1] / self.topology.m)


def inter_model(topology: PackTopology) -> EstimationModel:
    """Lumped inter-module model for either pack kind."""
    if topology.kind is PackKind.PARALLEL_SERIES:
        return InterParallelSeries(topology)
    return InterSeriesParallel(topology)


def intra_model(topology: PackTopology, module: int) -> EstimationModel:
    """Cell-level model of one module."""
    if topology.kind is PackKind.PARALLEL_SERIES:
        return IntraParallelModule(topology, module)
    return IntraSeriesString(topology, module)


def full_model(topology: PackTopology) -> EstimationModel:
    """Monolithic pack-level model (reference mode)."""
    if topology.kind is PackKind.PARALLEL_SERIES:
        return FullParallelSeries(topology)
    return FullSeriesParallel(topology)
