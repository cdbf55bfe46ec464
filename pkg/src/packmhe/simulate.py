"""Ground-truth pack simulation with fault injection.

Runs the forward electro-thermal model on a uniform time grid, injecting
internal/external short circuits and sensor faults from a schedule, and
emits the noisy measurement trace the diagnosis side consumes.

Short-circuit events come in two modes: a constant injected current, or a
resistance mode where the short current equals the local terminal voltage
divided by the configured resistance at every instant.  Resistance-mode
shorts are folded into the per-group linear current-split system, so the
recorded short current satisfies i = v / R exactly at each step.

Everything is deterministic per (config, seed).
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cell import ocv, soc_step, temp_step, CellState
from .pack import (FaultVector, Measurement, PackKind, PackState,
                   PackTopology, measure, parallel_group_solve)

TRACE_SCHEMA = "packmhe-trace-1"

ISC = "isc"
ESC = "esc"
VOLTAGE_SENSOR = "voltage_sensor"
CURRENT_SENSOR = "current_sensor"
_CHANNELS = (ISC, ESC, VOLTAGE_SENSOR, CURRENT_SENSOR)


@dataclass(frozen=True)
class FaultEvent:
    """One injected fault, active over [start_time, end_time).

    channel: one of "isc", "esc", "voltage_sensor", "current_sensor"
    index:   (i, j) cell for isc; module index for esc (ignored for nSmP
             which has a single pack ESC) and for voltage_sensor; unused
             for current_sensor
    mode:    "constant" (magnitude in A or V) or "resistance" (short
             circuits only; ohms)
    """

    channel: str
    start_time: float
    end_time: float | None = None
    index: tuple | int | None = None
    mode: str = "constant"
    magnitude: float = 0.0
    resistance: float | None = None

    def __post_init__(self):
        if self.channel not in _CHANNELS:
            raise ValueError(f"unknown fault channel {self.channel!r}")
        if self.end_time is not None and not self.start_time < self.end_time:
            raise ValueError("start_time must be < end_time")
        if self.mode == "resistance":
            if self.channel not in (ISC, ESC):
                raise ValueError("resistance mode is for short circuits only")
            if self.resistance is None or self.resistance <= 0.0:
                raise ValueError("resistance mode requires positive ohms")
        elif self.mode != "constant":
            raise ValueError(f"unknown fault mode {self.mode!r}")

    def active(self, t: float) -> bool:
        return t >= self.start_time and (self.end_time is None
                                         or t < self.end_time)


@dataclass(frozen=True)
class LoadProfile:
    """Piecewise-constant load current: value[k] applies from breakpoint[k]."""

    breakpoints: tuple
    values: tuple

    def __post_init__(self):
        if len(self.breakpoints) != len(self.values) or not self.breakpoints:
            raise ValueError("breakpoints and values must be equal, nonempty")
        if any(nxt <= prv for prv, nxt in zip(self.breakpoints,
                                              self.breakpoints[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @classmethod
    def constant(cls, amps: float) -> "LoadProfile":
        return cls((0.0,), (float(amps),))

    def current(self, t: float) -> float:
        idx = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.values[max(idx, 0)]


@dataclass(frozen=True)
class NoiseConfig:
    """Symmetric bounds for the bounded process/measurement disturbances.

    distribution "uniform" samples uniformly inside the bounds;
    "gaussian" samples a truncated normal with sigma = bound / 3.
    """

    w_soc: float = 1e-5
    w_temp: float = 0.01
    z_voltage: float = 0.005
    z_temp: float = 0.05
    z_current: float = 0.05
    distribution: str = "uniform"

    def __post_init__(self):
        if self.distribution not in ("uniform", "gaussian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        for name in ("w_soc", "w_temp", "z_voltage", "z_temp", "z_current"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"NoiseConfig.{name} must be >= 0")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def make_noise(low, high, shape, distribution="uniform", seed=0):
    """Bounded disturbance samples of the given shape, deterministic per seed.

    Every sample lies in [low, high] componentwise.  seed may be an int or an
    already-constructed numpy Generator (consumed in order).
    """
    low = float(low)
    high = float(high)
    if low > high:
        raise ValueError("inverted bounds: low > high")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    if low == high:
        rng.uniform(size=shape)  # keep the stream position deterministic
        return np.full(shape, low)
    if distribution == "uniform":
        return rng.uniform(low, high, size=shape)
    if distribution == "gaussian":
        mid = 0.5 * (low + high)
        sigma = (high - low) / 6.0
        lo, hi = (low - mid) / sigma, (high - mid) / sigma
        return mid + sigma * stats.truncnorm.rvs(lo, hi, size=shape,
                                                 random_state=rng)
    raise ValueError(f"unknown distribution {distribution!r}")


@dataclass
class SimTrace:
    """Per-step ground truth, faults, currents and noisy measurements."""

    topology: PackTopology
    dt: float
    time: np.ndarray            # (N+1,)
    soc: np.ndarray             # (N+1, n, m)
    temp: np.ndarray            # (N+1, n, m)
    i_cell: np.ndarray          # (N+1, n, m)
    f_isc: np.ndarray           # (N+1, n, m)
    f_esc: np.ndarray           # (N+1, esc_dim)
    f_v: np.ndarray             # (N+1, n_voltage_sensors)
    f_i: np.ndarray             # (N+1,)
    v_meas: np.ndarray          # (N+1, n_voltage_sensors)
    t_meas: np.ndarray          # (N+1, n_temp_sensors)
    i_meas: np.ndarray          # (N+1,)
    w_soc: np.ndarray | None = None   # (N, n, m)
    w_temp: np.ndarray | None = None  # (N, n, m)
    z: np.ndarray | None = None       # (N+1, nv + nt + 1)
    config_echo: dict | None = None

    def __len__(self) -> int:
        return len(self.time)

    def measurement(self, k: int) -> Measurement:
        return Measurement(self.v_meas[k], self.t_meas[k],
                           float(self.i_meas[k]))

    def fault_vector(self, k: int) -> FaultVector:
        return FaultVector(self.f_isc[k], self.f_esc[k], self.f_v[k],
                           float(self.f_i[k]))


def _cell_affine(params, q, isc_const, isc_res):
    """Terminal relation v = a - b * i_ext for one cell.

    A resistance-mode ISC (i_isc = v / R_isc) is eliminated exactly,
    shrinking the effective OCV and resistance.
    """
    u = ocv(params, q)
    a = u - params.r_internal * isc_const
    b = params.r_internal
    if isc_res is not None:
        scale = 1.0 + params.r_internal / isc_res
        a /= scale
        b /= scale
    return a, b


def _active_faults(schedule, t):
    """Split active events by channel at time t."""
    out = {c: [] for c in _CHANNELS}
    for ev in schedule:
        if ev.active(t):
            out[ev.channel].append(ev)
    return out


def resolve_currents(topology: PackTopology, state: PackState, i_load: float,
                     schedule, t: float):
    """Solve the pack's current distribution and fault currents at time t.

    Returns (cell_currents (n, m), FaultVector) with all resistance-mode
    short currents resolved to local_voltage / ohms exactly.
    """
    n, m = topology.n, topology.m
    active = _active_faults(schedule, t)
    fault = FaultVector.zeros(topology)

    for ev in active[VOLTAGE_SENSOR]:
        idx = int(ev.index)
        if not 0 <= idx < topology.n_voltage_sensors:
            raise ValueError(f"voltage sensor index {idx} out of range")
        fault.f_v[idx] += ev.magnitude
    for ev in active[CURRENT_SENSOR]:
        fault.f_i += ev.magnitude

    # constant vs resistance ISC per cell
    isc_const = np.zeros((n, m))
    isc_res = [[None] * m for _ in range(n)]
    for ev in active[ISC]:
        i, j = ev.index
        if not (0 <= i < n and 0 <= j < m):
            raise ValueError(f"ISC cell index {(i, j)} out of range")
        if ev.mode == "constant":
            isc_const[i, j] += ev.magnitude
        else:
            isc_res[i][j] = ev.resistance

    esc_const = np.zeros(topology.esc_dim)
    esc_res = [None] * topology.esc_dim
    for ev in active[ESC]:
        k = 0 if topology.kind is PackKind.SERIES_PARALLEL \
            else int(ev.index)
        if not 0 <= k < topology.esc_dim:
            raise ValueError(f"ESC module index {k} out of range")
        if ev.mode == "constant":
            esc_const[k] += ev.magnitude
        else:
            esc_res[k] = ev.resistance

    cell_currents = np.zeros((n, m))

    if topology.kind is PackKind.PARALLEL_SERIES:
        for i in range(n):
            ab = [_cell_affine(topology.cells[i][j], state.soc[i, j],
                               isc_const[i, j], isc_res[i][j])
                  for j in range(m)]
            a = np.array([x[0] for x in ab])
            b = np.array([x[1] for x in ab])
            g_esc = 0.0 if esc_res[i] is None else 1.0 / esc_res[i]
            # KCL with possible resistance-mode ESC: sum i_j = i_L + c + v/R
            gsum = np.sum(1.0 / b) + g_esc
            v = (np.dot(a, 1.0 / b) - i_load - esc_const[i]) / gsum
            cell_currents[i, :] = (a - v) / b
            fault.i_esc[i] = esc_const[i] + g_esc * v
            for j in range(m):
                if isc_res[i][j] is not None:
                    fault.i_isc[i, j] = v / isc_res[i][j]
                else:
                    fault.i_isc[i, j] = isc_const[i, j]
    else:
        # strings (columns) in parallel; string voltage V_j = A_j - B_j * i_j
        A = np.zeros(m)
        B = np.zeros(m)
        ab = [[None] * m for _ in range(n)]
        for j in range(m):
            for i in range(n):
                ab[i][j] = _cell_affine(topology.cells[i][j], state.soc[i, j],
                                        isc_const[i, j], isc_res[i][j])
                A[j] += ab[i][j][0]
                B[j] += ab[i][j][1]
        g_esc = 0.0 if esc_res[0] is None else 1.0 / esc_res[0]
        i_str, v = parallel_group_solve(
            A, B, i_load + esc_const[0] + 0.0)
        if g_esc > 0.0:
            gsum = np.sum(1.0 / B) + g_esc
            v = (np.dot(A, 1.0 / B) - i_load - esc_const[0]) / gsum
            i_str = (A - v) / B
        for j in range(m):
            cell_currents[:, j] = i_str[j]
            for i in range(n):
                if isc_res[i][j] is not None:
                    vc = ab[i][j][0] - ab[i][j][1] * i_str[j]
                    fault.i_isc[i, j] = vc / isc_res[i][j]
                else:
                    fault.i_isc[i, j] = isc_const[i, j]
        fault.i_esc[0] = esc_const[0] + g_esc * v

    return cell_currents, fault


def simulate(topology: PackTopology, initial: PackState,
             profile: LoadProfile, schedule, noise: NoiseConfig,
             dt: float, duration: float, seed: int = 0,
             substeps: int = 1) -> SimTrace:
    """Run the forward model and return the full trace.

    The trace has floor(duration/dt) + 1 records on the dt grid.  With
    substeps > 1 the dynamics integrate on a finer internal grid to bound
    Euler error; measurements and process noise stay on the dt grid.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    if duration < dt:
        raise ValueError("duration must be >= dt")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    n, m = topology.n, topology.m
    n_steps = int(np.floor(duration / dt + 1e-9))
    nv, nt = topology.n_voltage_sensors, topology.n_temp_sensors

    rng = np.random.default_rng(seed)
    w_soc = make_noise(-noise.w_soc, noise.w_soc, (n_steps, n, m),
                       noise.distribution, rng)
    w_temp = make_noise(-noise.w_temp, noise.w_temp, (n_steps, n, m),
                        noise.distribution, rng)
    z = np.concatenate([
        make_noise(-noise.z_voltage, noise.z_voltage, (n_steps + 1, nv),
                   noise.distribution, rng),
        make_noise(-noise.z_temp, noise.z_temp, (n_steps + 1, nt),
                   noise.distribution, rng),
        make_noise(-noise.z_current, noise.z_current, (n_steps + 1, 1),
                   noise.distribution, rng),
    ], axis=1)

    tr = SimTrace(
        topology=topology, dt=dt,
        time=np.arange(n_steps + 1) * dt,
        soc=np.zeros((n_steps + 1, n, m)),
        temp=np.zeros((n_steps + 1, n, m)),
        i_cell=np.zeros((n_steps + 1, n, m)),
        f_isc=np.zeros((n_steps + 1, n, m)),
        f_esc=np.zeros((n_steps + 1, topology.esc_dim)),
        f_v=np.zeros((n_steps + 1, nv)),
        f_i=np.zeros(n_steps + 1),
        v_meas=np.zeros((n_steps + 1, nv)),
        t_meas=np.zeros((n_steps + 1, nt)),
        i_meas=np.zeros(n_steps + 1),
        w_soc=w_soc, w_temp=w_temp, z=z,
    )

    state = initial.copy()
    warned = False
    for k in range(n_steps + 1):
        t = k * dt
        currents, fault = resolve_currents(topology, state,
                                           profile.current(t), schedule, t)
        tr.soc[k] = state.soc
        tr.temp[k] = state.temp
        tr.i_cell[k] = currents
        tr.f_isc[k] = fault.i_isc
        tr.f_esc[k] = fault.i_esc
        tr.f_v[k] = fault.f_v
        tr.f_i[k] = fault.f_i
        meas = measure(topology, state, currents, fault, z[k])
        tr.v_meas[k] = meas.voltages
        tr.t_meas[k] = meas.temperatures
        tr.i_meas[k] = meas.pack_current

        if k == n_steps:
            break
        dt_sub = dt / substeps
        for s in range(substeps):
            t_sub = t + s * dt_sub
            if s > 0:  # first substep reuses the recorded solution
                currents, fault = resolve_currents(
                    topology, state, profile.current(t_sub), schedule, t_sub)
            new_soc = np.empty((n, m))
            new_temp = np.empty((n, m))
            for i in range(n):
                for j in range(m):
                    cs = CellState(state.soc[i, j], state.temp[i, j])
                    p = topology.cells[i][j]
                    new_soc[i, j] = soc_step(p, cs, currents[i, j],
                                             fault.i_isc[i, j], dt_sub)
                    new_temp[i, j] = temp_step(p, cs, currents[i, j],
                                               fault.i_isc[i, j], dt_sub)
            state = PackState(new_soc, new_temp)
        state.soc += w_soc[k]
        state.temp += w_temp[k]
        if not warned and np.any(state.soc < 0.0):
            warnings.warn("deep discharge: cell SoC fell below 0",
                          RuntimeWarning)
            warned = True
    return tr


# ---------------------------------------------------------------------------
# trace serialization

def _one_based(fmt, *shape):
    """Column names like fmt.format(i, j) over 1-based indices."""
    if len(shape) == 1:
        return [fmt.format(i + 1) for i in range(shape[0])]
    return [fmt.format(i + 1, j + 1)
            for i in range(shape[0]) for j in range(shape[1])]


def trace_columns(topology: PackTopology) -> list:
    n, m = topology.n, topology.m
    cols = ["time"]
    cols += _one_based("soc_{}_{}", n, m)
    cols += _one_based("temp_{}_{}", n, m)
    cols += _one_based("i_cell_{}_{}", n, m)
    cols += _one_based("f_isc_{}_{}", n, m)
    cols += _one_based("f_esc_{}", topology.esc_dim)
    cols += _one_based("f_v_{}", topology.n_voltage_sensors)
    cols += ["f_i"]
    cols += _one_based("v_meas_{}", topology.n_voltage_sensors)
    cols += _one_based("t_meas_{}", topology.n_temp_sensors)
    cols += ["i_meas"]
    return cols


def write_trace_csv(trace: SimTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {TRACE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(trace_columns(trace.topology))
        for k in range(len(trace)):
            row = np.concatenate([
                [trace.time[k]],
                trace.soc[k].ravel(), trace.temp[k].ravel(),
                trace.i_cell[k].ravel(), trace.f_isc[k].ravel(),
                trace.f_esc[k], trace.f_v[k], [trace.f_i[k]],
                trace.v_meas[k], trace.t_meas[k], [trace.i_meas[k]],
            ])
            writer.writerow([repr(float(x)) for x in row])


def read_trace_csv(path, topology: PackTopology) -> SimTrace:
    """Load a trace CSV; columns must match the topology exactly."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ValueError("missing schema header line")
        schema = first.split(":", 1)[1].strip()
        if schema != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {schema!r}")
        reader = csv.reader(fh)
        header = next(reader)
        expected = trace_columns(topology)
        if header != expected:
            raise ValueError(
                "trace columns do not match topology "
                f"(expected {len(expected)} columns, got {len(header)})")
        data = np.array([[float(x) for x in row] for row in reader])
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("empty trace")
    n, m = topology.n, topology.m
    nm = n * m
    N1 = data.shape[0]
    pos = [0]

    def take(count, shape=None):
        block = data[:, pos[0]:pos[0] + count]
        pos[0] += count
        return block.reshape((N1,) + shape) if shape else block

    time = take(1)[:, 0]
    dt = float(time[1] - time[0]) if N1 > 1 else 1.0
    return SimTrace(
        topology=topology, dt=dt, time=time,
        soc=take(nm, (n, m)), temp=take(nm, (n, m)),
        i_cell=take(nm, (n, m)), f_isc=take(nm, (n, m)),
        f_esc=take(topology.esc_dim),
        f_v=take(topology.n_voltage_sensors),
        f_i=take(1)[:, 0],
        v_meas=take(topology.n_voltage_sensors),
        t_meas=take(topology.n_temp_sensors),
        i_meas=take(1)[:, 0],
    )
