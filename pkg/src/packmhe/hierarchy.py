"""Three-step hierarchical fault diagnosis over a simulated trace.

Step 1 lumps each module into a single cell (see lumping); step 2 runs a
moving-horizon estimator on the lumped pack and flags modules whose fault
channels stay above threshold for a few consecutive windows; step 3 runs
cell-level estimators on the flagged modules only, in parallel, and fuses
everything into a DiagnosisReport.

A monolithic reference mode solves the full cell-level pack in one
estimator instead; it exists to validate the decomposition and refuses
packs beyond a small size.
"""

from __future__ import annotations

import concurrent.futures
import enum
from dataclasses import dataclass, field

import numpy as np

from .estmodels import EstimationModel, full_model, inter_model, intra_model
from .mhe import (MheConfig, MheSolution, MovingHorizonEstimator,
                  SolverOptions, default_solver_options)
from .pack import PackKind, PackTopology
from .simulate import SimTrace

#: simulator channel names, reused for report events so traces and reports
#: speak the same vocabulary
CHANNELS = ("isc", "esc", "voltage_sensor", "current_sensor")


class DrillDown(enum.Enum):
    ON_SUSPICION = "on_suspicion"
    ALWAYS = "always"
    NEVER = "never"


@dataclass(frozen=True)
class SuspicionRule:
    """When a lumped-level estimate counts as evidence of a fault.

    A module is flagged once one of its channels exceeds its threshold for
    `persistence` consecutive solved windows.  Thresholds sit well above
    the solver noise floor at default measurement noise.  Pack-wide
    channels (the current sensor, and the ESC of a parallel-of-strings
    pack) implicate every module.
    """

    isc_threshold: float = 0.2        # [A]
    esc_threshold: float = 0.2        # [A]
    voltage_threshold: float = 0.05   # [V]
    current_threshold: float = 0.2    # [A]
    persistence: int = 2
    drill_down: DrillDown = DrillDown.ON_SUSPICION

    def __post_init__(self):
        if self.persistence < 1:
            raise ValueError("persistence must be >= 1")
        for name in ("isc_threshold", "esc_threshold",
                     "voltage_threshold", "current_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def threshold(self, channel: str) -> float:
        return {"isc": self.isc_threshold,
                "esc": self.esc_threshold,
                "voltage_sensor": self.voltage_threshold,
                "current_sensor": self.current_threshold}[channel]


@dataclass(frozen=True)
class ChannelSpec:
    """One scalar fault channel of an estimation model.

    module is None for pack-wide channels; gain rescales the lumped
    estimate to physical units at the implicated location (a cell-level
    short appears attenuated in a series-lumped string).
    """

    channel: str
    index: int          # position in the model's fault vector
    module: int = None
    gain: float = 1.0


def channel_specs(model: EstimationModel) -> list:
    """Map an inter-module model's fault vector to report channels."""
    specs = []
    for i in range(model.n_isc):
        specs.append(ChannelSpec("isc", i, module=i,
                                 gain=model.isc_suspicion_gain))
    for i in range(model.n_esc):
        module = i if model.n_esc > 1 else None
        if model.topology.kind is PackKind.PARALLEL_SERIES:
            module = i
        specs.append(ChannelSpec("esc", model.n_isc + i, module=module))
    for i in range(model.n_v):
        specs.append(ChannelSpec("voltage_sensor",
                                 model.n_isc + model.n_esc + i, module=i))
    specs.append(ChannelSpec("current_sensor", model.nf - 1, module=None))
    return specs


@dataclass
class SuspicionFlag:
    """One sustained above-threshold observation at one solved window."""

    time: float
    module: int          # None = pack-wide evidence
    channel: str
    value: float         # gain-corrected estimate magnitude
    consecutive: int     # windows the channel has been above threshold


@dataclass
class FaultEventReport:
    """A contiguous span of sustained evidence on one channel."""

    channel: str
    module: int                 # None = pack-wide
    start_time: float           # first flagged window
    end_time: float             # first cleared window; None if still active
    magnitude: float            # median sustained estimate
    cell: int = None            # intra-level localization when available
    cell_margin: float = None   # top/runner-up ratio of |per-cell estimate|
    intra_magnitude: float = None


@dataclass
class DiagnosisReport:
    """Fused output of the hierarchical pipeline."""

    topology: PackTopology
    times: np.ndarray                  # solved window end times
    inter: list                        # MheSolution per window
    flags: list                        # SuspicionFlag, time-ordered
    events: list                       # FaultEventReport
    intra: dict = field(default_factory=dict)   # module -> [(time, sol)]
    failures: list = field(default_factory=list)  # (time, model, status)
    detection_latencies: list = field(default_factory=list)
    mode: str = "hierarchical"

    def flagged_modules(self) -> set:
        mods = set()
        for flag in self.flags:
            if flag.module is not None:
                mods.add(flag.module)
        return mods

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "topology": {"kind": self.topology.kind.value,
                         "n": self.topology.n, "m": self.topology.m},
            "windows_solved": len(self.inter),
            "events": [{
                "channel": e.channel,
                "module": None if e.module is None else e.module + 1,
                "start_time": e.start_time,
                "end_time": e.end_time,
                "magnitude": e.magnitude,
                "cell": None if e.cell is None else e.cell + 1,
                "cell_margin": e.cell_margin,
                "intra_magnitude": e.intra_magnitude,
            } for e in self.events],
            "detection_latencies": [
                {"channel": c, "event_start": s, "latency": lat}
                for c, s, lat in self.detection_latencies],
            "failures": [{"time": t, "model": m, "status": s}
                         for t, m, s in self.failures],
        }

    def estimates_table(self):
        """Per-window inter-module channel estimates as (header, rows)."""
        if not self.inter:
            return ["time"], []
        names = _signal_names(self.inter[0])
        header = ["time"] + names
        rows = [[t] + [float(v) for v in sol.fault_now]
                for t, sol in zip(self.times, self.inter)]
        return header, rows


def _signal_names(solution: MheSolution) -> list:
    return [f"f_{i + 1}" for i in range(len(solution.fault_now))]


def run_inter_module(topology: PackTopology, trace: SimTrace,
                     config: MheConfig = None,
                     solver_options: SolverOptions = None):
    """Solve the lumped pack-level window at every step of the trace.

    Returns (times, solutions): one entry per solved window (the first
    horizon of samples only buffers).  Solver failures are kept in the
    stream; callers inspect solution.converged().
    """
    model = inter_model(topology)
    est = MovingHorizonEstimator(model, config, solver_options)
    times, solutions = [], []
    for k in range(len(trace)):
        sol = est.step(trace.measurement(k), trace.time[k])
        if sol is not None:
            times.append(float(trace.time[k]))
            solutions.append(sol)
    return np.array(times), solutions


def flag_suspects(times, solutions, rule: SuspicionRule,
                  model: EstimationModel):
    """Threshold-with-persistence flagging of the inter-module stream.

    Returns time-ordered SuspicionFlag records.  A record is emitted for
    every window at and after the one where the persistence count is
    reached, for as long as the channel stays above threshold.
    """
    specs = channel_specs(model)
    counts = {id(s): 0 for s in specs}
    flags = []
    for t, sol in zip(times, solutions):
        f = sol.fault_now
        for spec in specs:
            value = abs(float(f[spec.index])) * spec.gain
            if value > rule.threshold(spec.channel):
                counts[id(spec)] += 1
                if counts[id(spec)] >= rule.persistence:
                    flags.append(SuspicionFlag(
                        time=float(t), module=spec.module,
                        channel=spec.channel, value=value,
                        consecutive=counts[id(spec)]))
            else:
                counts[id(spec)] = 0
    return flags


def _events_from_flags(flags, times):
    """Group sustained flags into contiguous FaultEventReport spans."""
    by_key = {}
    for flag in flags:
        by_key.setdefault((flag.channel, flag.module), []).append(flag)
    time_list = [float(t) for t in times]
    events = []
    for (channel, module), group in sorted(
            by_key.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None
                                            else kv[0][1])):
        group = sorted(group, key=lambda fl: fl.time)
        run = [group[0]]
        for flag in group[1:]:
            gap = time_list.index(flag.time) - time_list.index(run[-1].time)
            if gap <= 1:
                run.append(flag)
            else:
                events.append(_close_event(run, time_list, channel, module))
                run = [flag]
        events.append(_close_event(run, time_list, channel, module))
    events.sort(key=lambda e: (e.start_time, e.channel))
    return events


def _close_event(run, time_list, channel, module):
    last_idx = time_list.index(run[-1].time)
    end = time_list[last_idx + 1] if last_idx + 1 < len(time_list) else None
    return FaultEventReport(
        channel=channel, module=module,
        start_time=run[0].time, end_time=end,
        magnitude=float(np.median([fl.value for fl in run])))


def share_series(topology: PackTopology, times, solutions,
                 trace: SimTrace) -> np.ndarray:
    """Per-sample string current shares from the inter-module stage.

    Parallel strings split the pack current according to the lumped
    auxiliary current estimates; samples before the first solved window
    fall back to the uniform split.
    """
    m = topology.m
    shares = np.full((len(trace), m), 1.0 / m)
    solved = {float(t): sol for t, sol in zip(times, solutions)}
    for k in range(len(trace)):
        sol = solved.get(float(trace.time[k]))
        if sol is None:
            continue
        i_total = float(sol.i_load[-1])
        aux = np.asarray(sol.aux[-1], dtype=float)
        if abs(i_total) > 1e-6 and aux.size == m:
            shares[k] = np.clip(aux / i_total, 0.0, 1.0)
    return shares


def run_intra_module(topology: PackTopology, module: int, trace: SimTrace,
                     config: MheConfig = None,
                     solver_options: SolverOptions = None,
                     start_index: int = 0, stop_index: int = None,
                     shares: np.ndarray = None):
    """Cell-level estimation of one module over a slice of the trace.

    Returns [(time, MheSolution)] for each solved window.  For
    parallel-string packs the string's share of the pack current comes
    from `shares` (per sample, from the inter-module stage) or defaults
    to the uniform split.
    """
    model = intra_model(topology, module)
    est = MovingHorizonEstimator(model, config, solver_options)
    stop = len(trace) if stop_index is None else min(stop_index, len(trace))
    out = []
    for k in range(start_index, stop):
        share = None
        if model.uses_share and shares is not None:
            share = float(shares[k][module])
        sol = est.step(trace.measurement(k), trace.time[k], share=share)
        if sol is not None:
            out.append((float(trace.time[k]), sol))
    return out


def _intra_span(events, module, times, horizon_steps):
    """Trace-index range worth drilling into for one module's events."""
    time_list = [float(t) for t in times]
    lo, hi = None, None
    for event in events:
        if event.module is not None and event.module != module:
            continue
        start_idx = time_list.index(event.start_time)
        end_idx = len(time_list) - 1 if event.end_time is None \
            else time_list.index(event.end_time)
        lo = start_idx if lo is None else min(lo, start_idx)
        hi = end_idx if hi is None else max(hi, end_idx)
    if lo is None:
        return None
    return lo, hi + 2


def _localize(events, intra: dict, topology: PackTopology):
    """Attach cell-level localization to ISC events from intra streams."""
    for event in events:
        if event.channel not in ("isc", "current_sensor"):
            continue
        module = event.module
        streams = intra.items() if module is None else \
            [(module, intra.get(module, []))]
        for mod, stream in streams:
            span = [sol for t, sol in stream
                    if t >= event.start_time
                    and (event.end_time is None or t < event.end_time)]
            if not span:
                continue
            if event.channel == "current_sensor":
                vals = [float(sol.fault_now[-1]) for sol in span]
                event.intra_magnitude = float(np.median(vals))
                continue
            # per-cell ISC channels occupy the head of the fault vector
            n_isc = _n_isc_intra(topology)
            isc = np.median(np.abs(
                np.stack([sol.fault_now[:n_isc] for sol in span])), axis=0)
            order = np.argsort(isc)[::-1]
            top = int(order[0])
            event.intra_magnitude = float(isc[top])
            runner = float(isc[order[1]]) if len(isc) > 1 else 0.0
            event.cell_margin = float(isc[top] / max(runner, 1e-12))
            event.cell = _cell_index(topology, mod, top)
    return events


def _n_isc_intra(topology: PackTopology) -> int:
    return topology.m if topology.kind is PackKind.PARALLEL_SERIES \
        else topology.n


def _cell_index(topology: PackTopology, module: int, unit: int) -> int:
    """Flat cell index (row-major over the (n, m) grid) of a module unit."""
    cells = topology.module_cells(module)
    i, j = cells[unit]
    return i * topology.m + j


def monolithic_reference(topology: PackTopology, trace: SimTrace,
                         config: MheConfig = None,
                         solver_options: SolverOptions = None,
                         size_limit: int = 16):
    """Full cell-level pack estimation, for decomposition checks only."""
    if topology.n * topology.m > size_limit:
        raise ValueError(
            f"monolithic reference refuses packs with more than "
            f"{size_limit} cells ({topology.n * topology.m} requested)")
    model = full_model(topology)
    est = MovingHorizonEstimator(model, config, solver_options)
    times, solutions = [], []
    for k in range(len(trace)):
        sol = est.step(trace.measurement(k), trace.time[k])
        if sol is not None:
            times.append(float(trace.time[k]))
            solutions.append(sol)
    return np.array(times), solutions


def diagnose(topology: PackTopology, trace: SimTrace,
             config: MheConfig = None, rule: SuspicionRule = None,
             solver_options: SolverOptions = None, workers: int = None,
             truth=None, mode: str = "hierarchical") -> DiagnosisReport:
    """Run the full pipeline on a trace and fuse the results.

    truth is an optional fault schedule (FaultEvent list) used to report
    detection latencies.  mode="monolithic" replaces the hierarchy with
    the size-guarded full-pack estimator.
    """
    config = config or MheConfig()
    rule = rule or SuspicionRule()

    if mode == "monolithic":
        times, solutions = monolithic_reference(
            topology, trace, config, solver_options)
        model = full_model(topology)
    elif mode == "hierarchical":
        times, solutions = run_inter_module(
            topology, trace, config, solver_options)
        model = inter_model(topology)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    failures = [(float(t), sol.model_name, sol.solver.status.value)
                for t, sol in zip(times, solutions) if not sol.converged()]
    flags = flag_suspects(times, solutions, rule, model)
    events = _events_from_flags(flags, times)

    intra = {}
    if mode == "hierarchical" and rule.drill_down is not DrillDown.NEVER:
        if rule.drill_down is DrillDown.ALWAYS:
            modules = list(range(topology.module_count))
        else:
            modules = sorted({e.module for e in events
                              if e.module is not None})
            if any(e.module is None for e in events):
                modules = list(range(topology.module_count))
        shares = None
        if topology.kind is PackKind.SERIES_PARALLEL and modules:
            shares = share_series(topology, times, solutions, trace)
        H = config.horizon_steps

        def drill(module):
            if rule.drill_down is DrillDown.ALWAYS:
                span = (0, len(trace))
            else:
                span = _intra_span(events, module, times, H)
                if span is None:
                    return module, []
            start = max(0, span[0] - H - 1)
            return module, run_intra_module(
                topology, module, trace, config, solver_options,
                start_index=start, stop_index=span[1], shares=shares)

        if modules:
            pool = concurrent.futures.ThreadPoolExecutor(
                max_workers=workers or len(modules))
            try:
                results = list(pool.map(drill, modules))
            finally:
                pool.shutdown()
            intra = dict(sorted(results))
        events = _localize(events, intra, topology)
        for module, stream in intra.items():
            failures += [(t, sol.model_name, sol.solver.status.value)
                         for t, sol in stream if not sol.converged()]

    latencies = []
    if truth is not None:
        for event in truth:
            hit = [fl for fl in flags
                   if fl.channel == event.channel
                   and fl.time >= event.start_time]
            latency = hit[0].time - event.start_time if hit else None
            latencies.append((event.channel, float(event.start_time),
                              latency))

    failures.sort()
    return DiagnosisReport(
        topology=topology, times=times, inter=solutions, flags=flags,
        events=events, intra=intra, failures=failures,
        detection_latencies=latencies, mode=mode)
