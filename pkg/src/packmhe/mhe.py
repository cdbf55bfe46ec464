"""Windowed fault estimation as a smooth constrained program.

A window of H steps over one estimation model becomes a single-shooting
program: decide the initial state, per-step process noise, per-sample
measurement noise, per-step fault values, auxiliary currents and (in
epigraph mode) one slack per fault group per step.  States inside the
window are reconstructed recursively, so dynamics hold by construction.

Cost: quadratic penalties on process/measurement noise, a quadratic
arrival penalty tying the initial state to a prior, and a group-sparse
penalty on fault *increments* (sum over time of per-group Euclidean
norms), which keeps fault estimates piecewise constant and exactly zero
without faults.  The non-smooth group norm is handled either by epigraph
slacks with smooth cone inequalities or by a smoothed square root.

Constraints: measurement equations for voltage and temperature sensors
(the current sensor instead defines the load current, i_load = i_meas -
f_i - z_i), the model's current-coupling equalities, and pairwise
state-uniformity terms |q_a - q_b| <= delta_soc and |T_a - T_b| <=
delta_temp at every sample of the window — priced in the cost by
default, enforceable as hard inequalities via uniformity_mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

import jax
import jax.numpy as jnp

from .estmodels import EstimationModel
from .nlp import (NlpProblem, SolverOptions, SolverResult, SolverStatus,
                  minimize)
from .pack import Measurement


@dataclass(frozen=True)
class MheConfig:
    """Tuning knobs of the window problem.

    Noise *bounds* here are estimator-side feasibility margins and are
    deliberately looser than the simulation noise: during a fault the
    uniformity constraints clamp the estimated states while the plant
    keeps diverging, and the resulting mismatch has to be absorbable by
    the noise variables.  The *weights* carry the actual information
    content and default to the inverse squared sensor-noise amplitudes.
    """

    horizon_steps: int = 10
    dt: float = 30.0

    # process-noise bounds (per step) and weights; the bounds stay loose so
    # the uniformity clamp can never make a window infeasible, but the
    # weights price w at the true process-noise amplitude — otherwise the
    # thermal ramp of a short circuit could be absorbed for free and a
    # cheap sensor-offset explanation would win
    w_soc_bound: float = 5e-3
    w_temp_bound: float = 0.5
    # the temperature process weight deliberately under-prices the bound:
    # thermal drift between units random-walks at the per-step bound scale,
    # and charging full price for it makes a small sustained short (whose
    # differential heating mimics that walk) the cheaper explanation,
    # which surfaces as phantom fault activity on fault-free noisy data
    q_weight_soc: float = 4.0e6
    q_weight_temp: float = 1.0e3

    # measurement-noise bounds and weights
    z_voltage_bound: float = 0.5
    z_temp_bound: float = 5.0
    z_current_bound: float = 2.0
    r_weight_voltage: float = 4.0e4
    r_weight_temp: float = 4.0e2
    r_weight_current: float = 4.0e2

    # group-sparsity weights on fault increments; the lumped mPnS model
    # cannot separate ISC from ESC (only their sum acts), so ISC is made
    # the more expensive explanation and cell-level estimation settles
    # the attribution
    lambda_isc: float = 2.0
    lambda_esc: float = 1.0
    lambda_sensor: float = 1.0
    per_signal_groups: bool = False
    cone_mode: str = "epigraph"  # or "smooth"
    smooth_eps: float = 1e-4

    # quadratic weight on in-window fault increments; without it an
    # already-active channel absorbs measurement noise with cheap
    # per-sample wiggles (a 0.3 A ripple hides 3 mV of voltage noise at
    # marginal group-norm cost), which shows up as phantom chatter on
    # fault-free noisy data
    smoothness: float = 1.0

    # l1 weight on the voltage-sensor fault *level* (per volt per
    # sample); increments of f_v stay cheap, so the channel still soaks
    # up per-sample voltage noise harmlessly, but a sustained offset —
    # which can mask R times an ampere-scale short indefinitely — now
    # carries a running cost.  Far too small to bias a genuine
    # volt-scale sensor fault
    fv_level_weight: float = 30.0

    # small group-l21 weight on the fault *values* (scale on the group
    # lambdas).  The increment penalty alone leaves levels free, so any
    # self-cancelling combination left over from a cleared fault (e.g. a
    # current-sensor offset plus matching short currents) persists
    # indefinitely at zero cost; a light level charge makes descending
    # to zero strictly cheaper than holding the plateau, while biasing a
    # genuine sustained fault by well under a percent
    level_weight: float = 0.2

    # the group-sparse solve shrinks active fault magnitudes (the penalty
    # trades misfit against the increment norm) and releases cleared
    # faults only geometrically; when a window shows activity, a second
    # "polish" solve re-estimates it with only the detected channels
    # freed at a much smaller group weight and every quiet channel
    # pinned to zero; the threshold sits above the fault-free noise
    # floor so clean windows never trigger a second solve
    polish: bool = True
    polish_threshold: float = 0.4    # channel units (A or V)
    polish_lambda: float = 2.0       # scale on the group weights
    polish_smoothness: float = 1.0   # quadratic weight on increments
    # the polish pass restores full price on thermal process noise: with
    # the channels already attributed, the differential-heating ramp of a
    # short is strong, independent evidence of its magnitude (it carries
    # several times the per-window information of the voltage drop), and
    # the phantom-short concern that motivates the cheap default above
    # does not arise once quiet channels are pinned
    polish_q_weight_temp: float = 1.0e4

    # fault channel bounds (shorts only draw current)
    isc_bounds: tuple = (0.0, 5.0)
    esc_bounds: tuple = (0.0, 10.0)
    fv_bounds: tuple = (-2.0, 2.0)
    fi_bounds: tuple = (-5.0, 5.0)

    # uniformity tolerances across units; a sustained short circuit truly
    # drives the pack outside these tolerances, so enforcing them as hard
    # constraints makes in-fault windows infeasible and biases the fault
    # channels — the default prices violations instead (one-sided
    # quadratic above the tolerance), which keeps the fault-free prior
    # (noise-level gaps never reach the tolerance) without distorting
    # in-fault estimates
    delta_soc: float = 0.005
    delta_temp: float = 0.5
    uniformity_mode: str = "soft"  # or "hard"
    uniformity_weight_soc: float = 50.0
    uniformity_weight_temp: float = 1.0

    arrival_weight: float = 0.01
    soc_box: tuple = (0.0, 1.0)
    temp_box_margin: tuple = (30.0, 150.0)  # below/above ambient
    aux_current_bound: float = 50.0

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.cone_mode not in ("epigraph", "smooth"):
            raise ValueError(f"unknown cone_mode {self.cone_mode!r}")
        if self.uniformity_mode not in ("soft", "hard"):
            raise ValueError(
                f"unknown uniformity_mode {self.uniformity_mode!r}")

    def with_horizon(self, horizon_steps: int) -> "MheConfig":
        return replace(self, horizon_steps=horizon_steps)


def default_solver_options() -> SolverOptions:
    """Solver settings tuned for window problems.

    Equality rows are pre-scaled to noise-amplitude units, so 1e-5
    feasibility means ten millionths of a noise standard amplitude; the
    sparsity-cone rows converge like multiplier/penalty, so tightening the
    tolerance further only forces the penalty into ill-conditioned
    territory for no physical gain.
    """
    return SolverOptions(tol_feasibility=1e-5, tol_stationarity=1e-6,
                         max_outer=30, max_inner=2000,
                         rho_init=100.0, rho_max=1e6,
                         violation_shrink=0.75)


def l21_penalty(delta_f: np.ndarray, groups, lambdas) -> float:
    """Sum over rows and groups of lambda_g * ||delta_f[t, g]||_2."""
    delta_f = np.atleast_2d(np.asarray(delta_f, dtype=float))
    total = 0.0
    for idx, lam in zip(groups, lambdas):
        total += lam * np.sum(np.linalg.norm(delta_f[:, idx], axis=1))
    return float(total)


class WindowLayout:
    """Index map, scaling and bounds of the flat decision vector.

    Order: [x0 | w (H,2K) | z (H+1,nz) | f (H,nf) | s (H,ng) | aux (H+1,na)].
    """

    def __init__(self, model: EstimationModel, config: MheConfig):
        self.model = model
        self.config = config
        H = config.horizon_steps
        K, nz, nf, na = model.K, model.nz, model.nf, model.n_aux
        self.groups = model.fault_groups(config.per_signal_groups)
        self.group_names = model.group_names(config.per_signal_groups)
        self.ng = len(self.groups) if config.cone_mode == "epigraph" else 0
        self.n_s_groups = len(self.groups)

        def block(start, count):
            return slice(start, start + count)

        pos = 0
        self.sl_x0 = block(pos, 2 * K); pos += 2 * K
        self.sl_w = block(pos, H * 2 * K); pos += H * 2 * K
        self.sl_z = block(pos, (H + 1) * nz); pos += (H + 1) * nz
        self.sl_f = block(pos, H * nf); pos += H * nf
        self.sl_s = block(pos, H * self.ng); pos += H * self.ng
        self.sl_aux = block(pos, (H + 1) * na); pos += (H + 1) * na
        self.dim = pos

        # per-group sparsity weights
        lam_by_channel = np.concatenate([
            np.full(model.n_isc, config.lambda_isc),
            np.full(model.n_esc, config.lambda_esc),
            np.full(model.n_v + 1, config.lambda_sensor)])
        self.lambdas = np.array([lam_by_channel[idx[0]] for idx in self.groups])
        # per-channel scale applied inside the penalty norms so every
        # channel is priced in equivalent amperes; without it a few mV of
        # sensor-offset drift (which covers R times an ampere-scale short)
        # is essentially free under weights tuned for current channels
        self.penalty_scale = np.asarray(model.penalty_scale, dtype=float)

        # weights
        self.q_weights = np.concatenate([
            np.full(K, config.q_weight_soc),
            np.full(K, config.q_weight_temp)]) / model.w_scale ** 2
        base_r = np.concatenate([
            np.full(model.nv, config.r_weight_voltage),
            np.full(model.nt, config.r_weight_temp),
            [config.r_weight_current]])
        self.r_weights = base_r / model.z_scale ** 2
        self.arrival_weights = config.arrival_weight * self.q_weights

        # raw per-channel bounds
        w_bound = np.concatenate([
            np.full(K, config.w_soc_bound),
            np.full(K, config.w_temp_bound)]) * model.w_scale
        z_bound = np.concatenate([
            np.full(model.nv, config.z_voltage_bound),
            np.full(model.nt, config.z_temp_bound),
            [config.z_current_bound]]) * model.z_scale
        fv_lo, fv_hi = np.array(config.fv_bounds) * model.fv_bound_scale
        f_lower = np.concatenate([
            np.full(model.n_isc, config.isc_bounds[0]),
            np.full(model.n_esc, config.esc_bounds[0]),
            np.full(model.n_v, fv_lo), [config.fi_bounds[0]]])
        f_upper = np.concatenate([
            np.full(model.n_isc, config.isc_bounds[1]),
            np.full(model.n_esc, config.esc_bounds[1]),
            np.full(model.n_v, fv_hi), [config.fi_bounds[1]]])
        scaled_span = (f_upper - f_lower) * self.penalty_scale
        s_max = 2.0 * np.array([
            np.sqrt(len(idx)) * np.max(scaled_span[idx])
            for idx in self.groups]) if self.ng else np.zeros(0)
        t_lo = model.t_env - config.temp_box_margin[0]
        t_hi = model.t_env + config.temp_box_margin[1]
        x_lower = np.concatenate([np.full(K, config.soc_box[0]),
                                  np.full(K, t_lo)])
        x_upper = np.concatenate([np.full(K, config.soc_box[1]),
                                  np.full(K, t_hi)])

        self.lower_raw = np.concatenate([
            x_lower, np.tile(-w_bound, H), np.tile(-z_bound, H + 1),
            np.tile(f_lower, H), np.zeros(H * self.ng),
            np.full((H + 1) * na, -config.aux_current_bound)])
        self.upper_raw = np.concatenate([
            x_upper, np.tile(w_bound, H), np.tile(z_bound, H + 1),
            np.tile(f_upper, H), np.tile(s_max, H),
            np.full((H + 1) * na, config.aux_current_bound)])

        # variable scaling for solver conditioning: noise variables scale
        # with their cost curvature (1/sqrt(weight)) so the quadratic terms
        # contribute a near-identity Hessian block
        x_scale = np.concatenate([np.full(K, 0.1), np.full(K, 1.0)])
        x_shift = np.concatenate([np.full(K, 0.5), np.full(K, model.t_env)])
        w_scale_dec = 1.0 / np.sqrt(self.q_weights)
        z_scale_dec = 1.0 / np.sqrt(self.r_weights)
        f_scale = np.ones(nf)
        s_scale = np.ones(self.ng)
        self.scale = np.concatenate([
            x_scale, np.tile(w_scale_dec, H), np.tile(z_scale_dec, H + 1),
            np.tile(f_scale, H), np.tile(s_scale, H),
            np.full((H + 1) * na, 1.0)])
        self.shift = np.concatenate([
            x_shift, np.zeros(self.dim - 2 * K)])

        # equality rows are scaled by their inverse noise amplitude so the
        # associated multipliers are O(1) and the penalty loop converges in
        # a few updates at moderate rho
        self.meas_row_scale = np.sqrt(self.r_weights[:model.nv + model.nt])
        self.extra_row_scale = np.array([
            np.sqrt(config.r_weight_current) if kind == "current"
            else np.sqrt(config.r_weight_voltage)
            for kind in model.extra_row_kinds])

        # uniformity pairs over units
        iu, ju = np.triu_indices(K, k=1)
        self.pair_a, self.pair_b = iu, ju
        self.n_pairs = len(iu)

        self.names = self._names(H)

    def _names(self, H):
        model = self.model
        K = model.K
        unit = [f"q_{u + 1}" for u in range(K)] + \
               [f"T_{u + 1}" for u in range(K)]
        f_names = [f"isc_{i + 1}" for i in range(model.n_isc)]
        f_names += [f"esc_{i + 1}" for i in range(model.n_esc)]
        f_names += [f"f_v_{i + 1}" for i in range(model.n_v)] + ["f_i"]
        z_names = [f"z_v_{i + 1}" for i in range(model.nv)]
        z_names += [f"z_T_{i + 1}" for i in range(model.nt)] + ["z_i"]
        names = [f"x0/{u}" for u in unit]
        names += [f"w[{t}]/{u}" for t in range(H) for u in unit]
        names += [f"z[{t}]/{c}" for t in range(H + 1) for c in z_names]
        names += [f"f[{t}]/{c}" for t in range(H) for c in f_names]
        names += [f"s[{t}]/{g}" for t in range(H)
                  for g in (self.group_names if self.ng else [])]
        names += [f"aux[{t}]/i_{j + 1}" for t in range(H + 1)
                  for j in range(model.n_aux)]
        return names

    def to_raw(self, dec):
        return dec * self.scale + self.shift

    def to_scaled(self, raw):
        return (raw - self.shift) / self.scale

    def unpack(self, raw):
        """Raw flat vector -> (x0, w, z, f, s, aux) views."""
        H = self.config.horizon_steps
        model = self.model
        x0 = raw[self.sl_x0]
        w = raw[self.sl_w].reshape(H, 2 * model.K)
        z = raw[self.sl_z].reshape(H + 1, model.nz)
        f = raw[self.sl_f].reshape(H, model.nf)
        s = raw[self.sl_s].reshape(H, self.ng)
        aux = raw[self.sl_aux].reshape(H + 1, model.n_aux)
        return x0, w, z, f, s, aux

    def pack(self, x0, w, z, f, s, aux):
        return np.concatenate([np.ravel(x0), np.ravel(w), np.ravel(z),
                               np.ravel(f), np.ravel(s), np.ravel(aux)])


@dataclass
class MheWindow:
    """Data of one horizon: H+1 measurement rows ending at the current step.

    y rows are model-level [voltages, temperatures, current]; share is the
    exogenous per-sample current share for models that need one.
    """

    times: np.ndarray            # (H+1,) sample times [s]
    y: np.ndarray                # (H+1, nz)
    x_prior: np.ndarray          # (2K,)
    f_prev: np.ndarray           # (nf,) fault estimate just before the window
    share: np.ndarray = None     # (H+1,)
    warm_start_raw: np.ndarray = None
    warm_multipliers: tuple = None

    def horizon(self) -> int:
        return len(self.times) - 1


@dataclass
class MheSolution:
    """Decoded window estimate with independently recomputed residuals."""

    times: np.ndarray
    states: np.ndarray           # (H+1, 2K) reconstructed trajectory
    faults: np.ndarray           # (H, nf)
    w: np.ndarray
    z: np.ndarray
    s: np.ndarray
    aux: np.ndarray
    i_load: np.ndarray           # (H+1,) load current implied by f_i, z_i
    group_activity: np.ndarray   # (H, ng) true increment norms per group
    cost: float
    cost_terms: dict
    eq_residual: float
    ineq_violation: float
    solver: SolverResult
    model_name: str
    startup: bool = False

    @property
    def fault_now(self) -> np.ndarray:
        """Fault estimate at the window's final step."""
        return self.faults[-1]

    def converged(self) -> bool:
        return self.solver.status.value == "converged"


# compiled evaluator cache, keyed by model/config identity and horizon;
# values hold references so ids cannot be recycled underneath the cache
_FN_CACHE = {}


def _window_functions(model: EstimationModel, config: MheConfig):
    key = (id(model), config)
    hit = _FN_CACHE.get(key)
    if hit is not None and hit[0] is model:
        return hit[2], hit[3]

    layout = WindowLayout(model, config)
    H = config.horizon_steps
    K = model.K
    dt = config.dt
    groups = [jnp.asarray(idx) for idx in layout.groups]
    lambdas = layout.lambdas
    rw = jnp.asarray(layout.r_weights)
    aw = jnp.asarray(layout.arrival_weights)
    scale = jnp.asarray(layout.scale)
    shift = jnp.asarray(layout.shift)
    pa, pb = layout.pair_a, layout.pair_b
    epigraph = config.cone_mode == "epigraph"
    hard_uniformity = config.uniformity_mode == "hard"

    def unpack(dec):
        raw = dec * scale + shift
        return layout.unpack(raw)

    def trajectory(x0, w, z, f, aux, y, share):
        f_all = jnp.concatenate([f, f[-1:]], axis=0)
        xs = [x0]
        for t in range(H):
            i_load = model.i_load(f_all[t], z[t], y[t, -1])
            xs.append(model.step(xs[t], f_all[t], aux[t], i_load,
                                 share[t], dt) + w[t])
        return jnp.stack(xs), f_all

    pscale = jnp.asarray(layout.penalty_scale)
    fv_slice = slice(model.n_isc + model.n_esc,
                     model.n_isc + model.n_esc + model.n_v)

    def increments(f, f_prev):
        df = jnp.concatenate([f[:1] - f_prev[None, :], f[1:] - f[:-1]])
        return df * pscale[None, :]

    def uniformity_excess(xs):
        """Pairwise gaps beyond tolerance: (times, pairs) for SoC, temp."""
        dq = jnp.abs(xs[:, pa] - xs[:, pb])
        dtp = jnp.abs(xs[:, K + pa] - xs[:, K + pb])
        return (jnp.maximum(dq - config.delta_soc, 0.0),
                jnp.maximum(dtp - config.delta_temp, 0.0))

    def cost_fn(dec, y, f_prev, x_prior, share, lam_g, dfq, qw):
        x0, w, z, f, s, aux = unpack(dec)
        value = jnp.sum(qw * w * w) + jnp.sum(rw * z * z)
        value += jnp.sum(aw * (x0 - x_prior) ** 2)
        if layout.n_pairs and not hard_uniformity:
            xs, _ = trajectory(x0, w, z, f, aux, y, share)
            eq_excess, et_excess = uniformity_excess(xs)
            value += config.uniformity_weight_soc * jnp.sum(eq_excess ** 2)
            value += config.uniformity_weight_temp * jnp.sum(et_excess ** 2)
        # quadratic smoother over the in-window increments only: the level
        # itself stays free, so unlike the group penalty it neither shrinks
        # sustained faults nor chains them to the previous window
        value += dfq * jnp.sum((f[1:] - f[:-1]) ** 2)
        if model.n_v:
            fv = f[:, fv_slice]
            value += config.fv_level_weight * jnp.sum(
                jnp.sqrt(fv * fv + config.smooth_eps ** 2))
        if config.level_weight:
            fs = f * pscale[None, :]
            for g, idx in enumerate(groups):
                lnorm = jnp.sqrt(jnp.sum(fs[:, idx] ** 2, axis=1)
                                 + config.smooth_eps ** 2)
                value += config.level_weight * lam_g[g] * jnp.sum(lnorm)
        df = increments(f, f_prev)
        if epigraph:
            value += jnp.sum(s * lam_g[None, :])
        else:
            for g, idx in enumerate(groups):
                norms = jnp.sqrt(jnp.sum(df[:, idx] ** 2, axis=1)
                                 + config.smooth_eps ** 2)
                value += lam_g[g] * jnp.sum(norms)
        return value

    meas_row_scale = jnp.asarray(layout.meas_row_scale)
    extra_row_scale = jnp.asarray(layout.extra_row_scale)

    def eq_fn(dec, y, f_prev, x_prior, share, lam_g, dfq, qw):
        x0, w, z, f, s, aux = unpack(dec)
        xs, f_all = trajectory(x0, w, z, f, aux, y, share)
        rows = []
        for t in range(H + 1):
            i_load = model.i_load(f_all[t], z[t], y[t, -1])
            out = model.outputs(xs[t], f_all[t], aux[t], i_load, share[t])
            rows.append((out + z[t, :-1] - y[t, :-1]) * meas_row_scale)
            if model.n_extra:
                rows.append(model.extra_constraints(
                    xs[t], f_all[t], aux[t], i_load, share[t])
                    * extra_row_scale)
        return jnp.concatenate(rows)

    def ineq_fn(dec, y, f_prev, x_prior, share, lam_g, dfq, qw):
        x0, w, z, f, s, aux = unpack(dec)
        xs, f_all = trajectory(x0, w, z, f, aux, y, share)
        rows = []
        if layout.n_pairs and hard_uniformity:
            dq = xs[:, pa] - xs[:, pb]
            dtp = xs[:, K + pa] - xs[:, K + pb]
            rows += [jnp.ravel(dq - config.delta_soc),
                     jnp.ravel(-dq - config.delta_soc),
                     jnp.ravel(dtp - config.delta_temp),
                     jnp.ravel(-dtp - config.delta_temp)]
        if epigraph:
            # smoothed linear cone: nondegenerate at zero increments and
            # with violations measured in fault units, not squared units
            df = increments(f, f_prev)
            for g, idx in enumerate(groups):
                norm = jnp.sqrt(jnp.sum(df[:, idx] ** 2, axis=1)
                                + config.smooth_eps ** 2)
                rows.append(norm - s[:, g])
        if not rows:
            return jnp.zeros(0)
        return jnp.concatenate(rows)

    cost_vg = jax.jit(jax.value_and_grad(cost_fn))
    eq_val = jax.jit(eq_fn)
    ineq_val = jax.jit(ineq_fn)

    def al_fn(dec, lam, mu, rho, y, f_prev, x_prior, share, lam_g, dfq, qw):
        value = cost_fn(dec, y, f_prev, x_prior, share, lam_g, dfq, qw)
        c = eq_fn(dec, y, f_prev, x_prior, share, lam_g, dfq, qw)
        value += lam @ c + 0.5 * rho * jnp.sum(c * c)
        h = ineq_fn(dec, y, f_prev, x_prior, share, lam_g, dfq, qw)
        act = jnp.maximum(mu + rho * h, 0.0)
        value += (jnp.sum(act * act) - jnp.sum(mu * mu)) / (2.0 * rho)
        return value

    al_vg = jax.jit(jax.value_and_grad(al_fn))
    al_hess = jax.jit(jax.jacfwd(jax.grad(al_fn)))

    def make_vjp(fun):
        def vjp_fn(dec, v, y, f_prev, x_prior, share, lam_g, dfq, qw):
            _, pull = jax.vjp(
                lambda d: fun(d, y, f_prev, x_prior, share, lam_g, dfq, qw),
                dec)
            return pull(v)[0]
        return jax.jit(vjp_fn)

    fns = {
        "al": al_vg,
        "al_hess": al_hess,
        "cost": cost_vg,
        "eq": eq_val,
        "eq_vjp": make_vjp(eq_fn),
        "eq_jac": jax.jit(jax.jacrev(eq_fn)),
        "ineq": ineq_val,
        "ineq_vjp": make_vjp(ineq_fn),
        "ineq_jac": jax.jit(jax.jacrev(ineq_fn)),
        "cost_raw": cost_fn,
        "eq_raw": eq_fn,
        "ineq_raw": ineq_fn,
        "trajectory": trajectory,
        "increments": increments,
    }
    _FN_CACHE[key] = (model, config, layout, fns)
    return layout, fns


def _window_data(model, config, window: MheWindow, layout,
                 lambdas=None, df_quad: float = 0.0, q_weights=None):
    H = window.horizon()
    if H != config.horizon_steps:
        raise ValueError(
            f"window has {H} steps but the configuration expects "
            f"{config.horizon_steps}")
    y = np.asarray(window.y, dtype=float)
    if y.shape != (H + 1, model.nz):
        raise ValueError("window measurement shape mismatch")
    share = window.share
    if share is None:
        default = 1.0 / model.topology.m if model.uses_share else 1.0
        share = np.full(H + 1, default)
    lam = layout.lambdas if lambdas is None else np.asarray(lambdas)
    qw = layout.q_weights if q_weights is None else np.asarray(q_weights)
    return (jnp.asarray(y), jnp.asarray(window.f_prev, dtype=float),
            jnp.asarray(window.x_prior, dtype=float),
            jnp.asarray(share, dtype=float),
            jnp.asarray(lam, dtype=float), jnp.asarray(float(df_quad)),
            jnp.asarray(qw, dtype=float))


def initial_multipliers(model, config, layout, lambdas=None) -> tuple:
    """Multiplier guess for a cold solve.

    Equality and uniformity multipliers start at zero, but the sparsity
    cones are always active at a solution (the slack is pressed onto the
    cone), where their multiplier equals the group weight.  Starting there
    keeps the slacks interior from the first outer iteration instead of
    waiting for the multiplier iteration to crawl up to the weight.
    """
    H = config.horizon_steps
    n_uniformity = 4 * layout.n_pairs * (H + 1) \
        if config.uniformity_mode == "hard" else 0
    mu = [np.zeros(n_uniformity)]
    lam_g = layout.lambdas if lambdas is None else np.asarray(lambdas)
    if config.cone_mode == "epigraph":
        mu += [np.full(H, lam) for lam in lam_g]
    return None, np.concatenate(mu)


def default_warm_start(model, config, layout, window) -> np.ndarray:
    """Raw-coordinate initial guess from the measurements alone."""
    H = window.horizon()
    y = np.asarray(window.y, dtype=float)
    x0 = np.asarray(window.x_prior, dtype=float)
    w = np.zeros((H, 2 * model.K))
    z = np.zeros((H + 1, model.nz))
    f = np.tile(np.asarray(window.f_prev, dtype=float), (H, 1))
    s = np.zeros((H, layout.ng))
    aux = np.stack([model.aux_guess(y[t]) for t in range(H + 1)])
    return layout.pack(x0, w, z, f, s, aux)


def build(model: EstimationModel, window: MheWindow, config: MheConfig,
          lambdas=None, df_quad: float = 0.0,
          fault_mask=None, q_weights=None) -> NlpProblem:
    """Assemble the window as a scaled NlpProblem with analytic derivatives.

    lambdas overrides the per-group sparsity weights, df_quad adds a
    quadratic penalty on fault increments, and q_weights overrides the
    process-noise weights (all used by the polish pass).  fault_mask,
    when given, pins every channel marked False to zero for the whole
    window.
    """
    layout, fns = _window_functions(model, config)
    data = _window_data(model, config, window, layout, lambdas, df_quad,
                        q_weights)

    def cost(x):
        v, g = fns["cost"](jnp.asarray(x), *data)
        return float(v), np.asarray(g)

    def aug_lagrangian(x, lam, mu, rho):
        v, g = fns["al"](jnp.asarray(x), jnp.asarray(lam), jnp.asarray(mu),
                         float(rho), *data)
        return float(v), np.asarray(g)

    lower_raw = layout.lower_raw
    upper_raw = layout.upper_raw
    if fault_mask is not None:
        mask = ~np.tile(np.asarray(fault_mask, dtype=bool),
                        config.horizon_steps)
        lower_raw = lower_raw.copy()
        upper_raw = upper_raw.copy()
        lower_raw[layout.sl_f][mask] = 0.0
        upper_raw[layout.sl_f][mask] = 0.0

    raw0 = window.warm_start_raw
    if raw0 is None:
        raw0 = default_warm_start(model, config, layout, window)
    x0 = np.clip(layout.to_scaled(raw0),
                 layout.to_scaled(lower_raw),
                 layout.to_scaled(upper_raw))

    return NlpProblem(
        dim=layout.dim,
        cost=cost,
        x0=x0,
        eq=lambda x: np.asarray(fns["eq"](jnp.asarray(x), *data)),
        eq_vjp=lambda x, v: np.asarray(
            fns["eq_vjp"](jnp.asarray(x), jnp.asarray(v), *data)),
        eq_jac=lambda x: np.asarray(fns["eq_jac"](jnp.asarray(x), *data)),
        ineq=lambda x: np.asarray(fns["ineq"](jnp.asarray(x), *data)),
        ineq_vjp=lambda x, v: np.asarray(
            fns["ineq_vjp"](jnp.asarray(x), jnp.asarray(v), *data)),
        ineq_jac=lambda x: np.asarray(fns["ineq_jac"](jnp.asarray(x), *data)),
        lower=layout.to_scaled(lower_raw),
        upper=layout.to_scaled(upper_raw),
        names=layout.names,
        aug_lagrangian=aug_lagrangian,
        aug_hessian=lambda x, lam, mu, rho: np.asarray(
            fns["al_hess"](jnp.asarray(x), jnp.asarray(lam), jnp.asarray(mu),
                           float(rho), *data)),
    )


def decode(model: EstimationModel, window: MheWindow, config: MheConfig,
           result: SolverResult, lambdas=None,
           df_quad: float = 0.0, q_weights=None) -> MheSolution:
    """Unscale a solver result and recompute cost terms and residuals."""
    layout, fns = _window_functions(model, config)
    lam_g = layout.lambdas if lambdas is None else np.asarray(lambdas)
    qw_eff = layout.q_weights if q_weights is None else np.asarray(q_weights)
    H = window.horizon()
    raw = layout.to_raw(np.asarray(result.x, dtype=float))
    x0, w, z, f, s, aux = layout.unpack(raw)

    share = window.share
    if share is None:
        default = 1.0 / model.topology.m if model.uses_share else 1.0
        share = np.full(H + 1, default)
    y = np.asarray(window.y, dtype=float)

    # eager (untraced) re-evaluation, independent of the solver's report
    xs, f_all = fns["trajectory"](jnp.asarray(x0), jnp.asarray(w),
                                  jnp.asarray(z), jnp.asarray(f),
                                  jnp.asarray(aux), jnp.asarray(y),
                                  jnp.asarray(share))
    xs = np.asarray(xs)
    f_all = np.asarray(f_all)
    i_load = y[:, -1] - f_all[:, -1] - z[:, -1]

    df = np.vstack([f[:1] - window.f_prev[None, :], np.diff(f, axis=0)])
    df = df * layout.penalty_scale[None, :]
    activity = np.stack(
        [np.linalg.norm(df[:, idx], axis=1) for idx in layout.groups],
        axis=1)

    terms = {
        "process": float(np.sum(qw_eff * w * w)),
        "measurement": float(np.sum(layout.r_weights * z * z)),
        "arrival": float(np.sum(layout.arrival_weights
                                * (x0 - window.x_prior) ** 2)),
    }
    if layout.n_pairs and config.uniformity_mode == "soft":
        K = model.K
        dq = np.abs(xs[:, layout.pair_a] - xs[:, layout.pair_b])
        dtp = np.abs(xs[:, K + layout.pair_a] - xs[:, K + layout.pair_b])
        terms["uniformity"] = float(
            config.uniformity_weight_soc
            * np.sum(np.maximum(dq - config.delta_soc, 0.0) ** 2)
            + config.uniformity_weight_temp
            * np.sum(np.maximum(dtp - config.delta_temp, 0.0) ** 2))
    if df_quad:
        terms["smoothing"] = float(
            df_quad * np.sum(np.diff(f, axis=0) ** 2))
    if model.n_v:
        fv_block = f[:, model.n_isc + model.n_esc:
                     model.n_isc + model.n_esc + model.n_v]
        terms["sensor_level"] = float(
            config.fv_level_weight * np.sum(
                np.sqrt(fv_block ** 2 + config.smooth_eps ** 2)))
    if config.level_weight:
        fs = f * layout.penalty_scale[None, :]
        terms["level"] = float(sum(
            config.level_weight * lam * np.sum(
                np.sqrt(np.sum(fs[:, idx] ** 2, axis=1)
                        + config.smooth_eps ** 2))
            for idx, lam in zip(layout.groups, lam_g)))
    if config.cone_mode == "epigraph":
        terms["sparsity"] = float(np.sum(s * lam_g[None, :]))
    else:
        terms["sparsity"] = float(sum(
            lam * np.sum(np.sqrt(np.sum(df[:, idx] ** 2, axis=1)
                                 + config.smooth_eps ** 2))
            for idx, lam in zip(layout.groups, lam_g)))

    data = _window_data(model, config, window, layout, lambdas, df_quad,
                        q_weights)
    eq = np.asarray(fns["eq_raw"](jnp.asarray(result.x), *data))
    ineq = np.asarray(fns["ineq_raw"](jnp.asarray(result.x), *data))
    eq_res = float(np.max(np.abs(eq))) if eq.size else 0.0
    ineq_res = float(np.max(np.maximum(ineq, 0.0))) if ineq.size else 0.0

    return MheSolution(
        times=np.asarray(window.times, dtype=float),
        states=xs, faults=np.asarray(f), w=np.asarray(w), z=np.asarray(z),
        s=np.asarray(s), aux=np.asarray(aux), i_load=i_load,
        group_activity=activity,
        cost=sum(terms.values()), cost_terms=terms,
        eq_residual=eq_res, ineq_violation=ineq_res,
        solver=result, model_name=model.name)


def advance(window: MheWindow, solution: MheSolution, layout: WindowLayout,
            new_time: float, new_y: np.ndarray,
            new_share: float = None) -> MheWindow:
    """Slide the window one step using the previous solution.

    The prior becomes the previous estimate at the window's second sample,
    the fault chain is anchored at the estimate that drops off the back,
    and the warm start is the previous solution shifted by one step.
    """
    H = window.horizon()
    times = np.concatenate([window.times[1:], [new_time]])
    y = np.vstack([window.y[1:], new_y[None, :]])
    share = None
    if window.share is not None or new_share is not None:
        old = window.share
        if old is None:
            old = np.full(H + 1, 1.0)
        tail = old[-1] if new_share is None else new_share
        share = np.concatenate([old[1:], [tail]])

    w = np.vstack([solution.w[1:], solution.w[-1:]])
    z = np.vstack([solution.z[1:], solution.z[-1:]])
    f = np.vstack([solution.faults[1:], solution.faults[-1:]])
    s = np.vstack([solution.s[1:], solution.s[-1:]]) if solution.s.size \
        else np.zeros((H, 0))
    aux = np.vstack([solution.aux[1:], solution.aux[-1:]])
    warm = layout.pack(solution.states[1], w, z, f, s, aux)

    return MheWindow(
        times=times, y=y, x_prior=solution.states[1].copy(),
        f_prev=solution.faults[0].copy(), share=share,
        warm_start_raw=warm,
        warm_multipliers=(solution.solver.eq_multipliers,
                          solution.solver.ineq_multipliers))


def dump_problem(model: EstimationModel, config: MheConfig,
                 window: MheWindow = None) -> dict:
    """JSON-serializable description of the window program."""
    layout, _ = _window_functions(model, config)
    H = config.horizon_steps
    blocks = {
        "x0": [layout.sl_x0.start, layout.sl_x0.stop],
        "w": [layout.sl_w.start, layout.sl_w.stop],
        "z": [layout.sl_z.start, layout.sl_z.stop],
        "f": [layout.sl_f.start, layout.sl_f.stop],
        "s": [layout.sl_s.start, layout.sl_s.stop],
        "aux": [layout.sl_aux.start, layout.sl_aux.stop],
    }
    constraints = []
    for t in range(H + 1):
        constraints.append({"kind": "measurement", "time_index": t,
                            "rows": model.nv + model.nt})
        if model.n_extra:
            constraints.append({"kind": "current_coupling", "time_index": t,
                                "rows": model.n_extra})
    if layout.n_pairs:
        constraints.append({"kind": "soc_uniformity",
                            "mode": config.uniformity_mode,
                            "pairs": int(layout.n_pairs),
                            "times": H + 1, "tolerance": config.delta_soc})
        constraints.append({"kind": "temp_uniformity",
                            "mode": config.uniformity_mode,
                            "pairs": int(layout.n_pairs),
                            "times": H + 1, "tolerance": config.delta_temp})
    if layout.ng:
        constraints.append({"kind": "group_cone",
                            "groups": layout.group_names, "times": H})
    doc = {
        "model": model.name,
        "horizon_steps": H,
        "dimension": layout.dim,
        "variables": layout.names,
        "blocks": blocks,
        "bounds": {"lower": layout.lower_raw.tolist(),
                   "upper": layout.upper_raw.tolist()},
        "constraints": constraints,
        "cost": {
            "process_weights": layout.q_weights.tolist(),
            "measurement_weights": layout.r_weights.tolist(),
            "arrival_weights": layout.arrival_weights.tolist(),
            "group_lambdas": layout.lambdas.tolist(),
            "groups": [idx.tolist() for idx in layout.groups],
            "cone_mode": config.cone_mode,
        },
    }
    json.dumps(doc)  # guarantee serializability
    return doc


class MovingHorizonEstimator:
    """Streaming wrapper: feed one measurement per step, get window solves.

    Until a full horizon of samples has accumulated the estimator only
    buffers (returning None) unless solve_startup is set, in which case
    shortened windows are solved and flagged as startup solutions.
    """

    def __init__(self, model: EstimationModel, config: MheConfig = None,
                 solver_options: SolverOptions = None,
                 solve_startup: bool = False):
        self.model = model
        self.config = config or MheConfig()
        self.solver_options = solver_options or default_solver_options()
        self.solve_startup = solve_startup
        self._rows = []      # (time, y_row, share)
        self._window = None
        self.last_solution = None
        self.solutions = []

    def extract_row(self, measurement: Measurement) -> np.ndarray:
        return self.model.extract_y(
            np.asarray(measurement.voltages, dtype=float),
            np.asarray(measurement.temperatures, dtype=float),
            float(measurement.pack_current))

    def step(self, measurement: Measurement, time: float,
             share: float = None) -> MheSolution:
        """Ingest one sample; solve once a full window is available."""
        y_row = self.extract_row(measurement)
        default = 1.0 / self.model.topology.m if self.model.uses_share \
            else 1.0
        self._rows.append((float(time), y_row,
                           default if share is None else float(share)))
        H = self.config.horizon_steps

        if len(self._rows) <= H:
            if not self.solve_startup or len(self._rows) < 2:
                return None
            sol = self._solve_cold(self.config.with_horizon(
                len(self._rows) - 1), startup=True)
            return sol

        if self._window is None:
            solution = self._solve_cold(self.config, startup=False)
        else:
            layout, _ = _window_functions(self.model, self.config)
            self._window = advance(self._window, self.last_solution, layout,
                                   self._rows[-1][0], y_row,
                                   new_share=self._rows[-1][2])
            solution = self._solve(self._window, self.config, startup=False)
        self._rows = self._rows[-(H + 1):]
        return solution

    def _solve_cold(self, config: MheConfig, startup: bool) -> MheSolution:
        rows = self._rows[-(config.horizon_steps + 1):]
        times = np.array([r[0] for r in rows])
        y = np.stack([r[1] for r in rows])
        share = np.array([r[2] for r in rows]) if self.model.uses_share \
            else None
        window = MheWindow(
            times=times, y=y,
            x_prior=self.model.initial_state_guess(y[0]),
            f_prev=np.zeros(self.model.nf), share=share)
        return self._solve(window, config, startup)

    def _solve(self, window: MheWindow, config: MheConfig,
               startup: bool) -> MheSolution:
        problem = build(self.model, window, config,
                        df_quad=config.smoothness)
        layout, _ = _window_functions(self.model, config)
        mults0 = initial_multipliers(self.model, config, layout)
        # equality multipliers chain well between windows; the cone
        # multipliers are always restarted at their known optimum (the
        # group weight), which the chain would otherwise overwrite with
        # whatever the previous pass ended on
        eq_warm = None
        if window.warm_multipliers is not None:
            eq_warm = window.warm_multipliers[0]
        result = minimize(problem, self.solver_options,
                          warm_multipliers=(eq_warm, mults0[1]))
        solution = decode(self.model, window, config, result,
                          df_quad=config.smoothness)
        reported = solution

        # the polish readout never feeds back into the window chain: the
        # sparse solution keeps anchoring the next window, so one freed
        # re-estimate cannot compound into estimator drift
        if config.polish and result.status is SolverStatus.CONVERGED:
            active = np.max(np.abs(solution.faults), axis=0) \
                > config.polish_threshold
            if active.any():
                polished = self._polish(window, config, layout, result,
                                        active)
                if polished is not None:
                    reported = polished

        solution.startup = startup
        reported.startup = startup
        if not startup:
            self._window = window
            self.last_solution = solution
            self.solutions.append(reported)
        return reported

    def _polish(self, window, config, layout, result, active):
        """Debias a window with detected activity.

        Re-solves with the active channels nearly free (tiny group weight
        plus a quadratic increment smoother) and the quiet channels pinned
        to zero, warm-started from the sparse solution.  Returns None when
        the polish pass fails to converge.
        """
        lam = layout.lambdas * config.polish_lambda
        dfq = config.polish_smoothness
        K = self.model.K
        qw = layout.q_weights.copy()
        qw[K:] = config.polish_q_weight_temp / self.model.w_scale[K:] ** 2
        warm = replace(window, warm_start_raw=layout.to_raw(result.x),
                       warm_multipliers=None)
        prob = build(self.model, warm, config, lambdas=lam, df_quad=dfq,
                     fault_mask=active, q_weights=qw)
        mults = initial_multipliers(self.model, config, layout, lambdas=lam)
        res = minimize(prob, self.solver_options,
                       warm_multipliers=(result.eq_multipliers, mults[1]))
        if res.status is not SolverStatus.CONVERGED:
            return None
        return decode(self.model, warm, config, res, lambdas=lam,
                      df_quad=dfq, q_weights=qw)
