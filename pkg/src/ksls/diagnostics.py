"""Identity residuals, comparison margins, and energy functionals.

Margins follow one convention: margin >= 0 means the corresponding bound
holds.  Checks whose derivations need a monotone non-decreasing motility
(the primitive comparison and the mean-motility bound) are only evaluated in
that regime and reported as NaN otherwise, so that configurations outside
their hypotheses do not produce spurious "violations".

Two flavors of the smoothed-density rate identity are reported:

* ``rate_resid_staged`` re-uses the drive field actually applied by the
  integrator, so it only sees linear-solver residuals and is dt-independent;
* ``rate_resid`` rebuilds the drive from the snapshot itself
  (gamma(v)*u at the new time level) and therefore carries the O(dt) lag of
  the motility linearization -- it measures how fast the scheme approaches
  the continuous-time identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dataclass_fields
from typing import Optional

import numpy as np

from .evolution import SolverConfig, State, Trajectory
from .grid import Field
from .motility import big_gamma
from .operators import NeumannOperators, face_averages, face_differences, grad_linf


def _linf(vals: np.ndarray) -> float:
    return float(np.abs(vals).max())


def _meanfree(grid, vals: np.ndarray) -> Field:
    """Project the mean out twice.

    One pass leaves a residual mean of order eps times the magnitude of the
    original entries, which for a machine-level fluctuation field is
    comparable to the field itself; the second pass removes it.
    """
    z = vals - vals.mean()
    z = z - z.mean()
    return Field(grid, z)


def key_identity_residual(state: State, tau: float) -> float:
    """Sup-norm of u_smooth + tau*drive_heat - v - tau*drive_heat_smooth - mismatch."""
    r = (state.u_smooth.values + tau * state.drive_heat.values
         - state.v.values - tau * state.drive_heat_smooth.values
         - state.mismatch_decay.values)
    return _linf(r)


def identity_scale(state: State, tau: float) -> float:
    return (_linf(state.u_smooth.values)
            + tau * _linf(state.drive_heat.values)
            + _linf(state.v.values))


def staged_rate_residual(prev: State, cur: State, config: SolverConfig,
                         ops: NeumannOperators) -> float:
    """Rate identity with the integrator's own drive; solver-level exact."""
    if cur.drive is None:
        raise ValueError("state carries no drive field (initial state?)")
    g = cur.drive.values
    smoothed = ops.helmholtz_solve(cur.drive).values
    r = (cur.u_smooth.values - prev.u_smooth.values) / config.dt + g - smoothed
    return _linf(r)


def instant_rate_residual(prev: State, cur: State, config: SolverConfig,
                          ops: NeumannOperators) -> float:
    """Rate identity with the instantaneous drive gamma(v)*u at the new level.

    Carries the O(dt) motility lag; shrinks at first order under dt
    refinement while the staged variant stays at solver level.
    """
    g = Field(cur.grid, config.motility.eval(cur.v.values) * cur.u.values)
    smoothed = ops.helmholtz_solve(g).values
    r = (cur.u_smooth.values - prev.u_smooth.values) / config.dt + g.values - smoothed
    return _linf(r)


def psi_ode_residual(prev: State, cur: State, config: SolverConfig) -> float:
    """Residual of tau*(d/dt)|drive_heat|_1 + |drive_heat|_1 = integral(drive)."""
    if cur.drive is None:
        raise ValueError("state carries no drive field (initial state?)")
    vol = cur.grid.cell_volume
    l1_new = float(np.abs(cur.drive_heat.values).sum() * vol)
    l1_old = float(np.abs(prev.drive_heat.values).sum() * vol)
    drive_int = float(cur.drive.values.sum() * vol)
    return config.tau * (l1_new - l1_old) / config.dt + l1_new - drive_int


# -- comparison margins ---------------------------------------------------------


def gap_margins(state: State, tau: float) -> tuple[float, float]:
    """Two one-sided bounds on u_smooth + tau*drive_heat vs v + tau*smoothed.

    The gap between those combinations equals the decaying mismatch field, so
    each side is bounded by max(|u^in|_inf, |v^in|_inf).
    """
    gap = (state.u_smooth.values + tau * state.drive_heat.values
           - state.v.values - tau * state.drive_heat_smooth.values)
    bound = state.eta_bound
    return float((bound + gap).min()), float((bound - gap).min())


def gamma_vin_linf_at_floor(state: State, config: SolverConfig) -> float:
    """max Gamma(v^in) re-based to the current running floor.

    Lowering the floor from the initial min(v^in) to the running minimum
    shifts the primitive by the constant integral of gamma between the two
    floors, for the initial field and the current one alike.
    """
    shift = 0.0
    if state.v_running_min < state.v_in_min:
        shift = float(big_gamma(config.motility, state.v_in_min,
                                state.v_running_min))
    return state.gamma_vin_linf + shift


def primitive_comparison_margin(state: State, config: SolverConfig) -> float:
    """min over cells of drive_heat + max Gamma(v^in) - Gamma(v).

    Valid for monotone non-decreasing motility; the primitive of gamma is
    then convex, so the discrete bound only degrades by the O(dt) motility
    lag.
    """
    floor = state.v_running_min
    gam_v = big_gamma(config.motility, state.v.values, floor)
    c = gamma_vin_linf_at_floor(state, config)
    return float((state.drive_heat.values + c - gam_v).min())


def motility_l1_margin(state: State, config: SolverConfig) -> float:
    """Margin of m*|gamma(v)|_1 <= int (gamma(v)-gamma(m))(v-m) + m|O|gamma(2m)."""
    mf = config.motility
    vol = state.grid.cell_volume
    m = state.m
    gam_v = np.asarray(mf.eval(state.v.values), dtype=np.float64)
    gam_m = float(mf.eval(np.float64(m)))
    gam_2m = float(mf.eval(np.float64(2.0 * m)))
    pairing = float(((gam_v - gam_m) * (state.v.values - m)).sum() * vol)
    l1_gam = float(np.abs(gam_v).sum() * vol)
    return pairing + m * state.grid.volume * gam_2m - m * l1_gam


# -- energy functionals ---------------------------------------------------------


def lyapunov_value(state: State, config: SolverConfig, ops: NeumannOperators,
                   floor: Optional[float] = None) -> float:
    """0.5|grad K[u - <u>]|_2^2 + m*tau*|Gamma(v)|_1 - m*gamma(m)*tau*|v|_1.

    The Poisson source uses the current mean of u (mass conservation keeps it
    within roundoff of m); ``floor`` pins the primitive's base point so that
    consecutive evaluations can share one base.
    """
    if floor is None:
        floor = state.v_running_min
    vol = state.grid.cell_volume
    m = state.m
    tau = config.tau
    z = _meanfree(state.grid, state.u.values)
    dir_term = 0.5 * ops.dirichlet_energy(z)
    gam_v = big_gamma(config.motility, state.v.values, floor)
    gamma_l1 = float(np.abs(gam_v).sum() * vol)
    v_l1 = float(np.abs(state.v.values).sum() * vol)
    gam_m = float(config.motility.eval(np.float64(m)))
    return dir_term + m * tau * gamma_l1 - m * gam_m * tau * v_l1


@dataclass(frozen=True)
class DissipationTerms:
    grad_term: float
    variance_term: float
    mean_term: float

    @property
    def total(self) -> float:
        return self.grad_term + self.variance_term + self.mean_term


def dissipation(state: State, config: SolverConfig) -> DissipationTerms:
    """The three dissipation integrals; each is non-negative for monotone gamma.

    The gradient integral uses face-centered differences with the motility
    derivative evaluated at face midpoints, matching the operator stencil.
    """
    mf = config.motility
    vol = state.grid.cell_volume
    m = state.m
    grad_term = 0.0
    diffs = face_differences(state.v)
    means = face_averages(state.v)
    for d, vm in zip(diffs, means):
        gp = np.asarray(mf.deriv(vm), dtype=np.float64)
        grad_term += float((gp * d * d).sum() * vol)
    grad_term *= m
    gam_v = np.asarray(mf.eval(state.v.values), dtype=np.float64)
    du = state.u.values - m
    variance_term = float((gam_v * du * du).sum() * vol)
    gam_m = float(mf.eval(np.float64(m)))
    mean_term = m * float(((state.v.values - m) * (gam_v - gam_m)).sum() * vol)
    return DissipationTerms(grad_term, variance_term, mean_term)


def coupling_functional(state: State, config: SolverConfig,
                        ops: NeumannOperators) -> float:
    """|grad K[u - <u>]|_2^2 + 0.5 int u*(tau*smoothed - u_smooth + K0) + tau*|Psi|_1.

    Non-negative once K0 is the running floor constant carried by the state.
    """
    vol = state.grid.cell_volume
    tau = config.tau
    z = _meanfree(state.grid, state.u.values)
    dir_term = ops.dirichlet_energy(z)
    shifted = (tau * state.drive_heat_smooth.values - state.u_smooth.values
               + state.k0_running)
    mid_term = 0.5 * float((state.u.values * shifted).sum() * vol)
    psi_l1 = float(np.abs(state.drive_heat.values).sum() * vol)
    return dir_term + mid_term + tau * psi_l1


# -- record assembly ------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    mass_u: float
    l1_v: float
    linf_u: float
    linf_v: float
    min_u: float
    min_v: float
    identity_resid: float
    rate_resid: float
    rate_resid_staged: float
    psi_ode_resid: float
    eta_linf: float
    eta_margin: float
    gap_margin_low: float
    gap_margin_high: float
    primitive_margin: float
    motility_margin: float
    lyapunov: float
    dissipation_grad: float
    dissipation_variance: float
    dissipation_mean: float
    dissipation_total: float
    lyapunov_resid: float
    psi_l1: float
    coupling_f: float
    coupling_floor: float
    grad_v_linf: float
    u_dev_linf: float
    v_dev_linf: float


CSV_COLUMNS: tuple[str, ...] = tuple(
    f.name for f in dataclass_fields(DiagnosticsRecord))


def convergence_metrics(state: State) -> dict:
    """Distance from the homogeneous steady state (m, m)."""
    u_dev = _linf(state.u.values - state.m)
    v_dev = _linf(state.v.values - state.m)
    return {
        "u_dev_linf": u_dev,
        "v_dev_linf": v_dev,
        "grad_v_linf": grad_linf(state.v),
    }


def snapshot_record(state: State, prev: Optional[State], config: SolverConfig,
                    ops: NeumannOperators, monotone: bool) -> DiagnosticsRecord:
    """Evaluate every per-snapshot diagnostic; rate residuals need ``prev``."""
    vol = state.grid.cell_volume
    u = state.u.values
    v = state.v.values
    tau = config.tau
    eta_linf = _linf(state.mismatch_decay.values)
    margin_low, margin_high = gap_margins(state, tau)
    if monotone:
        prim_margin = primitive_comparison_margin(state, config)
        mot_margin = motility_l1_margin(state, config)
    else:
        prim_margin = math.nan
        mot_margin = math.nan
    diss = dissipation(state, config)
    lyap = lyapunov_value(state, config, ops)
    if prev is not None and state.drive is not None:
        rate_staged = staged_rate_residual(prev, state, config, ops)
        rate_inst = instant_rate_residual(prev, state, config, ops)
        ode_resid = psi_ode_residual(prev, state, config)
        lyap_prev = lyapunov_value(prev, config, ops, floor=state.v_running_min)
        lyap_resid = (lyap - lyap_prev) / config.dt + diss.total
    else:
        rate_staged = math.nan
        rate_inst = math.nan
        ode_resid = math.nan
        lyap_resid = math.nan
    conv = convergence_metrics(state)
    return DiagnosticsRecord(
        t=state.t,
        mass_u=float(u.sum() * vol),
        l1_v=float(np.abs(v).sum() * vol),
        linf_u=_linf(u),
        linf_v=_linf(v),
        min_u=float(u.min()),
        min_v=float(v.min()),
        identity_resid=key_identity_residual(state, tau),
        rate_resid=rate_inst,
        rate_resid_staged=rate_staged,
        psi_ode_resid=ode_resid,
        eta_linf=eta_linf,
        eta_margin=state.eta_bound - eta_linf,
        gap_margin_low=margin_low,
        gap_margin_high=margin_high,
        primitive_margin=prim_margin,
        motility_margin=mot_margin,
        lyapunov=lyap,
        dissipation_grad=diss.grad_term,
        dissipation_variance=diss.variance_term,
        dissipation_mean=diss.mean_term,
        dissipation_total=diss.total,
        lyapunov_resid=lyap_resid,
        psi_l1=float(np.abs(state.drive_heat.values).sum() * vol),
        coupling_f=coupling_functional(state, config, ops),
        coupling_floor=state.k0_running,
        grad_v_linf=conv["grad_v_linf"],
        u_dev_linf=conv["u_dev_linf"],
        v_dev_linf=conv["v_dev_linf"],
    )


def trajectory_records(traj: Trajectory, ops: NeumannOperators,
                       monotone: bool) -> list[DiagnosticsRecord]:
    return [
        snapshot_record(state, prev, traj.config, ops, monotone)
        for state, prev in zip(traj.snapshots, traj.snapshot_prevs)
    ]


def make_step_hook(config: SolverConfig, ops: NeumannOperators, monotone: bool,
                   with_rate: bool = False):
    """Per-step hook for evolution.run adding energy/margin series entries.

    The Lyapunov pair (current, previous) is evaluated with one shared
    primitive base point so the difference quotient is float-consistent.
    ``with_rate`` additionally tracks the rate-identity residuals per step
    (one extra Helmholtz solve each), which dt-refinement studies need since
    their transient peak sits at the very first steps.
    """

    def hook(prev: Optional[State], state: State) -> dict:
        diss = dissipation(state, config)
        lyap = lyapunov_value(state, config, ops)
        entry = {
            "lyapunov": lyap,
            "dissipation_grad": diss.grad_term,
            "dissipation_variance": diss.variance_term,
            "dissipation_mean": diss.mean_term,
            "dissipation_total": diss.total,
            "coupling_f": coupling_functional(state, config, ops),
            "grad_v_linf": grad_linf(state.v),
            "u_dev_linf": _linf(state.u.values - state.m),
            "v_dev_linf": _linf(state.v.values - state.m),
        }
        low, high = gap_margins(state, config.tau)
        entry["gap_margin_low"] = low
        entry["gap_margin_high"] = high
        entry["eta_margin"] = state.eta_bound - _linf(state.mismatch_decay.values)
        if monotone:
            entry["primitive_margin"] = primitive_comparison_margin(state, config)
            entry["motility_margin"] = motility_l1_margin(state, config)
        else:
            entry["primitive_margin"] = math.nan
            entry["motility_margin"] = math.nan
        if prev is not None:
            lyap_prev = lyapunov_value(prev, config, ops, floor=state.v_running_min)
            entry["lyapunov_resid"] = (lyap - lyap_prev) / config.dt + diss.total
            entry["lyapunov_prev"] = lyap_prev
        else:
            entry["lyapunov_resid"] = math.nan
            entry["lyapunov_prev"] = math.nan
        if with_rate:
            if prev is not None:
                entry["rate_resid"] = instant_rate_residual(prev, state, config, ops)
                entry["rate_resid_staged"] = staged_rate_residual(prev, state, config, ops)
            else:
                entry["rate_resid"] = math.nan
                entry["rate_resid_staged"] = math.nan
        return entry

    return hook


# -- trajectory-level reports ----------------------------------------------------


def conservation_checks(traj: Trajectory, config: SolverConfig) -> dict:
    """Mass drift and signal-mass law deviation per recorded step.

    The signal mass follows |v(t)|_1 = |v^in|_1 e^{-t/tau} +
    |u^in|_1 (1 - e^{-t/tau}) in continuous time and stays below
    max(|u^in|_1, |v^in|_1); its discrete counterpart is a geometric
    recursion, so the deviation from the exponential law is O(dt).
    """
    if not traj.series or traj.series["t"].size == 0:
        raise ValueError("trajectory has no recorded steps")
    t = traj.series["t"]
    mass = traj.series["mass_u"]
    l1_v = traj.series["l1_v"]
    omega = traj.config.make_grid().volume
    m_omega = traj.snapshots[0].m * omega
    u_in_l1 = float(mass[0])
    v_in_l1 = float(l1_v[0])
    decay = np.exp(-t / config.tau)
    law = v_in_l1 * decay + u_in_l1 * (1.0 - decay)
    return {
        "t": t,
        "mass_drift": np.abs(mass - m_omega),
        "mass_drift_rel": np.abs(mass - m_omega) / m_omega,
        "l1_v_law": law,
        "l1_v_deviation": np.abs(l1_v - law),
        "l1_v_bound_margin": max(u_in_l1, v_in_l1) - l1_v,
    }


def signal_mass_law(t, tau: float, u_in_l1: float, v_in_l1: float):
    decay = np.exp(-np.asarray(t, dtype=np.float64) / tau)
    return v_in_l1 * decay + u_in_l1 * (1.0 - decay)


@dataclass(frozen=True)
class BoundednessSummary:
    verdict: str
    sup_linf_u: float
    sup_linf_v: float
    sup_l1_psi: float
    sup_coupling_f: float
    plateau: dict
    growth_factor_u: float
    scatter: dict
    affine_slope: float
    affine_intercept: float


def boundedness_summary(traj: Trajectory, min_tau_span: float = 50.0) -> BoundednessSummary:
    """Plateau assessment over the last half of the run plus envelope data.

    A series plateaus if its max over the last quarter exceeds its max over
    the third quarter by less than 1%.  Runs shorter than ``min_tau_span``
    time constants are inconclusive.
    """
    series = traj.series
    t = series["t"]
    tau = traj.config.tau
    span = float(t[-1] - t[0])
    keys = ["linf_u", "linf_v", "l1_psi"]
    if "coupling_f" in series:
        keys.append("coupling_f")
    plateau = {}
    n = t.size
    q3 = slice(n // 2, 3 * n // 4)
    q4 = slice(3 * n // 4, n)
    all_pass = True
    for key in keys:
        vals = series[key]
        max3 = float(np.max(vals[q3]))
        max4 = float(np.max(vals[q4]))
        ok = max4 <= max3 * 1.01 + 1e-300
        plateau[key] = {"max_q3": max3, "max_q4": max4, "pass": ok}
        all_pass = all_pass and ok
    if span < min_tau_span * tau:
        verdict = "inconclusive"
    else:
        verdict = "pass" if all_pass else "fail"
    linf_v = series["linf_v"]
    l1_psi = series["l1_psi"]
    if float(np.ptp(l1_psi)) > 0:
        slope, intercept = np.polyfit(l1_psi, linf_v, 1)
    else:
        slope, intercept = 0.0, float(linf_v.max())
    return BoundednessSummary(
        verdict=verdict,
        sup_linf_u=float(np.max(series["linf_u"])),
        sup_linf_v=float(np.max(series["linf_v"])),
        sup_l1_psi=float(np.max(series["l1_psi"])),
        sup_coupling_f=float(np.max(series["coupling_f"])) if "coupling_f" in series else math.nan,
        plateau=plateau,
        growth_factor_u=float(np.max(series["linf_u"]) / series["linf_u"][0]),
        scatter={
            "l1_psi": l1_psi,
            "linf_psi": series["linf_psi"],
            "linf_v": linf_v,
        },
        affine_slope=float(slope),
        affine_intercept=float(intercept),
    )


def records_to_csv(records: list[DiagnosticsRecord], path) -> None:
    """One row per snapshot, columns in CSV_COLUMNS order, shortest-roundtrip floats."""
    lines = [",".join(CSV_COLUMNS)]
    for rec in records:
        lines.append(",".join(repr(getattr(rec, col)) for col in CSV_COLUMNS))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
