"""Implicit time integration of the coupled density/signal system.

The continuous model moves the cell density u by the Laplacian of the
mobility potential u*gamma(v) and relaxes the signal v toward u through a
damped heat equation with time constant tau.  Four auxiliary fields are
co-evolved so that the structural identities of the model hold at the
discrete level, not just in the limit:

* ``u_smooth``          -- Helmholtz-smoothed density, (I - lap)^{-1} u;
* ``drive_heat``        -- damped-heat accumulation of the drive gamma(v)*u,
                           started from zero;
* ``drive_heat_smooth`` -- Helmholtz smoothing of drive_heat;
* ``mismatch_decay``    -- free damped-heat decay of the initial mismatch
                           u_smooth(0) - v(0).

Every auxiliary field advances with the same backward-Euler propagator
``(sigma*I + A)^{-1}`` (sigma = tau/dt, A = I - lap) and the same drive
field, and ``u_smooth`` is refreshed as the exact Helmholtz solve of the new
density.  With zero initial data for the combination

    u_smooth + tau*drive_heat - v - tau*drive_heat_smooth - mismatch_decay

the propagator maps zero to zero, so the combination stays at machine level
for every step and every dt; the same staging makes the discrete rate
identity (d/dt)u_smooth + drive = (I - lap)^{-1} drive and the integrated
drive_heat balance exact up to linear-solver residuals.

The density update itself linearizes the motility at the current signal:
substituting q = gamma(v)*u turns the implicit step into the symmetric
positive definite M-matrix system (diag(1/gamma(v)) - dt*lap) q = u, which
preserves non-negativity unconditionally, and writing the update as
u + dt*lap(q) conserves the discrete mass exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .grid import Field, FieldError, Grid, make_grid
from .motility import MotilityFunction, big_gamma
from .operators import (
    NeumannOperators,
    SolverError,
    laplacian_values,
)

log = logging.getLogger(__name__)

# The density solve is kept well below the reporting tolerance so that the
# identity residuals and sign margins stay dominated by the constant-
# coefficient solves, not by CG noise (the stall guard still accepts 100x
# this, i.e. the reporting tolerance itself).
U_STEP_RTOL = 1e-14

V_CLAMP_FLOOR = 1e-14


@dataclass(frozen=True)
class SolverConfig:
    tau: float
    dt: float
    t_end: float
    cells: tuple[int, ...]
    lengths: tuple[float, ...]
    motility: MotilityFunction
    linear_tolerance: float = 1e-12
    snapshot_stride: int = 100
    backend: str = "spectral"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive (fully parabolic case)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.dt < self.t_end:
            raise ValueError("dt must be smaller than t_end")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        object.__setattr__(self, "cells", tuple(int(n) for n in self.cells))
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))

    def make_grid(self) -> Grid:
        return make_grid(len(self.cells), self.cells, self.lengths)


def build_operators(config: SolverConfig) -> NeumannOperators:
    return NeumannOperators(config.make_grid(), tolerance=config.linear_tolerance,
                            backend=config.backend)


@dataclass(frozen=True)
class State:
    """Full simulation snapshot, including running scalars.

    ``drive`` is the source field used by the step that produced this state
    (None for the initial state); diagnostics need it to reproduce the exact
    staging.
    """

    t: float
    step_index: int
    u: Field
    v: Field
    u_smooth: Field
    drive_heat: Field
    drive_heat_smooth: Field
    mismatch_decay: Field
    m: float
    v_in_min: float
    gamma_vin_linf: float
    eta_bound: float
    v_running_min: float
    k0_running: float
    clamp_count: int = 0
    drive: Optional[Field] = None

    @property
    def grid(self) -> Grid:
        return self.u.grid


class InitialDataError(ValueError):
    """Initial fields violate the admissibility requirements."""


def init_state(config: SolverConfig, u_in: Field, v_in: Field,
               ops: Optional[NeumannOperators] = None) -> State:
    """Validate initial data and attach the auxiliary fields at t = 0."""
    if ops is None:
        ops = build_operators(config)
    if u_in.grid != ops.grid or v_in.grid != ops.grid:
        raise InitialDataError("initial fields live on a different grid")
    u_min = float(u_in.values.min())
    if u_min < 0:
        raise InitialDataError(f"u^in has negative minimum {u_min}")
    if float(np.abs(u_in.values).max()) == 0.0:
        raise InitialDataError("u^in must not be identically zero")
    v_min = float(v_in.values.min())
    if v_min <= 0:
        raise InitialDataError(
            f"v^in must be strictly positive (minimum {v_min})")

    u_smooth = ops.helmholtz_solve(u_in)
    zero = Field(ops.grid, np.zeros(ops.grid.shape))
    mismatch = u_smooth - v_in
    m = float(u_in.values.mean())
    gamma_vin_linf = float(big_gamma(config.motility, float(v_in.values.max()), v_min))
    eta_bound = max(float(np.abs(u_in.values).max()), float(np.abs(v_in.values).max()))
    k0 = max(0.0, float(u_smooth.values.max()))
    return State(
        t=0.0,
        step_index=0,
        u=u_in,
        v=v_in,
        u_smooth=u_smooth,
        drive_heat=zero,
        drive_heat_smooth=zero,
        mismatch_decay=mismatch,
        m=m,
        v_in_min=v_min,
        gamma_vin_linf=gamma_vin_linf,
        eta_bound=eta_bound,
        v_running_min=v_min,
        k0_running=k0,
    )


def step(state: State, config: SolverConfig, ops: NeumannOperators) -> State:
    """Advance the state by one dt; raises SolverError / FieldError on failure."""
    grid = ops.grid
    dt = config.dt
    tau = config.tau
    sigma = tau / dt

    v_vals = state.v.values
    clamped = int(np.count_nonzero(v_vals < V_CLAMP_FLOOR))
    if clamped:
        log.warning("clamped %d signal cells below %.1e at t=%.6g",
                    clamped, V_CLAMP_FLOOR, state.t)
        v_vals = np.maximum(v_vals, V_CLAMP_FLOOR)
    gamma_n = np.asarray(config.motility.eval(v_vals), dtype=np.float64)
    if not np.all(np.isfinite(gamma_n)) or np.any(gamma_n <= 0.0):
        raise SolverError(
            f"motility evaluation left the positive range at t={state.t:.6g}")

    # density update through the SPD substitution q = gamma(v)*u
    drive = ops.weighted_helmholtz_solve(
        state.u, 1.0 / gamma_n, dt, rtol=U_STEP_RTOL)
    u_new = Field(grid, state.u.values + dt * laplacian_values(grid, drive.values))

    # shared backward-Euler propagator for the remaining fields
    v_new = ops.shifted_solve(Field(grid, sigma * state.v.values + u_new.values), sigma)
    psi_cap_new = ops.shifted_solve(
        Field(grid, sigma * state.drive_heat.values + drive.values), sigma)
    psi_new = ops.helmholtz_solve(psi_cap_new)
    eta_new = ops.heat_step(state.mismatch_decay, dt, tau)
    w_new = ops.helmholtz_solve(u_new)

    v_running_min = min(state.v_running_min, float(v_new.values.min()))
    k0_running = max(
        state.k0_running,
        float((w_new.values - tau * psi_new.values).max()),
        0.0,
    )
    return replace(
        state,
        t=state.t + dt,
        step_index=state.step_index + 1,
        u=u_new,
        v=v_new,
        u_smooth=w_new,
        drive_heat=psi_cap_new,
        drive_heat_smooth=psi_new,
        mismatch_decay=eta_new,
        v_running_min=v_running_min,
        k0_running=k0_running,
        clamp_count=state.clamp_count + clamped,
        drive=drive,
    )


@dataclass
class Trajectory:
    """Snapshots plus per-step scalar series for one run.

    ``snapshot_prevs[i]`` is the state one step before ``snapshots[i]`` (None
    for the initial snapshot), kept so that rate residuals can be evaluated
    at snapshot times.
    """

    config: SolverConfig
    series: dict[str, np.ndarray]
    snapshots: list[State]
    snapshot_prevs: list[Optional[State]]
    abort_reason: Optional[str] = None

    @property
    def final_state(self) -> State:
        return self.snapshots[-1]

    def sup_over_time(self, key: str) -> float:
        return float(np.max(self.series[key]))


StepHook = Callable[[Optional[State], State], dict]


def _core_series(prev: Optional[State], cur: State, config: SolverConfig) -> dict:
    vol = cur.grid.cell_volume
    u = cur.u.values
    v = cur.v.values
    psi_cap = cur.drive_heat.values
    entry = {
        "t": cur.t,
        "mass_u": float(u.sum() * vol),
        "mean_u": float(u.mean()),
        "l1_v": float(np.abs(v).sum() * vol),
        "linf_u": float(np.abs(u).max()),
        "linf_v": float(np.abs(v).max()),
        "min_u": float(u.min()),
        "min_v": float(v.min()),
        "l1_psi": float(np.abs(psi_cap).sum() * vol),
        "linf_psi": float(np.abs(psi_cap).max()),
        "linf_eta": float(np.abs(cur.mismatch_decay.values).max()),
        "v_running_min": cur.v_running_min,
        "k0_running": cur.k0_running,
        "clamp_count": float(cur.clamp_count),
    }
    resid = (cur.u_smooth.values + config.tau * psi_cap
             - v - config.tau * cur.drive_heat_smooth.values
             - cur.mismatch_decay.values)
    entry["identity_resid"] = float(np.abs(resid).max())
    entry["identity_scale"] = (
        float(np.abs(cur.u_smooth.values).max())
        + config.tau * entry["linf_psi"] + entry["linf_v"])
    if prev is not None and cur.drive is not None:
        l1_new = entry["l1_psi"]
        l1_old = float(np.abs(prev.drive_heat.values).sum() * vol)
        drive_int = float(cur.drive.values.sum() * vol)
        entry["psi_ode_resid"] = (
            config.tau * (l1_new - l1_old) / config.dt + l1_new - drive_int)
        entry["drive_l1"] = float(np.abs(cur.drive.values).sum() * vol)
    else:
        entry["psi_ode_resid"] = math.nan
        entry["drive_l1"] = math.nan
    return entry


def run(config: SolverConfig, u_in: Field, v_in: Field,
        ops: Optional[NeumannOperators] = None,
        step_hook: Optional[StepHook] = None,
        initial: Optional[State] = None) -> Trajectory:
    """Step from t=0 (or a resumed state) to t_end, recording series/snapshots.

    On a solver failure or non-finite field the partial trajectory is
    returned with ``abort_reason`` set; the last good state is the final
    snapshot.
    """
    if ops is None:
        ops = build_operators(config)
    state = initial if initial is not None else init_state(config, u_in, v_in, ops)
    n_steps = int(round((config.t_end - state.t) / config.dt))
    final_index = state.step_index + n_steps

    series: dict[str, list] = {}

    def push(entry: dict) -> None:
        for key, val in entry.items():
            series.setdefault(key, []).append(val)

    snapshots: list[State] = [state]
    snapshot_prevs: list[Optional[State]] = [None]
    entry = _core_series(None, state, config)
    if step_hook is not None:
        entry.update(step_hook(None, state))
    push(entry)

    abort_reason = None
    prev = None
    for _ in range(n_steps):
        prev = state
        try:
            state = step(state, config, ops)
        except (SolverError, FieldError) as exc:
            abort_reason = f"step from t={prev.t:.6g} failed: {exc}"
            log.error(abort_reason)
            state = prev
            break
        entry = _core_series(prev, state, config)
        if step_hook is not None:
            entry.update(step_hook(prev, state))
        push(entry)
        at_stride = state.step_index % config.snapshot_stride == 0
        if at_stride or state.step_index == final_index:
            snapshots.append(state)
            snapshot_prevs.append(prev)

    if snapshots[-1] is not state:
        snapshots.append(state)
        snapshot_prevs.append(prev)

    arrays = {key: np.asarray(vals, dtype=np.float64) for key, vals in series.items()}
    return Trajectory(config=config, series=arrays, snapshots=snapshots,
                      snapshot_prevs=snapshot_prevs, abort_reason=abort_reason)
