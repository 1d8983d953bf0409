"""Named verification suites: operator oracles, exact identities, energy laws.

Each check yields a CheckResult; a suite passes when every non-skipped check
does.  Thresholds are fixed here, not calibrated per run:

* operator oracles        -- dense/eigenmode agreement 1e-10, eigenvalue
  identities 1e-12, sign preservation -1e-12 relative;
* exact identities        -- mass drift 1e-12 relative, key identity
  1e-10 * scale, drive-integral balance 10x the linear tolerance;
* energy laws             -- pairwise Lyapunov monotonicity, each
  dissipation integral above -1e-10 * scale, coupling functional above
  -1e-10 * scale, comparison margins above -1e-8 * scale (monotone regime
  only; skipped with a note otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diagnostics
from .grid import Field, Grid, make_grid
from .operators import NeumannOperators, grad_sq_integral
from .scenario import Scenario, run_scenario


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    comparison: str = "<="
    note: str = ""
    skipped: bool = False

    def row(self) -> str:
        status = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        detail = f"{self.value:.3e} {self.comparison} {self.threshold:.3e}"
        note = f"  ({self.note})" if self.note else ""
        return f"[{status}] {self.name:<44} {detail}{note}"


def _leq(name: str, value: float, threshold: float, note: str = "") -> CheckResult:
    return CheckResult(name, value <= threshold, value, threshold, "<=", note)


def _geq(name: str, value: float, threshold: float, note: str = "") -> CheckResult:
    return CheckResult(name, value >= threshold, value, threshold, ">=", note)


def _skip(name: str, note: str) -> CheckResult:
    return CheckResult(name, True, math.nan, math.nan, "", note, skipped=True)


def all_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)


def print_table(results: list[CheckResult], title: str = "") -> None:
    if title:
        print(f"== {title} ==")
    for r in results:
        print(r.row())
    n_fail = sum(not r.passed for r in results)
    n_skip = sum(r.skipped for r in results)
    print(f"-- {len(results)} checks, {n_fail} failed, {n_skip} skipped --")


# -- dense stencil oracle --------------------------------------------------------


def dense_neg_laplacian(grid: Grid) -> np.ndarray:
    """Dense matrix of -lap assembled cell by cell from the stencil definition.

    Independent of the vectorized padding implementation; for oracle use on
    small grids only.
    """
    n = grid.n_cells
    mat = np.zeros((n, n))
    strides = [int(np.prod(grid.cells[a + 1:])) for a in range(grid.dim)]
    for flat, idx in enumerate(np.ndindex(*grid.cells)):
        for a in range(grid.dim):
            inv_h2 = 1.0 / grid.spacing[a] ** 2
            for delta in (-1, 1):
                j = idx[a] + delta
                if 0 <= j < grid.cells[a]:
                    nb = flat + delta * strides[a]
                    mat[flat, flat] += inv_h2
                    mat[flat, nb] -= inv_h2
    return mat


# -- operator suite ---------------------------------------------------------------


def operators_suite(grids: Optional[list[Grid]] = None,
                    seed: int = 1234, n_sign_checks: int = 1000) -> list[CheckResult]:
    if grids is None:
        grids = [
            make_grid(1, [16], [1.0]),
            make_grid(1, [32], [2.0]),
            make_grid(2, [16, 8], [1.0, 0.5]),
        ]
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    for grid in grids:
        label = "x".join(str(c) for c in grid.cells)
        ops = NeumannOperators(grid, backend="spectral")
        ops_cg = NeumannOperators(grid, backend="cg")
        dense_a = np.eye(grid.n_cells) + dense_neg_laplacian(grid)

        const = Field(grid, np.full(grid.shape, 5.0))
        results.append(_leq(
            f"{label}: laplacian annihilates constants",
            float(np.abs(ops.laplacian(const).values).max()), 0.0))

        worst_eig = 0.0
        for _ in range(4):
            k = tuple(int(rng.integers(1, grid.cells[a])) for a in range(grid.dim))
            mode = ops.eigenmode(k)
            lam = ops.mode_eigenvalue(k)
            err = float(np.abs(ops.laplacian(mode).values + lam * mode.values).max())
            worst_eig = max(worst_eig, err / max(lam, 1.0))
        results.append(_leq(f"{label}: eigenmode identity", worst_eig, 1e-12))

        f = Field(grid, rng.normal(size=grid.shape))
        z_dense = np.linalg.solve(dense_a, f.values.ravel()).reshape(grid.shape)
        for name, solver in (("spectral", ops), ("cg", ops_cg)):
            z = solver.helmholtz_solve(f)
            rel = float(np.abs(z.values - z_dense).max() / np.abs(z_dense).max())
            results.append(_leq(f"{label}: helmholtz_solve vs dense ({name})", rel, 1e-10))

        sigma = 3.0
        z_dense = np.linalg.solve(sigma * np.eye(grid.n_cells) + dense_a,
                                  f.values.ravel()).reshape(grid.shape)
        for name, solver in (("spectral", ops), ("cg", ops_cg)):
            z = solver.shifted_solve(f, sigma)
            rel = float(np.abs(z.values - z_dense).max() / np.abs(z_dense).max())
            results.append(_leq(f"{label}: shifted_solve vs dense ({name})", rel, 1e-10))

        src = f.values - f.values.mean()
        src -= src.mean()
        neg_lap = dense_neg_laplacian(grid)
        k_dense, *_ = np.linalg.lstsq(neg_lap, src.ravel(), rcond=None)
        k_dense = (k_dense - k_dense.mean()).reshape(grid.shape)
        for name, solver in (("spectral", ops), ("cg", ops_cg)):
            k_sol = solver.poisson_meanzero_solve(Field(grid, src))
            rel = float(np.abs(k_sol.values - k_dense).max() / np.abs(k_dense).max())
            results.append(_leq(f"{label}: poisson_meanzero vs dense ({name})", rel, 1e-10))
            results.append(_leq(f"{label}: poisson mean-zero ({name})",
                                abs(float(k_sol.values.mean())), 1e-12))

        rt = ops.helmholtz_apply(ops.helmholtz_solve(f))
        rel = float(np.abs(rt.values - f.values).max() / np.abs(f.values).max())
        results.append(_leq(f"{label}: helmholtz round-trip", rel, 1e-10))

        g = Field(grid, rng.normal(size=grid.shape))
        lhs = float((ops.helmholtz_apply(f).values * g.values).sum())
        rhs = float((f.values * ops.helmholtz_apply(g).values).sum())
        scale = abs(lhs) + abs(rhs)
        results.append(_leq(f"{label}: self-adjointness", abs(lhs - rhs) / scale, 1e-12))

        lap = ops.laplacian(f)
        cons = abs(float(lap.values.sum() * grid.cell_volume))
        l1 = float(np.abs(f.values).sum() * grid.cell_volume)
        results.append(_leq(f"{label}: laplacian conservation", cons, 1e-12 * l1))

        z = Field(grid, src)
        e_inner = ops.dirichlet_energy(z)
        k_sol = ops.poisson_meanzero_solve(z)
        e_faces = grad_sq_integral(k_sol)
        results.append(_leq(
            f"{label}: dirichlet energy summation-by-parts",
            abs(e_inner - e_faces) / max(e_inner, 1e-300), 1e-10))

    # sign preservation across solve kinds, counted over all grids
    worst = 0.0
    per_kind = max(1, -(-n_sign_checks // (len(grids) * 3)))
    for grid in grids:
        ops = NeumannOperators(grid, backend="spectral")
        for _ in range(per_kind):
            f = Field(grid, rng.uniform(0.0, 1.0, size=grid.shape))
            linf = float(np.abs(f.values).max())
            for z in (ops.helmholtz_solve(f),
                      ops.shifted_solve(f, float(rng.uniform(0.1, 10.0))),
                      ops.heat_step(f, float(rng.uniform(1e-3, 1.0)), 1.0)):
                worst = min(worst, float(z.values.min()) / linf)
    results.append(_geq("sign preservation (random non-negative inputs)",
                        worst, -1e-12, note=f"{per_kind * len(grids) * 3} solves"))

    worst_amp = 0.0
    for grid in grids:
        ops = NeumannOperators(grid, backend="spectral")
        for _ in range(50):
            f = Field(grid, rng.normal(size=grid.shape))
            z = ops.heat_step(f, float(rng.uniform(1e-3, 1.0)), 1.0)
            worst_amp = max(worst_amp,
                            float(np.abs(z.values).max() / np.abs(f.values).max()))
    results.append(_leq("heat_step sup-norm contraction", worst_amp, 1.0))
    return results


# -- identities suite -------------------------------------------------------------


def identities_suite(scenario: Scenario,
                     traj_bundle=None) -> list[CheckResult]:
    if traj_bundle is None:
        traj, ops, classification = run_scenario(scenario)
    else:
        traj, ops, classification = traj_bundle
    config = traj.config
    s = traj.series
    results: list[CheckResult] = []
    if traj.abort_reason:
        results.append(CheckResult("run completed", False, math.nan, math.nan,
                                   "", traj.abort_reason))
        return results
    results.append(CheckResult("run completed", True, 0.0, 0.0, "", ""))

    m = traj.snapshots[0].m
    drift = float(np.abs(s["mean_u"] - m).max() / m)
    results.append(_leq("mass conservation (relative drift)", drift, 1e-12))

    resid_rel = float((s["identity_resid"] / np.maximum(s["identity_scale"], 1e-300)).max())
    results.append(_leq("key identity residual / scale", resid_rel, 1e-10))

    ode = s["psi_ode_resid"][1:]
    ode_scale = np.maximum(1.0, s["drive_l1"][1:])
    ode_rel = float(np.abs(ode / ode_scale).max()) if ode.size else 0.0
    results.append(_leq("drive-heat mass balance residual", ode_rel,
                        10.0 * config.linear_tolerance))

    u_in_linf = float(s["linf_u"][0])
    results.append(_geq("density non-negativity", float(s["min_u"].min()),
                        -1e-12 * u_in_linf))
    results.append(_geq("signal positivity", float(s["min_v"].min()), 0.0,
                        note="strict"))
    results.append(_geq("mismatch-decay sup bound margin",
                        float((traj.snapshots[0].eta_bound - s["linf_eta"]).min()), 0.0))
    results.append(_leq("signal clamp activations", float(s["clamp_count"].max()), 0.0))

    worst_staged = 0.0
    worst_smooth = 0.0
    for state, prev in zip(traj.snapshots, traj.snapshot_prevs):
        w_resid = ops.helmholtz_apply(state.u_smooth).values - state.u.values
        psi_resid = (ops.helmholtz_apply(state.drive_heat_smooth).values
                     - state.drive_heat.values)
        scale = max(1.0, float(np.abs(state.u.values).max()))
        worst_smooth = max(worst_smooth,
                           float(np.abs(w_resid).max()) / scale,
                           float(np.abs(psi_resid).max())
                           / max(1.0, float(np.abs(state.drive_heat.values).max())))
        if prev is not None and state.drive is not None:
            staged = diagnostics.staged_rate_residual(prev, state, config, ops)
            dscale = max(1.0, float(np.abs(state.drive.values).max()))
            worst_staged = max(worst_staged, staged / dscale)
    results.append(_leq("smoothed fields satisfy their solves", worst_smooth,
                        100.0 * config.linear_tolerance))
    results.append(_leq("staged rate identity residual", worst_staged,
                        10.0 * config.linear_tolerance))

    cons = diagnostics.conservation_checks(traj, config)
    results.append(_geq("signal mass bounded by initial masses",
                        float(cons["l1_v_bound_margin"].min()),
                        -1e-10 * max(1.0, float(s["l1_v"].max()))))
    return results


# -- energy suite -----------------------------------------------------------------


def energy_suite(scenario: Scenario, traj_bundle=None) -> list[CheckResult]:
    if traj_bundle is None:
        traj, ops, classification = run_scenario(scenario, energy_series=True)
    else:
        traj, ops, classification = traj_bundle
    config = traj.config
    s = traj.series
    results: list[CheckResult] = []
    if traj.abort_reason:
        results.append(CheckResult("run completed", False, math.nan, math.nan,
                                   "", traj.abort_reason))
        return results
    monotone = classification.monotone_nondecreasing

    if "lyapunov" not in s:
        results.append(_skip("energy series", "energy series disabled for scenario"))
        return results

    if monotone:
        lyap = s["lyapunov"]
        lyap_prev = s["lyapunov_prev"]
        resid = s["lyapunov_resid"]
        allowance = np.abs(resid[1:]) * config.dt + 1e-13 * np.maximum(1.0, np.abs(lyap[1:]))
        worst = float((lyap[1:] - lyap_prev[1:] - allowance).max())
        results.append(_leq("Lyapunov pairwise monotonicity", worst, 0.0,
                            note="diff minus |residual|*dt allowance"))
        for key in ("dissipation_grad", "dissipation_variance", "dissipation_mean"):
            scale = 1.0 + float(np.abs(s[key]).max())
            results.append(_geq(f"{key} non-negative", float(s[key].min()),
                                -1e-10 * scale))
        prim_scale = 1.0 + traj.snapshots[0].gamma_vin_linf + float(s["l1_psi"].max())
        results.append(_geq("primitive comparison margin",
                            float(np.nanmin(s["primitive_margin"])),
                            -1e-8 * prim_scale))
        mot_scale = 1.0 + float(np.abs(s["motility_margin"]).max())
        results.append(_geq("mean-motility bound margin",
                            float(np.nanmin(s["motility_margin"])),
                            -1e-8 * mot_scale))
    else:
        note = "requires monotone non-decreasing motility; not applicable"
        results.append(_skip("Lyapunov pairwise monotonicity", note))
        results.append(_skip("dissipation non-negativity", note))
        results.append(_skip("primitive comparison margin", note))
        results.append(_skip("mean-motility bound margin", note))

    f_scale = 1.0 + float(np.abs(s["coupling_f"]).max())
    results.append(_geq("coupling functional non-negative",
                        float(s["coupling_f"].min()), -1e-10 * f_scale))
    gap_scale = 1.0 + float(s["identity_scale"].max())
    results.append(_geq("identity gap margin (lower)",
                        float(s["gap_margin_low"].min()), -1e-8 * gap_scale))
    results.append(_geq("identity gap margin (upper)",
                        float(s["gap_margin_high"].min()), -1e-8 * gap_scale))
    results.append(_geq("mismatch-decay sup bound margin",
                        float(s["eta_margin"].min()), 0.0))
    return results


def suite_by_name(name: str, scenario: Optional[Scenario]) -> list[CheckResult]:
    if name == "operators":
        return operators_suite()
    if scenario is None:
        raise ValueError(f"suite '{name}' needs a scenario")
    if name == "identities":
        return identities_suite(scenario)
    if name == "energy":
        return energy_suite(scenario)
    if name == "all":
        bundle = run_scenario(scenario, energy_series=True)
        return (operators_suite()
                + identities_suite(scenario, bundle)
                + energy_suite(scenario, bundle))
    raise ValueError(f"unknown suite '{name}' (operators, identities, energy, all)")
