"""Command-line surface: run / verify / refine.

``run``    -- integrate a scenario; writes per-snapshot diagnostics CSV,
              per-step series CSV, checkpoints, and a summary (text + JSON).
``verify`` -- execute a named invariant suite; exit 0 iff every check passes.
``refine`` -- repeat a scenario over halved time steps and report observed
              convergence orders per residual against their expected windows.

Scenario references accept either a TOML file path or a shipped preset name.
The environment variable KSLS_THREADS pins the transform worker count
(default 1); with it fixed, identical configurations and seeds give
bit-identical CSV outputs.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, diagnostics
from .checkpoint import (CheckpointError, load_checkpoint, save_checkpoint,
                         verify_resume_state)
from .evolution import Trajectory
from .scenario import (ConfigError, Scenario, preset_names,
                       resolve_scenario, run_scenario)
from .verify import all_passed, print_table, suite_by_name

_CSV_HELP = "diagnostics.csv columns (in order): " + ", ".join(diagnostics.CSV_COLUMNS)


def _write_series_csv(traj: Trajectory, path: Path) -> None:
    keys = sorted(traj.series.keys())
    keys.remove("t")
    keys.insert(0, "t")
    n = traj.series["t"].size
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(traj.series[k][i])) for k in keys) + "\n")


def _summary(scenario: Scenario, traj: Trajectory, classification,
             runtime: float) -> dict:
    s = traj.series
    state0 = traj.snapshots[0]
    final = traj.final_state
    out = {
        "scenario": scenario.name,
        "version": __version__,
        "abort_reason": traj.abort_reason,
        "runtime_seconds": runtime,
        "steps": int(final.step_index),
        "t_final": final.t,
        "motility": scenario.motility_spec,
        "classification": {
            "monotone_nondecreasing": classification.monotone_nondecreasing,
            "gamma_inf_estimate": classification.gamma_inf_estimate,
            "nondegenerate_for_tau": classification.nondegenerate_for_tau,
            "gamma_star_estimate": classification.gamma_star_estimate,
        },
        "mass_mean": state0.m,
        "mass_drift_rel_max": float(np.abs(s["mean_u"] - state0.m).max() / state0.m),
        "sup_linf_u": float(s["linf_u"].max()),
        "sup_linf_v": float(s["linf_v"].max()),
        "sup_linf_u_plus_v": float((s["linf_u"] + s["linf_v"]).max()),
        "min_u": float(s["min_u"].min()),
        "min_v": float(s["min_v"].min()),
        "v_running_min": final.v_running_min,
        "identity_resid_max": float(s["identity_resid"].max()),
        "clamp_count": int(final.clamp_count),
        "k0_running": final.k0_running,
        "final_u_dev_linf": float(np.abs(final.u.values - state0.m).max()),
        "final_grad_v_linf": diagnostics.convergence_metrics(final)["grad_v_linf"],
    }
    if "psi_ode_resid" in s and s["psi_ode_resid"].size > 1:
        out["psi_ode_resid_max"] = float(np.nanmax(np.abs(s["psi_ode_resid"])))
    if traj.config.t_end >= 50.0 * traj.config.tau and s["t"].size >= 8:
        summary = diagnostics.boundedness_summary(traj)
        out["boundedness"] = {
            "verdict": summary.verdict,
            "plateau": {k: v["pass"] for k, v in summary.plateau.items()},
            "growth_factor_u": summary.growth_factor_u,
            "affine_slope": summary.affine_slope,
            "affine_intercept": summary.affine_intercept,
        }
    return out


def cmd_run(args) -> int:
    scenario = resolve_scenario(args.config)
    out_dir = Path(args.out or scenario.out_dir or f"out/{scenario.name}")
    out_dir.mkdir(parents=True, exist_ok=True)

    initial_state = None
    config = scenario.config
    if args.resume:
        state, meta = load_checkpoint(args.resume)
        verify_resume_state(state, config, meta)
        initial_state = state
        print(f"resumed from {args.resume} at t={state.t:.6g} "
              f"(step {state.step_index})")

    extra_hook = None
    if args.checkpoint_every:
        every = int(args.checkpoint_every)

        def extra_hook(prev, state):
            if state.step_index > 0 and state.step_index % every == 0:
                save_checkpoint(out_dir / f"checkpoint_{state.step_index:08d}.ksls",
                                state, config)
            return {}

    t0 = time.time()
    traj, ops, classification = run_scenario(scenario, initial_state=initial_state,
                                             step_hook_extra=extra_hook)
    runtime = time.time() - t0

    records = diagnostics.trajectory_records(
        traj, ops, classification.monotone_nondecreasing)
    diagnostics.records_to_csv(records, out_dir / "diagnostics.csv")
    _write_series_csv(traj, out_dir / "series.csv")
    save_checkpoint(out_dir / "state_final.ksls", traj.final_state, traj.config)
    with open(out_dir / "csv_schema.txt", "w", encoding="utf-8") as fh:
        fh.write("diagnostics.csv: one row per snapshot\n")
        for col in diagnostics.CSV_COLUMNS:
            fh.write(f"  {col}\n")
        fh.write("series.csv: one row per time step; columns sorted, t first\n")

    summary = _summary(scenario, traj, classification, runtime)
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    lines = [f"{k}: {v}" for k, v in summary.items()]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(f"run '{scenario.name}': {summary['steps']} steps to t={summary['t_final']:.6g} "
          f"in {runtime:.1f} s -> {out_dir}")
    print(f"  sup |u|_inf + |v|_inf = {summary['sup_linf_u_plus_v']:.6g}")
    print(f"  mass drift (rel) = {summary['mass_drift_rel_max']:.3e}, "
          f"key identity residual = {summary['identity_resid_max']:.3e}")
    if traj.abort_reason:
        print(f"  ABORTED: {traj.abort_reason}", file=sys.stderr)
        return 2
    return 0


def cmd_verify(args) -> int:
    if args.suite != "operators" and not args.config:
        print(f"error: suite '{args.suite}' needs --config", file=sys.stderr)
        return 2
    scenario = resolve_scenario(args.config) if args.config else None
    results = suite_by_name(args.suite, scenario)
    title = args.suite if scenario is None else f"{args.suite} on {scenario.name}"
    print_table(results, title)
    return 0 if all_passed(results) else 1


_ORDER_WINDOWS = {
    "l1_v_law_deviation": (0.8, 1.2),
    "lyapunov_resid_max": (0.8, 1.2),
    "rate_resid_max": (0.8, 1.2),
    "self_convergence_u": (0.77, 1.2),
}
_DT_INDEPENDENT = ("identity_resid_max", "mass_drift_rel_max", "psi_ode_resid_max")


def refinement_study(scenario: Scenario, levels: int, t_end=None) -> dict:
    """Run the scenario at dt, dt/2, ..., dt/2^(levels-1); collect residual metrics."""
    base_dt = scenario.config.dt
    dts = [base_dt / 2 ** i for i in range(levels)]
    metrics: dict[str, list[float]] = {}
    finals = []
    for dt in dts:
        traj, ops, classification = run_scenario(
            scenario, dt=dt, t_end=t_end, rate_series=True, energy_series=True,
            snapshot_stride=10 ** 9)
        if traj.abort_reason:
            raise RuntimeError(f"refinement run at dt={dt} aborted: {traj.abort_reason}")
        s = traj.series
        cons = diagnostics.conservation_checks(traj, traj.config)
        m = traj.snapshots[0].m
        row = {
            "l1_v_law_deviation": float(cons["l1_v_deviation"].max()),
            "rate_resid_max": float(np.nanmax(s["rate_resid"])),
            "identity_resid_max": float(s["identity_resid"].max()),
            "mass_drift_rel_max": float(np.abs(s["mean_u"] - m).max() / m),
            "psi_ode_resid_max": float(np.nanmax(np.abs(s["psi_ode_resid"]))),
        }
        if classification.monotone_nondecreasing:
            row["lyapunov_resid_max"] = float(np.nanmax(np.abs(s["lyapunov_resid"])))
        metrics.setdefault("dt", []).append(dt)
        for key, val in row.items():
            metrics.setdefault(key, []).append(val)
        finals.append(traj.final_state.u.values)
    self_conv = []
    for a, b in zip(finals[:-1], finals[1:]):
        self_conv.append(float(np.sqrt(((a - b) ** 2).sum()
                                       * scenario.config.make_grid().cell_volume)))
    metrics["self_convergence_u"] = self_conv
    return metrics


def observed_order(dts, values) -> float:
    """Least-squares slope of log(value) against log(dt)."""
    dts = np.asarray(dts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if np.any(values <= 0):
        return math.nan
    return float(np.polyfit(np.log(dts), np.log(values), 1)[0])


def cmd_refine(args) -> int:
    scenario = resolve_scenario(args.config)
    levels = int(args.dt_levels)
    if levels < 2:
        print("refine needs at least 2 dt levels", file=sys.stderr)
        return 2
    metrics = refinement_study(scenario, levels)
    dts = metrics["dt"]
    print(f"refinement study on '{scenario.name}': dt levels "
          + ", ".join(f"{dt:g}" for dt in dts))
    failures = 0
    for key, window in _ORDER_WINDOWS.items():
        if key == "self_convergence_u":
            vals = metrics[key]
            if len(vals) < 2:
                continue
            if max(vals) < 1e-10:
                print(f"[PASS] {key:<24} below noise floor "
                      f"(max {max(vals):.3e} < 1e-10); order not measurable")
                continue
            order = observed_order(dts[:-1], vals)
        elif key in metrics:
            vals = metrics[key]
            order = observed_order(dts, vals)
        else:
            continue
        lo, hi = window
        ok = lo <= order <= hi
        failures += 0 if ok else 1
        vals_s = ", ".join(f"{v:.3e}" for v in vals)
        print(f"[{'PASS' if ok else 'FAIL'}] {key:<24} order {order:+.3f} "
              f"(window [{lo}, {hi}])  values: {vals_s}")
    for key in _DT_INDEPENDENT:
        vals = metrics.get(key)
        if not vals:
            continue
        # dt-independent class: each halving may move the value by at most 10x
        floor = 1e-14
        ratio = max(
            max(b, floor) / max(a, floor)
            for a, b in zip(vals[:-1], vals[1:]))
        ok = ratio <= 10.0
        failures += 0 if ok else 1
        vals_s = ", ".join(f"{v:.3e}" for v in vals)
        print(f"[{'PASS' if ok else 'FAIL'}] {key:<24} dt-independent "
              f"(per-halving ratio {ratio:.2f} <= 10)  values: {vals_s}")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ksls",
        description="Simulate and verify a local-sensing chemotaxis system "
                    "with signal-dependent motility.",
        epilog=_CSV_HELP + ". Presets: " + ", ".join(preset_names())
               + ". KSLS_THREADS pins the transform worker count.",
    )
    parser.add_argument("--version", action="version", version=f"ksls {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate a scenario and write outputs")
    p_run.add_argument("--config", required=True,
                       help="TOML scenario file or preset name")
    p_run.add_argument("--out", help="output directory (default out/<name>)")
    p_run.add_argument("--checkpoint-every", type=int, metavar="STEPS",
                       help="write a checkpoint every STEPS steps")
    p_run.add_argument("--resume", metavar="CKPT",
                       help="resume from a checkpoint file")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="run a named invariant suite")
    p_verify.add_argument("--config", help="scenario (required except for 'operators')")
    p_verify.add_argument("--suite", required=True,
                          choices=["operators", "identities", "energy", "all"])
    p_verify.set_defaults(func=cmd_verify)

    p_refine = sub.add_parser("refine", help="dt-refinement convergence study")
    p_refine.add_argument("--config", required=True,
                          help="TOML scenario file or preset name")
    p_refine.add_argument("--dt-levels", type=int, default=4, metavar="K",
                          help="number of dt halvings to run (default 4)")
    p_refine.set_defaults(func=cmd_refine)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
