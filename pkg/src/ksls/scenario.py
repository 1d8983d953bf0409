"""Scenario configuration: TOML ingestion, presets, and initial data.

A scenario is the reproducibility unit: grid, time parameters, motility,
initial-condition spec, solver knobs, and output toggles.  Configuration
files are strict -- any key outside the documented schema is rejected by
name -- and a fixed seed yields bit-identical initial fields.

Shipped presets:

* ``th1-1d`` / ``th1-2d``      -- gamma(s) = 2 + sin(s), tau = 2; the
  non-monotone bounded regime (liminf 1 > 1/tau).
* ``th2`` / ``th2-log``        -- gamma(s) = s and log(1+s), tau = 1; the
  monotone stabilizing regime.
* ``contrast-blowup``          -- gamma(s) = exp(-s), 2D bump data; the
  aggregation contrast where sup-norms grow.
* ``contrast-linear``          -- identical data under gamma(s) = s.
* ``pure-diffusion``           -- gamma constant; sanity case.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field as dc_field, replace as dc_replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import diagnostics
from .grid import Field, Grid, make_grid
from .motility import classify, make_motility
from .evolution import SolverConfig, build_operators, run

INITIAL_PRESETS = ("homogeneous", "perturbed", "bump", "from_file")


class ConfigError(ValueError):
    """Configuration file failed parsing or validation."""


@dataclass(frozen=True)
class InitialSpec:
    preset: str
    params: dict


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SolverConfig
    initial: InitialSpec
    seed: int = 0
    energy_series: bool = True
    rate_series: bool = False
    out_dir: Optional[str] = None
    motility_spec: dict = dc_field(default_factory=dict)

    def make_fields(self) -> tuple[Field, Field]:
        grid = self.config.make_grid()
        return make_initial(self.initial, grid, self.seed)


# -- schema-checked dict -> Scenario ------------------------------------------

_SCHEMA = {
    "name": str,
    "grid": {"cells": list, "lengths": list},
    "time": {"tau": (int, float), "dt": (int, float), "t_end": (int, float),
             "snapshot_stride": int},
    "motility": None,  # free-form: name + per-motility params
    "initial": None,   # free-form: preset + per-preset params
    "solver": {"linear_tolerance": (int, float), "backend": str},
    "output": {"seed": int, "energy_series": bool, "rate_series": bool,
               "directory": str},
}

_INITIAL_KEYS = {
    "homogeneous": {"preset", "m", "v_value"},
    "perturbed": {"preset", "m", "amplitude", "modes", "v_value",
                  "v_amplitude", "v_modes", "random_weights"},
    "bump": {"preset", "center", "width", "mass", "background", "v_value"},
    "from_file": {"preset", "u_path", "v_path"},
}

_MOTILITY_KEYS = {
    "exp_decay": {"name"},
    "linear": {"name"},
    "log1p": {"name"},
    "sin_offset": {"name"},
    "constant": {"name", "value"},
    "table": {"name", "knots", "values", "declared_monotone",
              "declared_gamma_inf"},
}


def _reject_unknown(section: str, data: dict, allowed) -> None:
    for key in data:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown key '{where}'")


def _require(data: dict, section: str, key: str):
    if key not in data:
        raise ConfigError(f"missing required key '{section}.{key}'")
    return data[key]


def scenario_from_dict(raw: dict, name: str = "scenario") -> Scenario:
    _reject_unknown("", raw, _SCHEMA.keys())
    name = raw.get("name", name)
    if not isinstance(name, str):
        raise ConfigError("'name' must be a string")

    grid_sec = raw.get("grid")
    if not isinstance(grid_sec, dict):
        raise ConfigError("missing required section 'grid'")
    _reject_unknown("grid", grid_sec, _SCHEMA["grid"].keys())
    cells = _require(grid_sec, "grid", "cells")
    lengths = _require(grid_sec, "grid", "lengths")
    if not isinstance(cells, list) or not isinstance(lengths, list):
        raise ConfigError("'grid.cells' and 'grid.lengths' must be arrays")
    dim = len(cells)
    if dim not in (1, 2):
        raise ConfigError(f"'grid.cells' must have 1 or 2 entries, got {dim}")
    if len(lengths) != dim:
        raise ConfigError("'grid.lengths' must match 'grid.cells' in length")

    time_sec = raw.get("time")
    if not isinstance(time_sec, dict):
        raise ConfigError("missing required section 'time'")
    _reject_unknown("time", time_sec, _SCHEMA["time"].keys())
    tau = float(_require(time_sec, "time", "tau"))
    if not tau > 0:
        raise ConfigError("tau must be positive (fully parabolic case)")
    dt = float(_require(time_sec, "time", "dt"))
    t_end = float(_require(time_sec, "time", "t_end"))
    stride = int(time_sec.get("snapshot_stride", 100))

    mot_sec = raw.get("motility")
    if not isinstance(mot_sec, dict) or "name" not in mot_sec:
        raise ConfigError("missing required section 'motility' with a 'name'")
    mot_name = mot_sec["name"]
    allowed = _MOTILITY_KEYS.get(mot_name)
    if allowed is None:
        known = ", ".join(sorted(_MOTILITY_KEYS))
        raise ConfigError(f"unknown motility '{mot_name}'; known: {known}")
    _reject_unknown("motility", mot_sec, allowed)
    mot_params = {k: v for k, v in mot_sec.items() if k != "name"}
    motility = make_motility(mot_name, **mot_params)

    init_sec = raw.get("initial")
    if not isinstance(init_sec, dict) or "preset" not in init_sec:
        raise ConfigError("missing required section 'initial' with a 'preset'")
    preset = init_sec["preset"]
    if preset not in INITIAL_PRESETS:
        known = ", ".join(INITIAL_PRESETS)
        raise ConfigError(f"unknown initial preset '{preset}'; known: {known}")
    _reject_unknown("initial", init_sec, _INITIAL_KEYS[preset])
    init = InitialSpec(preset=preset,
                       params={k: v for k, v in init_sec.items() if k != "preset"})

    solver_sec = raw.get("solver", {})
    if not isinstance(solver_sec, dict):
        raise ConfigError("'solver' must be a section")
    _reject_unknown("solver", solver_sec, _SCHEMA["solver"].keys())
    tol = float(solver_sec.get("linear_tolerance", 1e-12))
    backend = solver_sec.get("backend", "spectral")

    out_sec = raw.get("output", {})
    if not isinstance(out_sec, dict):
        raise ConfigError("'output' must be a section")
    _reject_unknown("output", out_sec, _SCHEMA["output"].keys())

    try:
        config = SolverConfig(
            tau=tau, dt=dt, t_end=t_end,
            cells=tuple(int(c) for c in cells),
            lengths=tuple(float(x) for x in lengths),
            motility=motility,
            linear_tolerance=tol,
            snapshot_stride=stride,
            backend=backend,
        )
        config.make_grid()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return Scenario(
        name=name,
        config=config,
        initial=init,
        seed=int(out_sec.get("seed", 0)),
        energy_series=bool(out_sec.get("energy_series", True)),
        rate_series=bool(out_sec.get("rate_series", False)),
        out_dir=out_sec.get("directory"),
        motility_spec={"name": mot_name, **mot_params},
    )


def load_config(path) -> Scenario:
    """Parse and validate a TOML scenario file (strict: unknown keys rejected)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    return scenario_from_dict(raw, name=path.stem)


# -- initial data ---------------------------------------------------------------


def _cosine_sum(grid: Grid, modes: list, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of Neumann cosine modes (exactly boundary-compatible)."""
    mesh = grid.meshgrid()
    out = np.zeros(grid.shape)
    for mode, w in zip(modes, weights):
        if grid.dim == 1:
            ks = (int(mode),) if not isinstance(mode, (list, tuple)) else tuple(mode)
        else:
            if not isinstance(mode, (list, tuple)) or len(mode) != grid.dim:
                raise ConfigError(
                    f"2D modes must be [kx, ky] pairs, got {mode!r}")
            ks = tuple(int(k) for k in mode)
        term = np.ones(grid.shape)
        for a, k in enumerate(ks):
            term = term * np.cos(k * np.pi * mesh[a] / grid.lengths[a])
        out += w * term
    return out


def _mode_weights(n_modes: int, random_weights: bool,
                  rng: Optional[np.random.Generator]) -> np.ndarray:
    if n_modes == 0:
        return np.zeros(0)
    if random_weights:
        w = rng.uniform(-1.0, 1.0, size=n_modes)
        norm = np.abs(w).sum()
        if norm == 0.0:
            w = np.ones(n_modes)
            norm = float(n_modes)
        return w / norm
    return np.full(n_modes, 1.0 / n_modes)


def make_initial(spec: InitialSpec, grid: Grid, seed: int = 0) -> tuple[Field, Field]:
    """Build (u_in, v_in) from a preset spec; rejects inadmissible data.

    u_in must be non-negative with positive total mass and v_in strictly
    positive; violations report the offending minimum.
    """
    p = spec.params
    if spec.preset == "homogeneous":
        m = float(p.get("m", 1.0))
        v_val = float(p.get("v_value", m))
        u_vals = np.full(grid.shape, m)
        v_vals = np.full(grid.shape, v_val)
    elif spec.preset == "perturbed":
        m = float(p.get("m", 1.0))
        amplitude = float(p.get("amplitude", 0.1))
        modes = p.get("modes", [1] if grid.dim == 1 else [[1, 0]])
        v_val = float(p.get("v_value", m))
        v_amplitude = float(p.get("v_amplitude", amplitude))
        v_modes = p.get("v_modes", modes)
        random_weights = bool(p.get("random_weights", False))
        rng = np.random.default_rng(seed) if random_weights else None
        w_u = _mode_weights(len(modes), random_weights, rng)
        w_v = _mode_weights(len(v_modes), random_weights, rng)
        u_vals = m + amplitude * _cosine_sum(grid, modes, w_u)
        v_vals = v_val + v_amplitude * _cosine_sum(grid, v_modes, w_v)
    elif spec.preset == "bump":
        center = p.get("center", [0.5 * L for L in grid.lengths])
        width = float(p.get("width", 0.1 * min(grid.lengths)))
        mass = float(p.get("mass", 1.0))
        background = float(p.get("background", 0.0))
        v_val = float(p.get("v_value", 1.0))
        if len(center) != grid.dim:
            raise ConfigError("'initial.center' must have one entry per axis")
        if background < 0:
            raise ConfigError(f"'initial.background' must be >= 0, got {background}")
        excess = mass - background * grid.volume
        if excess <= 0:
            raise ConfigError(
                f"'initial.mass' ({mass:g}) must exceed the background mass "
                f"({background * grid.volume:g})")
        mesh = grid.meshgrid()
        r2 = np.zeros(grid.shape)
        for a in range(grid.dim):
            r2 += (mesh[a] - float(center[a])) ** 2
        u_vals = np.exp(-r2 / (2.0 * width * width))
        total = float(u_vals.sum() * grid.cell_volume)
        u_vals = background + (excess / total) * u_vals
        v_vals = np.full(grid.shape, v_val)
    elif spec.preset == "from_file":
        u_vals = np.load(p["u_path"])
        v_vals = np.load(p["v_path"])
        for label, vals in (("u", u_vals), ("v", v_vals)):
            if vals.shape != grid.shape:
                raise ConfigError(
                    f"{label}^in file shape {vals.shape} does not match grid {grid.shape}")
    else:
        raise ConfigError(f"unknown initial preset '{spec.preset}'")

    u_min = float(u_vals.min())
    if u_min < 0:
        raise ConfigError(f"u^in has negative minimum {u_min:g}")
    if float(np.abs(u_vals).max()) == 0.0:
        raise ConfigError("u^in must not be identically zero")
    v_min = float(v_vals.min())
    if v_min <= 0:
        raise ConfigError(f"v^in must be strictly positive (minimum {v_min:g})")
    return Field(grid, u_vals), Field(grid, v_vals)


# -- shipped presets -------------------------------------------------------------

_PRESETS: dict[str, dict[str, Any]] = {
    "th1-1d": {
        "grid": {"cells": [128], "lengths": [1.0]},
        "time": {"tau": 2.0, "dt": 2e-3, "t_end": 10.0},
        "motility": {"name": "sin_offset"},
        "initial": {"preset": "perturbed", "m": 1.0, "amplitude": 0.3,
                    "modes": [1, 2, 3], "v_value": 1.0, "v_amplitude": 0.3,
                    "v_modes": [1, 3], "random_weights": True},
        "output": {"seed": 7},
    },
    "th1-2d": {
        "grid": {"cells": [32, 32], "lengths": [1.0, 1.0]},
        "time": {"tau": 2.0, "dt": 2e-3, "t_end": 4.0},
        "motility": {"name": "sin_offset"},
        "initial": {"preset": "perturbed", "m": 1.0, "amplitude": 0.3,
                    "modes": [[1, 0], [0, 1], [1, 1]], "v_value": 1.0,
                    "v_amplitude": 0.3, "v_modes": [[1, 1], [2, 0]],
                    "random_weights": True},
        "output": {"seed": 7},
    },
    "th2": {
        "grid": {"cells": [128], "lengths": [1.0]},
        "time": {"tau": 1.0, "dt": 1e-3, "t_end": 2.0},
        "motility": {"name": "linear"},
        "initial": {"preset": "perturbed", "m": 1.0, "amplitude": 0.2,
                    "modes": [1], "v_value": 1.5, "v_amplitude": 0.2,
                    "v_modes": [2]},
        "output": {"seed": 0},
    },
    "th2-log": {
        "grid": {"cells": [128], "lengths": [1.0]},
        "time": {"tau": 1.0, "dt": 1e-3, "t_end": 2.0},
        "motility": {"name": "log1p"},
        "initial": {"preset": "perturbed", "m": 1.0, "amplitude": 0.2,
                    "modes": [1], "v_value": 1.5, "v_amplitude": 0.2,
                    "v_modes": [2]},
        "output": {"seed": 0},
    },
    # mean density 3 on [0, 3.2]^2 sits above the aggregation threshold of the
    # decaying motility for the first cosine modes; the off-center bump seeds
    # them, and the excess collapses into a growing aggregate.  The identical
    # data under linear motility relaxes instead.
    "contrast-blowup": {
        "grid": {"cells": [32, 32], "lengths": [3.2, 3.2]},
        "time": {"tau": 1.0, "dt": 0.05, "t_end": 430.0, "snapshot_stride": 400},
        "motility": {"name": "exp_decay"},
        "initial": {"preset": "bump", "center": [0.96, 0.96], "width": 0.55,
                    "mass": 31.72, "background": 3.0, "v_value": 3.0},
        "output": {"seed": 0, "energy_series": False},
    },
    "contrast-linear": {
        "grid": {"cells": [32, 32], "lengths": [3.2, 3.2]},
        "time": {"tau": 1.0, "dt": 0.05, "t_end": 430.0, "snapshot_stride": 400},
        "motility": {"name": "linear"},
        "initial": {"preset": "bump", "center": [0.96, 0.96], "width": 0.55,
                    "mass": 31.72, "background": 3.0, "v_value": 3.0},
        "output": {"seed": 0, "energy_series": False},
    },
    "pure-diffusion": {
        "grid": {"cells": [64], "lengths": [1.0]},
        "time": {"tau": 1.0, "dt": 1e-3, "t_end": 1.0},
        "motility": {"name": "constant", "value": 1.0},
        "initial": {"preset": "perturbed", "m": 1.0, "amplitude": 0.5,
                    "modes": [1, 4], "v_value": 1.0, "v_amplitude": 0.25,
                    "v_modes": [2]},
        "output": {"seed": 0},
    },
}


def preset_names() -> tuple[str, ...]:
    return tuple(sorted(_PRESETS))


def scenario_from_preset(name: str) -> Scenario:
    try:
        raw = _PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(_PRESETS))
        raise ConfigError(f"unknown preset '{name}'; known presets: {known}") from None
    return scenario_from_dict(copy.deepcopy(raw), name=name)


def resolve_scenario(ref: str) -> Scenario:
    """Accept either a path to a TOML file or a shipped preset name."""
    path = Path(ref)
    if path.exists():
        return load_config(path)
    if ref in _PRESETS:
        return scenario_from_preset(ref)
    raise ConfigError(
        f"'{ref}' is neither a config file nor a preset "
        f"(presets: {', '.join(sorted(_PRESETS))})")


def classification_bounds(scenario: Scenario) -> tuple[float, float]:
    """(v_floor, s_max) used to classify the motility for a scenario."""
    grid = scenario.config.make_grid()
    u_in, v_in = make_initial(scenario.initial, grid, scenario.seed)
    v_floor = float(v_in.values.min())
    scale = max(float(u_in.values.max()), float(v_in.values.max()), 1.0)
    s_max = max(10.0 * v_floor, 20.0 * scale, 100.0)
    return v_floor, s_max


def classify_scenario(scenario: Scenario):
    v_floor, s_max = classification_bounds(scenario)
    return classify(scenario.config.motility, scenario.config.tau, v_floor, s_max)


def run_scenario(scenario: Scenario, t_end: Optional[float] = None,
                 dt: Optional[float] = None, snapshot_stride: Optional[int] = None,
                 energy_series: Optional[bool] = None,
                 rate_series: Optional[bool] = None,
                 initial_state=None, step_hook_extra=None):
    """Run a scenario end to end, wiring the diagnostics step hook.

    Keyword overrides replace the scenario's own time parameters (used by
    refinement studies and the acceptance suite).  Returns
    (trajectory, operators, classification).
    """
    config = scenario.config
    updates = {}
    if t_end is not None:
        updates["t_end"] = float(t_end)
    if dt is not None:
        updates["dt"] = float(dt)
    if snapshot_stride is not None:
        updates["snapshot_stride"] = int(snapshot_stride)
    if updates:
        config = dc_replace(config, **updates)
    ops = build_operators(config)
    classification = classify_scenario(scenario)
    use_energy = scenario.energy_series if energy_series is None else energy_series
    use_rate = scenario.rate_series if rate_series is None else rate_series
    hook = None
    if use_energy or use_rate:
        base_hook = diagnostics.make_step_hook(
            config, ops, classification.monotone_nondecreasing, with_rate=use_rate)
        if step_hook_extra is None:
            hook = base_hook
        else:
            def hook(prev, state):
                entry = base_hook(prev, state)
                entry.update(step_hook_extra(prev, state))
                return entry
    elif step_hook_extra is not None:
        hook = step_hook_extra
    u_in, v_in = make_initial(scenario.initial, ops.grid, scenario.seed)
    traj = run(config, u_in, v_in, ops=ops, step_hook=hook,
               initial=initial_state)
    return traj, ops, classification
