"""Binary checkpoints: bit-exact save/restore of a simulation state.

Layout (all little-endian):

* magic bytes ``KSLS``
* format version, uint32
* header of float64 values: dim, cells per axis, lengths per axis
* scalars as float64: tau, dt, t, step_index, m, v_in_min, gamma_vin_linf,
  eta_bound, v_running_min, k0_running, clamp_count
* the six fields (u, v, u_smooth, drive_heat, drive_heat_smooth,
  mismatch_decay), each row-major float64
* CRC-32 of everything above, uint32

Writes are atomic (temp file + rename); loads verify magic, version, CRC,
and payload size.  The drive field of the producing step is transient
diagnostics data and is not persisted.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diagnostics import identity_scale, key_identity_residual
from .grid import Field, Grid, make_grid
from .evolution import SolverConfig, State

MAGIC = b"KSLS"
FORMAT_VERSION = 1

_FIELD_ORDER = ("u", "v", "u_smooth", "drive_heat", "drive_heat_smooth",
                "mismatch_decay")
_SCALAR_ORDER = ("tau", "dt", "t", "step_index", "m", "v_in_min",
                 "gamma_vin_linf", "eta_bound", "v_running_min",
                 "k0_running", "clamp_count")


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class CheckpointMeta:
    version: int
    grid: Grid
    tau: float
    dt: float
    t: float
    step_index: int


def _f64(*values: float) -> bytes:
    return struct.pack("<%dd" % len(values), *values)


def save_checkpoint(path, state: State, config: SolverConfig) -> None:
    grid = state.grid
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    header = [float(grid.dim)]
    header += [float(n) for n in grid.cells]
    header += [float(L) for L in grid.lengths]
    parts.append(_f64(*header))
    scalars = {
        "tau": config.tau,
        "dt": config.dt,
        "t": state.t,
        "step_index": float(state.step_index),
        "m": state.m,
        "v_in_min": state.v_in_min,
        "gamma_vin_linf": state.gamma_vin_linf,
        "eta_bound": state.eta_bound,
        "v_running_min": state.v_running_min,
        "k0_running": state.k0_running,
        "clamp_count": float(state.clamp_count),
    }
    parts.append(_f64(*(scalars[k] for k in _SCALAR_ORDER)))
    for name in _FIELD_ORDER:
        vals = getattr(state, name).values
        parts.append(np.ascontiguousarray(vals, dtype="<f8").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    blob = payload + struct.pack("<I", crc)

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[State, CheckpointMeta]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    payload, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    if payload[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    off = 8

    def read_f64(count: int) -> tuple[float, ...]:
        nonlocal off
        end = off + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack("<%dd" % count, payload[off:end])
        off = end
        return out

    (dim_f,) = read_f64(1)
    dim = int(dim_f)
    if dim not in (1, 2):
        raise CheckpointError(f"{path}: invalid dimension {dim_f}")
    cells = tuple(int(c) for c in read_f64(dim))
    lengths = read_f64(dim)
    grid = make_grid(dim, cells, lengths)
    scalars = dict(zip(_SCALAR_ORDER, read_f64(len(_SCALAR_ORDER))))

    fields = {}
    n = grid.n_cells
    for name in _FIELD_ORDER:
        end = off + 8 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated field data")
        vals = np.frombuffer(payload[off:end], dtype="<f8").reshape(grid.shape)
        fields[name] = Field(grid, vals)
        off = end
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after field data")

    state = State(
        t=scalars["t"],
        step_index=int(scalars["step_index"]),
        u=fields["u"],
        v=fields["v"],
        u_smooth=fields["u_smooth"],
        drive_heat=fields["drive_heat"],
        drive_heat_smooth=fields["drive_heat_smooth"],
        mismatch_decay=fields["mismatch_decay"],
        m=scalars["m"],
        v_in_min=scalars["v_in_min"],
        gamma_vin_linf=scalars["gamma_vin_linf"],
        eta_bound=scalars["eta_bound"],
        v_running_min=scalars["v_running_min"],
        k0_running=scalars["k0_running"],
        clamp_count=int(scalars["clamp_count"]),
    )
    meta = CheckpointMeta(version=version, grid=grid, tau=scalars["tau"],
                          dt=scalars["dt"], t=scalars["t"],
                          step_index=int(scalars["step_index"]))
    return state, meta


def verify_resume_state(state: State, config: SolverConfig,
                        meta: CheckpointMeta, identity_rtol: float = 1e-10) -> None:
    """Guard a resume: config must match the checkpoint and the key identity hold."""
    grid = config.make_grid()
    if grid != state.grid:
        raise CheckpointError(
            f"checkpoint grid {state.grid.cells} does not match config grid {grid.cells}")
    if meta.tau != config.tau:
        raise CheckpointError(
            f"checkpoint tau {meta.tau} does not match config tau {config.tau}")
    if meta.dt != config.dt:
        raise CheckpointError(
            f"checkpoint dt {meta.dt} does not match config dt {config.dt}")
    resid = key_identity_residual(state, config.tau)
    scale = max(identity_scale(state, config.tau), 1e-300)
    if resid > identity_rtol * scale:
        raise CheckpointError(
            f"checkpoint fails the key-identity verification: "
            f"residual {resid:.3e} > {identity_rtol:.1e} * scale {scale:.3e}")
