import numpy as np
import pytest

from ksls.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    verify_resume_state,
)
from ksls.grid import Field
from ksls.motility import make_motility
from ksls.evolution import SolverConfig, build_operators, init_state, run, step


def make_config(**kw):
    base = dict(tau=1.0, dt=1e-3, t_end=0.05, cells=(24,), lengths=(1.0,),
                motility=make_motility("sin_offset"), snapshot_stride=10)
    base.update(kw)
    return SolverConfig(**base)


def stepped_state(cfg, n=7):
    ops = build_operators(cfg)
    grid = ops.grid
    x = grid.axis_centers(0)
    u = Field(grid, 1.0 + 0.2 * np.cos(np.pi * x))
    v = Field(grid, 1.4 + 0.2 * np.cos(2 * np.pi * x))
    state = init_state(cfg, u, v, ops)
    for _ in range(n):
        state = step(state, cfg, ops)
    return state, ops


FIELDS = ("u", "v", "u_smooth", "drive_heat", "drive_heat_smooth", "mismatch_decay")
SCALARS = ("t", "step_index", "m", "v_in_min", "gamma_vin_linf", "eta_bound",
           "v_running_min", "k0_running", "clamp_count")


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        path = tmp_path / "state.ksls"
        save_checkpoint(path, state, cfg)
        loaded, meta = load_checkpoint(path)
        for name in FIELDS:
            a = getattr(state, name).values
            b = getattr(loaded, name).values
            assert np.array_equal(a, b), name
        for name in SCALARS:
            assert getattr(state, name) == getattr(loaded, name), name
        assert meta.tau == cfg.tau
        assert meta.dt == cfg.dt
        assert loaded.grid == state.grid

    def test_save_is_deterministic(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        p1, p2 = tmp_path / "a.ksls", tmp_path / "b.ksls"
        save_checkpoint(p1, state, cfg)
        save_checkpoint(p2, state, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_2d_round_trip(self, tmp_path):
        cfg = make_config(cells=(8, 6), lengths=(1.0, 0.5))
        ops = build_operators(cfg)
        rng = np.random.default_rng(3)
        u = Field(ops.grid, rng.uniform(0.5, 1.5, size=ops.grid.shape))
        v = Field(ops.grid, rng.uniform(0.5, 1.5, size=ops.grid.shape))
        state = init_state(cfg, u, v, ops)
        path = tmp_path / "s2.ksls"
        save_checkpoint(path, state, cfg)
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded.u.values, state.u.values)
        assert loaded.grid.cells == (8, 6)


class TestCorruption:
    def test_crc_detects_flip(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        path = tmp_path / "state.ksls"
        save_checkpoint(path, state, cfg)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ksls"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        path = tmp_path / "state.ksls"
        save_checkpoint(path, state, cfg)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestResumeVerification:
    def test_accepts_consistent_state(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        path = tmp_path / "state.ksls"
        save_checkpoint(path, state, cfg)
        loaded, meta = load_checkpoint(path)
        verify_resume_state(loaded, cfg, meta)

    def test_rejects_mismatched_tau(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        path = tmp_path / "state.ksls"
        save_checkpoint(path, state, cfg)
        loaded, meta = load_checkpoint(path)
        other = make_config(tau=2.0)
        with pytest.raises(CheckpointError, match="tau"):
            verify_resume_state(loaded, other, meta)

    def test_rejects_identity_violation(self, tmp_path):
        cfg = make_config()
        state, _ = stepped_state(cfg)
        from dataclasses import replace

        broken = replace(state, drive_heat=state.drive_heat + 1.0, drive=None)
        path = tmp_path / "state.ksls"
        save_checkpoint(path, broken, cfg)
        loaded, meta = load_checkpoint(path)
        with pytest.raises(CheckpointError, match="identity"):
            verify_resume_state(loaded, cfg, meta)


class TestResumeBitExact:
    def test_resumed_run_matches_uninterrupted(self):
        cfg = make_config(t_end=0.04)
        ops = build_operators(cfg)
        grid = ops.grid
        x = grid.axis_centers(0)
        u = Field(grid, 1.0 + 0.2 * np.cos(np.pi * x))
        v = Field(grid, 1.4 + 0.2 * np.cos(2 * np.pi * x))

        full = run(cfg, u, v, ops=ops)

        cfg_half = make_config(t_end=0.02)
        half = run(cfg_half, u, v, ops=ops)
        resumed = run(cfg, u, v, ops=ops, initial=half.final_state)

        a = full.final_state
        b = resumed.final_state
        assert a.t == b.t
        assert a.step_index == b.step_index
        for name in FIELDS:
            assert np.array_equal(getattr(a, name).values,
                                  getattr(b, name).values), name
        # per-step series over the shared tail agree bitwise
        n_tail = resumed.series["t"].size - 1
        for key in ("linf_u", "l1_v", "identity_resid", "mass_u"):
            assert np.array_equal(full.series[key][-n_tail:],
                                  resumed.series[key][-n_tail:]), key
