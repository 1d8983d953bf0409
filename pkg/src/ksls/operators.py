"""Discrete Neumann operators on cell-centered rectangular grids.

Everything here is built from one stencil: the second-order Laplacian with
ghost-cell reflection (zero normal difference across boundary faces).  On
that stencil

* constants are annihilated exactly and the discrete integral of the
  Laplacian vanishes up to floating summation,
* ``A = I - lap`` is symmetric positive definite and an M-matrix, so its
  inverse (and every shifted inverse) preserves sign,
* the DCT-II basis ``cos(k*pi*(j+1/2)/n)`` diagonalizes the stencil exactly
  with eigenvalues ``-(2/h^2)*(1 - cos(k*pi/n))`` per axis.

Two interchangeable solve backends are provided: a cosine-transform path
(exact up to transform roundoff, the default) and a diagonally preconditioned
conjugate-gradient path.  The CG path also handles the variable-coefficient
system used by the density update, which has no transform diagonalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.fft

from .grid import Field, Grid, GridError

DEFAULT_TOLERANCE = 1e-12
POISSON_COMPAT_RTOL = 1e-10


class SolverError(RuntimeError):
    """Iterative solve failed to reach the requested residual."""


def fft_workers() -> int:
    """Worker count for transforms; pinned via KSLS_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("KSLS_THREADS", "1")))
    except ValueError:
        return 1


# -- stencil application ------------------------------------------------------


def _axis_second_diff(vals: np.ndarray, axis: int, h: float) -> np.ndarray:
    """(f[j-1] - 2 f[j] + f[j+1]) / h^2 with reflected ghost cells."""
    pw = [(0, 0)] * vals.ndim
    pw[axis] = (1, 1)
    p = np.pad(vals, pw, mode="edge")
    n = vals.shape[axis]
    lo = [slice(None)] * vals.ndim
    hi = [slice(None)] * vals.ndim
    mid = [slice(None)] * vals.ndim
    lo[axis] = slice(0, n)
    mid[axis] = slice(1, n + 1)
    hi[axis] = slice(2, n + 2)
    return (p[tuple(lo)] - 2.0 * p[tuple(mid)] + p[tuple(hi)]) / (h * h)


def laplacian_values(grid: Grid, vals: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vals)
    for a in range(grid.dim):
        out += _axis_second_diff(vals, a, grid.spacing[a])
    return out


def neg_laplacian_diagonal(grid: Grid) -> np.ndarray:
    """Diagonal of -lap: 2/h^2 per axis in the interior, 1/h^2 at boundary cells."""
    d = np.zeros(grid.shape)
    for a in range(grid.dim):
        h2 = grid.spacing[a] ** 2
        row = np.full(grid.cells[a], 2.0 / h2)
        row[0] = 1.0 / h2
        row[-1] = 1.0 / h2
        shape = [1] * grid.dim
        shape[a] = grid.cells[a]
        d += row.reshape(shape)
    return d


# -- face-difference gradients ------------------------------------------------


def face_differences(f: Field) -> tuple[np.ndarray, ...]:
    """Per-axis one-sided differences (f[j+1]-f[j])/h at interior faces.

    Boundary faces carry zero difference under reflection and are omitted.
    """
    out = []
    vals = f.values
    for a in range(f.grid.dim):
        h = f.grid.spacing[a]
        lo = [slice(None)] * f.grid.dim
        hi = [slice(None)] * f.grid.dim
        lo[a] = slice(0, f.grid.cells[a] - 1)
        hi[a] = slice(1, f.grid.cells[a])
        out.append((vals[tuple(hi)] - vals[tuple(lo)]) / h)
    return tuple(out)


def face_averages(f: Field) -> tuple[np.ndarray, ...]:
    """Per-axis midpoint values (f[j]+f[j+1])/2 at interior faces."""
    out = []
    vals = f.values
    for a in range(f.grid.dim):
        lo = [slice(None)] * f.grid.dim
        hi = [slice(None)] * f.grid.dim
        lo[a] = slice(0, f.grid.cells[a] - 1)
        hi[a] = slice(1, f.grid.cells[a])
        out.append(0.5 * (vals[tuple(hi)] + vals[tuple(lo)]))
    return tuple(out)


def grad_linf(f: Field) -> float:
    """Max face-difference magnitude over all interior faces."""
    best = 0.0
    for d in face_differences(f):
        if d.size:
            best = max(best, float(np.abs(d).max()))
    return best


def grad_sq_integral(f: Field, face_weights: Optional[tuple[np.ndarray, ...]] = None) -> float:
    """Integral of |grad f|^2 (optionally face-weighted) from face differences.

    With unit weights this matches ``-inner(f, lap f)`` exactly by summation
    by parts on this stencil; each interior face carries weight cell_volume.
    """
    vol = f.grid.cell_volume
    total = 0.0
    diffs = face_differences(f)
    for a, d in enumerate(diffs):
        term = d * d
        if face_weights is not None:
            term = term * face_weights[a]
        total += float(term.sum() * vol)
    return total


# -- conjugate gradient -------------------------------------------------------


@dataclass
class CGReport:
    iterations: int
    residual: float
    converged: bool


def cg_solve(
    apply_op: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    diag: np.ndarray,
    rtol: float,
    maxiter: int = 10000,
    accept_rtol: Optional[float] = None,
    precond: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[np.ndarray, CGReport]:
    """Preconditioned CG with a stall guard.

    The preconditioner defaults to Jacobi on ``diag``; a callable ``precond``
    (applying an SPD approximate inverse) overrides it.  Aims for
    ``|r| <= rtol*|b|``; if the iteration stalls at roundoff level it accepts
    any residual below ``accept_rtol*|b|`` (default ``100*rtol``) instead of
    spinning until maxiter.
    """
    if accept_rtol is None:
        accept_rtol = 100.0 * rtol
    if precond is None:
        precond = lambda v: v / diag  # noqa: E731
    bnorm = float(np.linalg.norm(b.ravel()))
    if bnorm == 0.0:
        return np.zeros_like(b), CGReport(0, 0.0, True)
    target = rtol * bnorm
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float((r * z).sum())
    rnorm = bnorm
    best_rnorm = rnorm
    stall = 0
    for it in range(1, maxiter + 1):
        ap = apply_op(p)
        pap = float((p * ap).sum())
        if pap <= 0.0:
            raise SolverError("operator lost positive definiteness in CG")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rnorm = float(np.linalg.norm(r.ravel()))
        if rnorm <= target:
            return x, CGReport(it, rnorm, True)
        if rnorm < 0.5 * best_rnorm:
            best_rnorm = rnorm
            stall = 0
        else:
            stall += 1
            if stall >= 50:
                break
        z = precond(r)
        rz_new = float((r * z).sum())
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    if rnorm <= accept_rtol * bnorm:
        return x, CGReport(maxiter, rnorm, True)
    raise SolverError(
        f"CG did not converge: residual {rnorm:.3e} > {target:.3e} (|b|={bnorm:.3e})"
    )


# -- operator set -------------------------------------------------------------


class NeumannOperators:
    """Precomputed transform data and solver entry points for one grid.

    Instances are immutable after construction; concurrent solves on distinct
    inputs are safe.
    """

    def __init__(self, grid: Grid, tolerance: float = DEFAULT_TOLERANCE,
                 backend: str = "spectral"):
        if backend not in ("spectral", "cg"):
            raise ValueError(f"unknown backend {backend!r}")
        self.grid = grid
        self.tolerance = float(tolerance)
        self.backend = backend
        self._axis_eigs = []
        for a in range(grid.dim):
            n = grid.cells[a]
            h = grid.spacing[a]
            k = np.arange(n)
            self._axis_eigs.append((2.0 / (h * h)) * (1.0 - np.cos(k * np.pi / n)))
        lam = np.zeros(grid.shape)
        for a, eig in enumerate(self._axis_eigs):
            shape = [1] * grid.dim
            shape[a] = grid.cells[a]
            lam = lam + eig.reshape(shape)
        self.eigenvalues = lam
        self.eigenvalues.setflags(write=False)
        self._neg_lap_diag = neg_laplacian_diagonal(grid)
        self._neg_lap_diag.setflags(write=False)

    # transforms

    def to_modes(self, vals: np.ndarray) -> np.ndarray:
        return scipy.fft.dctn(vals, type=2, norm="ortho", workers=fft_workers())

    def from_modes(self, coeffs: np.ndarray) -> np.ndarray:
        return scipy.fft.idctn(coeffs, type=2, norm="ortho", workers=fft_workers())

    def mode_eigenvalue(self, k: tuple[int, ...] | int) -> float:
        """Eigenvalue of -lap for the cosine mode with index k per axis."""
        if isinstance(k, int):
            k = (k,)
        if len(k) != self.grid.dim:
            raise GridError("mode index must have one entry per axis")
        return float(sum(self._axis_eigs[a][k[a]] for a in range(self.grid.dim)))

    def eigenmode(self, k: tuple[int, ...] | int) -> Field:
        if isinstance(k, int):
            k = (k,)
        vals = np.ones(self.grid.shape)
        for a in range(self.grid.dim):
            n = self.grid.cells[a]
            j = np.arange(n)
            mode = np.cos(k[a] * np.pi * (j + 0.5) / n)
            shape = [1] * self.grid.dim
            shape[a] = n
            vals = vals * mode.reshape(shape)
        return Field(self.grid, vals)

    # applies

    def _check(self, f: Field) -> None:
        if f.grid != self.grid:
            raise GridError("field lives on a different grid")

    def laplacian(self, f: Field) -> Field:
        self._check(f)
        return Field(self.grid, laplacian_values(self.grid, f.values))

    def helmholtz_apply(self, f: Field) -> Field:
        self._check(f)
        return Field(self.grid, f.values - laplacian_values(self.grid, f.values))

    # solves

    def _spectral_filter(self, vals: np.ndarray, denom: np.ndarray) -> np.ndarray:
        return self.from_modes(self.to_modes(vals) / denom)

    def _cg(self, shift: float, vals: np.ndarray, rtol: Optional[float]) -> np.ndarray:
        # solves (shift*I + I - lap) x = vals
        def apply_op(x):
            return (shift + 1.0) * x - laplacian_values(self.grid, x)

        diag = (shift + 1.0) + self._neg_lap_diag
        x, _ = cg_solve(apply_op, vals, diag, rtol or self.tolerance)
        return x

    def helmholtz_solve(self, f: Field, rtol: Optional[float] = None) -> Field:
        """z with (I - lap) z = f; preserves sign of f (M-matrix inverse)."""
        self._check(f)
        if self.backend == "spectral":
            out = self._spectral_filter(f.values, 1.0 + self.eigenvalues)
        else:
            out = self._cg(0.0, f.values, rtol)
        return Field(self.grid, out)

    def shifted_solve(self, f: Field, sigma: float, rtol: Optional[float] = None) -> Field:
        """z with (sigma*I + I - lap) z = f, sigma > 0."""
        self._check(f)
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        if self.backend == "spectral":
            out = self._spectral_filter(f.values, sigma + 1.0 + self.eigenvalues)
        else:
            out = self._cg(sigma, f.values, rtol)
        return Field(self.grid, out)

    def heat_step(self, f: Field, dt: float, tau: float) -> Field:
        """One backward-Euler step of tau*dz/dt + (I - lap) z = 0.

        Equals ``(I + (dt/tau)(I - lap))^{-1} f``; contracts the sup norm and
        preserves sign.
        """
        self._check(f)
        if not (dt > 0 and tau > 0):
            raise ValueError("dt and tau must be positive")
        r = dt / tau
        if self.backend == "spectral":
            out = self._spectral_filter(f.values, 1.0 + r * (1.0 + self.eigenvalues))
        else:
            sigma = tau / dt
            out = sigma * self._cg(sigma, f.values, None)
        return Field(self.grid, out)

    def heat_exact(self, f: Field, t: float, tau: float) -> Field:
        """Exact semigroup exp(-t*(I - lap)/tau) f; cross-check for heat_step."""
        self._check(f)
        coeffs = self.to_modes(f.values)
        coeffs = coeffs * np.exp(-t * (1.0 + self.eigenvalues) / tau)
        return Field(self.grid, self.from_modes(coeffs))

    def poisson_meanzero_solve(self, z: Field, rtol: Optional[float] = None) -> Field:
        """K with -lap K = z and mean(K) = 0; z must be (nearly) mean-free.

        The source is mean-projected before solving; a mean beyond the
        compatibility tolerance is an error.
        """
        self._check(z)
        vals = z.values
        linf = float(np.abs(vals).max())
        zmean = float(vals.mean())
        if linf > 0 and abs(zmean) > POISSON_COMPAT_RTOL * linf:
            raise ValueError(
                f"incompatible source: mean {zmean:.3e} exceeds "
                f"{POISSON_COMPAT_RTOL:.1e} * max |z| = {POISSON_COMPAT_RTOL * linf:.3e}"
            )
        if linf == 0.0:
            return Field(self.grid, np.zeros(self.grid.shape))
        src = vals - zmean
        if self.backend == "spectral":
            coeffs = self.to_modes(src)
            denom = self.eigenvalues.copy()
            flat0 = (0,) * self.grid.dim
            denom[flat0] = 1.0
            coeffs = coeffs / denom
            coeffs[flat0] = 0.0
            out = self.from_modes(coeffs)
            out = out - out.mean()
        else:
            def apply_op(x):
                return -laplacian_values(self.grid, x)

            x, _ = cg_solve(apply_op, src, self._neg_lap_diag, rtol or self.tolerance)
            out = x - x.mean()
        return Field(self.grid, out)

    def dirichlet_energy(self, z: Field) -> float:
        """|grad K[z]|_2^2 for the mean-zero Poisson solution K[z].

        Computed as <z, K[z]>, which equals the face-difference gradient norm
        exactly by summation by parts.
        """
        k = self.poisson_meanzero_solve(z)
        return float((z.values * k.values).sum() * self.grid.cell_volume)

    def weighted_helmholtz_solve(
        self, b: Field, inv_weight: np.ndarray, dt: float, rtol: Optional[float] = None
    ) -> Field:
        """q with (diag(inv_weight) - dt*lap) q = b, inv_weight > 0 per cell.

        The variable-coefficient kernel of the implicit density update; CG
        only, since the transform path needs constant coefficients.  The
        operator is an M-matrix, so q keeps the sign of b up to the residual.

        The preconditioner adapts to the weight contrast: at mild contrast
        the constant-coefficient transform inverse at the mean weight keeps
        the iteration count bounded by the contrast instead of dt/h^2; at
        large contrast the system is diagonal-dominated and Jacobi wins.
        """
        self._check(b)
        if not dt > 0:
            raise ValueError("dt must be positive")

        def apply_op(x):
            return inv_weight * x - dt * laplacian_values(self.grid, x)

        precond = None
        w_min = float(inv_weight.min())
        w_max = float(inv_weight.max())
        if self.backend == "spectral" and w_max <= 50.0 * w_min:
            denom = float(inv_weight.mean()) + dt * self.eigenvalues

            def precond(r):
                return self.from_modes(self.to_modes(r) / denom)

        diag = inv_weight + dt * self._neg_lap_diag
        x, _ = cg_solve(apply_op, b.values, diag, rtol or self.tolerance,
                        precond=precond)
        return Field(self.grid, x)
