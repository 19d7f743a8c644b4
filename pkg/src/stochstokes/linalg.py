"""Direct solvers for the SPD and saddle-point systems of the time steppers.

Two interchangeable backends produce the same discrete solutions:

``direct``
    SuperLU factorisation of the sparse (augmented) matrix.  Works for any
    mesh and is the reference path.
``circulant``
    The uniform torus mesh makes every assembled operator block-circulant
    under grid translations, so an FFT over the cell index reduces a system
    to one small dense block per wavenumber.  The blocks are inverted once;
    a solve is two real FFTs and a batched matrix product.

Both factorisations are immutable after construction and ``solve`` keeps no
shared scratch state, so one factorisation may serve many threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "PivotError",
    "SolverError",
    "Factorization",
    "CirculantFactorization",
    "factorize",
    "SaddleSystem",
    "SaddleSolver",
    "solve_saddle",
]

SPD = "spd"
INDEFINITE = "indefinite"


class PivotError(np.linalg.LinAlgError):
    """Non-positive pivot while factorising a matrix declared SPD."""

    def __init__(self, index: int, pivot: float):
        super().__init__(f"non-positive pivot {pivot:.3e} at original index {index}")
        self.index = index
        self.pivot = pivot


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def _check_symmetric(op: sp.spmatrix, rtol: float = 1e-12) -> None:
    if op.shape[0] != op.shape[1]:
        raise ValueError(f"operator must be square, got {op.shape}")
    scale = abs(op).max() if op.nnz else 0.0
    asym = abs(op - op.T).max() if op.nnz else 0.0
    if asym > rtol * max(scale, 1e-300):
        raise ValueError(f"operator is not symmetric (max |A - A^T| = {asym:.3e})")


class Factorization:
    """Reusable sparse LU factorisation (SuperLU)."""

    def __init__(self, op: sp.spmatrix, kind: str = SPD):
        if kind not in (SPD, INDEFINITE):
            raise ValueError(f"unknown factorization kind {kind!r}")
        op = sp.csc_matrix(op, dtype=float)
        _check_symmetric(op)
        self.kind = kind
        self.shape = op.shape
        self._op = op
        try:
            if kind == SPD:
                # symmetric ordering without row pivoting: U's diagonal carries
                # the LDL^T pivots, so positivity certifies definiteness
                self._lu = spla.splu(
                    op,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            else:
                self._lu = spla.splu(op, permc_spec="COLAMD")
        except RuntimeError as exc:  # exactly singular
            raise PivotError(-1, 0.0) from exc
        if kind == SPD:
            self._check_pivots()

    def _check_pivots(self) -> None:
        d = self._lu.U.diagonal()
        tol = 1e-12 * np.abs(d).max()
        bad = np.flatnonzero(d <= tol)
        if bad.size:
            j = int(bad[0])
            # column j of the factor is original column perm_c^{-1}[j]
            index = int(np.flatnonzero(self._lu.perm_c == j)[0])
            raise PivotError(index, float(d[j]))

    @property
    def operator(self) -> sp.csc_matrix:
        return self._op

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return self._lu.solve(b)


def factorize(op: sp.spmatrix, kind: str = SPD) -> Factorization:
    return Factorization(op, kind)


class CirculantFactorization:
    """Exact solver for a square operator that commutes with grid shifts.

    ``op`` has ``ntypes * n**2`` rows with dof index ``type*n**2 + i + n*j``
    for the cell ``(i, j)``.  The zero wavenumber may be singular; it is
    solved in the least-squares/minimum-norm sense, which reproduces the
    mean-zero solution whenever the right-hand side is compatible.
    """

    def __init__(self, op: sp.spmatrix, n: int, ntypes: int, check: bool = True):
        op = sp.csc_matrix(op, dtype=float)
        N2 = n * n
        if op.shape != (ntypes * N2, ntypes * N2):
            raise ValueError(f"operator shape {op.shape} does not match {ntypes} types on an {n}x{n} grid")
        self.n = n
        self.ntypes = ntypes
        self.shape = op.shape
        # stencil of block (r, s): column of cell 0 of type s, rows of type r
        stencil = np.zeros((ntypes, ntypes, n, n))
        for s_ in range(ntypes):
            col = op[:, s_ * N2].toarray().ravel()
            stencil[:, s_] = col.reshape(ntypes, n, n)
        sym = np.fft.rfft2(stencil, axes=(2, 3))  # (r, s, n, n//2+1)
        sym = np.moveaxis(sym, (0, 1), (2, 3)).reshape(-1, ntypes, ntypes)
        inv = np.empty_like(sym)
        inv[1:] = np.linalg.inv(sym[1:])
        inv[0] = np.linalg.pinv(sym[0], rcond=1e-13)
        self._inv = inv
        self._sym = sym
        if check:
            rng = np.random.default_rng(0)
            x = rng.standard_normal(op.shape[0])
            ref = op @ x
            got = self.apply(x)
            err = np.abs(got - ref).max()
            if err > 1e-10 * max(np.abs(ref).max(), 1.0):
                raise ValueError(f"operator is not translation invariant (apply mismatch {err:.3e})")

    def _fwd(self, b: np.ndarray) -> tuple[np.ndarray, bool]:
        one = b.ndim == 1
        B = b.reshape(self.ntypes, self.n, self.n, -1)
        bh = np.fft.rfft2(B, axes=(1, 2))  # (t, n, m, S)
        bh = np.moveaxis(bh, 0, 2).reshape(-1, self.ntypes, B.shape[-1])
        return bh, one

    def _bwd(self, xh: np.ndarray, one: bool) -> np.ndarray:
        n, t = self.n, self.ntypes
        S = xh.shape[-1]
        xh = np.moveaxis(xh.reshape(n, n // 2 + 1, t, S), 2, 0)
        x = np.fft.irfft2(xh, s=(n, n), axes=(1, 2)).reshape(t * n * n, S)
        return x[:, 0] if one else x

    def apply(self, x: np.ndarray) -> np.ndarray:
        xh, one = self._fwd(np.asarray(x, dtype=float))
        return self._bwd(self._sym @ xh, one)

    def solve(self, b: np.ndarray) -> np.ndarray:
        bh, one = self._fwd(np.asarray(b, dtype=float))
        return self._bwd(self._inv @ bh, one)


@dataclass
class SaddleSystem:
    """Time-step saddle system of the Taylor-Hood Stokes step.

    ``[[K, -k D^T, 0], [-k D, 0, m], [0, m^T, 0]]`` acting on
    ``(velocity, pressure, multiplier)``, where ``K = M + nu k A`` (or ``M``
    alone for the divergence-free projection) and ``m`` holds the integrals
    of the pressure basis, so the last row pins the pressure mean to zero.
    """

    velocity_block: sp.spmatrix
    divergence: sp.spmatrix
    k: float
    mean_row: np.ndarray
    rhs: np.ndarray | None = None

    @property
    def n_velocity(self) -> int:
        return self.velocity_block.shape[0]

    @property
    def n_pressure(self) -> int:
        return self.divergence.shape[0]

    def augmented(self) -> sp.csr_matrix:
        K = sp.csr_matrix(self.velocity_block)
        C = -self.k * sp.csr_matrix(self.divergence)
        m = sp.csr_matrix(np.asarray(self.mean_row, dtype=float).reshape(-1, 1))
        return sp.bmat([[K, C.T, None], [C, None, m], [None, m.T, None]], format="csr")

    def residual(self, u: np.ndarray, p: np.ndarray, rhs: np.ndarray, lam=0.0) -> tuple[np.ndarray, np.ndarray]:
        """Relative augmented residual and divergence residual, per column."""
        K, D, k, m = self.velocity_block, self.divergence, self.k, np.asarray(self.mean_row)
        r1 = K @ u - k * (D.T @ p) - rhs
        du = D @ u
        r2 = -k * du + np.multiply.outer(m, np.broadcast_to(lam, du.shape[1:]))
        r3 = m @ p
        num = np.sqrt((r1**2).sum(axis=0) + (r2**2).sum(axis=0) + r3**2)
        den = np.sqrt((rhs**2).sum(axis=0))
        rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
        return np.atleast_1d(rel), np.atleast_1d(np.abs(du).max(axis=0))


class SaddleSolver:
    """Factor a :class:`SaddleSystem` once and solve it for many right-hand sides.

    The pressure right-hand side is always zero here (discrete divergence
    constraint), so the mean multiplier of the augmented system vanishes.
    """

    def __init__(self, system: SaddleSystem, backend: str = "direct", n: int | None = None, tol: float = 1e-10):
        self.system = system
        self.backend = backend
        self.tol = tol
        nu, npr = system.n_velocity, system.n_pressure
        self._nu, self._np = nu, npr
        if backend == "direct":
            self._fact = Factorization(system.augmented(), INDEFINITE)
        elif backend == "circulant":
            if n is None:
                raise ValueError("circulant backend needs the grid size n")
            K = sp.csr_matrix(system.velocity_block)
            C = -system.k * sp.csr_matrix(system.divergence)
            op = sp.bmat([[K, C.T], [C, None]], format="csc")
            self._fact = CirculantFactorization(op, n, op.shape[0] // (n * n))
        else:
            raise ValueError(f"unknown backend {backend!r}")

    def solve(self, rhs_u: np.ndarray, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
        rhs_u = np.asarray(rhs_u, dtype=float)
        nu, npr = self._nu, self._np
        zeros_p = np.zeros((npr, *rhs_u.shape[1:]))
        if self.backend == "direct":
            zeros_1 = np.zeros((1, *rhs_u.shape[1:]))
            x = self._fact.solve(np.concatenate([rhs_u, zeros_p, zeros_1], axis=0))
            u, p, lam = x[:nu], x[nu : nu + npr], x[nu + npr]
        else:
            x = self._fact.solve(np.concatenate([rhs_u, zeros_p], axis=0))
            u, p = x[:nu], x[nu:]
            m = np.asarray(self.system.mean_row)
            # drop the round-off component along the constants
            p = p - (m @ p) / m.sum()
            lam = np.zeros(rhs_u.shape[1:])
        if check:
            finite = np.isfinite(u).all(axis=0) & np.isfinite(p).all(axis=0)
            rel, div = self.system.residual(u, p, rhs_u, lam)
            rel = np.where(np.atleast_1d(finite), rel, 0.0)
            umax = np.maximum(np.abs(u).max(axis=0), 1.0)
            div = np.where(np.atleast_1d(finite), div / np.atleast_1d(umax), 0.0)
            worst = float(rel.max(initial=0.0))
            if worst > self.tol:
                raise SolverError(f"saddle residual {worst:.3e} above {self.tol:.0e}", worst)
            if float(div.max(initial=0.0)) > self.tol:
                raise SolverError(f"divergence residual {float(div.max()):.3e} above {self.tol:.0e}", float(div.max()))
        return u, p


def solve_saddle(system: SaddleSystem, solver: SaddleSolver | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``system`` with its stored right-hand side; returns (velocity, pressure)."""
    if system.rhs is None:
        raise ValueError("saddle system has no right-hand side")
    solver = solver or SaddleSolver(system)
    return solver.solve(system.rhs)
