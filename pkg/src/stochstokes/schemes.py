"""Euler-Maruyama time steppers for the stochastic Stokes problem.

Two spatial realisations share one interface:

* :class:`FemIntegrator` runs the fully discrete Taylor-Hood schemes on a
  :class:`~stochstokes.mesh.TorusMesh` (standard and Helmholtz-modified).
* :class:`SpectralIntegrator` runs the semi-discrete schemes on a truncated
  divergence-free Fourier space.

Both step a whole batch of sample paths at once: FE states are
``(dofs, S)`` arrays, spectral states ``(S, 2, N, N)``.  Left-hand sides are
factorised once per integrator; the noise only enters right-hand sides.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import project_divfree, sample_field, taylor_hood
from .linalg import SaddleSolver, SolverError
from .mesh import TorusMesh
from .noise import BrownianDriver, FemNoise, HelmholtzSolver, NoiseModel, aggregate
from .spectral import SpectralGrid, SpectralNoise, em_step_spectral, from_function

__all__ = [
    "SchemeConfig",
    "StepError",
    "FemIntegrator",
    "SpectralIntegrator",
    "TrajectoryOutput",
    "run_trajectory",
    "step_standard",
    "step_modified",
    "named_field",
    "VELOCITY_FIELDS",
    "FORCINGS",
]

SCHEMES = ("standard", "modified")


def _shear(L):
    w = 2 * math.pi / L
    return lambda x, y: (np.sin(w * y), 0.0)


def _taylor_green(L):
    w = 2 * math.pi / L
    return lambda x, y: (np.sin(w * x) * np.cos(w * y), -np.cos(w * x) * np.sin(w * y))


def _zero(L):
    return lambda x, y: (0.0, 0.0)


VELOCITY_FIELDS = {"zero": _zero, "shear": _shear, "taylor-green": _taylor_green}
# steady forcings f(x, y); "zero" means no forcing at all
FORCINGS = {"zero": None, "shear": _shear, "taylor-green": _taylor_green}


def named_field(name: str, L: float, table: dict = VELOCITY_FIELDS):
    if name not in table:
        raise ValueError(f"unknown field {name!r}; expected one of {sorted(table)}")
    maker = table[name]
    return None if maker is None else maker(L)


@dataclass(frozen=True)
class SchemeConfig:
    nu: float = 1.0
    T: float = 0.5
    M: int = 64
    scheme: str = "standard"
    noise: NoiseModel = field(default_factory=NoiseModel)
    forcing: Callable | None = None  # f(t, x, y) -> (fx, fy), or None
    u0: Callable | str = "taylor-green"
    L: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"viscosity must be positive, got {self.nu!r}")
        if not self.T > 0:
            raise ValueError(f"final time must be positive, got {self.T!r}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"step count must be a positive integer, got {self.M!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    @property
    def k(self) -> float:
        return self.T / self.M

    def initial(self) -> Callable:
        return named_field(self.u0, self.L) if isinstance(self.u0, str) else self.u0

    def with_(self, **kw) -> "SchemeConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SchemeConfig(**d)


class StepError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class StepOut:
    u: np.ndarray
    p: np.ndarray
    r: np.ndarray
    xi: np.ndarray


class FemIntegrator:
    """Taylor-Hood Euler-Maruyama steps for one (mesh, nu, k, noise)."""

    def __init__(self, mesh: TorusMesh, cfg: SchemeConfig, backend: str = "circulant", tol: float = 1e-10):
        if not math.isclose(mesh.L, cfg.L):
            raise ValueError("mesh and configuration disagree on the box size")
        self.mesh = mesh
        self.cfg = cfg
        self.k = cfg.k
        self.backend = backend
        th = taylor_hood(mesh)
        self.th = th
        self.solver = SaddleSolver(th.stokes_system(cfg.nu, self.k), backend=backend, n=mesh.n, tol=tol)
        self.noise = FemNoise(cfg.noise, mesh, backend)
        # the standard scheme also needs xi, to report r = p - xi dW / k
        self.helmholtz = HelmholtzSolver(mesh, backend)

    # -- data ---------------------------------------------------------------
    def initial(self, S: int | None = None) -> np.ndarray:
        u0 = project_divfree(self.mesh, self.cfg.initial(), self.backend).velocity
        return u0 if S is None else np.repeat(u0[:, None], S, axis=1)

    def forcing_load(self, t: float) -> np.ndarray | None:
        f = self.cfg.forcing
        if f is None:
            return None
        qt = self.th.quad
        x, y = qt.points[:, 0], qt.points[:, 1]
        vals = sample_field(lambda a, b: f(t, a, b), x, y, 2)
        return qt.load_vector(vals, "P2-vector")

    # -- steps --------------------------------------------------------------
    def _rhs(self, u: np.ndarray, n: int, noise_load: np.ndarray, dW) -> np.ndarray:
        rhs = self.th.mass_vel @ u + noise_load * dW
        b = self.forcing_load((n + 1) * self.k)
        if b is not None:
            rhs = rhs + self.k * (b if u.ndim == 1 else b[:, None])
        return rhs

    def step(self, u: np.ndarray, n: int, dW) -> StepOut:
        """Advance ``u^n`` to ``u^{n+1}`` with the increment ``dW_{n+1}``."""
        dW = np.asarray(dW, dtype=float)
        th = self.th
        B = self.noise(u, assume_divfree=True)
        try:
            xi = self.helmholtz.xi(B)
            if self.cfg.scheme == "standard":
                u1, p1 = self.solver.solve(self._rhs(u, n, th.mass_vel @ B, dW))
                r1 = p1 - xi * (dW / self.k)
            else:
                # (eta, phi) = (B, phi) - (grad xi, phi) = (M B + D^T xi)_phi
                load = th.mass_vel @ B - self.helmholtz.grad_load(xi)
                u1, r1 = self.solver.solve(self._rhs(u, n, load, dW))
                p1 = r1 + xi * (dW / self.k)
        except SolverError as exc:
            raise StepError(n + 1, exc) from exc
        return StepOut(u1, p1, r1, xi)

    # -- norms ----------------------------------------------------------------
    def l2_sq(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("i...,i...->...", u, self.th.mass_vel @ u)

    def h1_sq(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("i...,i...->...", u, self.th.stiff_vel @ u)

    def grad_p_sq(self, p: np.ndarray) -> np.ndarray:
        return np.einsum("i...,i...->...", p, self.th.stiff_p1 @ p)

    def divergence(self, u: np.ndarray) -> np.ndarray:
        return np.abs(self.th.div @ u).max(axis=0)


def step_standard(u: np.ndarray, n: int, dW, ops: FemIntegrator) -> tuple[np.ndarray, np.ndarray]:
    """Standard Taylor-Hood step; returns ``(u^{n+1}, p^{n+1})``."""
    if ops.cfg.scheme != "standard":
        raise ValueError("integrator was built for the modified scheme")
    out = ops.step(u, n, dW)
    return out.u, out.p


def step_modified(u: np.ndarray, n: int, dW, ops: FemIntegrator):
    """Helmholtz-modified step; returns ``(u^{n+1}, r^{n+1}, p^{n+1}, xi^n)``."""
    if ops.cfg.scheme != "modified":
        raise ValueError("integrator was built for the standard scheme")
    out = ops.step(u, n, dW)
    return out.u, out.r, out.p, out.xi


class SpectralIntegrator:
    """Semi-discrete steps on the truncated divergence-free Fourier space."""

    def __init__(self, grid: SpectralGrid, cfg: SchemeConfig, modes: np.ndarray | None = None):
        """``modes`` (boolean ``N x N`` mask) restricts the state to those modes."""
        if not math.isclose(grid.L, cfg.L):
            raise ValueError("grid and configuration disagree on the box size")
        self.full_grid = grid
        self.cfg = cfg
        self.k = cfg.k
        self.noise = SpectralNoise(cfg.noise, grid)
        self.modes = None if modes is None else grid.restrict(modes)
        if self.modes is not None:
            self.noise.b0 = self.modes.compress(self.noise.b0)
            self.noise.grid = self.modes
        self.grid = self.modes if self.modes is not None else grid

    def _local(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs if self.modes is None else self.modes.compress(coeffs)

    def initial(self, S: int | None = None) -> np.ndarray:
        g = self.full_grid
        u0 = self._local(from_function(self.cfg.initial(), g.L, g.N).coeffs)
        return u0 if S is None else np.repeat(u0[None], S, axis=0)

    def forcing_hat(self, t: float) -> np.ndarray | None:
        f = self.cfg.forcing
        if f is None:
            return None
        g = self.full_grid
        return self._local(from_function(lambda x, y: f(t, x, y), g.L, g.N, divfree=False).coeffs)

    def step(self, u: np.ndarray, n: int, dW) -> StepOut:
        st = em_step_spectral(
            u, dW, self.k, self.cfg.nu, self.noise, self.grid, self.cfg.scheme, self.forcing_hat((n + 1) * self.k)
        )
        return StepOut(st.u, st.p, st.r, st.xi)

    def l2_sq(self, u: np.ndarray) -> np.ndarray:
        return self.grid.L**2 * (np.abs(u) ** 2).sum(axis=(-3, -2, -1))

    def h1_sq(self, u: np.ndarray) -> np.ndarray:
        return self.grid.L**2 * (self.grid.k2 * np.abs(u) ** 2).sum(axis=(-3, -2, -1))

    def grad_p_sq(self, p: np.ndarray) -> np.ndarray:
        return self.grid.L**2 * (self.grid.k2 * np.abs(p) ** 2).sum(axis=(-2, -1))

    def divergence(self, u: np.ndarray) -> np.ndarray:
        d = np.abs(np.einsum("dyx,...dyx->...yx", self.grid.kvec, u))
        return d.max(axis=(-2, -1))


@dataclass
class TrajectoryOutput:
    """Final state, accumulators and per-step diagnostics of one run.

    ``P`` and ``R`` are ``k * sum_{n=1}^M p^n`` and ``k * sum r^n``; ``U`` is
    ``sum_{n=1}^M u^n`` (the weak-H1 functional is ``nu k grad U``).
    Diagnostics are indexed by step ``n = 0..M`` (pressures from ``n = 1``).
    """

    u: np.ndarray
    P: np.ndarray
    R: np.ndarray
    U: np.ndarray
    snapshots: dict
    l2_u: np.ndarray
    h1_u: np.ndarray
    h1_p: np.ndarray
    h1_r: np.ndarray
    max_divergence: np.ndarray
    unstable: np.ndarray
    k: float

    def stability_functional(self, nu: float) -> np.ndarray:
        """``max_n ||u^n||^2 + nu k sum_{n>=1} ||grad u^n||^2`` per sample."""
        return np.max(self.l2_u**2, axis=0) + nu * self.k * np.sum(self.h1_u[1:] ** 2, axis=0)

    def pressure_energy(self, which: str = "p") -> np.ndarray:
        """``k sum_{n>=1} ||grad p^n||^2`` (or of ``r``)."""
        h = self.h1_p if which == "p" else self.h1_r
        return self.k * np.sum(h[1:] ** 2, axis=0)


def _increments(driver, M: int) -> np.ndarray:
    if isinstance(driver, BrownianDriver):
        return driver.increments(M)
    inc = np.asarray(driver, dtype=float)
    Mf = inc.shape[-1]
    if Mf % M:
        raise ValueError(f"step count {M} does not divide the {Mf} fine increments")
    r = Mf // M
    if r & (r - 1):
        raise ValueError("fine/coarse step ratio must be a power of 2")
    return aggregate(inc, int(round(math.log2(r))))


def run_trajectory(
    cfg: SchemeConfig,
    driver,
    space,
    checkpoints=(),
    backend: str = "circulant",
    blowup: float = 1e8,
) -> TrajectoryOutput:
    """Run ``cfg.M`` steps from the projected initial data.

    ``driver`` is a :class:`BrownianDriver` or an ``(S, M_fine)`` increment
    table (batch of paths); ``space`` a mesh (fully discrete scheme) or a
    spectral grid (semi-discrete scheme).
    """
    if isinstance(space, TorusMesh):
        integ = FemIntegrator(space, cfg, backend)
    elif isinstance(space, SpectralGrid):
        integ = SpectralIntegrator(space, cfg)
    else:
        raise TypeError(f"unsupported discretisation {type(space).__name__}")
    dW = _increments(driver, cfg.M)
    batch = dW.ndim == 2
    S = dW.shape[0] if batch else None
    u = integ.initial(S)
    M, k = cfg.M, cfg.k
    want = {int(c) for c in checkpoints}
    shape = (M + 1,) + ((S,) if batch else ())
    l2_u, h1_u = np.zeros(shape), np.zeros(shape)
    h1_p, h1_r = np.zeros(shape), np.zeros(shape)
    divmax = np.zeros(shape[1:])
    l2_u[0] = np.sqrt(integ.l2_sq(u))
    h1_u[0] = np.sqrt(integ.h1_sq(u))
    P = R = U = None
    snaps = {}
    for n in range(M):
        inc = dW[:, n] if batch else dW[n]
        out = integ.step(u, n, inc)
        u, r = out.u, out.r
        P = k * out.p if P is None else P + k * out.p
        R = k * r if R is None else R + k * r
        U = u.copy() if U is None else U + u
        l2_u[n + 1] = np.sqrt(integ.l2_sq(u))
        h1_u[n + 1] = np.sqrt(integ.h1_sq(u))
        h1_p[n + 1] = np.sqrt(integ.grad_p_sq(out.p))
        h1_r[n + 1] = np.sqrt(integ.grad_p_sq(r))
        divmax = np.maximum(divmax, integ.divergence(u))
        if n + 1 in want:
            snaps[n + 1] = u.copy()
    unstable = ~np.isfinite(l2_u).all(axis=0) | (np.nan_to_num(l2_u, nan=np.inf).max(axis=0) > blowup)
    return TrajectoryOutput(u, P, R, U, snaps, l2_u, h1_u, h1_p, h1_r, divmax, unstable, k)
