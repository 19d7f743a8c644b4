"""Fourier pseudo-spectral stochastic Stokes stepping on the torus.

Coefficients use the ``numpy.fft`` layout on an ``N x N`` grid with the
normalisation ``f(x) = sum_m fhat(m) exp(i kappa_m . x)``, ``kappa = 2 pi m / L``.
Arrays carry the components on axis ``-3`` and may have any leading batch
axes (Monte Carlo samples).  The Nyquist modes are kept at zero so every
operation preserves conjugate symmetry.

A field tagged divergence-free is returned unchanged by :func:`leray_project`,
which makes the projection bitwise idempotent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .fem import sample_field, taylor_hood
from .mesh import TorusMesh

__all__ = [
    "SpectralGrid",
    "ModeSet",
    "SpectralField",
    "spectral_grid",
    "from_function",
    "leray_project",
    "helmholtz_split_spectral",
    "SpectralNoise",
    "em_step_spectral",
    "StepResult",
    "reference_solution",
    "eval_on_mesh",
    "l2_norm",
]


class SpectralGrid:
    def __init__(self, L: float, N: int):
        if N < 4 or N % 2:
            raise ValueError(f"N must be even and >= 4, got {N!r}")
        if not L > 0:
            raise ValueError(f"side length must be positive, got {L!r}")
        self.L = float(L)
        self.N = int(N)
        m = np.fft.fftfreq(N, 1.0 / N).astype(int)
        # axis -2 is y, axis -1 is x
        self.my, self.mx = np.meshgrid(m, m, indexing="ij")
        w = 2 * math.pi / L
        self.kx = w * self.mx
        self.ky = w * self.my
        self.k2 = self.kx**2 + self.ky**2
        self.nyquist = (np.abs(self.mx) == N // 2) | (np.abs(self.my) == N // 2)
        self.k2_safe = np.where(self.k2 > 0, self.k2, 1.0)
        self.kvec = np.stack([self.kx, self.ky])
        x = np.arange(N) * (L / N)
        self.x = x

    def restrict(self, mask: np.ndarray) -> "ModeSet":
        return ModeSet(self, mask)

    def mask(self, a: np.ndarray) -> np.ndarray:
        a = np.array(a, dtype=complex)
        a[..., self.nyquist] = 0.0
        a[..., 0, 0] = 0.0
        return a


class ModeSet:
    """A subset of the Fourier modes of a grid, laid out as a ``1 x nm`` grid.

    Every per-mode operation of this module works unchanged on arrays whose
    last two axes are ``(1, nm)``.  Affine dynamics never couple modes, so a
    trajectory restricted to the support of its data is exact.
    """

    def __init__(self, grid: SpectralGrid, mask: np.ndarray):
        self.full = grid
        self.L, self.N = grid.L, grid.N
        self.iy, self.ix = np.nonzero(mask)
        self.mask = mask
        for name in ("kx", "ky", "k2", "k2_safe", "mx", "my"):
            setattr(self, name, getattr(grid, name)[self.iy, self.ix][None, :])
        self.kvec = np.stack([self.kx, self.ky])

    @property
    def size(self) -> int:
        return self.iy.size

    def compress(self, a: np.ndarray) -> np.ndarray:
        return a[..., self.iy, self.ix][..., None, :]

    def expand(self, a: np.ndarray) -> np.ndarray:
        out = np.zeros(a.shape[:-2] + (self.N, self.N), dtype=complex)
        out[..., self.iy, self.ix] = a[..., 0, :]
        return out


@lru_cache(maxsize=16)
def spectral_grid(L: float, N: int) -> SpectralGrid:
    return SpectralGrid(L, N)


@dataclass(frozen=True)
class SpectralField:
    coeffs: np.ndarray  # (..., C, N, N)
    L: float
    divfree: bool = False

    @property
    def N(self) -> int:
        return self.coeffs.shape[-1]

    @property
    def components(self) -> int:
        return self.coeffs.shape[-3]

    @property
    def grid(self) -> SpectralGrid:
        return spectral_grid(self.L, self.N)

    def values(self) -> np.ndarray:
        """Nodal values on the ``N x N`` grid (real)."""
        return np.fft.ifft2(self.coeffs * self.N**2).real

    def divergence_defect(self) -> float:
        """``max_m |kappa . u(m)| / ||u||`` (velocity fields)."""
        g = self.grid
        d = np.abs(np.einsum("dyx,...dyx->...yx", g.kvec / (2 * math.pi / self.L), self.coeffs)).max()
        norm = math.sqrt(float(np.sum(np.abs(self.coeffs) ** 2)))
        return float(d / norm) if norm > 0 else 0.0

    def symmetry_defect(self) -> float:
        c = self.coeffs
        flipped = np.roll(np.flip(c, axis=(-2, -1)), 1, axis=(-2, -1))
        return float(np.abs(c - np.conj(flipped)).max(initial=0.0))


def from_function(f: Callable, L: float, N: int, vector: bool = True, divfree: bool | None = None) -> SpectralField:
    """Truncated Fourier series of ``f(x, y)`` sampled on the grid.

    The mean and Nyquist modes are dropped.  Velocity fields are Leray
    projected unless ``divfree=False``.
    """
    g = spectral_grid(L, N)
    Y, X = np.meshgrid(g.x, g.x, indexing="ij")
    vals = sample_field(f, X, Y, 2 if vector else 1)
    coeffs = g.mask(np.fft.fft2(vals) / N**2)
    field = SpectralField(coeffs, L)
    if vector and divfree is not False:
        field = leray_project(field)
    return field


def _leray(c: np.ndarray, g: SpectralGrid) -> np.ndarray:
    kdot = np.einsum("dyx,...dyx->...yx", g.kvec, c)
    return c - g.kvec * (kdot / g.k2_safe)[..., None, :, :]


def leray_project(field: SpectralField) -> SpectralField:
    """Divergence-free part; idempotent (a tagged field is returned as is)."""
    if field.divfree:
        return field
    if field.components != 2:
        raise ValueError("Leray projection needs a two-component field")
    return SpectralField(_leray(field.coeffs, field.grid), field.L, True)


def _xi(c: np.ndarray, g: SpectralGrid) -> np.ndarray:
    # grad xi = (I - P) c  =>  i kappa xi = kappa (kappa . c)/|kappa|^2
    kdot = np.einsum("dyx,...dyx->...yx", g.kvec, c)
    return -1j * kdot / g.k2_safe


def helmholtz_split_spectral(field: SpectralField) -> tuple[SpectralField, SpectralField]:
    """``(xi, eta)`` with ``field = eta + grad xi`` exactly per mode."""
    g = field.grid
    if field.divfree:
        zero = np.zeros(field.coeffs.shape[:-3] + (1, g.N, g.N), dtype=complex)
        return SpectralField(zero, field.L), field
    xi = _xi(field.coeffs, g)
    eta = field.coeffs - 1j * g.kvec * xi[..., None, :, :]
    return SpectralField(xi[..., None, :, :], field.L), SpectralField(eta, field.L, True)


def l2_norm(coeffs: np.ndarray, L: float, weight: np.ndarray | None = None) -> np.ndarray:
    """Parseval L2 norm over the last three axes (optionally weighted per mode)."""
    a = np.abs(coeffs) ** 2
    if weight is not None:
        a = a * weight
    return L * np.sqrt(a.sum(axis=(-3, -2, -1)))


class SpectralNoise:
    """Spectral realisation of an affine :class:`~stochstokes.noise.NoiseModel`."""

    def __init__(self, model, grid: SpectralGrid):
        self.model = model
        self.grid = grid
        N, L = grid.N, grid.L
        b0 = np.zeros((2, N, N), dtype=complex)
        if model.sigma0 != 0.0:
            b0 = b0 + model.sigma0 * from_function(model.g, L, N, divfree=False).coeffs
        if model.has_gradient:
            zeta = from_function(model.zeta, L, N, vector=False).coeffs[0]
            b0 = b0 + model.c * 1j * grid.kvec * zeta
        self.divfree = model.family == "leray-projected"
        if self.divfree:
            b0 = _leray(b0, grid)
        self.b0 = b0

    @property
    def is_zero(self) -> bool:
        return self.model.is_zero

    def __call__(self, u: np.ndarray) -> np.ndarray:
        # u is divergence-free, so the Leray family needs no further projection
        return self.b0 + self.model.sigma1 * u

    def xi(self, B: np.ndarray) -> np.ndarray:
        if self.divfree:
            return np.zeros(B.shape[:-3] + B.shape[-2:], dtype=complex)
        return _xi(B, self.grid)


@dataclass
class StepResult:
    u: np.ndarray  # (..., 2, N, N)
    p: np.ndarray  # (..., N, N)
    r: np.ndarray
    xi: np.ndarray


def em_step_spectral(
    u: np.ndarray,
    dW,
    k: float,
    nu: float,
    noise: SpectralNoise,
    grid: SpectralGrid,
    mode: str = "standard",
    f_next: np.ndarray | None = None,
) -> StepResult:
    """One Euler-Maruyama step per Fourier mode.

    ``standard`` feeds ``B(u) dW`` to the momentum balance and reads the
    pressure off its gradient part; ``modified`` feeds ``eta dW`` with
    ``eta = B(u) - grad xi``, solves for the pseudo-pressure ``r`` and sets
    ``p = r + xi dW / k``.
    """
    if mode not in ("standard", "modified"):
        raise ValueError(f"unknown scheme {mode!r}")
    dW = np.asarray(dW, dtype=float)
    dWc = dW[..., None, None, None]
    dWs = dW[..., None, None]
    B = noise(u)
    xi = noise.xi(B)
    if mode == "standard":
        w = u + B * dWc
        divfree = noise.divfree
    else:
        eta = B if noise.divfree else B - 1j * grid.kvec * xi[..., None, :, :]
        w = u + eta * dWc
        divfree = True
    if f_next is not None:
        w = w + k * f_next
        divfree = False
    if divfree:
        q = np.zeros(w.shape[:-3] + w.shape[-2:], dtype=complex)
        proj = w
    else:
        # k grad q = (I - P) w, q the pressure (standard) or pseudo-pressure
        q = _xi(w, grid) / k
        proj = _leray(w, grid)
    u_new = proj / (1.0 + nu * k * grid.k2)
    if mode == "standard":
        p, r = q, q - xi * (dWs / k)
    else:
        r, p = q, q + xi * (dWs / k)
    return StepResult(u_new, p, r, xi)


def reference_solution(
    u0: np.ndarray,
    increments: np.ndarray,
    T: float,
    nu: float,
    noise: SpectralNoise,
    grid: SpectralGrid,
    checkpoints=(),
    forcing: Callable | None = None,
) -> dict:
    """Fine-step spectral trajectory on the given increments.

    ``increments`` is ``(..., M_ref)``.  Returns the final state, the
    time-averaged pressures ``P`` and ``R`` at the final time and the states at
    the requested checkpoint step indices.
    """
    M = increments.shape[-1]
    k = T / M
    u = np.broadcast_to(u0, increments.shape[:-1] + u0.shape[-3:]).astype(complex)
    P = np.zeros(u.shape[:-3] + u.shape[-2:], dtype=complex)
    R = np.zeros_like(P)
    snaps = {}
    want = set(int(c) for c in checkpoints)
    for n in range(M):
        f_next = forcing((n + 1) * k) if forcing is not None else None
        st = em_step_spectral(u, increments[..., n], k, nu, noise, grid, "standard", f_next)
        u = st.u
        P = P + k * st.p
        R = R + k * st.r
        if n + 1 in want:
            snaps[n + 1] = u
    return {"u": u, "P": P, "R": R, "checkpoints": snaps, "k": k}


def _support(coeffs: np.ndarray, rtol: float = 1e-13) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(coeffs).reshape(-1, *coeffs.shape[-2:]).max(axis=0)
    top = a.max(initial=0.0)
    iy, ix = np.nonzero(a > rtol * top) if top > 0 else (np.array([], int), np.array([], int))
    return iy, ix


def mode_table(grid: SpectralGrid, points: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    """``exp(i kappa_m . x_p)`` for the listed modes, (npts, nmodes)."""
    kx = grid.kx[iy, ix]
    ky = grid.ky[iy, ix]
    return np.exp(1j * (np.outer(points[:, 0], kx) + np.outer(points[:, 1], ky)))


def eval_on_mesh(field: SpectralField, mesh: TorusMesh) -> np.ndarray:
    """Values of the truncated series at the mesh's degree-6 quadrature nodes.

    Direct summation over the modes carried by the field; output has the
    field's leading axes followed by ``(C, npts)``.
    """
    if not math.isclose(field.L, mesh.L):
        raise ValueError("field and mesh live on different boxes")
    pts = taylor_hood(mesh).quad.points
    g = field.grid
    iy, ix = _support(field.coeffs)
    if iy.size == 0:
        return np.zeros(field.coeffs.shape[:-2] + (pts.shape[0],))
    E = mode_table(g, pts, iy, ix)
    c = field.coeffs[..., iy, ix]
    return np.real(c @ E.T)
