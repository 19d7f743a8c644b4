"""Brownian driving paths and the multiplicative noise operator B(u).

Increments come from a counter-based generator (Philox) keyed by
``(seed, sample)``; fine increment ``i`` is a fixed function of the key and
``i``, independent of how many samples or threads are in flight.  Coarse
increments are pairwise sums of fine ones, so one table drives every time
resolution of a refinement study.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtri

from .fem import l2_project, project_divfree, taylor_hood
from .linalg import INDEFINITE, CirculantFactorization, Factorization
from .mesh import TorusMesh

__all__ = [
    "BrownianDriver",
    "make_driver",
    "aggregate",
    "NoiseModel",
    "FAMILIES",
    "eval_noise",
    "HelmholtzSplit",
    "helmholtz_split_fem",
    "FemNoise",
]

FAMILIES = ("affine", "leray-projected", "gradient-augmented")


def _is_pow2(m: int) -> bool:
    return m >= 1 and (m & (m - 1)) == 0


def aggregate(increments: np.ndarray, levels: int) -> np.ndarray:
    """Merge neighbouring increments ``levels`` times along the last axis.

    Each level adds element ``2j`` and ``2j+1`` left to right, so a coarse
    increment is the pairwise-tree sum of the fine increments it covers.
    """
    a = np.asarray(increments, dtype=float)
    for _ in range(levels):
        if a.shape[-1] % 2:
            raise ValueError("increment count is not divisible by 2")
        a = a[..., 0::2] + a[..., 1::2]
    return a


def _uniforms(seed: int, sample: int, count: int) -> np.ndarray:
    bg = np.random.Philox(key=np.array([seed, sample], dtype=np.uint64))
    raw = bg.random_raw(count)
    # 53-bit midpoint grid, strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class BrownianDriver:
    """Fine-grid scalar Wiener increments for one sample path."""

    seed: int
    T: float
    M_fine: int
    sample: int = 0
    fine: np.ndarray = field(repr=False, default=None)

    @property
    def k_fine(self) -> float:
        return self.T / self.M_fine

    def level_of(self, M: int) -> int:
        if not _is_pow2(M) or M > self.M_fine or self.M_fine % M:
            raise ValueError(f"step count {M} must be a power of 2 dividing {self.M_fine}")
        return int(round(math.log2(self.M_fine // M)))

    def increments(self, M: int | None = None, level: int | None = None) -> np.ndarray:
        """Increments on the grid with ``M`` steps (or ``level`` halvings)."""
        if level is None:
            level = 0 if M is None else self.level_of(M)
        return aggregate(self.fine, level)

    def path(self, M: int | None = None) -> np.ndarray:
        """W at the grid times, starting with W(0) = 0."""
        return np.concatenate([[0.0], np.cumsum(self.increments(M))])

    def checksum(self) -> str:
        return hashlib.sha256(self.fine.tobytes()).hexdigest()[:16]


def make_driver(seed: int, T: float, M_fine: int, sample: int = 0) -> BrownianDriver:
    if not (T > 0):
        raise ValueError(f"final time must be positive, got {T!r}")
    if int(M_fine) != M_fine or not _is_pow2(int(M_fine)):
        raise ValueError(f"M_fine must be a power of 2, got {M_fine!r}")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    M_fine = int(M_fine)
    dw = ndtri(_uniforms(seed, int(sample), M_fine)) * math.sqrt(T / M_fine)
    dw.flags.writeable = False
    return BrownianDriver(seed, float(T), M_fine, int(sample), dw)


def driver_table(seed: int, T: float, M_fine: int, samples) -> np.ndarray:
    """(S, M_fine) fine increments for the given sample indices."""
    return np.stack([make_driver(seed, T, M_fine, s).fine for s in samples])


# -- noise model -----------------------------------------------------------------


def _default_g(L: float) -> Callable:
    w = 2 * math.pi / L
    return lambda x, y: (np.sin(w * y), np.sin(w * x))


def _default_zeta(L: float) -> Callable:
    w = 2 * math.pi / L
    return lambda x, y: np.cos(w * x) * np.cos(w * y) / (2 * math.pi)


def _default_grad_zeta(L: float) -> Callable:
    w = 2 * math.pi / L
    a = w / (2 * math.pi)
    return lambda x, y: (-a * np.sin(w * x) * np.cos(w * y), -a * np.cos(w * x) * np.sin(w * y))


@dataclass(frozen=True)
class NoiseModel:
    """Affine multiplicative noise ``B(u) = sigma0 g + sigma1 u (+ c grad zeta)``.

    ``leray-projected`` returns the divergence-free part of the affine
    family; ``gradient-augmented`` adds ``c grad zeta``.  The profiles default
    to ``g = (sin 2 pi y/L, sin 2 pi x/L)`` and
    ``zeta = cos(2 pi x/L) cos(2 pi y/L) / (2 pi)``.
    """

    family: str = "affine"
    sigma0: float = 0.5
    sigma1: float = 0.5
    c: float = 0.0
    L: float = 1.0
    g: Callable | None = None
    zeta: Callable | None = None
    grad_zeta: Callable | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.g is None:
            object.__setattr__(self, "g", _default_g(self.L))
        if self.zeta is None:
            object.__setattr__(self, "zeta", _default_zeta(self.L))
            object.__setattr__(self, "grad_zeta", _default_grad_zeta(self.L))
        if self.grad_zeta is None:
            raise ValueError("a custom zeta needs its gradient")

    @property
    def has_gradient(self) -> bool:
        return self.family == "gradient-augmented" and self.c != 0.0

    @property
    def is_zero(self) -> bool:
        return self.sigma0 == 0.0 and self.sigma1 == 0.0 and not self.has_gradient

    @property
    def lipschitz(self) -> float:
        return abs(self.sigma1)


def _squared_l2(mesh: TorusMesh, fvals) -> float:
    qt = taylor_hood(mesh).quad
    return float(qt.integrate(np.sum(np.square(fvals), axis=0)))


def growth_constant(model: NoiseModel, mesh: TorusMesh) -> float:
    """``max(sigma1, sigma0 ||g|| + c ||grad zeta||)`` with quadrature norms."""
    pts = taylor_hood(mesh).quad.points
    g = np.asarray(model.g(pts[:, 0], pts[:, 1]))
    dz = np.asarray(model.grad_zeta(pts[:, 0], pts[:, 1]))
    c = abs(model.c) if model.family == "gradient-augmented" else 0.0
    return max(abs(model.sigma1), abs(model.sigma0) * math.sqrt(_squared_l2(mesh, g)) + c * math.sqrt(_squared_l2(mesh, dz)))


class FemNoise:
    """Finite element realisation of a :class:`NoiseModel` on one mesh.

    ``B(u) = b0 + sigma1 * u`` where ``b0`` holds the projected profiles; for
    the leray-projected family ``u`` is also projected (a no-op on discretely
    divergence-free velocities, which is what the schemes pass in).
    """

    def __init__(self, model: NoiseModel, mesh: TorusMesh, backend: str = "direct"):
        self.model = model
        self.mesh = mesh
        self.backend = backend
        th = taylor_hood(mesh)
        b0 = np.zeros(th.nvel)
        if model.sigma0 != 0.0:
            b0 = b0 + model.sigma0 * l2_project(mesh, model.g, "P2-vector", backend)
        if model.has_gradient:
            b0 = b0 + model.c * l2_project(mesh, model.grad_zeta, "P2-vector", backend)
        if model.family == "leray-projected":
            b0 = project_divfree(mesh, b0, backend).velocity
        self.b0 = b0

    def __call__(self, u: np.ndarray, assume_divfree: bool = False) -> np.ndarray:
        s1 = self.model.sigma1
        if self.model.family == "leray-projected" and not assume_divfree and s1 != 0.0:
            u = project_divfree(self.mesh, u, self.backend).velocity
        b0 = self.b0 if u.ndim == 1 else self.b0[:, None]
        return b0 + s1 * u


def eval_noise(model: NoiseModel, u: np.ndarray, mesh: TorusMesh) -> np.ndarray:
    """Velocity-space coefficients of ``B(u)``."""
    return _fem_noise(model, mesh)(np.asarray(u, dtype=float))


_NOISE_CACHE: dict = {}


def _fem_noise(model: NoiseModel, mesh: TorusMesh) -> FemNoise:
    key = (id(model), id(mesh))
    hit = _NOISE_CACHE.get(key)
    if hit is None or hit[0] is not model or hit[1] is not mesh:
        hit = (model, mesh, FemNoise(model, mesh))
        if len(_NOISE_CACHE) > 32:
            _NOISE_CACHE.clear()
        _NOISE_CACHE[key] = hit
    return hit[2]


# -- discrete Helmholtz split ----------------------------------------------------


@dataclass
class HelmholtzSplit:
    """``field = eta + grad xi`` with ``(field - grad xi, grad phi_h) = 0`` for P1 ``phi_h``.

    ``eta`` holds velocity-space coefficients of ``field - Pi grad xi`` where
    ``Pi`` is the L2 projection onto the P2 vector space (P1 gradients are
    discontinuous, so ``Pi`` is not the identity on them).  ``residual`` is
    the relative residual of the xi system, i.e. the weak orthogonality
    defect of ``field - grad xi`` against P1 gradients.
    """

    xi: np.ndarray
    eta: np.ndarray
    residual: float


class HelmholtzSolver:
    """Reusable P1 Poisson solve and gradient projection for one mesh."""

    def __init__(self, mesh: TorusMesh, backend: str = "direct"):
        th = taylor_hood(mesh)
        self.th = th
        self.backend = backend
        m = th.p1_integrals
        if backend == "direct":
            aug = sp.bmat([[th.stiff_p1, sp.csr_matrix(m.reshape(-1, 1))], [sp.csr_matrix(m.reshape(1, -1)), None]], format="csc")
            self._fact = Factorization(aug, INDEFINITE)
        else:
            self._fact = CirculantFactorization(th.stiff_p1, mesh.n, 1)
        self._mass = th.mass_solver("P2-vector", backend)

    def xi(self, field: np.ndarray) -> np.ndarray:
        """Mean-zero P1 solution of ``(grad xi, grad phi) = (field, grad phi)``."""
        th = self.th
        # (field, grad psi) = -(div field, psi) on the torus
        rhs = -(th.div @ field)
        m = th.p1_integrals
        if self.backend == "direct":
            tail = np.zeros((1, *rhs.shape[1:]))
            x = self._fact.solve(np.concatenate([rhs, tail], axis=0))[: th.n1]
        else:
            x = self._fact.solve(rhs)
        return x - (m @ x) / m.sum()

    def grad_load(self, xi: np.ndarray) -> np.ndarray:
        """Load vector ``(grad xi, phi_i)`` over the P2 vector basis."""
        return -(self.th.div.T @ xi)

    def split(self, field: np.ndarray) -> HelmholtzSplit:
        th = self.th
        xi = self.xi(field)
        grad = self._mass.solve(self.grad_load(xi))
        rhs = -(th.div @ field)
        # size of the load before cancellation: a weakly divergence-free field
        # has a round-off right-hand side and must not look like a failed solve
        scale = max(np.linalg.norm(rhs), np.linalg.norm(abs(th.div) @ np.abs(field)))
        res = np.linalg.norm(th.stiff_p1 @ xi - rhs) / scale if scale > 0 else 0.0
        return HelmholtzSplit(xi, field - grad, float(res))


_HELM_CACHE: "dict[int, tuple]" = {}


def helmholtz_split_fem(mesh: TorusMesh, field: np.ndarray, tol: float = 1e-11) -> HelmholtzSplit:
    """Discrete Helmholtz split of a P2 vector field (xi in P1, mean zero)."""
    hit = _HELM_CACHE.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, HelmholtzSolver(mesh))
        _HELM_CACHE[id(mesh)] = hit
    split = hit[1].split(np.asarray(field, dtype=float))
    if split.residual > tol:
        raise RuntimeError(f"xi solve residual {split.residual:.3e} above {tol:.0e}")
    return split
