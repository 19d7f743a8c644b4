"""Taylor-Hood (P2 velocity / P1 pressure) operators on the periodic mesh.

Velocity coefficient vectors are component-major: the x-component P2 dofs
followed by the y-component P2 dofs.  Operators are returned as
``scipy.sparse.csr_matrix`` with sorted column indices and no stored zeros.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .linalg import INDEFINITE, SPD, CirculantFactorization, Factorization, SaddleSolver, SaddleSystem
from .mesh import TorusMesh
from .quadrature import RULE_DEG4, RULE_DEG6, TriangleRule

__all__ = [
    "MixedField",
    "TaylorHood",
    "taylor_hood",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_divergence",
    "l2_project",
    "project_divfree",
    "discrete_lbb_constant",
    "p2_values",
    "p2_bary_derivatives",
]

SPACES = ("P1", "P2", "P2-vector")
ROLES = ("pressure", "pseudo-pressure", "helmholtz")

_EDGES = ((0, 1), (1, 2), (2, 0))


def p2_values(bary: np.ndarray) -> np.ndarray:
    """P2 shape functions at barycentric points, (q, 6)."""
    l0, l1, l2 = bary.T
    return np.column_stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0]
    )


def p2_bary_derivatives(bary: np.ndarray) -> np.ndarray:
    """d(phi_a)/d(lambda_b) at barycentric points, (q, 6, 3)."""
    q = bary.shape[0]
    d = np.zeros((q, 6, 3))
    for i in range(3):
        d[:, i, i] = 4 * bary[:, i] - 1
    for e, (i, j) in enumerate(_EDGES):
        d[:, 3 + e, i] = 4 * bary[:, j]
        d[:, 3 + e, j] = 4 * bary[:, i]
    return d


def _bary_gradients(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    g0 = -(g1 + g2)
    return np.stack([g0, g1, g2], axis=1), 0.5 * det


def _coo(local: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> sp.csr_matrix:
    F, a, b = local.shape
    I = np.broadcast_to(rows[:, :, None], (F, a, b)).ravel()
    J = np.broadcast_to(cols[:, None, :], (F, a, b)).ravel()
    A = sp.csr_matrix((local.ravel(), (I, J)), shape=shape)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


@dataclass
class MixedField:
    velocity: np.ndarray
    pressure: np.ndarray
    role: str = "pressure"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


class TaylorHood:
    """Assembled operators and quadrature tables for one mesh."""

    def __init__(self, mesh: TorusMesh):
        self.mesh = mesh
        self.n1 = mesh.n_vertices
        self.n2 = mesh.n_vertices + mesh.n_edges
        self.nvel = 2 * self.n2
        self.grad_bary, self.area = _bary_gradients(mesh.triangle_coords)

    # -- element tables -------------------------------------------------
    def _p2_grads(self, rule: TriangleRule) -> np.ndarray:
        # (F, q, 6, 2)
        db = p2_bary_derivatives(rule.points)
        return np.einsum("qab,fbd->fqad", db, self.grad_bary)

    def _local(self, kind: str, rule: TriangleRule) -> np.ndarray:
        area = self.area[:, None, None]
        w = rule.weights
        if kind == "mass2":
            phi = p2_values(rule.points)
            return area * np.einsum("q,qa,qb->ab", w, phi, phi)[None]
        if kind == "mass1":
            phi = rule.points
            return area * np.einsum("q,qa,qb->ab", w, phi, phi)[None]
        if kind == "stiff2":
            g = self._p2_grads(rule)
            return area * np.einsum("q,fqad,fqbd->fab", w, g, g)
        if kind == "stiff1":
            g = self.grad_bary
            return area * np.einsum("fad,fbd->fab", g, g)
        if kind == "div":
            g = self._p2_grads(rule)
            psi = rule.points
            # (F, 3, 2, 6): pressure a, component c, velocity shape b
            return area[..., None] * np.einsum("q,qa,fqbc->facb", w, psi, g)
        raise ValueError(kind)

    def assemble(self, kind: str, rule: TriangleRule = RULE_DEG4) -> sp.csr_matrix:
        mesh = self.mesh
        cells2 = mesh.p2_cells
        cells1 = mesh.triangles
        F = mesh.n_triangles
        loc = self._local(kind, rule)
        if kind in ("mass2", "stiff2"):
            loc = np.broadcast_to(loc, (F, 6, 6))
            return _coo(loc, cells2, cells2, (self.n2, self.n2))
        if kind in ("mass1", "stiff1"):
            loc = np.broadcast_to(loc, (F, 3, 3))
            return _coo(loc, cells1, cells1, (self.n1, self.n1))
        if kind == "div":
            cols = np.hstack([cells2, cells2 + self.n2])
            return _coo(loc.reshape(F, 3, 12), cells1, cols, (self.n1, self.nvel))
        raise ValueError(kind)

    @cached_property
    def mass_p1(self) -> sp.csr_matrix:
        return self.assemble("mass1")

    @cached_property
    def mass_p2(self) -> sp.csr_matrix:
        return self.assemble("mass2")

    @cached_property
    def stiff_p1(self) -> sp.csr_matrix:
        return self.assemble("stiff1")

    @cached_property
    def stiff_p2(self) -> sp.csr_matrix:
        return self.assemble("stiff2")

    @cached_property
    def mass_vel(self) -> sp.csr_matrix:
        return sp.block_diag([self.mass_p2, self.mass_p2], format="csr")

    @cached_property
    def stiff_vel(self) -> sp.csr_matrix:
        return sp.block_diag([self.stiff_p2, self.stiff_p2], format="csr")

    @cached_property
    def div(self) -> sp.csr_matrix:
        return self.assemble("div")

    @cached_property
    def p1_integrals(self) -> np.ndarray:
        return np.asarray(self.mass_p1.sum(axis=0)).ravel()

    @cached_property
    def p2_integrals(self) -> np.ndarray:
        return np.asarray(self.mass_p2.sum(axis=0)).ravel()

    # -- quadrature evaluation -------------------------------------------
    @cached_property
    def quad(self) -> "QuadratureTables":
        return QuadratureTables(self, RULE_DEG6)

    # -- solvers -----------------------------------------------------------
    @cached_property
    def _mass_solvers(self) -> dict:
        return {}

    def mass_solver(self, space: str, backend: str = "direct"):
        key = (space, backend)
        if key not in self._mass_solvers:
            op = self.mass_operator(space)
            if backend == "direct":
                self._mass_solvers[key] = Factorization(op, SPD)
            else:
                ntypes = {"P1": 1, "P2": 4, "P2-vector": 8}[space]
                self._mass_solvers[key] = CirculantFactorization(op, self.mesh.n, ntypes)
        return self._mass_solvers[key]

    def mass_operator(self, space: str) -> sp.csr_matrix:
        return {"P1": self.mass_p1, "P2": self.mass_p2, "P2-vector": self.mass_vel}[_space(space)]

    def stiffness_operator(self, space: str) -> sp.csr_matrix:
        return {"P1": self.stiff_p1, "P2": self.stiff_p2, "P2-vector": self.stiff_vel}[_space(space)]

    @cached_property
    def _projectors(self) -> dict:
        return {}

    def divfree_solver(self, backend: str = "direct") -> SaddleSolver:
        """Saddle solver for the L2 projection onto discretely divergence-free fields."""
        if backend not in self._projectors:
            system = SaddleSystem(self.mass_vel, self.div, 1.0, self.p1_integrals)
            self._projectors[backend] = SaddleSolver(system, backend=backend, n=self.mesh.n)
        return self._projectors[backend]

    def stokes_system(self, nu: float, k: float) -> SaddleSystem:
        return SaddleSystem(self.mass_vel + (nu * k) * self.stiff_vel, self.div, k, self.p1_integrals)


class QuadratureTables:
    """Basis values and gradients at every quadrature node of the mesh."""

    def __init__(self, th: TaylorHood, rule: TriangleRule):
        mesh = th.mesh
        F, q = mesh.n_triangles, rule.size
        self.rule = rule
        self.points = np.einsum("qa,fad->fqd", rule.points, mesh.triangle_coords).reshape(-1, 2)
        self.weights = (th.area[:, None] * rule.weights[None, :]).ravel()
        rows = np.arange(F * q).reshape(F, q)

        def build(vals: np.ndarray, cells: np.ndarray, ncol: int) -> sp.csr_matrix:
            # vals (F, q, a)
            a = vals.shape[-1]
            I = np.broadcast_to(rows[:, :, None], (F, q, a)).ravel()
            J = np.broadcast_to(cells[:, None, :], (F, q, a)).ravel()
            A = sp.csr_matrix((vals.ravel(), (I, J)), shape=(F * q, ncol))
            A.sum_duplicates()
            return A

        phi2 = np.broadcast_to(p2_values(rule.points)[None], (F, q, 6))
        g2 = th._p2_grads(rule)
        self.p2 = build(phi2, mesh.p2_cells, th.n2)
        self.p2_dx = build(g2[..., 0], mesh.p2_cells, th.n2)
        self.p2_dy = build(g2[..., 1], mesh.p2_cells, th.n2)
        phi1 = np.broadcast_to(rule.points[None], (F, q, 3))
        g1 = np.broadcast_to(th.grad_bary[:, None], (F, q, 3, 2))
        self.p1 = build(phi1, mesh.triangles, th.n1)
        self.p1_dx = build(g1[..., 0], mesh.triangles, th.n1)
        self.p1_dy = build(g1[..., 1], mesh.triangles, th.n1)
        self.n2 = th.n2

    @property
    def size(self) -> int:
        return self.weights.size

    def velocity(self, u: np.ndarray) -> np.ndarray:
        """(2, npts[, S]) values of a P2 vector field."""
        n2 = self.n2
        return np.stack([self.p2 @ u[:n2], self.p2 @ u[n2:]])

    def velocity_gradient(self, u: np.ndarray) -> np.ndarray:
        """(2, 2, npts[, S]); entry [c, d] is d(u_c)/dx_d."""
        n2 = self.n2
        out = []
        for comp in (u[:n2], u[n2:]):
            out.append(np.stack([self.p2_dx @ comp, self.p2_dy @ comp]))
        return np.stack(out)

    def scalar(self, p: np.ndarray) -> np.ndarray:
        return self.p1 @ p

    def scalar_gradient(self, p: np.ndarray) -> np.ndarray:
        return np.stack([self.p1_dx @ p, self.p1_dy @ p])

    def integrate(self, values: np.ndarray, axis: int = 0) -> np.ndarray:
        """Integrate nodal values over the torus along the node axis."""
        return np.tensordot(np.moveaxis(values, axis, -1), self.weights, axes=1)

    def load_vector(self, f_values: np.ndarray, space: str) -> np.ndarray:
        """(f, phi_i) for values of f at the nodes; vector f has shape (2, npts)."""
        space = _space(space)
        w = self.weights
        if space == "P1":
            return self.p1.T @ (w * f_values)
        if space == "P2":
            return self.p2.T @ (w * f_values)
        return np.concatenate([self.p2.T @ (w * f_values[0]), self.p2.T @ (w * f_values[1])])


def _space(space: str) -> str:
    aliases = {"P1": "P1", "P2": "P2", "P2-scalar": "P2", "P2-vector": "P2-vector", "vector": "P2-vector"}
    if space not in aliases:
        raise ValueError(f"unknown space {space!r}; expected one of {SPACES}")
    return aliases[space]


_CACHE: "weakref.WeakKeyDictionary[TorusMesh, TaylorHood]" = weakref.WeakKeyDictionary()


def taylor_hood(mesh: TorusMesh) -> TaylorHood:
    """Cached :class:`TaylorHood` for ``mesh``."""
    th = _CACHE.get(mesh)
    if th is None:
        th = TaylorHood(mesh)
        _CACHE[mesh] = th
    return th


def assemble_mass(mesh: TorusMesh, space: str = "P2-vector", rule: TriangleRule | None = None) -> sp.csr_matrix:
    th = taylor_hood(mesh)
    if rule is None:
        return th.mass_operator(space)
    space = _space(space)
    if space == "P2-vector":
        M = th.assemble("mass2", rule)
        return sp.block_diag([M, M], format="csr")
    return th.assemble("mass1" if space == "P1" else "mass2", rule)


def assemble_stiffness(mesh: TorusMesh, space: str = "P2-vector", rule: TriangleRule | None = None) -> sp.csr_matrix:
    th = taylor_hood(mesh)
    if rule is None:
        return th.stiffness_operator(space)
    space = _space(space)
    if space == "P2-vector":
        A = th.assemble("stiff2", rule)
        return sp.block_diag([A, A], format="csr")
    return th.assemble("stiff1" if space == "P1" else "stiff2", rule)


def assemble_divergence(mesh: TorusMesh, rule: TriangleRule | None = None) -> sp.csr_matrix:
    """``D[q, v] = (psi_q, div phi_v)`` with P1 rows and P2-vector columns."""
    th = taylor_hood(mesh)
    return th.div if rule is None else th.assemble("div", rule)


def sample_field(f: Callable, x: np.ndarray, y: np.ndarray, components: int) -> np.ndarray:
    """Evaluate ``f(x, y)`` as a float array of shape ``(components, *x.shape)``.

    Components may be returned as scalars (e.g. ``(np.sin(y), 0)``).
    """
    out = f(x, y)
    if components == 1:
        out = (out,)
    if len(out) != components:
        raise ValueError(f"expected {components} components, got {len(out)}")
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), x.shape) for c in out])


def _nodal(f: Callable, points: np.ndarray, space: str) -> np.ndarray:
    vals = sample_field(f, points[:, 0], points[:, 1], 2 if space == "P2-vector" else 1)
    return vals if space == "P2-vector" else vals[0]


def l2_project(mesh: TorusMesh, f: Callable, space: str = "P2-vector", backend: str = "direct") -> np.ndarray:
    """Coefficients of the L2 projection of ``f(x, y)`` onto a finite element space.

    Vector-valued ``f`` returns a pair ``(fx, fy)``.  The load vector uses the
    degree-6 rule.
    """
    th = taylor_hood(mesh)
    space = _space(space)
    qt = th.quad
    b = qt.load_vector(_nodal(f, qt.points, space), space)
    M = th.mass_operator(space)
    c = th.mass_solver(space, backend).solve(b)
    res = np.linalg.norm(M @ c - b)
    if res > 1e-12 * max(np.linalg.norm(b), 1e-300) and np.linalg.norm(b) > 0:
        raise RuntimeError(f"L2 projection residual {res:.3e}")
    return c


def project_divfree(mesh: TorusMesh, u0, backend: str = "direct") -> MixedField:
    """L2 projection onto the discretely divergence-free velocities.

    ``u0`` is either a callable ``(x, y) -> (ux, uy)`` or a P2-vector
    coefficient array (several columns allowed).  The returned pressure slot
    holds the Lagrange multiplier, i.e. the discrete Helmholtz potential of
    ``u0``.
    """
    th = taylor_hood(mesh)
    if callable(u0):
        qt = th.quad
        rhs = qt.load_vector(_nodal(u0, qt.points, "P2-vector"), "P2-vector")
    else:
        rhs = th.mass_vel @ np.asarray(u0, dtype=float)
    u, xi = th.divfree_solver(backend).solve(rhs)
    return MixedField(u, xi, role="helmholtz")


def discrete_lbb_constant(mesh: TorusMesh, block: int = 6, maxiter: int = 500, rtol: float = 1e-10) -> float:
    """Discrete inf-sup constant of the Taylor-Hood pair.

    Returns the square root of the smallest nonzero eigenvalue of
    ``D A^+ D^T q = lam M_p q`` over mean-zero pressures, where ``A^+`` is the
    vector Laplacian inverted on mean-zero velocities.  Uses block inverse
    iteration with Rayleigh-Ritz on the explicitly formed Schur complement;
    the constant pressure mode (eigenvalue 0) is shifted out of the way.
    """
    th = taylor_hood(mesh)
    S, Mp = _pressure_schur(th)
    ones = np.ones(th.n1)
    mass1 = Mp @ ones
    # constant mode moved to eigenvalue 10 (all others are <= 1 on the torus)
    Sd = S + 10.0 * np.outer(mass1, mass1) / (ones @ mass1)
    cho = sla.cho_factor(Sd)
    rng = np.random.default_rng(12345)
    X = rng.standard_normal((th.n1, min(block, th.n1 - 1)))
    prev = np.inf
    for _ in range(maxiter):
        Y = sla.cho_solve(cho, Mp @ X)
        # Rayleigh-Ritz in the M_p inner product
        Q, _ = np.linalg.qr(Y)
        a = Q.T @ S @ Q
        b = Q.T @ Mp @ Q
        vals, vecs = sla.eigh(a, b)
        X = Q @ vecs
        lam = vals[0]
        if abs(lam - prev) <= rtol * abs(lam):
            return float(np.sqrt(lam))
        prev = lam
    raise RuntimeError(f"inf-sup eigen-iteration did not converge in {maxiter} iterations (last {prev:.6e})")


def _pressure_schur(th: TaylorHood) -> tuple[np.ndarray, np.ndarray]:
    A = th.stiff_vel
    nvel = th.nvel
    C = np.zeros((nvel, 2))
    C[: th.n2, 0] = th.p2_integrals
    C[th.n2 :, 1] = th.p2_integrals
    aug = sp.bmat([[A, sp.csr_matrix(C)], [sp.csr_matrix(C.T), None]], format="csc")
    fact = Factorization(aug, INDEFINITE)
    Dt = th.div.T.toarray()
    X = fact.solve(np.vstack([Dt, np.zeros((2, th.n1))]))[:nvel]
    S = th.div @ X
    S = 0.5 * (S + S.T)
    return S, th.mass_p1.toarray()
