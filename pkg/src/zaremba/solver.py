"""P1 finite elements for ``div F(point, grad u) = 0`` with Dirichlet data on
tagged vertices and the natural (zero conormal) condition everywhere else.

The same kernel serves the mixed problem on the strip (``F = A``), the
reflected Dirichlet problem in the ball (``F = B``) and the weighted condenser
problems (``F = |xi|^{p-n} |q|^{p-2} q``).
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import geometry
from .blocks import Base, BlockSet
from .mesh import (DIRICHLET, INNER_HOLE, NEUMANN, Mesh, assemble_gradient_tables, field_gradients,
                   mesh_disk_annulus, mesh_strip)
from .operators import TransformedMap, WeightedPLaplace, as_flux

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
MAX_HALVINGS = 20
CG_RTOL = 1e-12
# Below this many unknowns a sparse LU beats CG on degenerate p-Laplace Jacobians.
DIRECT_LIMIT = 400_000
JACOBI_SWEEPS = 5


class SolverError(RuntimeError):
    pass


class NonConvergence(SolverError):
    def __init__(self, iterations, residual, report=None):
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual
        self.report = report


class SingularSystem(SolverError):
    pass


@dataclass(frozen=True)
class DiscreteField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_vertices,):
            raise ValueError(f"expected {self.mesh.n_vertices} nodal values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("nodal values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def interpolate(cls, mesh, func):
        return cls(mesh, func(mesh.vertices))


@dataclass
class MixedProblem:
    """Nonlinear problem on a mesh.

    ``dirichlet_values`` holds one entry per vertex, ``nan`` marking free
    vertices.  Every vertex on a Dirichlet-tagged edge must carry a value;
    additional constrained vertices (interior obstacles) are allowed.
    ``reaction_mass`` optionally adds the lumped zero-order term
    ``m_i |u_i|^{p-2} u_i``.
    """

    map: object
    mesh: Mesh
    dirichlet_values: np.ndarray
    eps_schedule: tuple = DEFAULT_SCHEDULE
    tol: float = 1e-10
    max_iter: int = 200
    quadrature: str = "centroid"
    reaction_mass: Optional[np.ndarray] = None
    enforce_symmetry: Optional[bool] = None
    initial: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.asarray(self.dirichlet_values, dtype=float)
        if d.shape != (self.mesh.n_vertices,):
            raise ValueError("dirichlet_values must have one entry per vertex")
        self.dirichlet_values = d
        if np.any(np.isnan(d[self.mesh.tagged_vertices(DIRICHLET)])):
            raise ValueError("every Dirichlet-tagged vertex needs a value")
        if np.any(np.isinf(d)):
            raise ValueError("Dirichlet values must be finite")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        sched = tuple(float(e) for e in self.eps_schedule)
        if not sched or any(e <= 0 for e in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError("eps schedule must be positive and strictly decreasing")
        if sched[-1] > 1e-8:
            raise ValueError("eps schedule must end at or below 1e-8")
        self.eps_schedule = sched

    @property
    def fixed(self):
        return ~np.isnan(self.dirichlet_values)


@dataclass
class SolveReport:
    field: DiscreteField
    residual_norm: float
    iterations: int
    energy: Optional[float]
    converged: bool
    dirichlet_values: np.ndarray = None
    picard_steps: int = 0
    history: list = field(default_factory=list)
    tol: Optional[float] = None

    def to_dict(self):
        return {"residual_norm": float(self.residual_norm), "iterations": int(self.iterations),
                "energy": None if self.energy is None else float(self.energy),
                "converged": bool(self.converged), "picard_steps": int(self.picard_steps)}


class _Assembler:
    def __init__(self, problem):
        self.problem = problem
        self.mesh = problem.mesh
        self.flux = as_flux(problem.map)
        self.tables = assemble_gradient_tables(self.mesh, problem.quadrature)
        self.frame = self.flux.frame(self.tables.points)
        t = self.mesh.triangles
        self.rows = np.repeat(t, 3, axis=1).ravel()
        self.cols = np.tile(t, (1, 3)).ravel()
        self.mass = problem.reaction_mass
        self.p = self.flux.p

    def gradients(self, u):
        g = field_gradients(self.tables, self.mesh, u)
        return np.broadcast_to(g[:, None, :], self.tables.points.shape)

    def residual(self, u, eps):
        F = self.flux.flux(self.frame, self.gradients(u), eps)
        Fw = np.einsum("mq,mqd->md", self.tables.weights, F)
        local = np.einsum("mkd,md->mk", self.tables.grads, Fw)
        r = np.bincount(self.mesh.triangles.ravel(), local.ravel(), minlength=self.mesh.n_vertices)
        if self.mass is not None:
            s2 = u * u + eps * eps
            r = r + self.mass * s2 ** ((self.p - 2) / 2) * u
        return r

    def _matrix(self, D):
        Dw = np.einsum("mq,mqij->mij", self.tables.weights, D)
        K = np.einsum("mki,mij,mlj->mkl", self.tables.grads, Dw, self.tables.grads)
        n = self.mesh.n_vertices
        return sp.csr_matrix((K.ravel(), (self.rows, self.cols)), shape=(n, n))

    def jacobian(self, u, eps):
        A = self._matrix(self.flux.jacobian(self.frame, self.gradients(u), eps))
        if self.mass is not None:
            s2 = u * u + eps * eps
            d = self.mass * s2 ** ((self.p - 2) / 2) * (1 + (self.p - 2) * u * u / s2)
            A = A + sp.diags(d)
        return A.tocsr()

    def secant(self, u, eps):
        """Frozen-coefficient matrix ``S(u)`` with ``S(u) u = R(u)``."""
        g = self.gradients(u)
        F = self.flux.flux(self.frame, g, eps)
        g2 = np.sum(g * g, axis=-1)
        tiny = g2 <= 1e-300
        e1 = np.zeros_like(g)
        e1[..., 0] = 1e-8
        g_safe = np.where(tiny[..., None], e1, g)
        F_safe = np.where(tiny[..., None], self.flux.flux(self.frame, g_safe, eps), F)
        g2s = np.sum(g_safe * g_safe, axis=-1)
        c = np.sum(F_safe * g_safe, axis=-1) / g2s
        n = g.shape[-1]
        S = c[..., None, None] * np.eye(n) + (F_safe - c[..., None] * g_safe)[..., :, None] * g_safe[..., None, :] / g2s[..., None, None]
        A = self._matrix(S)
        if self.mass is not None:
            A = A + sp.diags(self.mass * (u * u + eps * eps) ** ((self.p - 2) / 2))
        return A.tocsr()

    def energy(self, u):
        dens = self.flux.energy_density(self.frame, self.gradients(u), 0.0)
        if dens is None:
            return None
        e = float(np.sum(self.tables.weights * dens))
        if self.mass is not None:
            e += float(np.sum(self.mass * np.abs(u) ** self.p))
        return e


def _symmetric_setup(problem, flux):
    mesh = problem.mesh
    s = mesh.symmetry_map
    if s is None:
        return None
    symmetric_map = isinstance(problem.map, WeightedPLaplace) or (
        isinstance(problem.map, TransformedMap) and problem.map.reflected)
    d = problem.dirichlet_values
    data_ok = np.array_equal(np.isnan(d), np.isnan(d[s])) and np.array_equal(
        np.nan_to_num(d), np.nan_to_num(d[s]))
    mass_ok = problem.reaction_mass is None or np.array_equal(problem.reaction_mass, problem.reaction_mass[s])
    ok = symmetric_map and data_ok and mass_ok
    if problem.enforce_symmetry is None:
        return s if ok else None
    if problem.enforce_symmetry and not ok:
        raise ValueError("symmetry requested but map, data or mesh is not mirror symmetric")
    return s if problem.enforce_symmetry else None


def _reduction(free, sym):
    """Matrix mapping reduced unknowns to free vertex values."""
    idx = np.flatnonzero(free)
    if sym is None:
        return sp.identity(len(idx), format="csr"), idx
    rep = np.minimum(idx, sym[idx])
    orbits, col = np.unique(rep, return_inverse=True)
    Z = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), col)), shape=(len(idx), len(orbits)))
    return Z, idx


def _initial_guess(problem, sym):
    mesh = problem.mesh
    d = problem.dirichlet_values
    fixed = problem.fixed
    if problem.initial is not None:
        u = np.array(problem.initial, dtype=float)
        u[fixed] = d[fixed]
    else:
        u = np.where(fixed, d, np.mean(d[fixed]))
        e, _ = mesh.edges()
        n = mesh.n_vertices
        adj = sp.csr_matrix((np.ones(2 * len(e)), (np.concatenate([e[:, 0], e[:, 1]]),
                                                   np.concatenate([e[:, 1], e[:, 0]]))), shape=(n, n))
        deg = np.asarray(adj.sum(axis=1)).ravel()
        for _ in range(JACOBI_SWEEPS):
            u = np.where(fixed, u, adj @ u / deg)
    if sym is not None:
        u = 0.5 * (u + u[sym])
        u[fixed] = d[fixed]
    return u


def _linear_solve(A, b, symmetric):
    if symmetric and A.shape[0] > DIRECT_LIMIT:
        diag = A.diagonal()
        if np.all(diag > 0):
            M = sp.diags(1.0 / diag)
            x, info = spla.cg(A, b, rtol=CG_RTOL, atol=0.0, M=M, maxiter=20 * A.shape[0])
            if info == 0 and np.all(np.isfinite(x)):
                return x
            log.debug("CG did not converge (info=%s); falling back to a direct solve", info)
    x = spla.spsolve(A.tocsc(), b)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("linear sub-solve produced non-finite values")
    return np.atleast_1d(x)


def solve(problem):
    """Damped Newton with epsilon continuation; raises :class:`NonConvergence`."""
    asm = _Assembler(problem)
    fixed = problem.fixed
    if not fixed.any():
        raise ValueError("at least one Dirichlet vertex is required")
    free = ~fixed
    sym = _symmetric_setup(problem, asm.flux)
    Z, idx = _reduction(free, sym)
    ZT = Z.T.tocsr()
    u = _initial_guess(problem, sym)
    symmetric_jac = bool(asm.flux.variational)
    depends_on_eps = symmetric_jac and asm.p != 2
    schedule = problem.eps_schedule if depends_on_eps else problem.eps_schedule[-1:]

    def rnorm(r):
        return float(np.max(np.abs(r[idx]))) if len(idx) else 0.0

    def reduced_norm(r):
        return float(np.linalg.norm(ZT @ r[idx]))

    iterations = picard = 0
    history = []
    r = asm.residual(u, schedule[0])
    if len(idx) == 0:
        schedule = schedule[-1:]
    for stage, eps in enumerate(schedule):
        last = stage == len(schedule) - 1
        stage_tol = problem.tol if last else max(problem.tol, 1e-3 * problem.tol ** 0.5)
        r = asm.residual(u, eps)
        while rnorm(r) > stage_tol:
            if iterations >= problem.max_iter:
                rep = _report(problem, asm, u, r, iterations, False, picard, history, rnorm)
                raise NonConvergence(iterations, rnorm(r), rep)
            iterations += 1
            base = reduced_norm(r)
            step = None
            try:
                J = asm.jacobian(u, eps)
                Jr = (ZT @ J[idx][:, idx] @ Z).tocsr()
                d = Z @ _linear_solve(Jr, -(ZT @ r[idx]), symmetric_jac)
                step = _line_search(asm, u, d, idx, eps, base, reduced_norm)
            except (SingularSystem, RuntimeError, ValueError) as exc:
                log.debug("Newton step failed: %s", exc)
            if step is None:
                S = asm.secant(u, eps)
                Sr = (ZT @ S[idx][:, idx] @ Z).tocsr()
                target = u.copy()
                rhs = -(ZT @ (S[idx][:, fixed] @ u[fixed]))
                try:
                    target[idx] = Z @ _linear_solve(Sr, rhs, False)
                except (SingularSystem, RuntimeError) as exc:
                    raise SingularSystem(f"Newton and Picard steps both failed: {exc}") from exc
                d = target[idx] - u[idx]
                step = _line_search(asm, u, d, idx, eps, base, reduced_norm)
                if step is None:
                    raise SingularSystem("no descent along Newton or Picard directions")
                picard += 1
            u, r = step
            history.append((eps, rnorm(r)))
    return _report(problem, asm, u, r, iterations, True, picard, history, rnorm)


def _line_search(asm, u, d, idx, eps, base, reduced_norm):
    s = 1.0
    for _ in range(MAX_HALVINGS + 1):
        trial = u.copy()
        trial[idx] = u[idx] + s * d
        r = asm.residual(trial, eps)
        if np.all(np.isfinite(r)) and reduced_norm(r) < base:
            return trial, r
        s *= 0.5
    return None


def _report(problem, asm, u, r, iterations, converged, picard, history, rnorm):
    return SolveReport(field=DiscreteField(problem.mesh, u), residual_norm=rnorm(r), iterations=iterations,
                       energy=asm.energy(u), converged=converged,
                       dirichlet_values=problem.dirichlet_values.copy(), picard_steps=picard,
                       history=history, tol=problem.tol)


def residual_vector(problem, values, eps=0.0):
    """Assembled weak residual of nodal ``values`` (all vertices)."""
    return _Assembler(problem).residual(np.asarray(values, dtype=float), eps)


def energy_of(problem, values):
    return _Assembler(problem).energy(np.asarray(values, dtype=float))


# ---------------------------------------------------------------------------
# problem builders

LID_DIRICHLET = "dirichlet"
LID_NATURAL = "natural"


def _has_base(blocks):
    return any(isinstance(b, Base) for b in blocks.blocks)


def strip_problem(amap, L, h, data, blocks=None, lid=LID_DIRICHLET, **kw):
    """Mixed problem on ``(-1, 1) x (0, L)``.

    ``data(x)`` gives the Dirichlet values at vertices in ``blocks`` (default:
    the base) and, for a Dirichlet lid, on ``x_n = L``.  Everything else
    carries the natural condition.
    """
    if lid not in (LID_DIRICHLET, LID_NATURAL):
        raise ValueError(f"lid must be {LID_DIRICHLET!r} or {LID_NATURAL!r}")
    blocks = BlockSet.base_only() if blocks is None else blocks
    mesh = mesh_strip(L, h, bottom=DIRICHLET if _has_base(blocks) else NEUMANN,
                      top=DIRICHLET if lid == LID_DIRICHLET else NEUMANN, blocks=blocks)
    x = mesh.vertices
    fixed = mesh.tagged_vertices(DIRICHLET) | blocks.contains(x)
    d = np.full(mesh.n_vertices, np.nan)
    if fixed.any():
        d[fixed] = np.asarray(data(x[fixed]), dtype=float)
    return MixedProblem(amap, mesh, d, **kw)


def ball_problem(amap, data, blocks=None, params=geometry.DEFAULT_PARAMS, L=None, lid=LID_DIRICHLET,
                 rings=None, sectors=64, delta=None, inner="natural", inner_value=None, **kw):
    """Reflected problem for the pushforward of ``amap`` on the unit disk.

    With ``L`` given the domain is the annulus ``e^{-kappa L} <= |xi| <= 1``,
    the image of the strip of height ``L``, and ``lid`` is treated as in
    :func:`strip_problem`.  Otherwise the disk is punctured at the origin by
    a hole of radius ``delta`` whose condition is ``inner``: ``"natural"`` or
    ``"dirichlet"`` with constant ``inner_value``.  Dirichlet values at
    vertices in ``T(F) U P T(F)`` come from ``data`` at their preimages.
    """
    blocks = BlockSet.base_only() if blocks is None else blocks
    outer = DIRICHLET if _has_base(blocks) else NEUMANN
    if L is not None:
        if lid not in (LID_DIRICHLET, LID_NATURAL):
            raise ValueError(f"lid must be {LID_DIRICHLET!r} or {LID_NATURAL!r}")
        mesh = mesh_disk_annulus(1.0, geometry.radius_for_height(L, params.kappa), rings=rings,
                                 sectors=sectors, inner_tag=DIRICHLET if lid == LID_DIRICHLET else NEUMANN,
                                 outer_tag=outer)
    else:
        if inner not in ("natural", "dirichlet"):
            raise ValueError("inner must be 'natural' or 'dirichlet'")
        if inner == "dirichlet" and inner_value is None:
            raise ValueError("a Dirichlet puncture needs inner_value")
        mesh = mesh_disk_annulus(1.0, 0.0, rings=rings, sectors=sectors, delta=delta,
                                 inner_tag=DIRICHLET if inner == "dirichlet" else INNER_HOLE,
                                 outer_tag=outer)
    xi = mesh.vertices
    r = np.linalg.norm(xi, axis=1)
    fixed = mesh.tagged_vertices(DIRICHLET) | blocks.contains_ball(xi, params)
    d = np.full(mesh.n_vertices, np.nan)
    if L is None and inner == "dirichlet":
        hole = r <= mesh.meta["r_inner"] * (1 + 1e-12)
        d[hole] = float(inner_value)
        fixed = fixed & ~hole
    if fixed.any():
        up = xi[fixed].copy()
        up[:, -1] = np.abs(up[:, -1])
        up /= np.maximum(np.linalg.norm(up, axis=1), 1.0)[:, None]
        d[fixed] = np.asarray(data(geometry.inverse(up, params)), dtype=float)
    return MixedProblem(TransformedMap(amap, params, reflected=True), mesh, d, **kw)


# ---------------------------------------------------------------------------
# transfer between the cylinder and the ball

class Locator:
    """Point location and P1 interpolation on a triangle mesh."""

    def __init__(self, mesh, candidates=12, tol=1e-10):
        self.mesh = mesh
        v = mesh.vertices[mesh.triangles]
        self.v0 = v[:, 0]
        self.T = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)
        self.Tinv = np.linalg.inv(self.T)
        self.tree = cKDTree(v.mean(axis=1))
        self.k = min(candidates, mesh.n_triangles)
        self.tol = tol

    def _bary(self, pts, tri):
        lam12 = np.einsum("...ij,...j->...i", self.Tinv[tri], pts - self.v0[tri])
        return np.concatenate([1.0 - lam12.sum(axis=-1, keepdims=True), lam12], axis=-1)

    def locate(self, pts):
        """Return triangle indices and barycentric coordinates; ``-1`` marks points outside."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        _, cand = self.tree.query(pts, k=self.k)
        cand = cand.reshape(len(pts), -1)
        tri = np.full(len(pts), -1)
        lam = np.zeros((len(pts), 3))
        for j in range(cand.shape[1]):
            todo = tri < 0
            if not todo.any():
                break
            b = self._bary(pts[todo], cand[todo, j])
            hit = np.all(b >= -self.tol, axis=1)
            where = np.flatnonzero(todo)[hit]
            tri[where] = cand[todo, j][hit]
            lam[where] = b[hit]
        for i in np.flatnonzero(tri < 0):
            b = self._bary(np.broadcast_to(pts[i], (self.mesh.n_triangles, 2)), np.arange(self.mesh.n_triangles))
            ok = np.flatnonzero(np.all(b >= -self.tol, axis=1))
            if len(ok):
                tri[i] = ok[0]
                lam[i] = b[ok[0]]
        return tri, lam

    def interpolate(self, values, pts):
        tri, lam = self.locate(pts)
        if np.any(tri < 0):
            raise ValueError(f"{int(np.sum(tri < 0))} points lie outside the mesh; extrapolation refused")
        return np.sum(np.asarray(values)[self.mesh.triangles[tri]] * lam, axis=1)


def pullback(ball_field, points, params=geometry.DEFAULT_PARAMS):
    """Values ``u~(T(x))`` of a ball field at cylinder points ``x``."""
    xi = geometry.forward(np.asarray(points, dtype=float), params)
    return Locator(ball_field.mesh).interpolate(ball_field.values, xi)


def pushforward(cyl_field, points, params=geometry.DEFAULT_PARAMS):
    """Values of the reflected ``u o T^{-1}`` at ball points ``xi``."""
    xi = np.asarray(points, dtype=float)
    up = xi.copy()
    up[..., -1] = np.abs(up[..., -1])
    return Locator(cyl_field.mesh).interpolate(cyl_field.values, geometry.inverse(up, params))


# ---------------------------------------------------------------------------
# norms and comparison

def lkappa_norm(fld, kappa=1.0, p=2.0, quadrature="three_point"):
    """``(int |v|^p e^{-p kappa x_n} + |grad v|^p dx)^(1/p)`` on a cylinder mesh."""
    tables = assemble_gradient_tables(fld.mesh, quadrature)
    g = field_gradients(tables, fld.mesh, fld.values)
    vq = np.einsum("qk,mk->mq", tables.bary, fld.values[fld.mesh.triangles])
    zero = np.sum(tables.weights * np.abs(vq) ** p * np.exp(-p * kappa * tables.points[..., -1]))
    grad = np.sum(tables.areas * np.sum(g * g, axis=1) ** (p / 2))
    return float((zero + grad) ** (1.0 / p))


def l2_error(fld, exact, quadrature="three_point"):
    """``||u_h - exact||_{L^2}`` with ``exact`` evaluated at quadrature points."""
    tables = assemble_gradient_tables(fld.mesh, quadrature)
    uq = np.einsum("qk,mk->mq", tables.bary, fld.values[fld.mesh.triangles])
    ex = np.asarray(exact(tables.points.reshape(-1, 2)), dtype=float).reshape(uq.shape)
    return float(np.sqrt(np.sum(tables.weights * (uq - ex) ** 2)))


def comparison_check(r1, r2, allowance=0.0):
    """Whether ``u1 <= u2 + slack`` everywhere for data ``f1 <= f2``."""
    m1, m2 = r1.field.mesh, r2.field.mesh
    if m1 is not m2 and not (np.array_equal(m1.vertices, m2.vertices)
                             and np.array_equal(m1.triangles, m2.triangles)):
        raise ValueError("solutions live on different meshes")
    d1, d2 = r1.dirichlet_values, r2.dirichlet_values
    if d1 is not None and d2 is not None:
        if not np.array_equal(np.isnan(d1), np.isnan(d2)):
            raise ValueError("Dirichlet vertex sets differ")
        mask = ~np.isnan(d1)
        if np.any(d1[mask] > d2[mask]):
            raise ValueError("data are not ordered: f1 > f2 somewhere")
    slack = 1e-8 + allowance
    return bool(np.all(r1.field.values <= r2.field.values + slack))
