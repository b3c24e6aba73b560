"""Weighted condenser capacity, Sobolev (p, w)-capacity, the Neumann
variational capacity on the cylinder and the Wiener-type regularity test at
infinity.

Every capacity is computed as the energy of a discrete minimizer: the
constraints ``v = 1`` on the compact set and ``v = 0`` on the outer part are
imposed as Dirichlet conditions and the remaining boundary is left natural.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry
from .blocks import Base, BlockSet
from .mesh import (DIRICHLET, INNER_HOLE, NEUMANN, assemble_gradient_tables, mesh_disk_annulus,
                   mesh_strip, refine_uniform)
from .operators import CoefficientMap, WeightedPLaplace
from .solver import MixedProblem, NonConvergence, SingularSystem, solve

DEFAULT_SECTORS = 64
SOBOLEV_OUTER_RADIUS = 12.0
ZERO_INTEGRAND = 1e-10
REGULAR_BETA = 0.9
IRREGULAR_BETA = 1.5


def default_t_grid():
    return tuple(2.0 ** (k / 2) for k in range(9))


def sphere_area(n):
    """Surface measure of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def radial_condenser_capacity(rho, r, p, n=2):
    """Closed-form weighted capacity ``|S^{n-1}| log(r/rho)^(1-p)`` of a ball in a ball."""
    return sphere_area(n) * math.log(r / rho) ** (1.0 - p)


@dataclass
class CapacityEstimate:
    value: float
    minimizer_energy: float
    mesh_h: float
    refined_value: Optional[float] = None
    iterations: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"value": self.value, "minimizer_energy": self.minimizer_energy, "mesh_h": self.mesh_h,
                "refined_value": self.refined_value, "iterations": self.iterations}


# For p < 2 the regularized flux has slope ~ eps^(p-2) where the gradient
# vanishes, so round-off alone can keep the residual above a tight tolerance.
# Capacities only need the energy, so the tolerance is relaxed in steps.
TOL_RELAXATION = 100.0
MAX_CAPACITY_TOL = 1e-6


def _solve_energy(fmap, mesh, dirichlet, mass=None, quadrature="centroid", tol=1e-10, max_iter=400):
    while True:
        try:
            rep = solve(MixedProblem(fmap, mesh, dirichlet, tol=tol, max_iter=max_iter,
                                     quadrature=quadrature, reaction_mass=mass))
        except (SingularSystem, NonConvergence):
            if tol * TOL_RELAXATION > MAX_CAPACITY_TOL:
                raise
            tol *= TOL_RELAXATION
            continue
        return rep


def _estimate(build, refine, h):
    """Run ``build(mesh)`` on a mesh and optionally on its uniform refinement."""
    mesh, rep = build(None)
    est = CapacityEstimate(value=rep.energy, minimizer_energy=rep.energy, mesh_h=h,
                           iterations=rep.iterations,
                           meta={"residual_norm": rep.residual_norm, "tol": rep.tol})
    if refine:
        _, rep2 = build(refine_uniform(mesh))
        est.refined_value = rep2.energy
    return est


def condenser_capacity_ball(rho, r=1.0, p=2.0, n=2, sectors=DEFAULT_SECTORS, rings=None,
                            refine=False, tol=1e-10):
    """Discrete ``inf int |xi|^{p-n} |grad v|^p`` over ``v = 1`` on ``B_rho``, ``v = 0`` off ``B_r``."""
    if not 0 < rho < r:
        raise ValueError(f"need 0 < rho < r, got rho={rho}, r={r}")
    if n != 2:
        raise NotImplementedError("discrete capacities are computed for n = 2 only")
    if rings is None:
        rings = max(1, math.ceil(math.log(r / rho) * sectors / (2 * math.pi)))
    fmap = WeightedPLaplace(p, n)

    def build(mesh):
        if mesh is None:
            mesh = mesh_disk_annulus(r, rho, rings=rings, sectors=sectors,
                                     inner_tag=DIRICHLET, outer_tag=DIRICHLET)
        d = np.full(mesh.n_vertices, np.nan)
        rad = np.linalg.norm(mesh.vertices, axis=1)
        on = mesh.tagged_vertices(DIRICHLET)
        d[on & (rad < math.sqrt(rho * r))] = 1.0
        d[on & (rad >= math.sqrt(rho * r))] = 0.0
        return mesh, _solve_energy(fmap, mesh, d, tol=tol)

    return _estimate(build, refine, 2 * math.pi * r / sectors)


def sobolev_capacity(K, p=2.0, n=2, params=geometry.DEFAULT_PARAMS, sectors=DEFAULT_SECTORS,
                     outer_radius=SOBOLEV_OUTER_RADIUS, rings=None, refine=False, tol=1e-10):
    """Discrete ``inf int (|v|^p + |grad v|^p) |xi|^{p-n}`` over ``v >= 1`` on ``K``.

    ``K`` is ``None`` (empty), a float ``rho`` (the closed ball ``B_rho``) or a
    :class:`BlockSet` whose image ``T(F) U P T(F)`` is used.  The whole space
    is truncated to ``B_R`` with ``v = 0`` on its boundary.
    """
    if n != 2:
        raise NotImplementedError("discrete capacities are computed for n = 2 only")
    if K is None or (isinstance(K, BlockSet) and not K):
        return CapacityEstimate(0.0, 0.0, 0.0, 0.0 if refine else None)
    fmap = WeightedPLaplace(p, n)
    if isinstance(K, BlockSet):
        r_in, inner_tag, ball = 1e-6, INNER_HOLE, None
    else:
        ball = float(K)
        if not 0 < ball < outer_radius:
            raise ValueError("ball radius must lie in (0, outer_radius)")
        r_in, inner_tag = ball, DIRICHLET
    if rings is None:
        rings = max(1, math.ceil(math.log(outer_radius / r_in) * sectors / (2 * math.pi)))

    def build(mesh):
        if mesh is None:
            mesh = mesh_disk_annulus(outer_radius, r_in, rings=rings, sectors=sectors,
                                     inner_tag=inner_tag, outer_tag=DIRICHLET)
        rad = np.linalg.norm(mesh.vertices, axis=1)
        d = np.full(mesh.n_vertices, np.nan)
        d[mesh.tagged_vertices(DIRICHLET) & (rad > 0.5 * (outer_radius + 1))] = 0.0
        if ball is None:
            inside = K.contains_ball(mesh.vertices, params)
            if not inside.any():
                raise ValueError("compact set contains no mesh vertex; refine the mesh")
            d[inside] = 1.0
        else:
            d[mesh.tagged_vertices(DIRICHLET) & (rad < 0.5 * (outer_radius + ball))] = 1.0
        tables = assemble_gradient_tables(mesh)
        w = fmap.weight(tables.points[:, 0])
        mass = np.bincount(mesh.triangles.ravel(), np.repeat(tables.areas * w / 3.0, 3),
                           minlength=mesh.n_vertices)
        return mesh, _solve_energy(fmap, mesh, d, mass=mass, tol=tol)

    return _estimate(build, refine, 2 * math.pi * outer_radius / sectors)


def _check_inside(K, t):
    for b in K:
        if isinstance(b, Base) or b.t0 <= t - 1:
            raise ValueError(f"compact set must lie in G_(t-1) = {{x_n > {t - 1}}}; offending block {b}")


def neumann_mesh_size(K, h):
    """Mesh size resolving the thinnest block by at least four cells."""
    return min(h, K.min_extent() / 4)


def neumann_capacity(K, t, p=2.0, h=0.1, refine=False, tol=1e-10, min_h=1.0 / 64):
    """Discrete Neumann capacity of ``K`` relative to ``G_(t-1)`` for ``n = 2``.

    Only ``t - 1 <= x_n <= 2t + 1`` is meshed; the lateral sides and the top
    are natural, ``v = 0`` at ``x_n = t - 1`` and ``v = 1`` at vertices in ``K``.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if not K:
        return CapacityEstimate(0.0, 0.0, h, 0.0 if refine else None)
    _check_inside(K, t)
    hh = max(neumann_mesh_size(K, h), min_h)
    fmap = CoefficientMap.p_laplace(p)
    y0, L = t - 1.0, t + 2.0

    def build(mesh):
        if mesh is None:
            mesh = mesh_strip(L, hh, y0=y0, bottom=DIRICHLET, top=NEUMANN, blocks=K)
        d = np.full(mesh.n_vertices, np.nan)
        d[np.abs(mesh.vertices[:, 1] - y0) <= 1e-9] = 0.0
        inside = K.contains(mesh.vertices)
        if not inside.any():
            raise ValueError("compact set contains no mesh vertex; refine the mesh")
        d[inside] = 1.0
        return mesh, _solve_energy(fmap, mesh, d, tol=tol)

    return _estimate(build, refine, hh)


def wiener_integrand(F, t, p=2.0, h=0.1, **kw):
    """``cap_(p, G_(t-1))(F cap {t <= x_n <= 2t})^(1/(p-1))`` and the capacity itself."""
    if t < 1:
        raise ValueError("t must be >= 1")
    K = F.window(t, 2 * t)
    cap = neumann_capacity(K, t, p, h, **kw).value
    return cap ** (1.0 / (p - 1)), cap


@dataclass
class RegularityReport:
    verdict: str
    t: list
    capacity: list
    integrand: list
    partial_integral: list
    beta: Optional[float]
    c: Optional[float]
    fit_residual: Optional[float]

    def to_dict(self):
        return {"verdict": self.verdict, "beta": self.beta, "c": self.c, "fit_residual": self.fit_residual}

    def rows(self):
        return list(zip(self.t, self.capacity, self.integrand, self.partial_integral))


def fit_tail(t, integrand):
    """Least-squares fit ``integrand ~ c t^(-beta)`` on the upper half of the grid."""
    t = np.asarray(t, dtype=float)
    f = np.asarray(integrand, dtype=float)
    tail = slice(len(t) // 2, None)
    tt, ff = t[tail], f[tail]
    keep = ff > ZERO_INTEGRAND
    if keep.sum() < 2:
        return None, None, None
    A = np.column_stack([np.ones(keep.sum()), np.log(tt[keep])])
    coef, *_ = np.linalg.lstsq(A, np.log(ff[keep]), rcond=None)
    resid = np.log(ff[keep]) - A @ coef
    return float(-coef[1]), float(math.exp(coef[0])), float(np.sqrt(np.mean(resid**2)))


def verdict_from_integrand(t, integrand):
    f = np.asarray(integrand, dtype=float)
    small = f < ZERO_INTEGRAND
    # eventually zero: the last two or more grid values vanish
    trailing = 0
    for s in small[::-1]:
        if not s:
            break
        trailing += 1
    beta, c, res = fit_tail(t, integrand)
    if trailing >= 2:
        return "Irregular", beta, c, res
    if beta is None:
        return "Inconclusive", beta, c, res
    if beta <= REGULAR_BETA and c > 0:
        return "Regular", beta, c, res
    if beta >= IRREGULAR_BETA:
        return "Irregular", beta, c, res
    return "Inconclusive", beta, c, res


def classify_regularity(F, p=2.0, t_grid=None, h=0.1, threads=None, **kw):
    """Finite-evidence test of the capacity integral at infinity.

    The integrand is evaluated on ``t_grid`` (default ``2^(k/2)``,
    ``k = 0..8``), integrated by the trapezoidal rule and its tail fitted by
    a power law.
    """
    t = tuple(float(v) for v in (t_grid if t_grid is not None else default_t_grid()))
    if any(b <= a for a, b in zip(t, t[1:])) or t[0] < 1:
        raise ValueError("t grid must be increasing and start at t >= 1")
    if threads is None:
        threads = int(os.environ.get("THREADS", os.cpu_count() or 1))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda tv: wiener_integrand(F, tv, p, h, **kw), t))
    integrand = [r[0] for r in results]
    caps = [r[1] for r in results]
    partial = [0.0]
    for i in range(1, len(t)):
        partial.append(partial[-1] + 0.5 * (t[i] - t[i - 1]) * (integrand[i] + integrand[i - 1]))
    verdict, beta, c, res = verdict_from_integrand(t, integrand)
    return RegularityReport(verdict, list(t), caps, integrand, partial, beta, c, res)
