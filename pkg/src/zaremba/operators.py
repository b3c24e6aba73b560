"""Coefficient maps A(x, q), their pushforward B(xi, q) to the ball, and
randomized certification of the structure conditions.

Vectors are stored along the last axis; every evaluation is vectorized over
leading axes.  ``eps`` is an optional regularization used only by the
nonlinear solver (it smooths ``|q|^{p-2}`` near ``q = 0`` for the p-Laplacian).
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import geometry
from .geometry import TransformParams

_FD_STEP = 1e-7


def _norm(q):
    return np.sqrt(np.sum(q * q, axis=-1))


def _fd_jacobian(func, q):
    """Forward-difference Jacobian of a vector field in ``q`` (last axis)."""
    q = np.asarray(q, dtype=float)
    n = q.shape[-1]
    f0 = func(q)
    scale = np.maximum(_norm(q), 1.0)[..., None]
    jac = np.empty(q.shape + (n,))
    for j in range(n):
        dq = np.zeros_like(q)
        dq[..., j] = _FD_STEP * scale[..., 0]
        jac[..., :, j] = (func(q + dq) - f0) / dq[..., j][..., None]
    return jac


@dataclass(frozen=True)
class CoefficientMap:
    """A(x, q) with structure constants ``alpha1 <= alpha2``.

    ``kind`` is ``"p_laplace"``, ``"exp_dir"`` (needs ``q0``) or ``"custom"``
    (needs ``func(x, q)``).  Use the constructors below rather than building
    instances by hand.
    """

    p: float
    alpha1: float
    alpha2: float
    kind: str
    q0: Optional[tuple] = None
    func: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must satisfy p > 1, got {self.p}")
        if not 0 < self.alpha1 <= self.alpha2:
            raise ValueError("structure constants must satisfy 0 < alpha1 <= alpha2")
        if self.kind not in ("p_laplace", "exp_dir", "custom"):
            raise ValueError(f"unknown coefficient map kind {self.kind!r}")

    @classmethod
    def p_laplace(cls, p):
        return cls(p=p, alpha1=1.0, alpha2=1.0, kind="p_laplace")

    @classmethod
    def exp_dir(cls, q0):
        """``A(x, q) = exp((q/|q|) . q0) q`` for ``p = 2``; requires ``|q0| < 1/sqrt(2)``."""
        q0 = tuple(float(v) for v in q0)
        size = float(np.linalg.norm(q0))
        if not size < 1.0 / np.sqrt(2.0):
            raise ValueError(f"exp_dir requires |q0| < 1/sqrt(2), got |q0| = {size}")
        return cls(p=2.0, alpha1=float(np.exp(-size)), alpha2=float(np.exp(size)),
                   kind="exp_dir", q0=q0)

    @classmethod
    def custom(cls, func, p, alpha1=1.0, alpha2=1.0):
        """Wrap a callable ``func(x, q) -> A``; the constants are declarations only."""
        return cls(p=p, alpha1=alpha1, alpha2=alpha2, kind="custom", func=func)

    @property
    def variational(self):
        return self.kind == "p_laplace"

    def __call__(self, x, q, eps=0.0):
        return eval_A(self, x, q, eps)

    def jacobian(self, x, q, eps=0.0):
        """Derivative of the flux with respect to ``q`` (shape ``(..., n, n)``)."""
        q = np.asarray(q, dtype=float)
        if self.kind == "p_laplace":
            n = q.shape[-1]
            s2 = np.sum(q * q, axis=-1) + eps * eps
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(s2 > 0, s2 ** ((self.p - 2) / 2), 0.0)
                qq = np.where(s2[..., None, None] > 0,
                              q[..., :, None] * q[..., None, :] / s2[..., None, None], 0.0)
            return c[..., None, None] * (np.eye(n) + (self.p - 2) * qq)
        x = np.asarray(x, dtype=float)
        return _fd_jacobian(lambda qq: eval_A(self, x, qq, eps), q)

    def energy_density(self, q, eps=0.0):
        """``|q|^p`` (regularized) for the p-Laplacian; ``None`` for other kinds."""
        if self.kind != "p_laplace":
            return None
        q = np.asarray(q, dtype=float)
        return (np.sum(q * q, axis=-1) + eps * eps) ** (self.p / 2)


def eval_A(amap, x, q, eps=0.0):
    q = np.asarray(q, dtype=float)
    if amap.kind == "p_laplace":
        s2 = np.sum(q * q, axis=-1) + eps * eps
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(s2 > 0, s2 ** ((amap.p - 2) / 2), 0.0)
        return c[..., None] * q
    if amap.kind == "exp_dir":
        r = _norm(q)
        q0 = np.asarray(amap.q0, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            expo = np.where(r > 0, (q @ q0) / np.where(r > 0, r, 1.0), 0.0)
        return np.exp(expo)[..., None] * q
    return np.asarray(amap.func(np.asarray(x, dtype=float), q), dtype=float)


@dataclass(frozen=True)
class Weight:
    p: float
    n: int

    def __call__(self, xi):
        return weight_at(self, xi)


def weight_at(w, xi):
    """``|xi|^(p - n)``; rejects ``xi = 0``."""
    r = _norm(np.asarray(xi, dtype=float))
    if np.any(r == 0):
        raise ValueError("the weight is singular at xi = 0")
    return r ** (w.p - w.n)


class Frame:
    """Per-point geometric factors of the change of variables at ball points.

    Holds ``dT``, ``|J_T|`` and the reflection mask so that repeated flux
    evaluations on a fixed set of quadrature points skip recomputing them.
    """

    def __init__(self, xi, params, reflected):
        xi = np.asarray(xi, dtype=float)
        if np.any(_norm(xi) == 0):
            raise ValueError("B is not evaluated at xi = 0")
        lower = xi[..., -1] < 0
        if np.any(lower) and not reflected:
            raise ValueError("xi_n < 0 requires the reflected extension")
        upper = np.where(lower[..., None], geometry.reflect(xi), xi)
        self.xi = xi
        self.lower = lower
        self.x = geometry.inverse(upper, params)
        self.dT, J = geometry.differential(self.x, params)
        self.absJ = np.abs(J)

    def _flip(self, v):
        return np.where(self.lower[..., None], geometry.reflect(v), v)


@dataclass(frozen=True)
class TransformedMap:
    """``B(xi, q) = |J_T|^{-1} dT A(x, dT^T q)`` with ``x = T^{-1}(xi)``.

    With ``reflected=True`` the map is extended to ``xi_n < 0`` by
    ``B(xi, q) = P B(P xi, P q)``.
    """

    base: CoefficientMap
    params: TransformParams = geometry.DEFAULT_PARAMS
    reflected: bool = True

    @property
    def p(self):
        return self.base.p

    @property
    def weight(self):
        return Weight(self.base.p, self.params.n)

    @property
    def variational(self):
        return self.base.variational

    def frame(self, xi):
        return Frame(xi, self.params, self.reflected)

    def __call__(self, xi, q, eps=0.0):
        return eval_B(self, xi, q, eps)

    def flux(self, frame, q, eps=0.0):
        qf = frame._flip(np.asarray(q, dtype=float))
        pulled = np.einsum("...ji,...j->...i", frame.dT, qf)
        a = self.base(frame.x, pulled, eps)
        b = np.einsum("...ij,...j->...i", frame.dT, a) / frame.absJ[..., None]
        return frame._flip(b)

    def jacobian(self, frame, q, eps=0.0):
        qf = frame._flip(np.asarray(q, dtype=float))
        pulled = np.einsum("...ji,...j->...i", frame.dT, qf)
        da = self.base.jacobian(frame.x, pulled, eps)
        jac = np.einsum("...ik,...kl,...jl->...ij", frame.dT, da, frame.dT) / frame.absJ[..., None, None]
        # P J P for reflected points; P is diagonal with a -1 in the last slot.
        sgn = np.ones(qf.shape[-1])
        sgn[-1] = -1.0
        flipped = jac * sgn[:, None] * sgn[None, :]
        return np.where(frame.lower[..., None, None], flipped, jac)

    def energy_density(self, frame, q, eps=0.0):
        if not self.base.variational:
            return None
        qf = frame._flip(np.asarray(q, dtype=float))
        pulled = np.einsum("...ji,...j->...i", frame.dT, qf)
        return self.base.energy_density(pulled, eps) / frame.absJ


def eval_B(bmap, xi, q, eps=0.0):
    return bmap.flux(bmap.frame(xi), q, eps)


@dataclass(frozen=True)
class WeightedPLaplace:
    """``w(xi) |q|^{p-2} q`` with ``w = |xi|^{p-n}``; the flux of the weighted condenser problems."""

    p: float
    n: int = 2

    variational = True

    @property
    def weight(self):
        return Weight(self.p, self.n)

    def frame(self, xi):
        return weight_at(self.weight, xi)

    def flux(self, frame, q, eps=0.0):
        return frame[..., None] * eval_A(CoefficientMap.p_laplace(self.p), None, q, eps)

    def jacobian(self, frame, q, eps=0.0):
        return frame[..., None, None] * CoefficientMap.p_laplace(self.p).jacobian(None, q, eps)

    def energy_density(self, frame, q, eps=0.0):
        return frame * CoefficientMap.p_laplace(self.p).energy_density(q, eps)


class PlainFlux:
    """Adapter giving a :class:`CoefficientMap` the frame/flux interface used by the solver."""

    def __init__(self, amap):
        self.amap = amap

    @property
    def p(self):
        return self.amap.p

    @property
    def variational(self):
        return self.amap.variational

    def frame(self, x):
        return np.asarray(x, dtype=float)

    def flux(self, frame, q, eps=0.0):
        return self.amap(frame, q, eps)

    def jacobian(self, frame, q, eps=0.0):
        return self.amap.jacobian(frame, q, eps)

    def energy_density(self, frame, q, eps=0.0):
        return self.amap.energy_density(q, eps)


def as_flux(m):
    """Return an object with ``frame``/``flux``/``jacobian``/``energy_density``."""
    if isinstance(m, CoefficientMap):
        return PlainFlux(m)
    return m


# ---------------------------------------------------------------------------
# randomized certification

@dataclass
class AxiomReport:
    sample_count: int
    alpha1: float
    alpha2: float
    min_monotonicity_gap: float
    max_homogeneity_error: float
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


HOMOGENEITY_FACTORS = (-2.0, -1.0, 0.5, 3.0)


def _sample_directions(rng, size, n):
    v = rng.standard_normal((size, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_q(rng, size, n):
    mags = 10.0 ** rng.uniform(-3, 3, size)
    return _sample_directions(rng, size, n) * mags[:, None]


def sample_cylinder(rng, size, n=2, height=(0.0, 10.0)):
    """Uniform points in the cross-section ball times a height interval."""
    d = _sample_directions(rng, size, n - 1) if n > 2 else rng.choice([-1.0, 1.0], (size, 1))
    r = rng.uniform(0, 1, size) ** (1.0 / (n - 1))
    xn = rng.uniform(*height, size)
    return np.concatenate([d * r[:, None], xn[:, None]], axis=1)


def sample_ball(rng, size, n=2, radii=(0.1, 1.0), upper_only=False):
    d = _sample_directions(rng, size, n)
    if upper_only:
        d[:, -1] = np.abs(d[:, -1])
    r = rng.uniform(*radii, size)
    return d * r[:, None]


def weighted_structure_constants(bmap):
    """Constants ``(c, C)`` with ``c w |q|^p <= B.q`` and ``|B| <= C w |q|^(p-1)``.

    They follow from the singular value bounds ``c1 s <= |dT q|/|q| <= c2 s``
    with ``s = |xi|`` and ``c1^n s^n <= |J_T| <= c2^n s^n``.
    """
    c1, c2 = geometry.singular_value_bounds(bmap.params)
    p, n = bmap.p, bmap.params.n
    return bmap.base.alpha1 * c1**p / c2**n, bmap.base.alpha2 * c2**p / c1**n


def verify_axioms(m, sample_count=10_000, seed=0, radii=(0.1, 1.0), height=(0.0, 10.0),
                  declared=None):
    """Empirically check ellipticity, growth, homogeneity and monotonicity.

    For a :class:`CoefficientMap` the declared constants ``alpha1, alpha2``
    are asserted.  For a :class:`TransformedMap` the ratios are divided by the
    weight and checked against :func:`weighted_structure_constants` unless
    ``declared=(c, C)`` is given.  Violations are collected, never raised.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    violations = []
    if isinstance(m, TransformedMap):
        n = m.params.n
        pts = sample_ball(rng, sample_count, n, radii, upper_only=not m.reflected)
        w = weight_at(m.weight, pts)
        frame = m.frame(pts)
        f = lambda q: m.flux(frame, q)
        bounds = declared if declared is not None else weighted_structure_constants(m)
    else:
        n = len(m.q0) if m.q0 is not None else 2
        pts = sample_cylinder(rng, sample_count, n, height)
        w = np.ones(sample_count)
        f = lambda q: m(pts, q)
        bounds = declared if declared is not None else (m.alpha1, m.alpha2)
    p = m.p
    q = _sample_q(rng, sample_count, n)
    a = f(q)
    qn = _norm(q)
    ell = np.sum(a * q, axis=1) / (w * qn**p)
    grow = _norm(a) / (w * qn ** (p - 1))
    rtol = 1e-12
    if not np.all(np.isfinite(ell)) or not np.all(np.isfinite(grow)):
        violations.append(("finite", int(np.sum(~np.isfinite(ell) | ~np.isfinite(grow)))))
    if np.any(ell <= 0):
        violations.append(("ellipticity", int(np.sum(ell <= 0))))
    if bounds is not None:
        lo, hi = bounds
        bad = np.sum(ell < lo * (1 - rtol))
        if bad:
            violations.append(("ellipticity", int(bad)))
        bad = np.sum(grow > hi * (1 + rtol))
        if bad:
            violations.append(("boundedness", int(bad)))
    # homogeneity
    herr = 0.0
    for lam in HOMOGENEITY_FACTORS:
        lhs = f(lam * q)
        rhs = lam * abs(lam) ** (p - 2) * a
        err = _norm(lhs - rhs) / np.maximum(_norm(rhs), np.finfo(float).tiny)
        bad = int(np.sum(err > 1e-12))
        if bad:
            violations.append((f"homogeneity (lambda={lam:g})", bad))
        herr = max(herr, float(err.max()))
    # monotonicity on independent pairs
    q2 = _sample_q(rng, sample_count, n)
    gap = np.sum((a - f(q2)) * (q - q2), axis=1)
    if np.any(~(gap > 0)):
        violations.append(("monotonicity", int(np.sum(~(gap > 0)))))
    return AxiomReport(sample_count=sample_count, alpha1=float(ell.min()), alpha2=float(grow.max()),
                       min_monotonicity_gap=float(gap.min()), max_homogeneity_error=herr,
                       violations=violations)


@dataclass
class AngularReport:
    sample_count: int
    min_margin: float
    violations: int


def verify_angular_condition(q0, sample_count=100_000, seed=0):
    """Check ``a(t')/a(t) > (1 - sin al)/(1 + sin al)`` for ``a(t) = exp(t . q0)``.

    Pairs of unit vectors with positive inner product ``cos al`` are sampled;
    the margin is the smallest difference of the two sides.
    """
    q0 = np.asarray(q0, dtype=float)
    if not np.linalg.norm(q0) < 1.0 / np.sqrt(2.0):
        raise ValueError("the angular condition is only claimed for |q0| < 1/sqrt(2)")
    rng = np.random.default_rng(seed)
    n = q0.size
    t1 = _sample_directions(rng, sample_count, n)
    t2 = _sample_directions(rng, sample_count, n)
    cos = np.sum(t1 * t2, axis=1)
    flip = cos < 0
    t2[flip] = -t2[flip]
    cos = np.abs(cos)
    keep = cos > 0
    t1, t2, cos = t1[keep], t2[keep], np.minimum(cos[keep], 1.0)
    sin = np.sqrt(1.0 - cos**2)
    ratio = np.exp((t2 - t1) @ q0)
    rhs = (1 - sin) / (1 + sin)
    margin = ratio - rhs
    return AngularReport(sample_count=int(keep.sum()), min_margin=float(margin.min()),
                         violations=int(np.sum(~(margin > 0))))


def angular_ratio(q0, theta, theta_prime):
    """Return ``(a(theta')/a(theta), (1 - sin al)/(1 + sin al))`` for one pair of unit vectors."""
    q0, t, tp = (np.asarray(v, dtype=float) for v in (q0, theta, theta_prime))
    cos = float(np.clip(t @ tp, -1.0, 1.0))
    sin = np.sqrt(1.0 - cos * cos)
    return float(np.exp((tp - t) @ q0)), float((1 - sin) / (1 + sin))


def _p1_gradients(points, triangles, values):
    """Per-triangle gradients and unsigned areas of a P1 field on arbitrary vertices."""
    v = points[triangles]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    if np.any(area <= 1e-14):
        raise ValueError("degenerate triangle in energy comparison")
    u = values[triangles]
    du1, du2 = u[:, 1] - u[:, 0], u[:, 2] - u[:, 0]
    g = np.stack([(du1 * e2[:, 1] - du2 * e1[:, 1]) / det,
                  (du2 * e1[:, 0] - du1 * e2[:, 0]) / det], axis=-1)
    return g, area


def _edge_midpoints(points, triangles, values):
    v = points[triangles]
    u = values[triangles]
    pairs = ((0, 1), (1, 2), (2, 0))
    pts = np.stack([0.5 * (v[:, i] + v[:, j]) for i, j in pairs], axis=1)
    vals = np.stack([0.5 * (u[:, i] + u[:, j]) for i, j in pairs], axis=1)
    return pts, vals


@dataclass(frozen=True)
class EnergyComparison:
    """Gradient and zero-order integrals of the same P1 field on both charts."""
    gradient_cylinder: float
    gradient_ball: float
    zero_order_cylinder: float
    zero_order_ball: float

    @property
    def gradient_ratio(self):
        return self.gradient_cylinder / self.gradient_ball if self.gradient_ball > 0 else float("nan")

    @property
    def zero_order_ratio(self):
        return self.zero_order_cylinder / self.zero_order_ball if self.zero_order_ball > 0 else float("nan")


def compare_energy_norms(u, params=geometry.DEFAULT_PARAMS, p=2.0):
    """Integrals of a P1 field on a cylinder mesh and of its image on the ball.

    The image mesh has the same triangles with vertices moved by the forward
    transform, so ``u~`` is the P1 field with the same nodal values.  Returns
    ``(int |grad u|^p dx, int |grad u~|^p |xi|^(p-n) dxi)``; see
    :func:`compare_norms` for the zero-order pair as well.
    """
    res = compare_norms(u, params, p)
    return res.gradient_cylinder, res.gradient_ball


def compare_norms(u, params=geometry.DEFAULT_PARAMS, p=2.0):
    if params.n != 2:
        raise NotImplementedError("energy comparison is implemented for n = 2")
    mesh = u.mesh
    vals = np.asarray(u.values, dtype=float)
    x = mesh.vertices
    if np.any(x[:, -1] < 0):
        raise ValueError("the cylinder region must lie in x_n >= 0")
    xi = geometry.forward(x, params)
    tri = mesh.triangles
    w = Weight(p, params.n)

    g, area = _p1_gradients(x, tri, vals)
    gt, area_t = _p1_gradients(xi, tri, vals)
    centroid_t = xi[tri].mean(axis=1)
    grad_cyl = float(np.sum(area * _norm(g) ** p))
    grad_ball = float(np.sum(area_t * _norm(gt) ** p * w(centroid_t)))

    # three-point edge-midpoint rule for the zero-order terms
    pts, mid = _edge_midpoints(x, tri, vals)
    zero_cyl = float(np.sum(area[:, None] / 3.0 * np.abs(mid) ** p
                            * np.exp(-p * params.kappa * pts[..., -1])))
    pts_t, mid_t = _edge_midpoints(xi, tri, vals)
    zero_ball = float(np.sum(area_t[:, None] / 3.0 * np.abs(mid_t) ** p * w(pts_t)))
    return EnergyComparison(grad_cyl, grad_ball, zero_cyl, zero_ball)
