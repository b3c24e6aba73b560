"""Change of variables between the closed half-cylinder and the punctured half-ball.

Cylinder points are written ``x = (x', x_n)`` with ``|x'| <= 1`` and ``x_n >= 0``;
ball points are ``xi = (xi', xi_n)``.  All functions accept a single point
(shape ``(n,)``) or a stack of points (shape ``(..., n)``) and are pure.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TransformParams:
    kappa: float = 1.0
    n: int = 2

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")


DEFAULT_PARAMS = TransformParams()


def _split(x):
    x = np.asarray(x, dtype=float)
    return x[..., :-1], x[..., -1]


def forward(x, params=DEFAULT_PARAMS):
    """Map cylinder points to the upper half-ball; ``|forward(x)| = exp(-kappa x_n)``."""
    xc, xn = _split(x)
    rho = np.sum(xc * xc, axis=-1)
    s = np.exp(-params.kappa * xn)
    d = 1.0 + rho
    xi_c = (2.0 * s / d)[..., None] * xc
    xi_n = s * (1.0 - rho) / d
    return np.concatenate([xi_c, xi_n[..., None]], axis=-1)


def inverse(xi, params=DEFAULT_PARAMS):
    """Inverse of :func:`forward` on ``0 < |xi| <= 1``, ``xi_n >= 0``."""
    xi = np.asarray(xi, dtype=float)
    r = np.linalg.norm(xi, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("xi = 0 is the image of the point at infinity")
    xc, xn = _split(xi)
    x_c = xc / (r + xn)[..., None]
    x_n = -np.log(r) / params.kappa
    return np.concatenate([x_c, x_n[..., None]], axis=-1)


def differential(x, params=DEFAULT_PARAMS):
    """Closed-form differential ``dT(x)`` and Jacobian determinant.

    Returns ``(dT, J)`` where ``dT[..., i, j] = d xi_i / d x_j``.
    """
    x = np.asarray(x, dtype=float)
    xc, xn = _split(x)
    n = x.shape[-1]
    rho = np.sum(xc * xc, axis=-1)
    s = np.exp(-params.kappa * xn)
    d = 1.0 + rho
    xi = forward(x, params)

    dT = np.zeros(x.shape[:-1] + (n, n))
    eye = np.eye(n - 1)
    outer = xc[..., :, None] * xc[..., None, :]
    dT[..., :-1, :-1] = (2.0 * s / d)[..., None, None] * eye - (4.0 * s / d**2)[..., None, None] * outer
    dT[..., -1, :-1] = -(4.0 * s / d**2)[..., None] * xc
    dT[..., :, -1] = -params.kappa * xi
    # Columns are mutually orthogonal: n-1 tangential columns of length 2s/d
    # and one radial column of length kappa*s.  The sign comes from det.
    sign = np.sign(np.linalg.det(dT))
    J = sign * params.kappa * s**n * (2.0 / d) ** (n - 1)
    return dT, J


def singular_value_bounds(params=DEFAULT_PARAMS):
    """Bounds ``(c1, c2)`` with ``c1 <= e^{kappa x_n} |dT(x) q| / |q| <= c2`` on the closed cylinder."""
    return min(1.0, params.kappa), max(2.0, params.kappa)


def reflect(xi):
    """Reflection in the hyperplane ``xi_n = 0``."""
    out = np.array(xi, dtype=float, copy=True)
    out[..., -1] = -out[..., -1]
    return out


def radius_for_height(t, kappa=1.0):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("height must be >= 0")
    return np.exp(-kappa * t)


def height_for_radius(r, kappa=1.0):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0) or np.any(r > 1):
        raise ValueError("radius must lie in (0, 1]")
    return -np.log(r) / kappa
