"""Finite descriptions of the closed Dirichlet set F in the cylinder."""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from . import geometry

TOL = 1e-9


@dataclass(frozen=True)
class Base:
    """The base ``|x'| <= 1, x_n = 0``."""

    def contains(self, x, tol=TOL):
        x = np.asarray(x, dtype=float)
        return np.abs(x[..., -1]) <= tol

    def bounds(self):
        return 0.0, 0.0


@dataclass(frozen=True)
class Lateral:
    """The lateral boundary strip ``|x'| = 1, t0 <= x_n <= t1``."""

    t0: float
    t1: float

    def __post_init__(self):
        if not self.t0 <= self.t1:
            raise ValueError("lateral block needs t0 <= t1")

    def contains(self, x, tol=TOL):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x[..., :-1], axis=-1)
        h = x[..., -1]
        return (r >= 1 - tol) & (h >= self.t0 - tol) & (h <= self.t1 + tol)

    def bounds(self):
        return self.t0, self.t1


@dataclass(frozen=True)
class Slab:
    """The slab ``|x'| <= cross_fraction, t0 <= x_n <= t1``."""

    t0: float
    t1: float
    cross_fraction: float = 1.0

    def __post_init__(self):
        if not self.t0 <= self.t1:
            raise ValueError("slab block needs t0 <= t1")
        if not 0 < self.cross_fraction <= 1:
            raise ValueError("cross_fraction must lie in (0, 1]")

    def contains(self, x, tol=TOL):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x[..., :-1], axis=-1)
        h = x[..., -1]
        return (r <= self.cross_fraction + tol) & (h >= self.t0 - tol) & (h <= self.t1 + tol)

    def bounds(self):
        return self.t0, self.t1


Block = Union[Base, Lateral, Slab]


@dataclass(frozen=True)
class BlockSet:
    blocks: Tuple[Block, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @classmethod
    def base_only(cls):
        return cls((Base(),))

    def __iter__(self):
        return iter(self.blocks)

    def __bool__(self):
        return bool(self.blocks)

    def contains(self, x, tol=TOL):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=bool)
        for b in self.blocks:
            out |= b.contains(x, tol)
        return out

    def contains_ball(self, xi, params=geometry.DEFAULT_PARAMS, tol=TOL):
        """Membership of ball points in ``T(F) U P T(F)`` (the origin is excluded)."""
        xi = np.asarray(xi, dtype=float)
        r = np.linalg.norm(xi, axis=-1)
        out = np.zeros(xi.shape[:-1], dtype=bool)
        ok = (r > 0) & (r <= 1 + tol)
        if not np.any(ok):
            return out
        up = np.abs(xi[ok])
        up[..., :-1] = xi[ok][..., :-1]
        up = up / np.maximum(np.linalg.norm(up, axis=-1), 1.0)[..., None]
        out[ok] = self.contains(geometry.inverse(up, params), tol)
        return out

    def window(self, lo, hi):
        """Blocks clipped to heights ``lo <= x_n <= hi``.

        The base is dropped unless ``lo <= 0``; lateral strips that only touch
        the window at one height are dropped.
        """
        kept = []
        for b in self.blocks:
            if isinstance(b, Base):
                if lo <= 0 <= hi:
                    kept.append(b)
                continue
            t0, t1 = max(b.t0, lo), min(b.t1, hi)
            if t0 > t1:
                continue
            if isinstance(b, Lateral):
                # A lateral strip clipped to a single height is a pair of points,
                # which carry no p-capacity in the plane for p <= 2.
                if t0 == t1 and b.t1 > b.t0:
                    continue
                kept.append(Lateral(t0, t1))
            else:
                kept.append(Slab(t0, t1, b.cross_fraction))
        return BlockSet(tuple(kept))

    def min_extent(self):
        """Shortest positive height extent among the blocks (``inf`` if none)."""
        ext = [b.t1 - b.t0 for b in self.blocks if not isinstance(b, Base) and b.t1 > b.t0]
        return min(ext) if ext else float("inf")


def block_from_dict(d):
    kind = d.get("kind")
    if kind == "base":
        return Base()
    if kind == "lateral":
        return Lateral(float(d["t0"]), float(d["t1"]))
    if kind == "slab":
        return Slab(float(d["t0"]), float(d["t1"]), float(d.get("cross_fraction", 1.0)))
    raise ValueError(f"unknown block kind {kind!r}")


def block_to_dict(b):
    if isinstance(b, Base):
        return {"kind": "base"}
    if isinstance(b, Lateral):
        return {"kind": "lateral", "t0": b.t0, "t1": b.t1}
    return {"kind": "slab", "t0": b.t0, "t1": b.t1, "cross_fraction": b.cross_fraction}
