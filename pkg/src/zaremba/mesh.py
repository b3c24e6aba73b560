"""Structured triangulations of the strip ``(-1, 1) x (y0, y0 + L)`` and of
(punctured) disks/annuli, plus P1 gradient tables and quadrature."""
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
INNER_HOLE = "inner_hole"
TAGS = (DIRICHLET, NEUMANN, INNER_HOLE)

# triangles with area below this multiple of the squared longest edge are degenerate
MIN_SHAPE = 1e-10
MAX_GRADING = 1.5


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: tuple
    symmetry_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def tagged_vertices(self, tag):
        """Boolean vertex mask of endpoints of edges carrying ``tag``."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        sel = np.array([t == tag for t in self.edge_tags], dtype=bool)
        if sel.any():
            mask[self.boundary_edges[sel].ravel()] = True
        return mask

    def areas(self):
        v = self.vertices[self.triangles]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def degenerate(self):
        """Mask of degenerate or inverted triangles, judged relative to their size."""
        v = self.vertices[self.triangles]
        longest = np.max(np.sum((v - np.roll(v, 1, axis=1)) ** 2, axis=2), axis=1)
        return self.areas() <= MIN_SHAPE * longest

    def edges(self):
        """All edges as sorted vertex pairs with the number of triangles using them."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def check(self):
        """Assert the structural invariants; raises :class:`MeshError`."""
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        bad = self.degenerate()
        if np.any(bad):
            raise MeshError(f"{int(bad.sum())} degenerate or inverted triangles")
        uniq, counts = self.edges()
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: edge shared by more than two triangles")
        bnd = {tuple(e) for e in uniq[counts == 1]}
        tagged = [tuple(sorted(e)) for e in self.boundary_edges.tolist()]
        if len(tagged) != len(set(tagged)):
            raise MeshError("boundary edge tagged more than once")
        if set(tagged) != bnd:
            raise MeshError("boundary edges and tagged edges differ")
        if len(self.edge_tags) != len(tagged) or any(t not in TAGS for t in self.edge_tags):
            raise MeshError("invalid boundary tags")
        if self.symmetry_map is not None:
            s = self.symmetry_map
            if not np.array_equal(s[s], np.arange(self.n_vertices)):
                raise MeshError("symmetry map is not an involution")
            mirrored = self.vertices.copy()
            mirrored[:, -1] *= -1
            if not np.array_equal(self.vertices[s], mirrored):
                raise MeshError("symmetry map does not match mirrored vertices")
        return self

    def dump(self, directory):
        """Write vertices.csv, triangles.csv and edges.csv into ``directory``."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "vertices.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y"])
            for i, (x, y) in enumerate(self.vertices):
                w.writerow([i, f"{x:.17g}", f"{y:.17g}"])
        with open(os.path.join(directory, "triangles.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["v0", "v1", "v2"])
            w.writerows(self.triangles.tolist())
        with open(os.path.join(directory, "edges.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["v0", "v1", "tag"])
            for (a, b), tag in zip(self.boundary_edges.tolist(), self.edge_tags):
                w.writerow([a, b, tag])


def _cells(length, h):
    n = length / h
    k = int(round(n))
    if abs(n - k) > 1e-9 * max(1.0, n):
        k = int(math.ceil(n))
    return max(k, 1)


def mesh_strip(L, h, y0=0.0, bottom=DIRICHLET, top=DIRICHLET, blocks=None):
    """Regular right-triangle mesh of ``(-1, 1) x (y0, y0 + L)``.

    Lateral edges whose endpoints both lie in ``blocks`` are tagged Dirichlet,
    all other lateral edges Neumann.  ``bottom`` and ``top`` give the tags of
    the horizontal boundary edges.
    """
    if not L > 0:
        raise ValueError(f"strip height must be positive, got {L}")
    if not 0 < h <= 0.5:
        raise ValueError(f"mesh size must satisfy 0 < h <= 0.5, got {h}")
    for tag in (bottom, top):
        if tag not in (DIRICHLET, NEUMANN):
            raise ValueError(f"invalid horizontal boundary tag {tag!r}")
    nx, ny = _cells(2.0, h), _cells(L, h)
    xs = np.linspace(-1.0, 1.0, nx + 1)
    ys = y0 + L * np.arange(ny + 1) / ny
    ys[-1] = y0 + L
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    a, b, c, d = vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)
    tris = np.empty((2 * len(a), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([a, b, c])
    tris[1::2] = np.column_stack([a, c, d])

    edges, tags = [], []
    for i in range(nx):
        edges.append((vid(i, 0), vid(i + 1, 0)))
        tags.append(bottom)
    for i in range(nx):
        edges.append((vid(i, ny), vid(i + 1, ny)))
        tags.append(top)
    for side in (0, nx):
        for j in range(ny):
            e = (vid(side, j), vid(side, j + 1))
            edges.append(e)
            inside = blocks is not None and bool(np.all(blocks.contains(verts[list(e)])))
            tags.append(DIRICHLET if inside else NEUMANN)
    meta = {"kind": "strip", "nx": nx, "ny": ny, "y0": float(y0), "L": float(L), "h": 2.0 / nx}
    return Mesh(verts, tris, np.array(edges, dtype=np.int64), tuple(tags), None, meta).check()


def minimal_rings(r_outer, r_inner, ratio=MAX_GRADING):
    return int(math.ceil(math.log(r_outer / r_inner) / math.log(ratio) - 1e-12))


def mesh_disk_annulus(r_outer=1.0, r_inner=0.0, rings=None, sectors=64, delta=None,
                      inner_tag=INNER_HOLE, outer_tag=DIRICHLET):
    """Polar product mesh of ``r_inner <= |xi| <= r_outer`` with geometric radial grading.

    ``r_inner = 0`` punctures the disk with a hole of radius ``delta``
    (default ``1e-6 * r_outer``).  The mesh is exactly mirror symmetric in the
    horizontal axis; ``sectors`` must be even.
    """
    if sectors % 2 or sectors < 4:
        raise ValueError(f"sectors must be an even integer >= 4, got {sectors}")
    if r_inner == 0:
        r_inner = 1e-6 * r_outer if delta is None else delta
    if not 0 < r_inner < r_outer:
        raise ValueError("need 0 < r_inner < r_outer")
    for tag in (inner_tag, outer_tag):
        if tag not in TAGS:
            raise ValueError(f"invalid tag {tag!r}")
    if rings is None:
        rings = minimal_rings(r_outer, r_inner)
    ratio = (r_outer / r_inner) ** (1.0 / rings)
    if ratio > MAX_GRADING * (1 + 1e-12):
        raise ValueError(f"{rings} rings give grading ratio {ratio:.4f} > {MAX_GRADING}")
    radii = r_inner * ratio ** np.arange(rings + 1)
    radii[0], radii[-1] = r_inner, r_outer

    half = sectors // 2
    theta = 2.0 * np.pi * np.arange(half + 1) / sectors
    c, s = np.cos(theta), np.sin(theta)
    s[0] = s[-1] = 0.0
    c[0], c[-1] = 1.0, -1.0
    # angles past pi are exact mirrors of those below
    cos_all = np.concatenate([c, c[1:-1][::-1]])
    sin_all = np.concatenate([s, -s[1:-1][::-1]])
    R = radii[:, None]
    verts = np.column_stack([(R * cos_all).ravel(), (R * sin_all).ravel()])

    def vid(k, j):
        return k * sectors + (j % sectors)

    K, Jn = np.meshgrid(np.arange(rings), np.arange(sectors), indexing="ij")
    K, Jn = K.ravel(), Jn.ravel()
    a, b, cc, d = vid(K, Jn), vid(K + 1, Jn), vid(K + 1, Jn + 1), vid(K, Jn + 1)
    upper = Jn < half
    t1 = np.where(upper[:, None], np.column_stack([a, b, cc]), np.column_stack([a, b, d]))
    t2 = np.where(upper[:, None], np.column_stack([a, cc, d]), np.column_stack([b, cc, d]))
    tris = np.empty((2 * len(a), 3), dtype=np.int64)
    tris[0::2], tris[1::2] = t1, t2

    j = np.arange(sectors)
    inner = np.column_stack([vid(0, j), vid(0, j + 1)])
    outer = np.column_stack([vid(rings, j), vid(rings, j + 1)])
    edges = np.concatenate([inner, outer])
    tags = (inner_tag,) * sectors + (outer_tag,) * sectors
    kk = np.repeat(np.arange(rings + 1), sectors)
    jj = np.tile(np.arange(sectors), rings + 1)
    sym = vid(kk, (sectors - jj) % sectors)
    meta = {"kind": "annulus", "rings": rings, "sectors": sectors, "r_inner": float(r_inner),
            "r_outer": float(r_outer), "ratio": float(ratio)}
    return Mesh(verts, tris, edges, tags, sym.astype(np.int64), meta).check()


@dataclass(frozen=True)
class GradientTables:
    """Constant P1 basis gradients per triangle plus a quadrature rule.

    ``points`` has shape ``(M, Q, 2)`` and ``weights`` ``(M, Q)`` (weights
    already include the triangle area).
    """

    grads: np.ndarray
    areas: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    bary: np.ndarray


_RULES = {
    "centroid": (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    # edge midpoints; exact for quadratics
    "three_point": (np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
                    np.array([1 / 3, 1 / 3, 1 / 3])),
}


def assemble_gradient_tables(mesh, quadrature="centroid"):
    if quadrature not in _RULES:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    v = mesh.vertices[mesh.triangles]
    area = mesh.areas()
    if np.any(mesh.degenerate()):
        raise MeshError("degenerate triangle")
    # grad phi_i = rot90(opposite edge) / (2 area)
    e0 = v[:, 2] - v[:, 1]
    e1 = v[:, 0] - v[:, 2]
    e2 = v[:, 1] - v[:, 0]
    E = np.stack([e0, e1, e2], axis=1)
    grads = np.stack([-E[..., 1], E[..., 0]], axis=-1) / (2.0 * area)[:, None, None]
    bary, w = _RULES[quadrature]
    pts = np.einsum("qk,mkd->mqd", bary, v)
    return GradientTables(grads, area, pts, area[:, None] * w[None, :], bary)


def field_gradients(tables, mesh, values):
    """Per-triangle gradient of the P1 interpolant of nodal ``values``."""
    return np.einsum("mk,mkd->md", np.asarray(values, dtype=float)[mesh.triangles], tables.grads)


def refine_uniform(mesh):
    """Split every triangle into four through its edge midpoints.

    The P1 space of the result contains that of ``mesh``; tags and the
    mirror map are carried over.
    """
    uniq, _ = mesh.edges()
    n = mesh.n_vertices
    mid = n + np.arange(len(uniq))
    key = uniq[:, 0] * n + uniq[:, 1]
    order = np.argsort(key)
    skey = key[order]

    def midpoint(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return mid[order[np.searchsorted(skey, lo * n + hi)]]

    v = mesh.vertices
    verts = np.concatenate([v, 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])])
    t = mesh.triangles
    m01, m12, m20 = midpoint(t[:, 0], t[:, 1]), midpoint(t[:, 1], t[:, 2]), midpoint(t[:, 2], t[:, 0])
    tris = np.concatenate([
        np.column_stack([t[:, 0], m01, m20]),
        np.column_stack([m01, t[:, 1], m12]),
        np.column_stack([m20, m12, t[:, 2]]),
        np.column_stack([m01, m12, m20]),
    ])
    be = mesh.boundary_edges
    bm = midpoint(be[:, 0], be[:, 1])
    edges = np.concatenate([np.column_stack([be[:, 0], bm]), np.column_stack([bm, be[:, 1]])])
    tags = tuple(mesh.edge_tags) * 2
    sym = None
    if mesh.symmetry_map is not None:
        s = mesh.symmetry_map
        sym = np.concatenate([s, midpoint(s[uniq[:, 0]], s[uniq[:, 1]])])
    meta = dict(mesh.meta)
    meta["refined"] = meta.get("refined", 0) + 1
    if "h" in meta:
        meta["h"] = meta["h"] / 2
    for k in ("nx", "ny"):
        if k in meta:
            meta[k] = 2 * meta[k]
    return Mesh(verts, tris, edges, tags, sym, meta).check()


def mesh_size(mesh):
    """Longest edge length."""
    uniq, _ = mesh.edges()
    return float(np.max(np.linalg.norm(mesh.vertices[uniq[:, 0]] - mesh.vertices[uniq[:, 1]], axis=1)))
