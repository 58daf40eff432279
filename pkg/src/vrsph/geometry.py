"""Particle distributions, neighbour search and covering-radius estimates."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._jit import USE_NUMBA, njit

INTERIOR, BOUNDARY, VIRTUAL = 0, 1, 2

# Minimum ratio of circumradius to edge length for a regular d-simplex.
SIMPLEX_BETA = {1: 0.5, 2: 1.0 / math.sqrt(3.0), 3: math.sqrt(6.0) / 4.0}


class GeometryError(ValueError):
    """Invalid particle geometry (degenerate mesh, duplicates, ...)."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo_0, hi_0] x ... x [lo_{d-1}, hi_{d-1}]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or not all(b > a for a, b in zip(lo, hi)):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int) -> Box:
        return cls((lo,) * dim, (hi,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def contains(self, pts, strict=False, tol=0.0):
        pts = np.atleast_2d(pts)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if strict:
            return np.all((pts > lo + tol) & (pts < hi - tol), axis=1)
        return np.all((pts >= lo - tol) & (pts <= hi + tol), axis=1)


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Particle positions with interior particles stored first.

    ``kind`` marks each particle as ``INTERIOR``, ``BOUNDARY`` (on the box
    surface) or ``VIRTUAL`` (padding outside the box).
    """

    positions: np.ndarray
    n_interior: int
    box: Box
    delta_x: float
    kind: np.ndarray

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        pos.setflags(write=False)
        kind = np.asarray(self.kind, dtype=np.int8)
        kind.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "kind", kind)
        if pos.shape[1] != self.box.dim:
            raise ValueError("position dimension does not match box")
        if kind.shape != (len(pos),):
            raise ValueError("kind must have one entry per particle")
        if np.any(kind[: self.n_interior] != INTERIOR) or np.any(kind[self.n_interior:] == INTERIOR):
            raise ValueError("interior particles must come first")

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def n_total(self) -> int:
        return len(self.positions)

    @property
    def is_interior(self) -> np.ndarray:
        return self.kind == INTERIOR

    @property
    def in_domain(self) -> np.ndarray:
        """Particles in the closed box (interior and boundary)."""
        return self.kind != VIRTUAL

    def __len__(self):
        return self.n_total


def _make_set(positions, kind, box, delta_x) -> ParticleSet:
    kind = np.asarray(kind)
    order = np.argsort(kind, kind="stable")
    return ParticleSet(np.asarray(positions)[order], int(np.sum(kind == INTERIOR)), box,
                       float(delta_x), kind[order])


def _as_box(box, dim=None) -> Box:
    if isinstance(box, Box):
        return box
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        return Box.cube(arr[0], arr[1], dim or 1)
    return Box(arr[:, 0], arr[:, 1])


def _lattice(n_per_dim, box, virtual_layers, layout):
    d = box.dim
    L = box.lengths
    dx = L / n_per_dim
    axes, labels = [], []
    for k in range(d):
        if layout == "cell":
            idx = np.arange(-virtual_layers, n_per_dim + virtual_layers)
            coords = box.lo[k] + (idx + 0.5) * dx[k]
            lab = np.where((idx < 0) | (idx >= n_per_dim), VIRTUAL, INTERIOR)
        elif layout == "node":
            idx = np.arange(-virtual_layers, n_per_dim + virtual_layers + 1)
            coords = box.lo[k] + idx * dx[k]
            lab = np.where((idx < 0) | (idx > n_per_dim), VIRTUAL,
                           np.where((idx == 0) | (idx == n_per_dim), BOUNDARY, INTERIOR))
        else:
            raise ValueError(f"layout must be 'cell' or 'node', got {layout!r}")
        if layout == "node":
            coords[idx == n_per_dim] = box.hi[k]
        axes.append((coords, lab, idx))
    grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    pos = np.stack([g.ravel() for g in grids], axis=1)
    labs = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    kind = np.max(np.stack([g.ravel() for g in labs], axis=1), axis=1)
    idxs = np.meshgrid(*[a[2] for a in axes], indexing="ij")
    lattice_index = np.stack([g.ravel() for g in idxs], axis=1)
    return pos, kind, lattice_index, dx


def generate_uniform(n_per_dim: int, box=(0.0, 1.0), virtual_layers: int = 0,
                     layout: str = "cell", dim: int | None = None) -> ParticleSet:
    """Regular lattice with ``n_per_dim`` spacings per axis.

    ``layout="cell"`` puts one particle at each cell centre (all interior,
    ``delta_x = |box|^(1/d) / N^(1/d)``). ``layout="node"`` puts particles on
    the ``n_per_dim + 1`` lattice nodes per axis, so the outer nodes sit on
    the boundary; ``delta_x`` is then the lattice spacing ``L / n_per_dim``.
    ``virtual_layers`` extra lattice shells outside the box are tagged
    ``VIRTUAL``.
    """
    if n_per_dim < 2:
        raise ValueError("n_per_dim must be at least 2")
    if virtual_layers < 0:
        raise ValueError("virtual_layers must be non-negative")
    box = _as_box(box, dim)
    pos, kind, _, dx = _lattice(n_per_dim, box, virtual_layers, layout)
    return _make_set(pos, kind, box, float(np.prod(dx) ** (1.0 / box.dim)))


def generate_perturbed(n_per_dim: int, box=(0.0, 1.0), amplitude: float = 0.5, seed: int = 0,
                       virtual_layers: int = 0, layout: str = "cell", dim: int | None = None,
                       boundary: str = "tangential", frozen_layers: int = 0,
                       max_retries: int = 10) -> ParticleSet:
    """Lattice with each coordinate shifted by ``Uniform(-a dx, a dx)``.

    Interior particles move freely. Boundary particles move only along the
    faces they lie on (``boundary="tangential"``) or stay put
    (``boundary="fixed"``); corner/edge coordinates pinned to a face never
    move. Interior particles within ``frozen_layers`` lattice layers of the
    boundary are left on the lattice. Virtual particles are never perturbed.
    """
    if not 0.0 <= amplitude <= 0.5:
        raise ValueError("amplitude must lie in [0, 0.5]")
    if boundary not in ("tangential", "fixed"):
        raise ValueError("boundary must be 'tangential' or 'fixed'")
    box = _as_box(box, dim)
    pos, kind, lidx, dx = _lattice(n_per_dim, box, virtual_layers, layout)
    d = box.dim
    top = n_per_dim if layout == "node" else n_per_dim - 1
    depth = np.min(np.minimum(lidx, top - lidx), axis=1)
    movable = np.zeros(pos.shape, dtype=bool)
    interior = (kind == INTERIOR) & (depth >= frozen_layers + (1 if layout == "node" else 0))
    movable[interior] = True
    if boundary == "tangential":
        on_face = (lidx == 0) | (lidx == top) if layout == "node" else np.zeros_like(lidx, bool)
        bmask = kind == BOUNDARY
        movable[bmask] = ~on_face[bmask]
    rng = np.random.default_rng(seed)
    delta = float(np.prod(dx) ** (1.0 / d))
    for _ in range(max_retries):
        shift = rng.uniform(-amplitude, amplitude, size=pos.shape) * dx
        new = np.where(movable, pos + shift, pos)
        inside = box.contains(new[kind == INTERIOR], strict=True).all()
        if inside and _min_separation(new, delta) > 1e-9 * delta:
            return _make_set(new, kind, box, delta)
    raise GeometryError(f"could not draw a collision-free perturbation in {max_retries} tries")


def generate_random(n_per_dim: int, box=(0.0, 1.0), seed: int = 0, dim: int | None = None) -> ParticleSet:
    """Boundary nodes of the ``n_per_dim`` lattice plus ``(n_per_dim - 1)^d``
    interior particles drawn uniformly from the open box."""
    if n_per_dim < 2:
        raise ValueError("n_per_dim must be at least 2")
    box = _as_box(box, dim)
    pos, kind, _, dx = _lattice(n_per_dim, box, 0, "node")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    inner = lo + rng.random((int(np.sum(kind == INTERIOR)), box.dim)) * (hi - lo)
    bnd = pos[kind == BOUNDARY]
    kinds = np.r_[np.full(len(inner), INTERIOR), np.full(len(bnd), BOUNDARY)]
    return _make_set(np.vstack([inner, bnd]), kinds, box, float(np.prod(dx) ** (1.0 / box.dim)))


def _min_separation(pos, scale):
    table = build_neighbor_table(pos, 0.5 * scale)
    if table.indices.size == 0:
        return np.inf
    return float(np.min(np.linalg.norm(table.displacements(pos), axis=1)))


# --------------------------------------------------------------------------
# simplicial meshes


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    vertices: np.ndarray
    simplices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        object.__setattr__(self, "simplices", np.asarray(self.simplices, dtype=np.int64))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def edge_lengths(self) -> np.ndarray:
        s = self.simplices
        k = s.shape[1]
        pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
        return np.concatenate([np.linalg.norm(self.vertices[s[:, a]] - self.vertices[s[:, b]], axis=1)
                               for a, b in pairs])

    @property
    def l_max(self) -> float:
        return float(self.edge_lengths().max())

    def measures(self) -> np.ndarray:
        """Signed areas (2-D) of the simplices."""
        v = self.vertices[self.simplices]
        e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.vertices[self.simplices].mean(axis=1)


def generate_triangle_centroids(mesh: SimplicialMesh, box: Box | None = None) -> ParticleSet:
    """One particle per triangle, placed at its centroid.

    Centroids outside ``box`` (defaults to the mesh bounding box) become
    virtual particles, which lets a padded mesh supply untruncated supports.
    """
    if mesh.dim != 2 or mesh.simplices.shape[1] != 3:
        raise GeometryError("expected a 2-D triangle mesh")
    areas = np.abs(mesh.measures())
    scale = mesh.l_max**2
    bad = np.flatnonzero(areas <= 1e-14 * scale)
    if bad.size:
        raise GeometryError(f"degenerate triangle(s) {bad[:5].tolist()} (area <= {1e-14 * scale:.3e})")
    if box is None:
        box = Box(mesh.vertices.min(axis=0), mesh.vertices.max(axis=0))
    c = mesh.centroids()
    inside = box.contains(c, strict=True)
    kind = np.where(inside, INTERIOR, VIRTUAL)
    n = int(inside.sum())
    return _make_set(c, kind, box, (box.volume / n) ** 0.5)


def read_triangle_mesh(node_path, element_path) -> SimplicialMesh:
    """Read whitespace-delimited ``id x y`` / ``id v1 v2 v3`` files (1-based ids).

    A leading count header (as written by Triangle) and ``#`` comments are skipped.
    """
    nodes = _read_table(node_path, 3)
    elems = _read_table(element_path, 4)
    ids = nodes[:, 0].astype(np.int64)
    lookup = {int(k): n for n, k in enumerate(ids)}
    try:
        tris = np.array([[lookup[int(v)] for v in row[1:4]] for row in elems], dtype=np.int64)
    except KeyError as exc:
        raise GeometryError(f"element references unknown node {exc}") from None
    return SimplicialMesh(nodes[:, 1:3], tris)


def _read_table(path, ncols):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    # Triangle-style header: "<count> ..." with a different column count than the data
    if len(rows) > 1 and len(rows[0]) != len(rows[1]) and float(rows[0][0]) == len(rows) - 1:
        rows = rows[1:]
    if any(len(r) < ncols for r in rows):
        raise GeometryError(f"{path}: expected at least {ncols} columns per line")
    return np.array([[float(v) for v in r[:ncols]] for r in rows])


def write_triangle_mesh(mesh: SimplicialMesh, node_path, element_path):
    with open(node_path, "w") as fh:
        for k, (x, y) in enumerate(mesh.vertices, start=1):
            fh.write(f"{k} {float(x)!r} {float(y)!r}\n")
    with open(element_path, "w") as fh:
        for k, tri in enumerate(mesh.simplices, start=1):
            fh.write(f"{k} {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


# --------------------------------------------------------------------------
# Bowyer-Watson Delaunay triangulation


@njit
def _orient(ax, ay, bx, by, cx, cy):
    l = (bx - ax) * (cy - ay)
    r = (by - ay) * (cx - ax)
    det = l - r
    if abs(det) <= 1e-14 * (abs(l) + abs(r)):
        return 0.0
    return det


@njit
def _incircle(ax, ay, bx, by, cx, cy, px, py):
    """Positive when p lies strictly inside the circumcircle of CCW (a, b, c)."""
    adx, ady = ax - px, ay - py
    bdx, bdy = bx - px, by - py
    cdx, cdy = cx - px, cy - py
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    t1 = alift * (bdx * cdy - cdx * bdy)
    t2 = blift * (cdx * ady - adx * cdy)
    t3 = clift * (adx * bdy - bdx * ady)
    det = t1 + t2 + t3
    perm = (alift * (abs(bdx * cdy) + abs(cdx * bdy)) + blift * (abs(cdx * ady) + abs(adx * cdy))
            + clift * (abs(adx * bdy) + abs(bdx * ady)))
    if det > 1e-12 * perm:
        return 1.0
    return 0.0


@njit
def _bowyer_watson(P, n):
    """Triangulate the first ``n`` rows of ``P``; rows n..n+2 are super vertices.

    Returns (tri, alive, ntri, status). status: 0 ok, 1 duplicate point.
    """
    cap = 2 * (n + 3) + 16
    tri = np.empty((cap, 3), dtype=np.int64)
    nbr = np.full((cap, 3), -1, dtype=np.int64)
    alive = np.zeros(cap, dtype=np.bool_)
    free = np.empty(cap, dtype=np.int64)
    nfree = 0
    ntri = 1
    tri[0, 0], tri[0, 1], tri[0, 2] = n, n + 1, n + 2
    alive[0] = True
    stamp = np.zeros(cap, dtype=np.int64)
    cavity = np.empty(cap, dtype=np.int64)
    b_a = np.empty(cap, dtype=np.int64)
    b_b = np.empty(cap, dtype=np.int64)
    b_out = np.empty(cap, dtype=np.int64)
    start_of = np.full(n + 3, -1, dtype=np.int64)
    end_of = np.full(n + 3, -1, dtype=np.int64)
    last = 0
    for ip in range(n):
        px, py = P[ip, 0], P[ip, 1]
        # visibility walk to the containing triangle
        t = last
        found = False
        for _ in range(4 * cap):
            moved = False
            for k in range(3):
                a = tri[t, (k + 1) % 3]
                b = tri[t, (k + 2) % 3]
                if _orient(P[a, 0], P[a, 1], P[b, 0], P[b, 1], px, py) < 0.0:
                    nb = nbr[t, k]
                    if nb >= 0:
                        t = nb
                        moved = True
                        break
            if not moved:
                found = True
                break
        if not found:
            for s in range(ntri):
                if not alive[s]:
                    continue
                inside = True
                for k in range(3):
                    a = tri[s, (k + 1) % 3]
                    b = tri[s, (k + 2) % 3]
                    if _orient(P[a, 0], P[a, 1], P[b, 0], P[b, 1], px, py) < 0.0:
                        inside = False
                if inside:
                    t = s
                    break
        for k in range(3):
            v = tri[t, k]
            if P[v, 0] == px and P[v, 1] == py:
                return tri, alive, ntri, 1
        # grow the cavity
        tag = ip + 1
        ncav = 1
        cavity[0] = t
        stamp[t] = tag
        while True:
            head = 0
            nb_count = 0
            while head < ncav:
                c = cavity[head]
                head += 1
                for k in range(3):
                    o = nbr[c, k]
                    a = tri[c, (k + 1) % 3]
                    b = tri[c, (k + 2) % 3]
                    if o >= 0 and stamp[o] == tag:
                        continue
                    if o >= 0 and _incircle(P[tri[o, 0], 0], P[tri[o, 0], 1], P[tri[o, 1], 0],
                                            P[tri[o, 1], 1], P[tri[o, 2], 0], P[tri[o, 2], 1],
                                            px, py) > 0.0:
                        stamp[o] = tag
                        cavity[ncav] = o
                        ncav += 1
                        continue
                    b_a[nb_count] = a
                    b_b[nb_count] = b
                    b_out[nb_count] = o
                    nb_count += 1
            # the cavity must be star-shaped from p
            grew = False
            for e in range(nb_count):
                a, b, o = b_a[e], b_b[e], b_out[e]
                if o >= 0 and stamp[o] != tag and \
                        _orient(P[a, 0], P[a, 1], P[b, 0], P[b, 1], px, py) <= 0.0:
                    stamp[o] = tag
                    cavity[ncav] = o
                    ncav += 1
                    grew = True
            if not grew:
                break
        for c in range(ncav):
            alive[cavity[c]] = False
            free[nfree] = cavity[c]
            nfree += 1
        first_new = -1
        for e in range(nb_count):
            if nfree > 0:
                nfree -= 1
                s = free[nfree]
            else:
                s = ntri
                ntri += 1
            a, b, o = b_a[e], b_b[e], b_out[e]
            tri[s, 0], tri[s, 1], tri[s, 2] = a, b, ip
            alive[s] = True
            stamp[s] = 0
            nbr[s, 0] = -1
            nbr[s, 1] = -1
            nbr[s, 2] = o
            if o >= 0:
                for k in range(3):
                    if tri[o, (k + 1) % 3] == b and tri[o, (k + 2) % 3] == a:
                        nbr[o, k] = s
            start_of[a] = s
            end_of[b] = s
            if first_new < 0:
                first_new = s
        for e in range(nb_count):
            a, b = b_a[e], b_b[e]
            s = start_of[a]
            # edge (b, p) is opposite a; edge (p, a) is opposite b
            nbr[s, 0] = start_of[b]
            nbr[s, 1] = end_of[a]
        for e in range(nb_count):
            start_of[b_a[e]] = -1
            end_of[b_b[e]] = -1
        last = first_new
    return tri, alive, ntri, 0


def delaunay_2d(points) -> SimplicialMesh:
    """Delaunay triangulation by incremental Bowyer-Watson insertion.

    Points are inserted in input order, which fixes the triangulation chosen
    for cocircular configurations.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("delaunay_2d expects an (n, 2) array")
    n = len(pts)
    if n < 3:
        raise GeometryError("need at least 3 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    srt = pts[order]
    dup = np.all(srt[1:] == srt[:-1], axis=1)
    if dup.any():
        k = int(np.flatnonzero(dup)[0])
        raise GeometryError(f"duplicate points {sorted((int(order[k]), int(order[k + 1])))}")
    lo = pts.min(axis=0)
    span = float((pts.max(axis=0) - lo).max())
    Q = (pts - lo) / span
    far = int(np.argmax(np.sum((Q - Q[0]) ** 2, axis=1)))
    e = Q[far] - Q[0]
    cross = np.abs(e[0] * (Q[:, 1] - Q[0, 1]) - e[1] * (Q[:, 0] - Q[0, 0]))
    if cross.max() <= 1e-12 * float(np.dot(e, e)):
        raise GeometryError("all points are collinear")
    big = 1.0e6
    P = np.vstack([Q, [[-big, -big], [big + 1.0, -big], [0.5, big + 1.0]]])
    tri, alive, ntri, status = _bowyer_watson(P, n)
    if status == 1:
        raise GeometryError("duplicate points")
    tri = tri[:ntri][alive[:ntri]]
    tri = tri[np.all(tri < n, axis=1)]
    mesh = SimplicialMesh(pts, tri)
    keep = np.abs(mesh.measures()) > 1e-14 * span * span
    return SimplicialMesh(pts, tri[keep])


# --------------------------------------------------------------------------
# covering radius and smoothing length


def estimate_covering_radius(pset: ParticleSet, grid_fraction: float = 0.1) -> float:
    """Estimate the covering radius as ``beta * l_max``.

    1-D uses sorted gaps, counting twice the gap between each box end and its
    nearest particle. 2-D triangulates the particles in the closed box. 3-D
    falls back to :func:`covering_radius_oracle` at ``grid_fraction * dx``.
    """
    d = pset.dim
    pts = pset.positions[pset.in_domain]
    if len(pts) < d + 1:
        raise GeometryError(f"need at least {d + 1} particles in the domain")
    if d == 1:
        x = np.sort(pts[:, 0])
        gaps = np.diff(x)
        ends = 2.0 * max(x[0] - pset.box.lo[0], pset.box.hi[0] - x[-1])
        l_max = max(float(gaps.max()) if gaps.size else 0.0, ends)
        return SIMPLEX_BETA[1] * l_max
    if d == 2:
        return SIMPLEX_BETA[2] * delaunay_2d(pts).l_max
    return covering_radius_oracle(pset, grid_fraction * pset.delta_x)


def covering_radius_oracle(pset: ParticleSet, grid_resolution: float) -> float:
    """Largest distance from a sample of the box to its nearest particle.

    Samples form a dyadic grid (2^k intervals per axis, finest with spacing
    <= ``grid_resolution``), so refining the resolution nests the sample sets
    and the returned lower bound never decreases.
    """
    from scipy.spatial import cKDTree

    if not grid_resolution > 0:
        raise ValueError("grid_resolution must be positive")
    box = pset.box
    pts = pset.positions[pset.in_domain]
    tree = cKDTree(pts)
    axes = []
    for k in range(box.dim):
        nint = 2 ** max(0, math.ceil(math.log2(box.lengths[k] / grid_resolution)))
        axes.append(np.linspace(box.lo[k], box.hi[k], nint + 1))
    best = 0.0
    # sweep the first axis in slabs to bound memory
    rest = np.meshgrid(*axes[1:], indexing="ij") if box.dim > 1 else []
    rest = np.stack([g.ravel() for g in rest], axis=1) if rest else np.zeros((1, 0))
    for a in axes[0]:
        q = np.column_stack([np.full(len(rest), a), rest])
        dist, _ = tree.query(q)
        best = max(best, float(dist.max()))
    return best


def smoothing_length(pset_or_dx, kappa: float, r_n: float | None = None) -> float:
    """``kappa * max(dx, r_N)``; ``r_n=None`` means the average spacing alone."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    dx = pset_or_dx.delta_x if isinstance(pset_or_dx, ParticleSet) else float(pset_or_dx)
    return kappa * max(dx, r_n if r_n is not None else 0.0)


# --------------------------------------------------------------------------
# neighbour search


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Compressed neighbour lists: ``indices[indptr[i]:indptr[i+1]]`` is Gamma_i.

    Lists are sorted ascending and never contain ``i``. ``period`` gives the
    periodic length per axis (0 for non-periodic axes).
    """

    indptr: np.ndarray
    indices: np.ndarray
    h: float
    period: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.indptr) - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.counts)

    def displacements(self, positions=None) -> np.ndarray:
        """``x_i - x_j`` for every stored pair, using the minimum image."""
        pos = np.asarray(self.points if positions is None else positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        xij = pos[self.row_ids()] - pos[self.indices]
        return minimum_image(xij, self.period)

    def is_symmetric(self) -> bool:
        n = len(self)
        a = np.stack([self.row_ids(), self.indices], axis=1)
        b = a[:, ::-1]
        ka = a[:, 0] * n + a[:, 1]
        kb = b[:, 0] * n + b[:, 1]
        return np.array_equal(np.sort(ka), np.sort(kb))


def minimum_image(xij, period):
    period = np.asarray(period, dtype=float)
    if period.size and np.any(period > 0):
        xij = xij.copy()
        for k in np.flatnonzero(period > 0):
            xij[:, k] -= period[k] * np.round(xij[:, k] / period[k])
    return xij


def _grid_setup(pos, h, period):
    d = pos.shape[1]
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    ncell = np.empty(d, dtype=np.int64)
    size = np.empty(d)
    origin = np.empty(d)
    for k in range(d):
        if period[k] > 0:
            if period[k] < 3.0 * h:
                raise ValueError("periodic length must be at least 3h")
            ncell[k] = int(period[k] // h)
            size[k] = period[k] / ncell[k]
            origin[k] = 0.0
        else:
            ncell[k] = max(1, int((hi[k] - lo[k]) // h) + 1)
            size[k] = h
            origin[k] = lo[k]
    return origin, size, ncell


@njit
def _cells_of(pos, origin, size, ncell, period):
    n, d = pos.shape
    cells = np.empty((n, d), dtype=np.int64)
    for i in range(n):
        for k in range(d):
            if period[k] > 0:
                x = pos[i, k] - period[k] * np.floor(pos[i, k] / period[k])
                c = int(x / size[k])
            else:
                c = int((pos[i, k] - origin[k]) / size[k])
            if c < 0:
                c = 0
            if c >= ncell[k]:
                c = ncell[k] - 1
            cells[i, k] = c
    return cells


@njit
def _flat_cell(cells_row, ncell):
    f = 0
    for k in range(len(ncell)):
        f = f * ncell[k] + cells_row[k]
    return f


@njit
def _scan_row(i, pos, h, cells, ncell, period, offs, start, order, out, at):
    """Count (``out`` empty) or write the neighbours of ``i`` starting at ``out[at]``."""
    d = pos.shape[1]
    h2 = h * h
    nc = np.empty(d, dtype=np.int64)
    count = 0
    for m in range(offs.shape[0]):
        ok = True
        for k in range(d):
            c = cells[i, k] + offs[m, k]
            if period[k] > 0:
                c = c % ncell[k]
            elif c < 0 or c >= ncell[k]:
                ok = False
            nc[k] = c
        if not ok:
            continue
        fc = _flat_cell(nc, ncell)
        for q in range(start[fc], start[fc + 1]):
            j = order[q]
            if j == i:
                continue
            r2 = 0.0
            for k in range(d):
                dx = pos[i, k] - pos[j, k]
                if period[k] > 0:
                    dx -= period[k] * np.floor(dx / period[k] + 0.5)
                r2 += dx * dx
            if r2 < h2:
                if out.size > 0:
                    out[at + count] = j
                count += 1
    return count


@njit
def _cell_list_numba(pos, h, origin, size, ncell, period):
    n, d = pos.shape
    cells = _cells_of(pos, origin, size, ncell, period)
    total = 1
    for k in range(d):
        total *= ncell[k]
    flat = np.empty(n, dtype=np.int64)
    for i in range(n):
        flat[i] = _flat_cell(cells[i], ncell)
    order = np.argsort(flat, kind="mergesort")
    start = np.zeros(total + 1, dtype=np.int64)
    for i in range(n):
        start[flat[i] + 1] += 1
    for c in range(total):
        start[c + 1] += start[c]
    noff = 3**d
    offs = np.empty((noff, d), dtype=np.int64)
    for m in range(noff):
        q = m
        for k in range(d):
            offs[m, k] = q % 3 - 1
            q //= 3
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        indptr[i + 1] = indptr[i] + _scan_row(i, pos, h, cells, ncell, period, offs, start, order,
                                              np.empty(0, dtype=np.int64), 0)
    indices = np.empty(indptr[n], dtype=np.int64)
    for i in range(n):
        _scan_row(i, pos, h, cells, ncell, period, offs, start, order, indices, indptr[i])
    for i in range(n):
        indices[indptr[i]:indptr[i + 1]] = np.sort(indices[indptr[i]:indptr[i + 1]])
    return indptr, indices


def _cell_list_numpy(pos, h, origin, size, ncell, period):
    n, d = pos.shape
    cells = np.empty((n, d), dtype=np.int64)
    for k in range(d):
        if period[k] > 0:
            x = np.mod(pos[:, k], period[k])
            cells[:, k] = (x / size[k]).astype(np.int64)
        else:
            cells[:, k] = ((pos[:, k] - origin[k]) / size[k]).astype(np.int64)
    cells = np.clip(cells, 0, ncell - 1)
    flat = np.ravel_multi_index(cells.T, tuple(ncell))
    order = np.argsort(flat, kind="stable")
    total = int(np.prod(ncell))
    start = np.searchsorted(flat[order], np.arange(total + 1))
    rows, cols = [], []
    for off in itertools.product((-1, 0, 1), repeat=d):
        nc = cells + np.asarray(off)
        valid = np.ones(n, dtype=bool)
        for k in range(d):
            if period[k] > 0:
                nc[:, k] %= ncell[k]
            else:
                valid &= (nc[:, k] >= 0) & (nc[:, k] < ncell[k])
        src = np.flatnonzero(valid)
        fc = np.ravel_multi_index(nc[src].T, tuple(ncell))
        s, e = start[fc], start[fc + 1]
        cnt = e - s
        ii = np.repeat(src, cnt)
        base = np.repeat(s - np.cumsum(cnt) + cnt, cnt)
        jj = order[base + np.arange(cnt.sum())]
        xij = minimum_image(pos[ii] - pos[jj], period)
        keep = (np.einsum("ij,ij->i", xij, xij) < h * h) & (ii != jj)
        rows.append(ii[keep])
        cols.append(jj[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    srt = np.lexsort((cols, rows))
    rows, cols = rows[srt], cols[srt]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64)


def build_neighbor_table(pset_or_positions, h: float, period=None, backend: str | None = None) -> NeighborTable:
    """Exact fixed-radius neighbours (``|x_i - x_j| < h``) via a uniform cell grid."""
    if not h > 0:
        raise ValueError("h must be positive")
    pos = pset_or_positions.positions if isinstance(pset_or_positions, ParticleSet) else pset_or_positions
    pos = np.array(pos, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    d = pos.shape[1]
    period = np.zeros(d) if period is None else np.asarray(period, dtype=float).reshape(d)
    origin, size, ncell = _grid_setup(pos, h, period)
    use_numba = USE_NUMBA if backend is None else backend == "numba"
    impl = _cell_list_numba if use_numba else _cell_list_numpy
    indptr, indices = impl(pos, float(h), origin, size, ncell, period)
    pos.setflags(write=False)
    return NeighborTable(indptr, indices, float(h), period, pos)


# --------------------------------------------------------------------------
# CSV I/O


def write_particles_csv(pset: ParticleSet, path):
    names = ["x", "y", "z"][: pset.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["is_interior"])
        for p, k in zip(pset.positions, pset.kind):
            w.writerow([repr(float(v)) for v in p] + [int(k == INTERIOR)])


def read_particles_csv(path, box: Box | None = None) -> ParticleSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[-1] != "is_interior" or header[:-1] != ["x", "y", "z"][: len(header) - 1]:
        raise ValueError(f"unexpected header {header}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    pos, flag = data[:, :-1], data[:, -1].astype(bool)
    if box is None:
        box = Box(pos.min(axis=0), pos.max(axis=0))
    kind = np.where(flag, INTERIOR, np.where(box.contains(pos, tol=1e-12), BOUNDARY, VIRTUAL))
    n = int(np.sum(box.contains(pos, tol=1e-12)))
    return _make_set(pos, kind, box, (box.volume / n) ** (1.0 / box.dim))
