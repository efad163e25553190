"""Triangulations of rectangles, edge sets, point location and P1 resampling"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from src.core.exceptions import MeshError, ResampleError
from src.core.models import BoundarySegment, BoundaryTag, DomainSpec, Side

logger = logging.getLogger(__name__)

LOCATE_TOL = 1e-12
SNAP_TOL = 1e-10


class InternalEdge(NamedTuple):
    """Edge shared by triangles i < j, with the unit normal pointing from i to j"""
    i: int
    j: int
    length: float
    normal: Tuple[float, float]


class Location(NamedTuple):
    """Containing triangle and barycentric coordinates of a point"""
    triangle: int
    bary: Tuple[float, float, float]


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Counterclockwise triangulation with tagged boundary and oriented internal edges

    Built through ``Mesh.from_arrays`` which derives every edge array from
    ``nodes`` and ``triangles``. Arrays are read-only after construction.
    """
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: Tuple[BoundaryTag, ...]
    edge_triangles: np.ndarray
    edge_lengths: np.ndarray
    edge_normals: np.ndarray
    interior_node_flags: np.ndarray
    domain: Optional[DomainSpec] = None

    @classmethod
    def from_arrays(cls, nodes: np.ndarray, triangles: np.ndarray,
                    domain: Optional[DomainSpec] = None) -> "Mesh":
        nodes = np.ascontiguousarray(nodes, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError(f"nodes must have shape (n, 2), got {nodes.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or len(triangles) == 0:
            raise MeshError(f"triangles must have shape (m, 3), got {triangles.shape}")
        if triangles.min() < 0 or triangles.max() >= len(nodes):
            raise MeshError("triangle references a missing node")

        areas = signed_areas(nodes, triangles)
        if np.any(areas <= 0):
            bad = np.flatnonzero(areas <= 0)
            raise MeshError(f"{bad.size} triangles with non-positive signed area, first {bad[0]}")

        n_nodes = len(nodes)
        local = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        pairs = np.sort(local, axis=1)
        keys = pairs[:, 0] * n_nodes + pairs[:, 1]
        uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True,
                                                 return_counts=True)
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")

        # Boundary edges keep the counterclockwise orientation of their triangle
        boundary = local[first[counts == 1]]

        order = np.argsort(inverse, kind="stable")
        starts = np.searchsorted(inverse[order], np.flatnonzero(counts == 2))
        ta = order[starts] // 3
        tb = order[starts + 1] // 3
        edge_tris = np.column_stack([np.minimum(ta, tb), np.maximum(ta, tb)])
        shared = pairs[order[starts]]
        perm = np.lexsort((edge_tris[:, 1], edge_tris[:, 0]))
        edge_tris = edge_tris[perm]
        shared = shared[perm]

        d = nodes[shared[:, 1]] - nodes[shared[:, 0]]
        lengths = np.hypot(d[:, 0], d[:, 1])
        normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
        centroids = nodes[triangles].mean(axis=1)
        flip = np.einsum("ij,ij->i", normals, centroids[edge_tris[:, 1]] - centroids[edge_tris[:, 0]]) < 0
        normals[flip] *= -1.0

        interior = np.ones(n_nodes, dtype=bool)
        interior[boundary.ravel()] = False

        tags = _tag_boundary(nodes, boundary, domain)

        for arr in (nodes, triangles, boundary, edge_tris, lengths, normals, interior):
            arr.setflags(write=False)
        return cls(nodes=nodes, triangles=triangles, boundary_edges=boundary, boundary_tags=tags,
                   edge_triangles=edge_tris, edge_lengths=lengths, edge_normals=normals,
                   interior_node_flags=interior, domain=domain)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_interior(self) -> int:
        return int(self.interior_node_flags.sum())

    @cached_property
    def areas(self) -> np.ndarray:
        a = signed_areas(self.nodes, self.triangles)
        a.setflags(write=False)
        return a

    @cached_property
    def centroids(self) -> np.ndarray:
        c = self.nodes[self.triangles].mean(axis=1)
        c.setflags(write=False)
        return c

    @cached_property
    def locator(self) -> "BinLocator":
        return BinLocator(self.nodes, self.triangles)

    def tagged_edges(self, tag: BoundaryTag) -> np.ndarray:
        mask = np.array([t == tag for t in self.boundary_tags], dtype=bool)
        return self.boundary_edges[mask]

    def tagged_nodes(self, tag: BoundaryTag) -> np.ndarray:
        return np.unique(self.tagged_edges(tag).ravel())

    def renumbered(self, node_perm: np.ndarray, tri_perm: np.ndarray) -> "Mesh":
        """Same triangulation with new[k] = old[perm[k]] for nodes and triangles"""
        node_perm = np.asarray(node_perm)
        inv = np.empty_like(node_perm)
        inv[node_perm] = np.arange(len(node_perm))
        return Mesh.from_arrays(self.nodes[node_perm], inv[self.triangles[np.asarray(tri_perm)]],
                                domain=self.domain)


def _on_segment(nodes: np.ndarray, edges: np.ndarray, seg: BoundarySegment,
                domain: DomainSpec, tol: float) -> np.ndarray:
    a = nodes[edges[:, 0]]
    b = nodes[edges[:, 1]]
    mid = 0.5 * (a + b)
    if seg.side in (Side.BOTTOM, Side.TOP):
        level = domain.ymin if seg.side == Side.BOTTOM else domain.ymax
        on_side = (np.abs(a[:, 1] - level) <= tol) & (np.abs(b[:, 1] - level) <= tol)
        frac = (mid[:, 0] - domain.xmin) / domain.width
    else:
        level = domain.xmin if seg.side == Side.LEFT else domain.xmax
        on_side = (np.abs(a[:, 0] - level) <= tol) & (np.abs(b[:, 0] - level) <= tol)
        frac = (mid[:, 1] - domain.ymin) / domain.height
    return on_side & (frac >= seg.start) & (frac <= seg.end)


def _tag_boundary(nodes: np.ndarray, boundary: np.ndarray,
                  domain: Optional[DomainSpec]) -> Tuple[BoundaryTag, ...]:
    tags = np.full(len(boundary), BoundaryTag.FREE, dtype=object)
    if domain is not None:
        tol = 1e-12 * max(1.0, domain.width, domain.height)
        tags[_on_segment(nodes, boundary, domain.neumann, domain, tol)] = BoundaryTag.NEUMANN
        tags[_on_segment(nodes, boundary, domain.dirichlet, domain, tol)] = BoundaryTag.DIRICHLET
    return tuple(tags)


def grid_counts(spec: DomainSpec, h: float) -> Tuple[int, int]:
    """Cells per direction so that the spacing does not exceed h"""
    nx = max(1, math.ceil(spec.width / h - 1e-9))
    ny = max(1, math.ceil(spec.height / h - 1e-9))
    return nx, ny


def _cell_diagonals(nx: int, ny: int) -> np.ndarray:
    """True where a cell is split along its (0,0)-(1,1) diagonal

    Checkerboard alternation; corner cells never split off their corner node.
    """
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    main = (i + j) % 2 == 0
    main[0, nx - 1] = False
    main[ny - 1, 0] = False
    main[0, 0] = True
    main[ny - 1, nx - 1] = True
    return main


def dirichlet_cells(spec: DomainSpec, nx: int, ny: int) -> np.ndarray:
    """(ny, nx) mask of the cells whose outer edge lies on the Dirichlet segment"""
    seg = spec.dirichlet
    cells = np.zeros((ny, nx), dtype=bool)
    if seg.side in (Side.BOTTOM, Side.TOP):
        frac = (np.arange(nx) + 0.5) / nx
        cells[0 if seg.side == Side.BOTTOM else ny - 1, (frac >= seg.start) & (frac <= seg.end)] = True
    else:
        frac = (np.arange(ny) + 0.5) / ny
        cells[(frac >= seg.start) & (frac <= seg.end), 0 if seg.side == Side.LEFT else nx - 1] = True
    return cells


def structured_arrays(spec: DomainSpec, nx: int, ny: int,
                      split: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Node coordinates and counterclockwise triangles of an nx-by-ny cell grid

    Cells flagged in ``split`` are cut into four triangles around a center
    node; center nodes follow the grid nodes in row-major cell order.
    """
    xs = np.linspace(spec.xmin, spec.xmax, nx + 1)
    ys = np.linspace(spec.ymin, spec.ymax, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    n00 = (j * (nx + 1) + i).ravel()
    n10 = n00 + 1
    n01 = n00 + nx + 1
    n11 = n01 + 1
    main = _cell_diagonals(nx, ny).ravel()
    first = np.where(main[:, None], np.column_stack([n00, n10, n11]), np.column_stack([n00, n10, n01]))
    second = np.where(main[:, None], np.column_stack([n00, n11, n01]), np.column_stack([n10, n11, n01]))
    halves = np.stack([first, second], axis=1)
    if split is None or not np.any(split):
        return nodes, halves.reshape(-1, 3)

    cut = np.asarray(split, dtype=bool).ravel()
    corners = np.column_stack([n00, n10, n11, n01])[cut]
    centers = nodes[corners].mean(axis=1)
    c = len(nodes) + np.arange(len(centers))
    quarters = np.stack([
        np.column_stack([corners[:, 0], corners[:, 1], c]),
        np.column_stack([corners[:, 1], corners[:, 2], c]),
        np.column_stack([corners[:, 2], corners[:, 3], c]),
        np.column_stack([corners[:, 3], corners[:, 0], c]),
    ], axis=1)
    triangles = np.vstack([halves[~cut].reshape(-1, 3), quarters.reshape(-1, 3)])
    return np.vstack([nodes, centers]), triangles


def build_structured(spec: DomainSpec, h: float, jitter: float = 0.0, seed: int = 0,
                     max_attempts: int = 20, dirichlet_layer: bool = False) -> Mesh:
    """Right-triangle grid of spacing <= h with seeded jitter of the interior nodes

    With ``dirichlet_layer`` the cells along the Dirichlet segment are cut in
    four, so every triangle resting on that segment has its own interior apex.
    """
    if not 0 < h <= min(spec.width, spec.height):
        raise MeshError(f"mesh size {h} outside (0, {min(spec.width, spec.height)}]")
    if not 0 <= jitter < 0.5:
        raise MeshError(f"jitter {jitter} outside [0, 0.5)")

    nx, ny = grid_counts(spec, h)
    split = dirichlet_cells(spec, nx, ny) if dirichlet_layer else None
    nodes, triangles = structured_arrays(spec, nx, ny, split)

    if jitter > 0:
        hx, hy = spec.width / nx, spec.height / ny
        gi, gj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
        movable = ((gi > 0) & (gi < nx) & (gj > 0) & (gj < ny)).ravel()
        reach = np.ones(len(movable))
        n_centers = len(nodes) - len(movable)
        movable = np.concatenate([movable, np.ones(n_centers, dtype=bool)])
        reach = np.concatenate([reach, np.full(n_centers, 0.5)])[movable]
        rng = np.random.default_rng(seed)
        base = nodes
        for attempt in range(1, max_attempts + 1):
            offsets = rng.uniform(-1.0, 1.0, size=(int(movable.sum()), 2)) * jitter * np.array([hx, hy])
            offsets *= reach[:, None]
            nodes = base.copy()
            nodes[movable] += offsets
            if np.all(signed_areas(nodes, triangles) > 1e-14 * hx * hy):
                break
            logger.warning(f"Jittered mesh attempt {attempt} produced inverted triangles, redrawing")
        else:
            raise MeshError(f"jitter {jitter} inverted triangles in {max_attempts} attempts")

    mesh = Mesh.from_arrays(nodes, triangles, domain=spec)
    logger.debug(f"Structured mesh: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, h={h}, jitter={jitter}")
    return mesh


def internal_edge_set(m: Mesh) -> List[InternalEdge]:
    """Each adjacent triangle pair once, with i < j"""
    return [InternalEdge(int(i), int(j), float(length), (float(n[0]), float(n[1])))
            for (i, j), length, n in zip(m.edge_triangles, m.edge_lengths, m.edge_normals)]


class BinLocator:
    """Uniform-bin acceleration grid for point location"""

    def __init__(self, nodes: np.ndarray, triangles: np.ndarray):
        self.origin = nodes[triangles[:, 0]]
        jac = np.stack([nodes[triangles[:, 1]] - self.origin, nodes[triangles[:, 2]] - self.origin], axis=2)
        self.inverse = np.linalg.inv(jac)

        self.lo = nodes.min(axis=0)
        span = np.maximum(nodes.max(axis=0) - self.lo, 1e-300)
        n_side = max(1, int(math.ceil(math.sqrt(len(triangles) / 2.0))))
        self.nb = np.array([n_side, n_side])
        self.cell = span / self.nb

        corners = nodes[triangles]
        pad = 1e-9 * self.cell
        b0 = self._bin_xy(corners.min(axis=1) - pad)
        b1 = self._bin_xy(corners.max(axis=1) + pad)
        sx = b1[:, 0] - b0[:, 0] + 1
        sy = b1[:, 1] - b0[:, 1] + 1
        count = sx * sy
        tri = np.repeat(np.arange(len(triangles)), count)
        offset = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        bx = b0[tri, 0] + offset % sx[tri]
        by = b0[tri, 1] + offset // sx[tri]
        bins = by * self.nb[0] + bx
        order = np.lexsort((tri, bins))
        self.bin_tris = tri[order]
        self.bin_ptr = np.concatenate([[0], np.cumsum(np.bincount(bins, minlength=int(self.nb.prod())))])

    def _bin_xy(self, points: np.ndarray) -> np.ndarray:
        b = np.floor((points - self.lo) / self.cell).astype(np.int64)
        return np.clip(b, 0, self.nb - 1)

    def locate(self, points: np.ndarray, tol: float = LOCATE_TOL) -> Tuple[np.ndarray, np.ndarray]:
        """Triangle index (-1 outside) and barycentric coordinates of each point"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        bxy = self._bin_xy(points)
        bins = bxy[:, 1] * self.nb[0] + bxy[:, 0]
        start = self.bin_ptr[bins]
        count = self.bin_ptr[bins + 1] - start
        pt = np.repeat(np.arange(n), count)
        local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        cand = self.bin_tris[np.repeat(start, count) + local]

        lam = np.einsum("pij,pj->pi", self.inverse[cand], points[pt] - self.origin[cand])
        bary = np.column_stack([1.0 - lam[:, 0] - lam[:, 1], lam])
        ok = np.all(bary >= -tol, axis=1)

        tri = np.full(n, -1, dtype=np.int64)
        out = np.zeros((n, 3))
        hit_pt, first = np.unique(pt[ok], return_index=True)
        hits = np.flatnonzero(ok)[first]
        tri[hit_pt] = cand[hits]
        b = np.clip(bary[hits], 0.0, 1.0)
        out[hit_pt] = b / b.sum(axis=1, keepdims=True)
        return tri, out


def locate(m: Mesh, p) -> Optional[Location]:
    """Containing triangle of p (lowest index on ties), or None outside the closed mesh"""
    tri, bary = m.locator.locate(np.asarray(p, dtype=float).reshape(1, 2))
    if tri[0] < 0:
        return None
    return Location(int(tri[0]), tuple(float(b) for b in bary[0]))


def interpolation_matrix(source: Mesh, points: np.ndarray, snap_tol: float = SNAP_TOL) -> sp.csr_matrix:
    """Sparse (n_points x n_source_nodes) P1 evaluation operator"""
    points = np.asarray(points, dtype=float)
    lo = source.nodes.min(axis=0)
    hi = source.nodes.max(axis=0)
    near = np.all((points >= lo - snap_tol) & (points <= hi + snap_tol), axis=1)
    snapped = np.where(near[:, None], np.clip(points, lo, hi), points)
    tri, bary = source.locator.locate(snapped, tol=snap_tol)
    missing = np.flatnonzero(tri < 0)
    if missing.size:
        p = points[missing[0]]
        raise ResampleError(f"{missing.size} target points outside the source mesh, first at ({p[0]:.6g}, {p[1]:.6g})")
    rows = np.repeat(np.arange(len(points)), 3)
    cols = source.triangles[tri].ravel()
    return sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(len(points), source.n_nodes))


def resample_p1(source: Mesh, values: np.ndarray, target: Mesh) -> np.ndarray:
    """Nodal values of a P1 field on ``source`` evaluated at the nodes of ``target``"""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != source.n_nodes:
        raise ResampleError(f"{values.shape[0]} nodal values for a mesh with {source.n_nodes} nodes")
    return interpolation_matrix(source, target.nodes) @ values


@dataclass(frozen=True, eq=False)
class CartesianGrid:
    """Node values on a structured grid; node (i, j) is stored at j * nx_nodes + i"""
    origin: Tuple[float, float]
    spacing: Tuple[float, float]
    shape: Tuple[int, int]
    values: np.ndarray

    def __post_init__(self):
        if min(self.spacing) <= 0:
            raise MeshError(f"grid spacing must be positive, got {self.spacing}")
        if len(self.values) != self.shape[0] * self.shape[1]:
            raise MeshError(f"{len(self.values)} grid values for shape {self.shape}")

    @classmethod
    def covering(cls, spec: DomainSpec, h: float, n_components: int = 2) -> "CartesianGrid":
        nx, ny = grid_counts(spec, h)
        return cls(origin=(spec.xmin, spec.ymin), spacing=(spec.width / nx, spec.height / ny),
                   shape=(nx + 1, ny + 1), values=np.zeros(((nx + 1) * (ny + 1), n_components)))

    @property
    def spec(self) -> DomainSpec:
        x0, y0 = self.origin
        return DomainSpec(xmin=x0, xmax=x0 + self.spacing[0] * (self.shape[0] - 1),
                          ymin=y0, ymax=y0 + self.spacing[1] * (self.shape[1] - 1))

    def points(self) -> np.ndarray:
        return structured_arrays(self.spec, self.shape[0] - 1, self.shape[1] - 1)[0]

    def to_mesh(self) -> Mesh:
        """The grid as a structured triangulation whose nodes are the grid points"""
        spec = self.spec
        nodes, triangles = structured_arrays(spec, self.shape[0] - 1, self.shape[1] - 1)
        return Mesh.from_arrays(nodes, triangles, domain=spec)

    def with_values(self, values: np.ndarray) -> "CartesianGrid":
        return CartesianGrid(self.origin, self.spacing, self.shape, np.asarray(values, dtype=float))


def sample_to_grid(source: Mesh, values: np.ndarray, grid: CartesianGrid) -> CartesianGrid:
    """Record a P1 field at the grid points"""
    return grid.with_values(interpolation_matrix(source, grid.points()) @ np.asarray(values, dtype=float))
