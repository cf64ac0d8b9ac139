"""Domain integration: background Gauss cells and conforming smoothing cells.

The Gauss path tiles the bounding box with rectangular cells carrying
tensor-product Gauss-Legendre points, each tagged by the score sign. The
nodal-integration path builds a bounded Voronoi diagram over the node sites
(interface nodes contribute an epsilon-offset mirror pair of generators, so
the two adjacent cells share an edge along the interface) and evaluates
divergence-smoothed gradients from shape values on the cell boundaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import sparse
from scipy.spatial import cKDTree

from .rk import NodeSet

__all__ = [
    "GaussScheme",
    "MirrorPair",
    "VoronoiCell",
    "SmoothingCellComplex",
    "gauss_scheme",
    "mirror_interface_nodes",
    "voronoi_cells",
    "scni_cells",
    "smoothed_gradients",
]


@dataclass
class GaussScheme:
    """Tensor-product Gauss points on a rectangular cell grid."""

    points: np.ndarray          # (G, d)
    weights: np.ndarray         # (G,)
    tags: np.ndarray            # (G,) material sign per point
    boundary_points: np.ndarray  # (B, d)
    boundary_weights: np.ndarray
    boundary_normals: np.ndarray
    boundary_sizes: np.ndarray   # local facet length scale per point
    domain: tuple

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class MirrorPair:
    """Generator-site pair straddling one interface node (no DOFs)."""

    node_index: int
    plus: np.ndarray
    minus: np.ndarray


@dataclass
class VoronoiCell:
    owner: int                  # node index holding the cell's DOF
    tag: int                    # material sign
    site: np.ndarray            # generator position
    vertices: np.ndarray        # (V, d) counterclockwise polygon
    area: float
    seg_points: np.ndarray      # (S, d) boundary quadrature points
    seg_weights: np.ndarray     # (S,)
    seg_normals: np.ndarray     # (S, d) outward unit normals
    seg_on_boundary: np.ndarray  # (S,) True when on the domain rectangle


@dataclass
class SmoothingCellComplex:
    cells: list
    domain: tuple

    @property
    def total_area(self) -> float:
        return float(sum(c.area for c in self.cells))

    def boundary_quadrature(self):
        """Stacked domain-boundary quadrature (points, weights, normals,
        sizes) taken from cell edges lying on the bounding rectangle."""
        d = len(self.domain[0])
        pts, wts, nrm, sizes = [], [], [], []
        for c in self.cells:
            on = c.seg_on_boundary
            if on.any():
                pts.append(c.seg_points[on])
                wts.append(c.seg_weights[on])
                nrm.append(c.seg_normals[on])
                sizes.append(np.full(int(on.sum()), c.area ** (1.0 / d)))
        return (np.vstack(pts), np.concatenate(wts), np.vstack(nrm),
                np.concatenate(sizes))


# ---------------------------------------------------------------------------
# Gauss integration
# ---------------------------------------------------------------------------

def gauss_scheme(domain, cells, points_per_axis: int = 5,
                 score_field=None) -> GaussScheme:
    """Gauss-Legendre quadrature over a rectangle split into uniform cells.

    ``domain`` is ((lo...), (hi...)); ``cells`` the cell count per axis.
    Material tags are sign(score) per point when a field is given.
    """
    lo = np.atleast_1d(np.asarray(domain[0], dtype=float))
    hi = np.atleast_1d(np.asarray(domain[1], dtype=float))
    d = len(lo)
    cells = np.broadcast_to(np.asarray(cells, dtype=int), (d,))
    if (cells < 1).any() or points_per_axis < 1:
        raise ValueError("cell and point counts must be positive")
    gx, gw = leggauss(points_per_axis)

    axes_pts, axes_wts = [], []
    for k in range(d):
        edges = np.linspace(lo[k], hi[k], cells[k] + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * np.diff(edges)
        p = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        w = (half[:, None] * gw[None, :]).ravel()
        axes_pts.append(p)
        axes_wts.append(w)
    grids = np.meshgrid(*axes_pts, indexing="ij")
    points = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*axes_wts, indexing="ij")
    weights = np.prod(np.stack([w.ravel() for w in wgrids]), axis=0)

    if score_field is not None:
        svals = score_field.values(points)
        tags = np.where(svals >= 0.0, 1, -1)
    else:
        tags = np.ones(len(points), dtype=int)

    bp, bw, bn, bs = _boundary_quadrature(lo, hi, cells, points_per_axis)
    return GaussScheme(points=points, weights=weights, tags=tags,
                       boundary_points=bp, boundary_weights=bw,
                       boundary_normals=bn, boundary_sizes=bs,
                       domain=(tuple(lo), tuple(hi)))


def _boundary_quadrature(lo, hi, cells, points_per_axis):
    d = len(lo)
    if d == 1:
        pts = np.array([[lo[0]], [hi[0]]])
        wts = np.ones(2)
        nrm = np.array([[-1.0], [1.0]])
        sizes = np.full(2, (hi[0] - lo[0]) / cells[0])
        return pts, wts, nrm, sizes
    gx, gw = leggauss(points_per_axis)
    pts, wts, nrm, sizes = [], [], [], []
    for axis in range(2):
        tang = 1 - axis
        edges = np.linspace(lo[tang], hi[tang], cells[tang] + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * np.diff(edges)
        t = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        w = (half[:, None] * gw[None, :]).ravel()
        for val, sign in ((lo[axis], -1.0), (hi[axis], 1.0)):
            p = np.empty((len(t), 2))
            p[:, axis] = val
            p[:, tang] = t
            n = np.zeros((len(t), 2))
            n[:, axis] = sign
            pts.append(p)
            wts.append(w)
            nrm.append(n)
            sizes.append(np.repeat(np.diff(edges), points_per_axis))
    return np.vstack(pts), np.concatenate(wts), np.vstack(nrm), \
        np.concatenate(sizes)


# ---------------------------------------------------------------------------
# Mirror pairs and bounded Voronoi cells
# ---------------------------------------------------------------------------

def mirror_interface_nodes(nodes: NodeSet, eps: float | None = None):
    """Mirror generator sites at +/- eps along each interface normal."""
    if eps is None:
        eps = 1e-3 * nodes.spacing
    pairs = []
    for i in np.flatnonzero(nodes.interface_mask):
        n = nodes.normals[i] if nodes.normals is not None else None
        if n is None or not np.isfinite(n).all() or np.linalg.norm(n) < 1e-14:
            warnings.warn(f"interface node {i} has no usable normal; skipped")
            continue
        x = nodes.coords[i]
        pairs.append(MirrorPair(node_index=int(i), plus=x + eps * n,
                                minus=x - eps * n))
    return pairs


def _clip_halfplane(verts, point, normal):
    """Keep the polygon part with (x - point) . normal <= 0."""
    if len(verts) == 0:
        return verts
    side = (verts - point) @ normal
    keep = side <= 0.0
    if keep.all():
        return verts
    if not keep.any():
        return verts[:0]
    out = []
    V = len(verts)
    for a in range(V):
        b = (a + 1) % V
        if keep[a]:
            out.append(verts[a])
        if keep[a] != keep[b]:
            t = side[a] / (side[a] - side[b])
            out.append(verts[a] + t * (verts[b] - verts[a]))
    return np.array(out)


def _polygon_area(verts):
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


_GSEG = 0.5 / np.sqrt(3.0)  # 2-point Gauss offsets on a segment


def voronoi_cells(sites: np.ndarray, domain, owners=None, tags=None,
                  spacing: float = 1.0) -> SmoothingCellComplex:
    """Voronoi cells of the sites clipped to the bounding rectangle (2D).

    Each cell is built by half-plane clipping against nearby sites, stopping
    once the remaining sites cannot influence the polygon (security-radius
    argument). 2-point Gauss quadrature is laid on every edge.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    n, d = sites.shape
    if d != 2:
        raise ValueError("voronoi_cells handles 2D sites")
    lo = np.asarray(domain[0], dtype=float)
    hi = np.asarray(domain[1], dtype=float)
    tree = cKDTree(sites)
    dmin, _ = tree.query(sites, k=2)
    if n > 1 and dmin[:, 1].min() < 1e-14 * max(hi - lo):
        raise ValueError("duplicate generator sites")
    if owners is None:
        owners = np.arange(n)
    if tags is None:
        tags = np.ones(n, dtype=int)

    box = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]],
                    [lo[0], hi[1]]])
    kq = min(n, 12)
    cells = []
    area_floor = 1e-12 * spacing ** 2
    pending_area: dict[int, float] = {}
    for i in range(n):
        verts = box
        k = kq
        while True:
            dist, idx = tree.query(sites[i], k=k)
            dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
            done = False
            for dj, j in zip(dist[1:], idx[1:]):
                rmax = np.linalg.norm(verts - sites[i], axis=1).max()
                if dj > 2.0 * rmax:
                    done = True
                    break
                mid = 0.5 * (sites[i] + sites[j])
                u = (sites[j] - sites[i]) / dj
                verts = _clip_halfplane(verts, mid, u)
                if len(verts) == 0:
                    done = True
                    break
            if done or k >= n:
                break
            k = min(n, k * 2)
        if len(verts) < 3:
            continue
        area = _polygon_area(verts)
        if area < area_floor:
            # sliver: hand its area to the nearest surviving neighbor
            pending_area[i] = area
            continue
        cells.append(_finish_cell(int(owners[i]), int(tags[i]), sites[i],
                                  verts, area, lo, hi))

    if pending_area:
        ctree = cKDTree(np.array([c.site for c in cells]))
        for i, a in pending_area.items():
            _, j = ctree.query(sites[i], k=1)
            cells[int(j)].area += a
    return SmoothingCellComplex(cells=cells, domain=(tuple(lo), tuple(hi)))


def _finish_cell(owner, tag, site, verts, area, lo, hi):
    p0 = verts
    p1 = np.roll(verts, -1, axis=0)
    ev = p1 - p0
    elen = np.linalg.norm(ev, axis=1)
    ok = elen > 1e-300
    p0, p1, ev, elen = p0[ok], p1[ok], ev[ok], elen[ok]
    # ccw polygon: outward normal is the right-hand rotation of the edge
    normals = np.column_stack([ev[:, 1], -ev[:, 0]]) / elen[:, None]
    mid = 0.5 * (p0 + p1)
    qa = mid - _GSEG * ev
    qb = mid + _GSEG * ev
    seg_points = np.vstack([qa, qb])
    seg_weights = np.concatenate([0.5 * elen, 0.5 * elen])
    seg_normals = np.vstack([normals, normals])
    tol = 1e-10 * max(np.max(hi - lo), 1.0)
    on_edge = np.zeros(len(p0), dtype=bool)
    for axis in range(2):
        for val in (lo[axis], hi[axis]):
            on_edge |= (np.abs(p0[:, axis] - val) < tol) \
                & (np.abs(p1[:, axis] - val) < tol)
    seg_on_boundary = np.concatenate([on_edge, on_edge])
    return VoronoiCell(owner=owner, tag=tag, site=site.copy(),
                       vertices=verts, area=area, seg_points=seg_points,
                       seg_weights=seg_weights, seg_normals=seg_normals,
                       seg_on_boundary=seg_on_boundary)


def _interval_cells(nodes: NodeSet, domain, pairs):
    """1D conforming cells: midpoint intervals, split at interface nodes."""
    lo, hi = float(domain[0][0]), float(domain[1][0])
    entries = []
    for i in np.flatnonzero(nodes.bulk_mask):
        entries.append((float(nodes.coords[i, 0]), int(i), int(nodes.roles[i])))
    for p in pairs:
        entries.append((float(p.plus[0]), p.node_index, 1))
        entries.append((float(p.minus[0]), p.node_index, -1))
    entries.sort()
    xs = np.array([e[0] for e in entries])
    edges = np.concatenate([[lo], 0.5 * (xs[1:] + xs[:-1]), [hi]])
    cells = []
    for m, (x, owner, tag) in enumerate(entries):
        a, b = edges[m], edges[m + 1]
        if b - a <= 0:
            continue
        cells.append(VoronoiCell(
            owner=owner, tag=tag, site=np.array([x]),
            vertices=np.array([[a], [b]]), area=b - a,
            seg_points=np.array([[a], [b]]), seg_weights=np.ones(2),
            seg_normals=np.array([[-1.0], [1.0]]),
            seg_on_boundary=np.array([abs(a - lo) < 1e-12 * (hi - lo),
                                      abs(b - hi) < 1e-12 * (hi - lo)])))
    return SmoothingCellComplex(cells=cells, domain=((lo,), (hi,)))


def scni_cells(nodes: NodeSet, domain, eps: float | None = None,
               score_field=None) -> SmoothingCellComplex:
    """Interface-conforming smoothing cells for a node set (1D or 2D).

    Interface nodes contribute mirror-pair generators; both resulting cells
    keep the interface node as DOF owner with opposite material tags.
    """
    pairs = mirror_interface_nodes(nodes, eps=eps)
    if nodes.ndim == 1:
        return _interval_cells(nodes, domain, pairs)
    bulk_ids = np.flatnonzero(nodes.bulk_mask)
    sites = [nodes.coords[bulk_ids]]
    owners = [bulk_ids]
    tags = [nodes.roles[bulk_ids]]
    for p in pairs:
        sites.append(np.vstack([p.plus, p.minus]))
        owners.append(np.array([p.node_index, p.node_index]))
        tags.append(np.array([1, -1]))
    complex_ = voronoi_cells(np.vstack(sites), domain,
                             owners=np.concatenate(owners),
                             tags=np.concatenate(tags), spacing=nodes.spacing)
    if score_field is not None:
        for c in complex_.cells:
            if nodes.roles[c.owner] != 0:
                c.tag = 1 if score_field.values(c.site[None])[0] >= 0 else -1
    return complex_


# ---------------------------------------------------------------------------
# Smoothed gradients
# ---------------------------------------------------------------------------

def smoothed_gradients(provider, cells: SmoothingCellComplex,
                       chunk: int = 5000):
    """Divergence-based smoothed gradient per (cell, covering node).

    Returns (per-cell node index arrays, per-cell (K, d) gradient blocks).
    The boundary integral of shape values over each cell's edges is
    evaluated with the cells' own segment quadrature.
    """
    pts = np.vstack([c.seg_points for c in cells.cells])
    wn = np.vstack([c.seg_weights[:, None] * c.seg_normals
                    for c in cells.cells])
    cell_ids = np.concatenate([np.full(len(c.seg_points), m, dtype=np.int64)
                               for m, c in enumerate(cells.cells)])
    sides = np.concatenate([np.full(len(c.seg_points), c.tag, dtype=float)
                            for c in cells.cells])
    d = pts.shape[1]
    ncells = len(cells.cells)
    nnodes = len(provider.coords)

    mats = []
    for k in range(d):
        rows, cols, vals = [], [], []
        for start in range(0, len(pts), chunk):
            sl = slice(start, start + chunk)
            idx, mask, psi = provider.evaluate(pts[sl], side=sides[sl],
                                               grad=False)
            q, kk = np.nonzero(mask)
            rows.append(cell_ids[sl][q])
            cols.append(idx[q, kk])
            vals.append(psi[q, kk] * wn[sl][q, k])
        mat = sparse.csr_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(ncells, nnodes))
        mat.sort_indices()
        mats.append(mat)

    areas = np.array([c.area for c in cells.cells])
    ones = []
    for m in mats:
        o = m.copy()
        o.data = np.ones_like(o.data)
        ones.append(o)
    pattern = sum(ones).tocsr()
    pattern.sort_indices()
    node_ids, grads = [], []
    for m in range(ncells):
        ids = pattern.indices[pattern.indptr[m]:pattern.indptr[m + 1]]
        g = np.zeros((len(ids), d))
        for k, mat in enumerate(mats):
            r0, r1 = mat.indptr[m], mat.indptr[m + 1]
            pos = np.searchsorted(ids, mat.indices[r0:r1])
            g[pos, k] = mat.data[r0:r1]
        grads.append(g / areas[m])
        node_ids.append(ids.astype(np.int64))
    return node_ids, grads
