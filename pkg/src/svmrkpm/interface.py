"""Interface node generation on the zero level set of the score field.

Master/slave node pairs straddling the interface are collected near the
trained support vectors, then a guarded Newton line search moves each master
along its pair direction until the interpolated score vanishes. The raw hits
are deduplicated, nearby background nodes are thinned out, and the result is
packaged as a solver-ready :class:`~svmrkpm.rk.NodeSet`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .image import ImageGrid, SyntheticTruth, make_training_set, otsu_threshold
from .rk import BasisSpec, InterpolatedScoreField, NodeSet, RkKernelSpec
from . import svm as _svm

__all__ = [
    "SearchPair",
    "InterfaceNode",
    "InterfaceStats",
    "InterfaceOptions",
    "candidate_pairs",
    "newton_search",
    "search_interface_nodes",
    "assemble_nodeset",
    "interface_mse",
    "discretize_image",
]


@dataclass(frozen=True)
class SearchPair:
    """Master (score >= 0) / slave (score < 0) node pair and unit direction."""

    master: np.ndarray
    slave: np.ndarray

    @property
    def direction(self) -> np.ndarray:
        d = self.slave - self.master
        return d / np.linalg.norm(d)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.slave - self.master))


@dataclass(frozen=True)
class InterfaceNode:
    """Converged interface point with residual score and unit normal."""

    position: np.ndarray
    residual: float
    iterations: int
    normal: np.ndarray


@dataclass(frozen=True)
class InterfaceStats:
    count: int
    mean_iterations: float
    mean_residual: float
    rejected: int = 0


@dataclass(frozen=True)
class InterfaceOptions:
    """Knobs of the image-to-nodes pipeline (defaults mirror production use)."""

    xi: float = 1.5                 # candidate radius in voxel sizes
    zeta: float = 1.0 / 3.0         # background-node pruning radius factor
    merge_tol: float = 0.01         # relative duplicate tolerance
    newton_tol: float = 1e-10
    max_iter: int = 25
    score_kernel: RkKernelSpec = RkKernelSpec("bspline3", support=2.0)
    support_factor: float = 2.0     # nodal supports in the output NodeSet
    decimate: int = 1               # keep every k-th background node far away


def candidate_pairs(coords: np.ndarray, scores: np.ndarray,
                    support_vectors: np.ndarray, xi: float = 1.5,
                    voxel_size: float = 1.0) -> list[SearchPair]:
    """Master/slave search pairs near the support vectors.

    Masters are non-negative-score nodes within ``xi * voxel_size`` of some
    support vector; each master is paired with its nearest negative-score
    candidate (all ties kept, so one master may own several slaves).
    """
    coords = np.atleast_2d(coords)
    scores = np.asarray(scores, dtype=float)
    sv_tree = cKDTree(np.atleast_2d(support_vectors))
    near_sv, _ = sv_tree.query(coords, k=1)
    near = near_sv <= xi * voxel_size
    masters = np.flatnonzero(near & (scores >= 0.0))
    slaves = np.flatnonzero(near & (scores < 0.0))
    if masters.size == 0 or slaves.size == 0:
        raise ValueError("empty interface: no straddling candidates near "
                         "support vectors")

    slave_tree = cKDTree(coords[slaves])
    dmin, _ = slave_tree.query(coords[masters], k=1)
    pairs = []
    seen = set()
    for m, d in zip(masters, dmin):
        ties = slave_tree.query_ball_point(coords[m], d * (1 + 1e-12))
        for t in ties:
            key = (int(m), int(slaves[t]))
            if key not in seen:
                seen.add(key)
                pairs.append(SearchPair(master=coords[m].copy(),
                                        slave=coords[slaves[t]].copy()))
    return pairs


def newton_search(pair: SearchPair, field, tol: float = 1e-10,
                  max_iter: int = 25) -> InterfaceNode | None:
    """Root of the score along the pair direction; None when rejected.

    The iterate is clamped to d in [-0.5 L, 1.5 L] (L the pair length); a
    vanishing directional derivative triggers a bisection fallback on the
    master/slave bracket.
    """
    x0, R = pair.master, pair.direction
    L = pair.length
    d = 0.0
    for it in range(max_iter + 1):
        x = x0 + d * R
        s, g = field.evaluate(x[None, :])
        s, g = float(s[0]), g[0]
        if abs(s) <= tol:
            return _make_node(x, s, it, g, field)
        dirder = float(g @ R)
        if abs(dirder) < 1e-14:
            return _bisection(pair, field, tol, max_iter)
        d = np.clip(d - s / dirder, -0.5 * L, 1.5 * L)
    return None


def _bisection(pair: SearchPair, field, tol, max_iter):
    lo, hi = 0.0, pair.length
    x0, R = pair.master, pair.direction
    s_lo = float(field.evaluate(x0[None, :])[0][0])
    s_hi = float(field.evaluate((x0 + hi * R)[None, :])[0][0])
    if not (s_lo >= 0.0 > s_hi):
        return None
    it = 0
    for it in range(1, 200):
        mid = 0.5 * (lo + hi)
        x = x0 + mid * R
        s, g = field.evaluate(x[None, :])
        s = float(s[0])
        if abs(s) <= tol:
            return _make_node(x, s, it, g[0], field)
        if s >= 0.0:
            lo = mid
        else:
            hi = mid
    return None


def _make_node(x, s, iterations, grad, field):
    norm = np.linalg.norm(grad)
    if norm < 1e-14:
        warnings.warn("interface node with vanishing score gradient excluded")
        return None
    return InterfaceNode(position=x.copy(), residual=abs(s),
                         iterations=iterations, normal=grad / norm)


def search_interface_nodes(pairs, field, tol: float = 1e-10,
                           max_iter: int = 25):
    """Run the line search for every pair; returns (nodes, stats)."""
    nodes = []
    rejected = 0
    for pair in pairs:
        node = newton_search(pair, field, tol=tol, max_iter=max_iter)
        if node is None:
            rejected += 1
        else:
            nodes.append(node)
    if not nodes:
        raise ValueError("empty interface: every line search was rejected")
    stats = InterfaceStats(
        count=len(nodes),
        mean_iterations=float(np.mean([n.iterations for n in nodes])),
        mean_residual=float(np.mean([n.residual for n in nodes])),
        rejected=rejected)
    return nodes, stats


# ---------------------------------------------------------------------------
# Node set assembly
# ---------------------------------------------------------------------------

def merge_interface_nodes(nodes: list[InterfaceNode],
                          merge_tol: float = 0.01) -> list[InterfaceNode]:
    """Drop near-duplicates: two nodes coincide when their max per-coordinate
    difference is within ``merge_tol`` of the interface coordinate span.

    Nodes are visited in lexicographic coordinate order (first kept wins), so
    the outcome is independent of the search processing order.
    """
    pos = np.array([n.position for n in nodes])
    span = float((pos.max(axis=0) - pos.min(axis=0)).max())
    tol = merge_tol * span
    order = np.lexsort(pos.T[::-1])  # sort by x, then y
    kept: list[int] = []
    kept_pos: list[np.ndarray] = []
    for i in order:
        p = pos[i]
        if kept_pos and (np.abs(np.array(kept_pos) - p).max(axis=1)
                         <= tol).any():
            continue
        kept.append(i)
        kept_pos.append(p)
    return [nodes[i] for i in kept]


def assemble_nodeset(coords: np.ndarray, scores: np.ndarray,
                     interface_nodes: list[InterfaceNode], voxel_size: float,
                     merge_tol: float = 0.01, zeta: float = 1.0 / 3.0,
                     support_factor: float = 2.0,
                     decimate: int = 1) -> NodeSet:
    """Merge interface nodes, thin out nearby background nodes, set roles.

    Merging happens before pruning. A background node is removed when its
    distance to the nearest (merged) interface node falls below
    ``zeta * voxel_size``, or when its score is exactly zero. With
    ``decimate > 1``, far-field background nodes keep only every k-th grid
    position per axis and carry proportionally larger supports.
    """
    merged = merge_interface_nodes(interface_nodes, merge_tol)
    ipos = np.array([n.position for n in merged])
    inorm = np.array([n.normal for n in merged])

    coords = np.atleast_2d(coords)
    scores = np.asarray(scores, dtype=float)
    tree = cKDTree(ipos)
    dist, _ = tree.query(coords, k=1)
    keep = (dist >= zeta * voxel_size) & (scores != 0.0)

    supports = np.full(len(coords), support_factor * voxel_size)
    if decimate > 1:
        band = 2.0 * support_factor * decimate * voxel_size
        far = dist > band
        origin = coords.min(axis=0)
        ij = np.rint((coords - origin) / voxel_size).astype(int)
        coarse_keep = (ij % decimate == 0).all(axis=1)
        keep &= ~far | coarse_keep
        supports[far] = support_factor * decimate * voxel_size

    nbulk = int(keep.sum())
    all_coords = np.vstack([coords[keep], ipos])
    all_scores = np.concatenate([scores[keep], np.zeros(len(ipos))])
    roles = np.concatenate([np.sign(scores[keep]).astype(int),
                            np.zeros(len(ipos), dtype=int)])
    all_supports = np.concatenate(
        [supports[keep], np.full(len(ipos), support_factor * voxel_size)])
    normals = np.full_like(all_coords, np.nan)
    normals[nbulk:] = inorm
    ns = NodeSet(coords=all_coords, roles=roles, scores=all_scores,
                 supports=all_supports, spacing=voxel_size, normals=normals)
    ns.validate()
    return ns


def interface_mse(interface_nodes, truth: SyntheticTruth) -> float:
    """Normalized root-sum-square radial error of interface nodes.

    Each node is scored against its nearest ground-truth circle; the root of
    the summed squared radial misfits is divided by (number of circles) x
    (domain x-extent).
    """
    if len(interface_nodes) == 0:
        raise ValueError("empty interface set")
    if isinstance(interface_nodes[0], InterfaceNode):
        pos = np.array([n.position for n in interface_nodes])
    else:
        pos = np.atleast_2d(interface_nodes)
    errs = truth.radial_errors(pos)
    return float(np.sqrt(np.sum(errs ** 2)) / (truth.count * truth.extent))


# ---------------------------------------------------------------------------
# Image-to-model pipeline
# ---------------------------------------------------------------------------

def discretize_image(img: ImageGrid, model: "_svm.SvmModel",
                     opts: InterfaceOptions = InterfaceOptions()):
    """Full image-to-nodes pipeline given a trained classifier.

    Returns (nodeset, stats, score_field). Scores at the pixel nodes come
    from the classifier; the continuous field interpolates them with RK shape
    functions on the pixel grid, which also smooths prediction noise.
    """
    coords = img.centroids()
    scores = _svm.score(model, coords)
    field = InterpolatedScoreField(coords, scores, img.voxel_size,
                                   kernel=opts.score_kernel,
                                   basis=BasisSpec(order=1))
    tf = model.standardization
    sv_phys = model.support_vectors * tf.std + tf.mean
    pairs = candidate_pairs(coords, scores, sv_phys, xi=opts.xi,
                            voxel_size=img.voxel_size)
    raw_nodes, raw_stats = search_interface_nodes(
        pairs, field, tol=opts.newton_tol, max_iter=opts.max_iter)
    nodes = assemble_nodeset(coords, scores, raw_nodes, img.voxel_size,
                             merge_tol=opts.merge_tol, zeta=opts.zeta,
                             support_factor=opts.support_factor,
                             decimate=opts.decimate)
    # post-merge diagnostics on the surviving interface nodes
    iface = nodes.coords[nodes.interface_mask]
    resid = np.abs(field.values(iface))
    stats = InterfaceStats(
        count=len(iface),
        mean_iterations=raw_stats.mean_iterations,
        mean_residual=float(resid.mean()),
        rejected=raw_stats.rejected)
    return nodes, stats, field
