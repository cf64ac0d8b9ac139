"""Structured node sets for verification problems with known interfaces.

The builders mirror the image pipeline's assembly rules (interface nodes on
the zero set, background thinning within zeta * spacing) but place interface
nodes exactly on the analytic geometry; thinning uses the exact signed
distance since the curve is known in closed form.
"""

from __future__ import annotations

import numpy as np

from .rk import AnalyticScoreField, NodeSet

__all__ = ["rod_nodeset", "grid_circle_nodeset"]


def rod_nodeset(n_nodes: int, length: float = 10.0, interface: float = 5.0,
                support_factor: float = 2.0):
    """Uniform 1D nodes; the node on the interface is re-roled, or one is
    inserted when no node coincides. Returns (nodes, score_field)."""
    xs = np.linspace(0.0, length, n_nodes)
    h = xs[1] - xs[0]
    field = AnalyticScoreField.plane(axis=0, offset=interface)
    s = xs - interface
    on_if = np.isclose(s, 0.0, atol=1e-12 * length)
    if not on_if.any():
        xs = np.sort(np.append(xs, interface))
        s = xs - interface
        on_if = np.isclose(s, 0.0, atol=1e-12 * length)
    roles = np.where(on_if, 0, np.sign(s)).astype(int)
    scores = np.where(on_if, 0.0, s)
    normals = np.full((len(xs), 1), np.nan)
    normals[on_if] = 1.0
    nodes = NodeSet(coords=xs[:, None], roles=roles, scores=scores,
                    supports=np.full(len(xs), support_factor * h), spacing=h,
                    normals=normals)
    nodes.validate()
    return nodes, field


def grid_circle_nodeset(nx: int, side: float = 5.0, center=(0.0, 0.0),
                        radius: float = 1.0, support_factor: float = 2.0,
                        zeta: float = 1.0 / 3.0, inside_positive: bool = True,
                        arc_spacing_factor: float = 1.0, lo: float = 0.0):
    """Uniform nx x nx grid on [lo, lo+side]^2 plus interface nodes on the
    circular arc inside the square. Returns (nodes, score_field).

    Grid nodes with |signed distance| < zeta * h are dropped; arc nodes are
    spaced ~arc_spacing_factor * h along the visible part of the circle.
    """
    axis = lo + np.linspace(0.0, side, nx)
    h = axis[1] - axis[0]
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    center = np.asarray(center, dtype=float)
    field = AnalyticScoreField.circle(center, radius,
                                      inside_positive=inside_positive)
    s_grid, _ = field.evaluate(grid)

    # visible angular range of the circle within the square
    thetas = np.linspace(0.0, 2.0 * np.pi, 3600, endpoint=False)
    ring = center + radius * np.column_stack([np.cos(thetas), np.sin(thetas)])
    vis = ((ring >= lo - 1e-12) & (ring <= lo + side + 1e-12)).all(axis=1)
    if not vis.any():
        raise ValueError("circle does not intersect the domain")
    tvis = thetas[vis]
    # handle wrap-around by using the largest contiguous gap as the cut
    gaps = np.diff(np.concatenate([tvis, [tvis[0] + 2 * np.pi]]))
    cut = int(np.argmax(gaps))
    tvis = np.roll(tvis, -cut - 1)
    span = float(tvis[-1] - tvis[0]) % (2 * np.pi)
    if span == 0.0:
        span = 2 * np.pi
    n_arc = max(3, int(round(span * radius / (arc_spacing_factor * h))) + 1)
    closed = abs(span - 2 * np.pi) < 1e-9
    arc_t = tvis[0] + span * np.linspace(0.0, 1.0, n_arc, endpoint=not closed)
    arc = center + radius * np.column_stack([np.cos(arc_t), np.sin(arc_t)])
    arc = np.clip(arc, lo, lo + side)

    keep = (np.abs(s_grid) >= zeta * h)
    coords = np.vstack([grid[keep], arc])
    nbulk = int(keep.sum())
    scores = np.concatenate([s_grid[keep], np.zeros(len(arc))])
    roles = np.concatenate([np.sign(s_grid[keep]).astype(int),
                            np.zeros(len(arc), dtype=int)])
    _, g_arc = field.evaluate(arc)
    norms = np.linalg.norm(g_arc, axis=1, keepdims=True)
    normals = np.full_like(coords, np.nan)
    normals[nbulk:] = g_arc / norms
    nodes = NodeSet(coords=coords, roles=roles, scores=scores,
                    supports=np.full(len(coords), support_factor * h),
                    spacing=h, normals=normals)
    nodes.validate()
    return nodes, field
