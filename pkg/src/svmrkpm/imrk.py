"""Interface-modified RK approximation with embedded weak discontinuities.

Bulk-node kernels are scaled by a regularized step of the signed score,
H(sign(s_I) S(x) / c) with H = max(0, tanh): a node's kernel vanishes on
the far side of the interface and at the interface itself, while interface
nodes keep plain kernels and bridge both phases. Correcting this modified
kernel set through the usual reproducing conditions yields shape functions
that are continuous but kinked across the interface, with one coefficient
per node (no duplicated unknowns).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rk import (
    BasisSpec,
    CoverageError,
    NodeSet,
    RkKernelSpec,
    ShapeContext,
    ShapeEval,
    rk_kernel_eval,
)

__all__ = [
    "HeavisideMod",
    "regularized_heaviside",
    "modified_kernel",
    "ImrkShapeContext",
    "RkShapeContext",
    "imrk_shape_functions",
]

ON_INTERFACE_EPS = 1e-12


def regularized_heaviside(xi):
    """max(0, tanh(xi)) and its derivative (right-sided at exactly 0)."""
    xi = np.asarray(xi, dtype=float)
    pos = xi >= 0.0
    val = np.where(pos, np.tanh(xi), 0.0)
    dval = np.where(pos, 1.0 / np.cosh(np.minimum(np.abs(xi), 300.0)) ** 2, 0.0)
    return val, dval


@dataclass(frozen=True)
class HeavisideMod:
    """Interface regularization: scaling length c and the score field."""

    field: object
    c: float

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("heaviside scaling length must be positive")

    def factors(self, phase_sign, s):
        """Kernel multiplier and its score-direction factor for one phase.

        Returns (h, dfac) with dfac such that the kernel gradient picks up
        phi * dfac * grad(S). ``phase_sign`` broadcasts against ``s``.
        """
        h, dh = regularized_heaviside(phase_sign * s / self.c)
        return h, dh * phase_sign / self.c


def modified_kernel(nodes: NodeSet, node_index: int, x, field, c: float,
                    kernel: RkKernelSpec = RkKernelSpec("bspline3")):
    """Interface-modified kernel of one node at point(s) x.

    Returns (value, gradient); interface nodes pass through unmodified.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    role = int(nodes.roles[node_index])
    a = nodes.supports[node_index]
    dx = x - nodes.coords[node_index]
    w, dwdz = rk_kernel_eval(kernel, np.abs(dx) / a)     # per-axis profiles
    phi = w.prod(axis=1)
    dphi = np.empty_like(dx)
    for k in range(dx.shape[1]):
        others = np.prod(np.delete(w, k, axis=1), axis=1)
        dphi[:, k] = dwdz[:, k] * np.sign(dx[:, k]) / a * others
    if role == 0:
        return phi, dphi
    s, g = field.evaluate(x)
    mod = HeavisideMod(field=field, c=c)
    h, dfac = mod.factors(float(role), s)
    grad = dphi * h[:, None] + phi[:, None] * dfac[:, None] * g
    return phi * h, grad


class ImrkShapeContext:
    """Shape provider embedding weak discontinuities at the score zero set.

    Evaluation mirrors :class:`~svmrkpm.rk.ShapeContext` but multiplies each
    bulk node's kernel by the regularized step of the signed score before
    the moment matrix is formed and inverted.
    """

    def __init__(self, nodes: NodeSet, field, basis: BasisSpec = BasisSpec(1),
                 kernel: RkKernelSpec = RkKernelSpec("bspline3", support=2.0),
                 interface_kernel: RkKernelSpec | None = None,
                 c_factor: float = 1.0):
        self.nodes = nodes
        self.field = field
        self.mod = HeavisideMod(field=field, c=c_factor * nodes.spacing)
        self.ctx = ShapeContext.for_nodes(nodes, basis, kernel,
                                          interface_kernel=interface_kernel)
        self._roles = nodes.roles.astype(float)

    @property
    def coords(self):
        return self.nodes.coords

    def _mod_fn(self, s, g):
        def fn(pts, idx, mask):
            roles = self._roles[idx]                      # (P, K)
            h, dh = regularized_heaviside(roles * s[:, None] / self.mod.c)
            iface = roles == 0.0
            h[iface] = 1.0
            dh[iface] = 0.0
            dm = (dh * roles / self.mod.c)[:, :, None] * g[:, None, :]
            return h, dm

        return fn

    def evaluate(self, pts, side=None, grad: bool = True):
        """Padded (idx, mask, psi[, dpsi]) arrays at the given points.

        Points sitting exactly on the level set make the modified moment
        matrix singular; they are nudged into the ``side`` phase (default
        positive) for the batch and their values are then replaced with the
        exact one-sided limit, which is the same from both sides wherever
        the approximation is continuous. Gradients at such points are the
        one-sided gradients of the ``side`` phase.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s, g = self.field.evaluate(pts)
        onif = np.abs(s) <= ON_INTERFACE_EPS * self.mod.c
        sides = self._side_array(side, len(pts))
        work = pts
        if onif.any():
            work = pts.copy()
            gn = np.linalg.norm(g[onif], axis=1, keepdims=True)
            if (gn < 1e-14).any():
                raise CoverageError("interface coverage gap: vanishing score "
                                    "gradient on the interface")
            delta = 1e-6 * self.nodes.spacing
            work[onif] += (sides[onif] * delta)[:, None] * g[onif] / gn
            s, g = self.field.evaluate(work)
        try:
            out = self.ctx.evaluate(work, mod_fn=self._mod_fn(s, g), grad=grad)
        except CoverageError as exc:
            svals = self.field.values(work)
            if np.abs(svals).min() < self.mod.c:
                raise CoverageError(
                    "interface coverage gap: no interface node in range of a "
                    "near-interface point") from exc
            raise
        if onif.any():
            idx, mask, psi = out[0], out[1], out[2]
            for p in np.flatnonzero(onif):
                ids, vals = self._limit_values(pts[p], int(sides[p]))
                n = len(ids)
                if grad:
                    # remap the nudged-row one-sided gradients onto new layout
                    old = {int(i): out[3][p, col]
                           for col, i in enumerate(idx[p]) if mask[p, col]}
                    out[3][p] = 0.0
                    for col, i in enumerate(ids):
                        if int(i) in old:
                            out[3][p, col] = old[int(i)]
                idx[p] = 0
                mask[p] = False
                idx[p, :n] = ids
                mask[p, :n] = True
                psi[p] = 0.0
                psi[p, :n] = vals
        return out

    @staticmethod
    def _side_array(side, n):
        if side is None:
            return np.ones(n)
        side = np.asarray(side, dtype=float)
        if side.ndim == 0:
            return np.full(n, float(side))
        return side

    def _limit_values(self, x, sigma):
        """Exact shape values at a point on the interface (one-sided limit).

        With the bulk kernels scaled by H(|S|/c) -> 0, the moment matrix
        splits as A + delta*B (A from interface nodes, B from same-side bulk
        nodes). The limit coefficient vector is q/delta + p with q in the
        null space of A, and the products against the vanishing kernels stay
        finite; interface values use p, bulk values use q.
        """
        ctx = self.ctx
        if sigma == 0:
            sigma = 1
        idxr, maskr = ctx.neighbors(x[None, :])
        ids = idxr[0][maskr[0]]
        dxm = x - ctx.coords[ids]
        phi, _ = ctx._kernels(dxm[None], ids[None],
                              np.ones((1, len(ids)), dtype=bool))
        phi = phi[0]
        v = (dxm / ctx.scale)[None]
        H = ctx._monomials(v)[0][0]                       # (K, m)
        roles = self.nodes.roles[ids]
        ifm = (roles == 0) & (phi > 0.0)
        sbm = (roles == sigma) & (phi > 0.0)
        m = H.shape[1]
        if not ifm.any():
            raise CoverageError(
                "interface coverage gap: no interface node in range of a "
                "near-interface point")
        A = np.einsum("ki,kj,k->ij", H[ifm], H[ifm], phi[ifm])
        B = np.einsum("ki,kj,k->ij", H[sbm], H[sbm], phi[sbm]) \
            if sbm.any() else np.zeros((m, m))
        h0 = np.zeros(m)
        h0[0] = 1.0
        U, sv, Vt = np.linalg.svd(A)
        rank = int((sv > sv[0] * 1e-12).sum())
        vals = np.zeros(len(ids))
        if rank == m:
            b = np.linalg.solve(A, h0)
            vals[ifm] = (H[ifm] @ b) * phi[ifm]
            return ids, vals
        Nb = Vt[rank:].T                                  # (m, m-rank)
        Bnn = Nb.T @ B @ Nb
        try:
            qn = np.linalg.solve(Bnn, Nb.T @ h0)
        except np.linalg.LinAlgError as exc:
            raise CoverageError("interface coverage gap: degenerate limit "
                                "system on the interface") from exc
        q = Nb @ qn
        p = np.linalg.pinv(A, rcond=1e-12) @ (h0 - B @ q)
        vals[ifm] = (H[ifm] @ p) * phi[ifm]
        vals[sbm] = (H[sbm] @ q) * phi[sbm]
        return ids, vals


class RkShapeContext:
    """Plain RK shape provider with the same call surface as the IM variant."""

    def __init__(self, nodes: NodeSet, basis: BasisSpec = BasisSpec(1),
                 kernel: RkKernelSpec = RkKernelSpec("bspline3", support=2.0)):
        self.nodes = nodes
        self.ctx = ShapeContext.for_nodes(nodes, basis, kernel)

    @property
    def coords(self):
        return self.nodes.coords

    def evaluate(self, pts, side=None, grad: bool = True):
        return self.ctx.evaluate(pts, grad=grad)


def imrk_shape_functions(nodes: NodeSet, x, field,
                         basis: BasisSpec = BasisSpec(1),
                         kernel: RkKernelSpec = RkKernelSpec("bspline3", 2.0),
                         interface_kernel: RkKernelSpec | None = None,
                         c_factor: float = 1.0) -> ShapeEval:
    """Interface-modified shape functions and gradients at a single point."""
    ctx = ImrkShapeContext(nodes, field, basis, kernel, interface_kernel,
                           c_factor)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    idx, mask, psi, dpsi = ctx.evaluate(x)
    keep = mask[0]
    return ShapeEval(point=x[0], indices=idx[0][keep], values=psi[0][keep],
                     gradients=dpsi[0][keep])
