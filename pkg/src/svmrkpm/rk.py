"""Reproducing-kernel shape functions on scattered nodes.

Shape functions are kernel estimates corrected to reproduce monomials up to
the basis order: Psi_I(x) = H(0)^T M^-1(x) H(x - x_I) phi_a(x - x_I), with
the moment matrix M(x) = sum_I H H^T phi_a. Kernels are tensor products of
compactly supported 1D profiles, so nodal supports are axis-aligned boxes
of half-width a_I. Everything evaluates in batch over many points; the
optional per-node multiplier hook is what the interface-modified variant
plugs into.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "RkKernelSpec",
    "BasisSpec",
    "NodeSet",
    "ShapeEval",
    "CoverageError",
    "rk_kernel_eval",
    "ShapeContext",
    "shape_functions",
    "InterpolatedScoreField",
    "AnalyticScoreField",
    "interpolate_score",
]

_KIND_CODES = {"tent": 0, "bspline2": 1, "bspline3": 2, "power": 3}
COND_LIMIT = 1e12


class CoverageError(RuntimeError):
    """Moment matrix singular or too few nodes cover the evaluation point."""


@dataclass(frozen=True)
class RkKernelSpec:
    """Kernel family and normalized support factor (multiples of spacing)."""

    kind: str = "bspline3"
    support: float = 2.0
    exponent: float = 4.0  # power kernel only

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown RK kernel kind: {self.kind}")
        if self.support <= 0:
            raise ValueError("normalized support must be positive")
        if self.kind == "power" and self.exponent < 1:
            raise ValueError("power kernel exponent must be >= 1")


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis complete to order n."""

    order: int = 1

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("basis order must be >= 0")

    def exponents(self, ndim: int) -> np.ndarray:
        """Multi-index exponents up to the completeness order, shape (m, d)."""
        out = [e for e in product(range(self.order + 1), repeat=ndim)
               if sum(e) <= self.order]
        out.sort(key=lambda e: (sum(e), e))
        return np.array(out, dtype=int)


def rk_kernel_eval(spec: RkKernelSpec, z):
    """1D kernel profile value and d/dz at normalized distances z >= 0.

    Piecewise definitions; identically zero for z >= 1 and one-sided at the
    breakpoints (the lower piece wins on ties).
    """
    z = np.asarray(z, dtype=float)
    w = np.zeros_like(z)
    dw = np.zeros_like(z)
    if spec.kind == "tent":
        inside = z < 1.0
        w[inside] = 1.0 - z[inside]
        dw[inside] = -1.0
    elif spec.kind == "bspline2":
        lo = z < 1.0 / 3.0
        hi = (z >= 1.0 / 3.0) & (z < 1.0)
        w[lo] = 0.75 - 2.25 * z[lo] ** 2
        dw[lo] = -4.5 * z[lo]
        w[hi] = 1.125 * (1.0 - z[hi]) ** 2
        dw[hi] = -2.25 * (1.0 - z[hi])
    elif spec.kind == "bspline3":
        lo = z < 0.5
        hi = (z >= 0.5) & (z < 1.0)
        w[lo] = 2.0 / 3.0 - 4.0 * z[lo] ** 2 + 4.0 * z[lo] ** 3
        dw[lo] = -8.0 * z[lo] + 12.0 * z[lo] ** 2
        w[hi] = (4.0 / 3.0 - 4.0 * z[hi] + 4.0 * z[hi] ** 2
                 - 4.0 / 3.0 * z[hi] ** 3)
        dw[hi] = -4.0 + 8.0 * z[hi] - 4.0 * z[hi] ** 2
    else:  # power
        inside = z < 1.0
        w[inside] = (1.0 - z[inside]) ** spec.exponent
        dw[inside] = -spec.exponent * (1.0 - z[inside]) ** (spec.exponent - 1.0)
    return w, dw


# ---------------------------------------------------------------------------
# Node sets
# ---------------------------------------------------------------------------

ROLE_INTERFACE = 0  # bulk roles are the phase sign, -1 or +1


@dataclass
class NodeSet:
    """RK discretization: coordinates, phase roles, scores and supports.

    ``roles[I]`` is the sign of the phase for bulk nodes and 0 for interface
    nodes; ``scores[I]`` carries the signed classification score s_I.
    ``normals`` rows are unit interface normals (NaN for bulk nodes).
    """

    coords: np.ndarray
    roles: np.ndarray
    scores: np.ndarray
    supports: np.ndarray
    spacing: float
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.roles = np.asarray(self.roles, dtype=int)
        self.scores = np.asarray(self.scores, dtype=float)
        self.supports = np.asarray(self.supports, dtype=float)
        if self.supports.ndim == 0:
            self.supports = np.full(len(self.coords), float(self.supports))
        if self.normals is not None:
            self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def ndim(self) -> int:
        return self.coords.shape[1]

    @property
    def interface_mask(self) -> np.ndarray:
        return self.roles == ROLE_INTERFACE

    @property
    def bulk_mask(self) -> np.ndarray:
        return self.roles != ROLE_INTERFACE

    def validate(self, tol_interface: float | None = None):
        if (self.supports <= 0).any():
            raise ValueError("nodal supports must be positive")
        bulk = self.bulk_mask
        if (np.sign(self.scores[bulk]) != self.roles[bulk]).any():
            raise ValueError("bulk role inconsistent with score sign")
        if (self.scores[bulk] == 0.0).any():
            raise ValueError("bulk node with zero score")
        if tol_interface is not None:
            iface = ~bulk
            if iface.any() and np.abs(self.scores[iface]).max() > tol_interface:
                raise ValueError("interface node score exceeds tolerance")


@dataclass(frozen=True)
class ShapeEval:
    """Shape data at one evaluation point (only covering nodes listed)."""

    point: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    gradients: np.ndarray


# ---------------------------------------------------------------------------
# Batched evaluation engine
# ---------------------------------------------------------------------------

class ShapeContext:
    """Reusable evaluator for one node cloud / kernel / basis combination.

    ``kind_codes`` may vary per node (interface nodes can carry a different
    kernel family than bulk nodes). ``evaluate`` returns padded per-point
    neighbor data; rows where ``mask`` is False are zero-filled.
    """

    def __init__(self, coords, supports, basis: BasisSpec, kernel: RkKernelSpec,
                 kind_codes=None):
        self.coords = np.atleast_2d(np.asarray(coords, dtype=float))
        self.supports = np.asarray(supports, dtype=float)
        if self.supports.ndim == 0:
            self.supports = np.full(len(self.coords), float(self.supports))
        self.basis = basis
        self.kernel = kernel
        n, d = self.coords.shape
        if kind_codes is None:
            kind_codes = np.full(n, _KIND_CODES[kernel.kind], dtype=np.int8)
        self.kind_codes = kind_codes
        self.power_exponent = kernel.exponent
        self.expo = basis.exponents(d)
        self.tree = cKDTree(self.coords)
        self.rball = self.supports.max() * np.sqrt(d) * (1 + 1e-12)
        self.scale = float(np.mean(self.supports))

    @classmethod
    def for_nodes(cls, nodes: NodeSet, basis: BasisSpec, kernel: RkKernelSpec,
                  interface_kernel: RkKernelSpec | None = None):
        codes = np.full(len(nodes), _KIND_CODES[kernel.kind], dtype=np.int8)
        ctx = None
        if interface_kernel is not None:
            codes[nodes.interface_mask] = _KIND_CODES[interface_kernel.kind]
        ctx = cls(nodes.coords, nodes.supports, basis, kernel, codes)
        if interface_kernel is not None and interface_kernel.kind == "power":
            ctx.power_exponent = interface_kernel.exponent
        return ctx

    def neighbors(self, pts: np.ndarray):
        """Padded box-support neighbor lists: (idx, mask), shape (P, K)."""
        pts = np.atleast_2d(pts)
        lens = self.tree.query_ball_point(pts, self.rball, return_length=True)
        kmax = int(np.max(lens, initial=0))
        if kmax == 0:
            raise CoverageError("insufficient coverage: no node in range")
        dist, idx = self.tree.query(pts, k=kmax)
        if kmax == 1:
            dist, idx = dist[:, None], idx[:, None]
        mask = dist <= self.rball
        idx = np.where(mask, idx, 0)
        # exact per-axis box test against each node's own support
        dx = pts[:, None, :] - self.coords[idx]
        a = self.supports[idx]
        mask &= (np.abs(dx) < a[:, :, None]).all(axis=2)
        return idx, mask

    def _kernels(self, dx, idx, mask):
        """Tensor-product kernel values/gradients for padded neighbors."""
        a = self.supports[idx][:, :, None]
        z = np.abs(dx) / a
        codes = self.kind_codes[idx]
        w = np.zeros_like(z)
        dwdz = np.zeros_like(z)
        for kind, code in _KIND_CODES.items():
            sel = codes == code
            if sel.any():
                spec = RkKernelSpec(kind=kind, support=self.kernel.support,
                                    exponent=self.power_exponent)
                w[sel], dwdz[sel] = rk_kernel_eval(spec, z[sel])
        phi = np.prod(w, axis=2)
        phi[~mask] = 0.0
        # d phi / dx_k = w'(z_k) sign(dx_k)/a * prod_{m != k} w(z_m)
        dphi = np.zeros_like(dx)
        d = dx.shape[2]
        for k in range(d):
            others = np.prod(np.delete(w, k, axis=2), axis=2) if d > 1 else 1.0
            dphi[:, :, k] = dwdz[:, :, k] * np.sign(dx[:, :, k]) / a[:, :, 0] \
                * others
        dphi[~mask] = 0.0
        return phi, dphi

    def _monomials(self, v):
        """H(v) and dH/dv for scaled shifts v, shapes (P,K,m) and (P,K,m,d)."""
        P, K, d = v.shape
        m = len(self.expo)
        H = np.ones((P, K, m))
        dH = np.zeros((P, K, m, d))
        for col, e in enumerate(self.expo):
            for k in range(d):
                if e[k]:
                    H[:, :, col] *= v[:, :, k] ** e[k]
        for col, e in enumerate(self.expo):
            for k in range(d):
                if e[k] == 0:
                    continue
                term = np.full((P, K), float(e[k]))
                for kk in range(d):
                    p = e[kk] - (1 if kk == k else 0)
                    if p:
                        term = term * v[:, :, kk] ** p
                dH[:, :, col, k] = term
        return H, dH

    def evaluate(self, pts: np.ndarray, mod_fn=None, grad: bool = True):
        """Shape values (and gradients) at points, padded over neighbors.

        ``mod_fn(pts, idx, mask) -> (m, dm)`` scales each node's kernel by a
        per-point multiplier (dm may be None when grad is False). Returns
        (idx, mask, psi) or (idx, mask, psi, dpsi).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx, mask = self.neighbors(pts)
        dx = pts[:, None, :] - self.coords[idx]
        phi, dphi = self._kernels(dx, idx, mask)

        if mod_fn is not None:
            mfac, dmfac = mod_fn(pts, idx, mask)
            if grad:
                dphi = dphi * mfac[:, :, None] + phi[:, :, None] * dmfac
            phi = phi * mfac

        v = dx / self.scale
        H, dH = self._monomials(v)
        dH = dH / self.scale

        mcount = len(self.expo)
        if (np.count_nonzero(phi, axis=1) < mcount).any():
            raise CoverageError("insufficient coverage: too few covering nodes")
        M = np.einsum("pki,pkj,pk->pij", H, H, phi, optimize=True)
        try:
            Minv = np.linalg.inv(M)
        except np.linalg.LinAlgError as exc:
            raise CoverageError("insufficient coverage: singular moment matrix") \
                from exc
        cond = (np.linalg.norm(M, axis=(1, 2))
                * np.linalg.norm(Minv, axis=(1, 2)))
        if not np.isfinite(cond).all() or cond.max() > COND_LIMIT:
            raise CoverageError(
                f"insufficient coverage: moment condition {cond.max():.2e}")

        h0 = np.zeros(mcount)
        h0[0] = 1.0
        b = Minv @ h0                        # (P, m)
        hb = np.einsum("pkm,pm->pk", H, b)
        psi = hb * phi
        if not grad:
            return idx, mask, psi

        d = pts.shape[1]
        # dM_k = sum_I (dH H^T + H dH^T) phi + H H^T dphi_k
        dMb = np.empty((pts.shape[0], mcount, d))
        for k in range(d):
            dM = (np.einsum("pki,pkj,pk->pij", dH[:, :, :, k], H, phi,
                            optimize=True)
                  + np.einsum("pki,pkj,pk->pij", H, dH[:, :, :, k], phi,
                              optimize=True)
                  + np.einsum("pki,pkj,pk->pij", H, H, dphi[:, :, k],
                              optimize=True))
            dMb[:, :, k] = np.einsum("pij,pj->pi", dM, b)
        db = -np.einsum("pij,pjk->pik", Minv, dMb)  # (P, m, d)
        dpsi = (np.einsum("pkmd,pm->pkd", dH, b)
                + np.einsum("pkm,pmd->pkd", H, db)) * phi[:, :, None] \
            + hb[:, :, None] * dphi
        return idx, mask, psi, dpsi


def shape_functions(nodes: NodeSet, x, basis: BasisSpec,
                    kernel: RkKernelSpec) -> ShapeEval:
    """Standard RK shape functions and gradients at a single point."""
    ctx = ShapeContext.for_nodes(nodes, basis, kernel)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    idx, mask, psi, dpsi = ctx.evaluate(x)
    keep = mask[0]
    return ShapeEval(point=x[0], indices=idx[0][keep], values=psi[0][keep],
                     gradients=dpsi[0][keep])


# ---------------------------------------------------------------------------
# Score fields
# ---------------------------------------------------------------------------

class InterpolatedScoreField:
    """Score surrogate interpolating nodal scores with RK shape functions.

    Built on the background (pixel-grid) node cloud; acts as a smoothing
    filter on potentially noisy classifier scores.
    """

    def __init__(self, coords, scores, spacing: float,
                 kernel: RkKernelSpec = RkKernelSpec(),
                 basis: BasisSpec = BasisSpec(order=1)):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        self.scores = np.asarray(scores, dtype=float)
        self.spacing = float(spacing)
        supports = np.full(len(coords), kernel.support * spacing)
        self.ctx = ShapeContext(coords, supports, basis, kernel)

    def evaluate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx, mask, psi, dpsi = self.ctx.evaluate(pts)
        s = self.scores[idx]
        vals = np.einsum("pk,pk->p", psi, s)
        grads = np.einsum("pkd,pk->pd", dpsi, s)
        return vals, grads

    def values(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx, mask, psi = self.ctx.evaluate(pts, grad=False)
        return np.einsum("pk,pk->p", psi, self.scores[idx])


class AnalyticScoreField:
    """Closed-form signed score with exact gradient (verification problems)."""

    def __init__(self, fn):
        self._fn = fn

    def evaluate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self._fn(pts)

    def values(self, pts):
        return self.evaluate(pts)[0]

    @classmethod
    def plane(cls, axis: int, offset: float, positive_above: bool = True):
        sign = 1.0 if positive_above else -1.0

        def fn(pts):
            s = sign * (pts[:, axis] - offset)
            g = np.zeros_like(pts)
            g[:, axis] = sign
            return s, g

        return cls(fn)

    @classmethod
    def circle(cls, center, radius: float, inside_positive: bool = True):
        center = np.asarray(center, dtype=float)
        sign = 1.0 if inside_positive else -1.0

        def fn(pts):
            dx = pts - center
            r = np.linalg.norm(dx, axis=1)
            s = sign * (radius - r)
            safe = np.maximum(r, 1e-300)
            g = -sign * dx / safe[:, None]
            return s, g

        return cls(fn)


def interpolate_score(field: InterpolatedScoreField, x):
    """Interpolated score and gradient at a single point."""
    vals, grads = field.evaluate(np.asarray(x, dtype=float).reshape(1, -1))
    return float(vals[0]), grads[0]
