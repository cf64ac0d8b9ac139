"""Galerkin linear elasticity on meshfree shape providers.

Stiffness and load assembly run either over background Gauss points (direct
shape gradients) or over conforming smoothing cells (divergence-smoothed
gradients); in both cases the constitutive matrix is selected per
integration site by its material tag. Essential boundary conditions are
enforced weakly with a symmetric Nitsche variant, since the shape functions
do not interpolate nodal values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import splu

from .quadrature import GaussScheme, SmoothingCellComplex, smoothed_gradients

__all__ = [
    "Material",
    "BoundaryCondition",
    "BvpSpec",
    "SolutionField",
    "material_matrix",
    "assemble",
    "apply_dirichlet_nitsche",
    "solve",
    "recover_fields",
    "recover_cell_strains",
    "solve_bvp",
]

DENSE_CUTOFF = 3000


@dataclass(frozen=True)
class Material:
    """Isotropic elastic phase with optional dilatational eigenstrain."""

    lam: float
    mu: float
    eigenstrain: float = 0.0

    @classmethod
    def from_engineering(cls, E: float, nu: float, eigenstrain: float = 0.0):
        if E <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < nu < 0.5:
            raise ValueError("Poisson ratio outside (-1, 0.5)")
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        return cls(lam=lam, mu=mu, eigenstrain=eigenstrain)

    @property
    def youngs(self) -> float:
        return self.mu * (3 * self.lam + 2 * self.mu) / (self.lam + self.mu)


def material_matrix(mat: Material, mode: str) -> np.ndarray:
    """Constitutive matrix: scalar axial stiffness (1D) or plane-strain
    Voigt matrix with engineering shear (2D)."""
    if mode == "1d":
        return np.array([[mat.youngs]])
    if mode != "plane_strain":
        raise ValueError(f"unknown analysis mode: {mode}")
    lam, mu = mat.lam, mat.mu
    return np.array([
        [lam + 2 * mu, lam, 0.0],
        [lam, lam + 2 * mu, 0.0],
        [0.0, 0.0, mu],
    ])


def eigenstrain_vector(mat: Material, mode: str) -> np.ndarray:
    """In-plane dilatational eigenstrain in Voigt order (zero shear)."""
    if mode == "1d":
        return np.array([mat.eigenstrain])
    return np.array([mat.eigenstrain, mat.eigenstrain, 0.0])


@dataclass(frozen=True)
class BoundaryCondition:
    """Predicate over boundary points plus the prescribed value function."""

    where: object               # fn(points) -> bool mask
    value: object               # fn(points) -> (P, dof) values

    def mask(self, pts):
        return np.asarray(self.where(pts), dtype=bool)


@dataclass(frozen=True)
class BvpSpec:
    """Domain, analysis mode, boundary data and loads."""

    domain: tuple
    mode: str = "plane_strain"
    dirichlet: tuple = ()
    neumann: tuple = ()
    body_force: object = None

    @property
    def dim(self) -> int:
        return 1 if self.mode == "1d" else 2

    def dirichlet_data(self, pts):
        """Mask + stacked values over boundary points; overlapping Dirichlet
        and Neumann segments are rejected."""
        pts = np.atleast_2d(pts)
        mask = np.zeros(len(pts), dtype=bool)
        vals = np.zeros((len(pts), self.dim))
        for bc in self.dirichlet:
            m = bc.mask(pts)
            vals[m] = np.atleast_2d(bc.value(pts[m]))
            mask |= m
        for bc in self.neumann:
            if (mask & bc.mask(pts)).any():
                raise ValueError("Dirichlet and Neumann segments overlap")
        return mask, vals

    def neumann_data(self, pts):
        pts = np.atleast_2d(pts)
        mask = np.zeros(len(pts), dtype=bool)
        vals = np.zeros((len(pts), self.dim))
        for bc in self.neumann:
            m = bc.mask(pts)
            vals[m] = np.atleast_2d(bc.value(pts[m]))
            mask |= m
        return mask, vals


@dataclass
class SolutionField:
    """Nodal coefficient vector plus the provider that interprets it."""

    coefficients: np.ndarray    # (dof * NP,)
    provider: object
    mode: str

    @property
    def dim(self) -> int:
        return 1 if self.mode == "1d" else 2


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _strain_blocks(dpsi, dim):
    """Per-node strain-displacement blocks, (P, K, nvoigt, dim)."""
    P, K, _ = dpsi.shape
    if dim == 1:
        return dpsi[:, :, None, :]
    B = np.zeros((P, K, 3, 2))
    B[:, :, 0, 0] = dpsi[:, :, 0]
    B[:, :, 1, 1] = dpsi[:, :, 1]
    B[:, :, 2, 0] = dpsi[:, :, 1]
    B[:, :, 2, 1] = dpsi[:, :, 0]
    return B


class _Triplets:
    """Triplet accumulator that folds batches into CSR eagerly so the peak
    memory stays proportional to one assembly chunk."""

    def __init__(self, n: int, fold_at: int = 5_000_000):
        self.n = n
        self.fold_at = fold_at
        self.rows, self.cols, self.vals = [], [], []
        self.pending = 0
        self.acc = None

    def add(self, r, c, v):
        v = np.asarray(v).ravel()
        self.rows.append(np.asarray(r).ravel())
        self.cols.append(np.asarray(c).ravel())
        self.vals.append(v)
        self.pending += len(v)
        if self.pending > self.fold_at:
            self._fold()

    def _fold(self):
        if not self.rows:
            return
        m = sparse.csr_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n, self.n))
        self.acc = m if self.acc is None else self.acc + m
        self.rows, self.cols, self.vals = [], [], []
        self.pending = 0

    def matrix(self):
        self._fold()
        return self.acc if self.acc is not None \
            else sparse.csr_matrix((self.n, self.n))


def _dof_index(idx, dim):
    """(..., K) node ids -> (..., K*dim) dof ids, interleaved per node."""
    out = idx[..., :, None] * dim + np.arange(dim)
    return out.reshape(*idx.shape[:-1], -1)


def assemble(quad, provider, materials: dict, bvp: BvpSpec,
             chunk: int = 512):
    """Stiffness and load vector from a Gauss scheme or smoothing cells.

    ``materials`` maps the material tag (+1/-1) to a Material. The load
    accumulates body forces, Neumann tractions and eigenstrain forces from
    inclusion-tagged sites.
    """
    dim = bvp.dim
    ndof = dim * len(provider.coords)
    C = {t: material_matrix(m, bvp.mode) for t, m in materials.items()}
    sig0 = {t: material_matrix(m, bvp.mode) @ eigenstrain_vector(m, bvp.mode)
            for t, m in materials.items()}
    trip = _Triplets(ndof)
    F = np.zeros(ndof)

    if isinstance(quad, SmoothingCellComplex):
        _assemble_scni(quad, provider, C, sig0, bvp, trip, F)
    else:
        _assemble_gauss(quad, provider, C, sig0, bvp, trip, F, chunk)

    K = trip.matrix()
    K = 0.5 * (K + K.T)  # enforce exact symmetry of the assembled operator
    _add_neumann(quad, provider, bvp, F)
    return K, F


def _assemble_gauss(quad: GaussScheme, provider, C, sig0, bvp, trip, F,
                    chunk):
    dim = bvp.dim
    for start in range(0, len(quad.points), chunk):
        sl = slice(start, start + chunk)
        pts = quad.points[sl]
        w = quad.weights[sl]
        tags = quad.tags[sl]
        idx, mask, psi, dpsi = provider.evaluate(pts, side=tags)
        B = _strain_blocks(dpsi, dim)
        dofs = _dof_index(idx, dim)
        dofmask = np.repeat(mask, dim, axis=1)
        for t in np.unique(tags):
            pick = tags == t
            CB = np.einsum("vw,pkwj->pkvj", C[t], B[pick], optimize=True)
            kloc = np.einsum("pkvi,p,pmvj->pkimj", B[pick], w[pick], CB,
                             optimize=True)
            dk = dofs[pick]
            P, KD = dk.shape
            # drop padded neighbors before the triplets leave the chunk
            pair = dofmask[pick][:, :, None] & dofmask[pick][:, None, :]
            rows = np.broadcast_to(dk[:, :, None], (P, KD, KD))[pair]
            cols = np.broadcast_to(dk[:, None, :], (P, KD, KD))[pair]
            trip.add(rows, cols, kloc.reshape(P, KD, KD)[pair])
            s0 = sig0[t]
            if np.any(s0):
                floc = np.einsum("pkvi,v,p->pki", B[pick], s0, w[pick])
                np.add.at(F, dk, floc.reshape(P, KD))
        if bvp.body_force is not None:
            bf = np.atleast_2d(bvp.body_force(pts))
            floc = psi[:, :, None] * (w[:, None] * bf)[:, None, :]
            np.add.at(F, dofs, floc.reshape(len(pts), -1))


def _assemble_scni(cells: SmoothingCellComplex, provider, C, sig0, bvp, trip,
                   F):
    dim = bvp.dim
    ids, grads = smoothed_gradients(provider, cells)
    sites = np.array([c.site for c in cells.cells])
    tags = np.array([c.tag for c in cells.cells])
    areas = np.array([c.area for c in cells.cells])
    for cids, g, tag, w in zip(ids, grads, tags, areas):
        B = _strain_blocks(g[None], dim)[0]              # (K, v, dim)
        kloc = w * np.einsum("kvi,vw,mwj->kimj", B, C[tag], B, optimize=True)
        dk = _dof_index(cids[None], dim)[0]
        rows = np.broadcast_to(dk[:, None], (len(dk), len(dk)))
        trip.add(rows, rows.T, kloc.reshape(len(dk), len(dk)))
        s0 = sig0[tag]
        if np.any(s0):
            floc = w * np.einsum("kvi,v->ki", B, s0)
            np.add.at(F, dk, floc.ravel())
    if bvp.body_force is not None:
        idx, mask, psi = provider.evaluate(sites, side=tags, grad=False)
        bf = np.atleast_2d(bvp.body_force(sites))
        dofs = _dof_index(idx, dim)
        floc = psi[:, :, None] * (areas[:, None] * bf)[:, None, :]
        np.add.at(F, dofs, floc.reshape(len(sites), -1))


def _boundary_of(quad):
    if isinstance(quad, SmoothingCellComplex):
        bp, bw, bn, bs = quad.boundary_quadrature()
        tags = []
        for c in quad.cells:
            if c.seg_on_boundary.any():
                tags.append(np.full(int(c.seg_on_boundary.sum()), c.tag))
        return bp, bw, bn, bs, np.concatenate(tags)
    tags = getattr(quad, "boundary_tags", None)
    if tags is None:
        tags = np.ones(len(quad.boundary_points), dtype=int)
    return (quad.boundary_points, quad.boundary_weights,
            quad.boundary_normals, quad.boundary_sizes, tags)


def _add_neumann(quad, provider, bvp, F):
    if not bvp.neumann:
        return
    bp, bw, bn, bs, tags = _boundary_of(quad)
    mask, h = bvp.neumann_data(bp)
    if not mask.any():
        return
    idx, _, psi = provider.evaluate(bp[mask], side=tags[mask], grad=False)
    dofs = _dof_index(idx, bvp.dim)
    floc = psi[:, :, None] * (bw[mask, None] * h[mask]).reshape(
        mask.sum(), 1, bvp.dim)
    np.add.at(F, dofs, floc.reshape(int(mask.sum()), -1))


def _traction_blocks(dpsi, normals, C, tags, dim):
    """Traction operator rows: (P, K, dim, dim) mapping nodal dofs to
    sigma(psi) . n at each boundary point."""
    B = _strain_blocks(dpsi, dim)
    P, K = B.shape[:2]
    T = np.zeros((P, K, dim, dim))
    for t in np.unique(tags):
        pick = tags == t
        CB = np.einsum("vw,pkwj->pkvj", C[t], B[pick], optimize=True)
        if dim == 1:
            T[pick] = CB * normals[pick][:, None, None, :]
        else:
            n = normals[pick]
            D = np.zeros((int(pick.sum()), 2, 3))
            D[:, 0, 0] = n[:, 0]
            D[:, 0, 2] = n[:, 1]
            D[:, 1, 1] = n[:, 1]
            D[:, 1, 2] = n[:, 0]
            T[pick] = np.einsum("piv,pkvj->pkij", D, CB, optimize=True)
    return T


def apply_dirichlet_nitsche(K, F, quad, provider, materials: dict,
                            bvp: BvpSpec, beta0: float = 1e4):
    """Symmetric Nitsche terms for the Dirichlet boundary.

    Adds consistency, adjoint-consistency and penalty contributions with
    penalty beta0 * E_max / h_b per boundary point. The boundary quadrature
    comes from the integration scheme itself, which keeps nodal integration
    patch-test exact.
    """
    if beta0 <= 0:
        raise ValueError("Nitsche penalty factor must be positive")
    dim = bvp.dim
    C = {t: material_matrix(m, bvp.mode) for t, m in materials.items()}
    emax = max(m.youngs for m in materials.values())
    bp, bw, bn, bs, tags = _boundary_of(quad)
    mask, ubar = bvp.dirichlet_data(bp)
    if not mask.any():
        return K.tocsr(), F.copy()
    bp, bw, bn, bs = bp[mask], bw[mask], bn[mask], bs[mask]
    tags, ubar = tags[mask], ubar[mask]

    idx, _, psi, dpsi = provider.evaluate(bp, side=tags)
    Tb = _traction_blocks(dpsi, bn, C, tags, dim)         # (P, K, dim, dim)
    P, Kn = psi.shape
    KD = Kn * dim
    # flat per-point operators (dim x KD): displacement and traction rows
    eye = np.eye(dim)
    Nm = np.einsum("pk,ij->pikj", psi, eye).reshape(P, dim, KD)
    Tm = np.transpose(Tb, (0, 2, 1, 3)).reshape(P, dim, KD)
    beta = beta0 * emax / bs

    # eigenstrain part of the boundary traction: sigma_total = C eps - sigma0
    sig0n = np.zeros((P, dim))
    for t, m in materials.items():
        pick = tags == t
        if pick.any() and m.eigenstrain != 0.0:
            s0 = material_matrix(m, bvp.mode) @ eigenstrain_vector(m, bvp.mode)
            if dim == 1:
                sig0n[pick] = s0[0] * bn[pick]
            else:
                n = bn[pick]
                sig0n[pick, 0] = s0[0] * n[:, 0] + s0[2] * n[:, 1]
                sig0n[pick, 1] = s0[2] * n[:, 0] + s0[1] * n[:, 1]

    dofs = _dof_index(idx, dim)
    rows = np.broadcast_to(dofs[:, :, None], (P, KD, KD))
    cols = np.broadcast_to(dofs[:, None, :], (P, KD, KD))
    nt = np.einsum("p,pia,pib->pab", bw, Nm, Tm, optimize=True)
    pen = np.einsum("p,pia,pib->pab", bw * beta, Nm, Nm, optimize=True)
    kloc = pen - nt - np.transpose(nt, (0, 2, 1))

    trip = _Triplets(K.shape[0])
    trip.add(rows, cols, kloc)
    Kp = (K + trip.matrix()).tocsr()

    Fp = F.copy()
    fl = (np.einsum("p,pia,pi->pa", bw * beta, Nm, ubar, optimize=True)
          - np.einsum("p,pia,pi->pa", bw, Tm, ubar, optimize=True)
          - np.einsum("p,pia,pi->pa", bw, Nm, sig0n, optimize=True))
    np.add.at(Fp, dofs, fl)
    return Kp, Fp


def solve(K, F) -> np.ndarray:
    """Direct symmetric solve; dense Cholesky below the size cutoff.

    Raises when the operator is not positive definite (Nitsche penalty too
    small) or the relative residual exceeds 1e-10.
    """
    K = K.tocsr()
    n = K.shape[0]
    if n <= DENSE_CUTOFF:
        try:
            cf = cho_factor(K.toarray())
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "stiffness not positive definite; increase the Nitsche "
                "penalty beta0 or check boundary conditions") from exc
        d = cho_solve(cf, F)
    else:
        lu = splu(K.tocsc())
        d = lu.solve(F)
    resid = np.linalg.norm(K @ d - F)
    if resid > 1e-10 * max(np.linalg.norm(F), 1.0):
        raise ValueError(f"linear solve residual too large: {resid:.3e}")
    return d


def recover_fields(sol: SolutionField, points, materials: dict,
                   score_field=None, side=None):
    """Displacement, strain (Voigt) and stress at arbitrary points.

    Strains use the provider's direct gradients; stresses subtract the
    eigenstrain of the point's phase. Returns (u, strain, stress, tags).
    """
    pts = np.atleast_2d(points)
    dim = sol.dim
    if score_field is not None:
        svals = score_field.values(pts)
        tags = np.where(svals >= 0.0, 1, -1)
    else:
        tags = np.ones(len(pts), dtype=int)
    if side is None:
        side = tags.astype(float)
    idx, mask, psi, dpsi = sol.provider.evaluate(pts, side=side)
    dloc = sol.coefficients.reshape(-1, dim)[idx]         # (P, K, dim)
    u = np.einsum("pk,pkd->pd", psi, dloc)
    B = _strain_blocks(dpsi, dim)
    strain = np.einsum("pkvd,pkd->pv", B, dloc)
    stress = np.empty_like(strain)
    for t, m in materials.items():
        pick = tags == t
        if pick.any():
            C = material_matrix(m, sol.mode)
            e0 = eigenstrain_vector(m, sol.mode)
            stress[pick] = (strain[pick] - e0) @ C.T
    return u, strain, stress, tags


def recover_cell_strains(sol: SolutionField, cells: SmoothingCellComplex,
                         materials: dict):
    """Smoothed strain and stress per smoothing cell (nodal integration
    view of the solution). Returns (sites, strain, stress, tags)."""
    ids, grads = smoothed_gradients(sol.provider, cells)
    dim = sol.dim
    dmat = sol.coefficients.reshape(-1, dim)
    out_e, out_s = [], []
    tags = np.array([c.tag for c in cells.cells])
    for cids, g, c in zip(ids, grads, cells.cells):
        B = _strain_blocks(g[None], dim)[0]
        e = np.einsum("kvd,kd->v", B, dmat[cids])
        m = materials[c.tag]
        s = material_matrix(m, sol.mode) @ (e - eigenstrain_vector(m, sol.mode))
        out_e.append(e)
        out_s.append(s)
    sites = np.array([c.site for c in cells.cells])
    return sites, np.array(out_e), np.array(out_s), tags


def solve_bvp(quad, provider, materials: dict, bvp: BvpSpec,
              beta0: float = 1e4) -> SolutionField:
    """Assemble, apply boundary conditions, and solve in one call."""
    K, F = assemble(quad, provider, materials, bvp)
    Kp, Fp = apply_dirichlet_nitsche(K, F, quad, provider, materials, bvp,
                                     beta0=beta0)
    d = solve(Kp, Fp)
    return SolutionField(coefficients=d, provider=provider, mode=bvp.mode)
