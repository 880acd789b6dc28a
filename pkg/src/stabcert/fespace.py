"""Finite element bases, exact quadrature and assembly of the global matrices.

Scalar modal bases are Dubiner (Koornwinder) polynomials, orthonormal on the
reference triangle; on a physical element the affine pullback divided by
sqrt(det J) is orthonormal in L2, which keeps every broken Gram matrix exactly
diagonal.  Lagrange bases use the uniform lattice and are evaluated through
the modal basis, so all point evaluations stay well conditioned up to the
supported degrees.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import eval_jacobi

from .mesh import DIRICHLET
from .problem import element_weights

_CHUNK = 512


# -- quadrature -------------------------------------------------------------

def gauss_legendre_01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_quadrature(degree):
    """Collapsed Gauss rule on the reference triangle, exact to ``degree``."""
    n = (degree + 3) // 2  # ceil((degree + 2) / 2)
    u, wu = gauss_legendre_01(n)
    v, wv = gauss_legendre_01(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel()
    return np.column_stack([x, y]), w


# -- scaled Legendre and Dubiner basis ---------------------------------------

def _scaled_legendre(imax, u, t):
    """P~_i(u, t) = t^i P_i(u/t) and its partial derivatives, for i <= imax."""
    shape = np.broadcast(u, t).shape
    P = np.zeros((imax + 1,) + shape)
    Q = np.zeros_like(P)
    R = np.zeros_like(P)
    P[0] = 1.0
    if imax >= 1:
        P[1] = u
        Q[1] = 1.0
    for n in range(1, imax):
        a, b = (2 * n + 1) / (n + 1), n / (n + 1)
        P[n + 1] = a * u * P[n] - b * t * t * P[n - 1]
        Q[n + 1] = a * (P[n] + u * Q[n]) - b * t * t * Q[n - 1]
        R[n + 1] = a * u * R[n] - b * (2 * t * P[n - 1] + t * t * R[n - 1])
    return P, Q, R


def modal_dimension(degree):
    return (degree + 1) * (degree + 2) // 2


@lru_cache(maxsize=None)
def dubiner_basis(degree):
    return DubinerBasis(degree)


class DubinerBasis:
    """Orthonormal modal basis of P_degree on the reference triangle."""

    def __init__(self, degree):
        self.degree = degree
        self.modes = [(i, total - i) for total in range(degree + 1)
                      for i in range(total + 1)]
        self.dim = len(self.modes)
        self.norms = np.ones(self.dim)
        pts, w = triangle_quadrature(2 * degree)
        raw = self._values_raw(pts)
        self.norms = 1.0 / np.sqrt((raw * raw) @ w)

    def _values_raw(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        u, t, s = 2 * x + y - 1, 1 - y, 2 * y - 1
        P, _, _ = _scaled_legendre(self.degree, u, t)
        vals = np.empty((self.dim, pts.shape[0]))
        for m, (i, j) in enumerate(self.modes):
            vals[m] = P[i] * eval_jacobi(j, 2 * i + 1, 0, s)
        return vals

    def values(self, pts):
        """Basis values, shape (dim, npts)."""
        return self._values_raw(pts) * self.norms[:, None]

    def values_and_grads(self, pts):
        """Values (dim, npts) and reference gradients (dim, npts, 2)."""
        x, y = pts[:, 0], pts[:, 1]
        u, t, s = 2 * x + y - 1, 1 - y, 2 * y - 1
        P, Q, R = _scaled_legendre(self.degree, u, t)
        vals = np.empty((self.dim, pts.shape[0]))
        grads = np.empty((self.dim, pts.shape[0], 2))
        for m, (i, j) in enumerate(self.modes):
            J = eval_jacobi(j, 2 * i + 1, 0, s)
            dJ = (j + 2 * i + 2) * eval_jacobi(j - 1, 2 * i + 2, 1, s) if j else 0.0
            c = self.norms[m]
            vals[m] = c * P[i] * J
            grads[m, :, 0] = c * 2.0 * Q[i] * J
            grads[m, :, 1] = c * ((Q[i] - R[i]) * J + P[i] * dJ)
        return vals, grads


# -- Lagrange basis on the uniform lattice ------------------------------------

def lagrange_nodes(degree):
    """Uniform lattice nodes of the reference triangle plus their classification.

    Returns (nodes, kinds) where kinds[n] is ("vertex", v), ("edge", e, s) with
    s = 1..degree-1 counted from the first vertex of local edge e, or
    ("interior", t).
    """
    p = degree
    nodes, kinds = [], []
    n_int = 0
    for j in range(p + 1):
        for i in range(p + 1 - j):
            nodes.append((i / p, j / p))
            if i == 0 and j == 0:
                kinds.append(("vertex", 0))
            elif i == p and j == 0:
                kinds.append(("vertex", 1))
            elif i == 0 and j == p:
                kinds.append(("vertex", 2))
            elif j == 0:
                kinds.append(("edge", 0, i))
            elif i + j == p:
                kinds.append(("edge", 1, j))
            elif i == 0:
                kinds.append(("edge", 2, p - j))
            else:
                kinds.append(("interior", n_int))
                n_int += 1
    return np.array(nodes), kinds


@lru_cache(maxsize=None)
def lagrange_basis(degree):
    return LagrangeBasis(degree)


class LagrangeBasis:
    """Nodal basis of P_degree at the uniform lattice of the reference triangle."""

    def __init__(self, degree):
        self.degree = degree
        self.nodes, self.kinds = lagrange_nodes(degree)
        self.dim = self.nodes.shape[0]
        dub = dubiner_basis(degree)
        V = dub.values(self.nodes)  # (modes, nodes)
        self._coef = np.linalg.inv(V.T)  # (modes, nodes): L_n = sum_m coef[m,n] phi_m
        self._dub = dub

    def values(self, pts):
        return self._coef.T @ self._dub.values(pts)

    def values_and_grads(self, pts):
        vals, grads = self._dub.values_and_grads(pts)
        return self._coef.T @ vals, np.einsum("mn,mqa->nqa", self._coef, grads)


# -- element geometry ---------------------------------------------------------

class ElementMaps:
    """Affine maps of all elements: x = v0 + J xhat."""

    def __init__(self, mesh):
        pts = mesh.vertices
        tri = mesh.elements
        self.v0 = pts[tri[:, 0]]
        J = np.empty((mesh.num_elements, 2, 2))
        J[:, :, 0] = pts[tri[:, 1]] - pts[tri[:, 0]]
        J[:, :, 1] = pts[tri[:, 2]] - pts[tri[:, 0]]
        self.J = J
        self.detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1]
        inv[:, 0, 1] = -J[:, 0, 1]
        inv[:, 1, 0] = -J[:, 1, 0]
        inv[:, 1, 1] = J[:, 0, 0]
        inv /= self.detJ[:, None, None]
        self.invJ = inv
        self.invJT = np.transpose(inv, (0, 2, 1))
        self.centroid = (pts[tri[:, 0]] + pts[tri[:, 1]] + pts[tri[:, 2]]) / 3.0

    def physical(self, k, refpts):
        return self.v0[k][None, :] + refpts @ self.J[k].T

    def reference(self, k, pts):
        return (pts - self.v0[k][None, :]) @ self.invJ[k].T


# -- function spaces -----------------------------------------------------------

class LagrangeSpace:
    """Continuous P_degree space with the Dirichlet trace eliminated.

    ``elem_dofs`` holds global ids over all nodes; ``elem_free`` the free ids
    with -1 at constrained (Dirichlet) positions; ``n_free`` the dimension.
    """

    def __init__(self, mesh, degree, constrain_dirichlet=True):
        self.mesh = mesh
        self.degree = degree
        self.basis = lagrange_basis(degree)
        p = degree
        nv, nedge, ne = mesh.num_vertices, mesh.num_edges, mesh.num_elements
        n_edge_dofs = p - 1
        n_int = (p - 1) * (p - 2) // 2
        self.n_total = nv + nedge * n_edge_dofs + ne * n_int

        elem_dofs = np.empty((ne, self.basis.dim), dtype=np.int64)
        for n, kind in enumerate(self.basis.kinds):
            if kind[0] == "vertex":
                elem_dofs[:, n] = mesh.elements[:, kind[1]]
            elif kind[0] == "edge":
                loc, s = kind[1], kind[2]
                eid = mesh.elem_edges[:, loc]
                first = mesh.elements[:, loc]
                ascending = first == mesh.edges[eid, 0]
                s_glob = np.where(ascending, s, p - s)
                elem_dofs[:, n] = nv + eid * n_edge_dofs + (s_glob - 1)
            else:
                elem_dofs[:, n] = nv + nedge * n_edge_dofs + \
                    np.arange(ne) * n_int + kind[1]
        self.elem_dofs = elem_dofs

        constrained = np.zeros(self.n_total, dtype=bool)
        if constrain_dirichlet:
            for eid in range(nedge):
                if mesh.edge_tags[eid] == DIRICHLET:
                    a, b = mesh.edges[eid]
                    constrained[a] = constrained[b] = True
                    base = nv + eid * n_edge_dofs
                    constrained[base:base + n_edge_dofs] = True
        self.constrained = constrained
        self.free_index = -np.ones(self.n_total, dtype=np.int64)
        self.free_index[~constrained] = np.arange((~constrained).sum())
        self.n_free = int((~constrained).sum())
        self.elem_free = self.free_index[elem_dofs]

    def gather(self, coeffs, k):
        """Local coefficient vector of element ``k`` (zeros on Dirichlet dofs)."""
        out = np.zeros(self.basis.dim, dtype=coeffs.dtype)
        ids = self.elem_free[k]
        mask = ids >= 0
        out[mask] = coeffs[ids[mask]]
        return out


class BrokenSpace:
    """Discontinuous P_degree space carried only on the active elements."""

    def __init__(self, mesh, degree, active=None):
        self.mesh = mesh
        self.degree = degree
        self.basis = dubiner_basis(degree)
        self.nmodes = self.basis.dim
        if active is None:
            active = np.ones(mesh.num_elements, dtype=bool)
        self.active = np.asarray(active, dtype=bool)
        self.elem_offset = -np.ones(mesh.num_elements, dtype=np.int64)
        ids = np.nonzero(self.active)[0]
        self.active_elements = ids
        self.elem_offset[ids] = np.arange(ids.size) * self.nmodes
        self.n_dofs = ids.size * self.nmodes

    def element_slice(self, k):
        off = self.elem_offset[k]
        if off < 0:
            return None
        return slice(off, off + self.nmodes)


# -- assembled system -----------------------------------------------------------

@dataclass
class FeSystem:
    """Global matrices of one discretization.

    ``C[i, j] = beta(phi_i, phi_j)`` with the first index in the linear slot,
    ``E = k^2 M_m + K_A`` the energy Gram, ``G[i, m] = k^2 (p phi_i, q_m)`` the
    coupling with the broken space, and ``mq_m`` / ``mq_p`` the (diagonal)
    broken Gram entries for the weights m and p.
    """

    mesh: object
    spec: object
    V: LagrangeSpace
    Q: BrokenSpace
    C: sp.csr_matrix
    Mm: sp.csr_matrix
    Mp: sp.csr_matrix
    Ka: sp.csr_matrix
    E: sp.csr_matrix
    G: sp.csr_matrix
    mq_m: np.ndarray
    mq_p: np.ndarray
    ew: object
    geom: ElementMaps
    quad_degree: int

    def energy_norm(self, x):
        return float(np.sqrt(max(np.real(np.vdot(x, self.E @ x)), 0.0)))

    def theta_m_norm(self, theta):
        return float(np.sqrt(np.real(np.vdot(theta, self.mq_m * theta))))

    def theta_p_norm(self, theta):
        return float(np.sqrt(np.real(np.vdot(theta, self.mq_p * theta))))


def _region_arrays(mesh, spec):
    ne = mesh.num_elements
    A = np.empty((ne, 2, 2), dtype=complex)
    b = np.empty((ne, 2), dtype=complex)
    c = np.empty((ne, 2), dtype=complex)
    d = np.empty(ne, dtype=complex)
    Af = np.empty((ne, 2, 2))
    for r in spec.coefficients:
        sel = mesh.regions == r
        coef, w = spec.coeff(r), spec.weight(r)
        A[sel] = coef.A
        b[sel] = coef.b
        c[sel] = coef.c
        d[sel] = coef.d
        Af[sel] = w.Afrak
    return A, b, c, d, Af


def _scatter(rows, cols, vals, nrow, ncol, dtype):
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(nrow, ncol), dtype=dtype)
    return mat.tocsr()


def assemble(mesh, spec, degree=None, quad_degree=None):
    """Assemble the full :class:`FeSystem` for ``mesh`` and ``spec``.

    ``degree`` overrides the primal degree (used for the enriched test space);
    quadrature is exact for every polynomial integrand that appears.
    """
    p = spec.degree_primal if degree is None else degree
    qdeg = quad_degree if quad_degree is not None else 2 * p + 6
    k = spec.k
    V = LagrangeSpace(mesh, p)
    ew = element_weights(mesh, spec)
    Q = BrokenSpace(mesh, spec.degree_broken, active=ew.active)
    geom = ElementMaps(mesh)
    pts, w = triangle_quadrature(qdeg)
    Lval, Lgrad = V.basis.values_and_grads(pts)
    Qval = Q.basis.values(pts)
    A_e, b_e, c_e, d_e, Af_e = _region_arrays(mesh, spec)
    m_e, p_e = ew.m, ew.p

    Mref = np.einsum("nq,mq,q->nm", Lval, Lval, w)
    GQref = np.einsum("nq,mq,q->nm", Lval, Qval, w)

    nloc = V.basis.dim
    ne = mesh.num_elements
    rC, cC, vC = [], [], []
    vMm, vMp, vKa = [], [], []
    rG, cG, vG = [], [], []

    for start in range(0, ne, _CHUNK):
        sl = slice(start, min(start + _CHUNK, ne))
        det = geom.detJ[sl]
        gp = np.einsum("eab,nqb->enqa", geom.invJT[sl], Lgrad)

        Cloc = (-(k**2)) * d_e[sl][:, None, None] * Mref[None, :, :] \
            * det[:, None, None]
        cg = np.einsum("ea,enqa->enq", c_e[sl], gp)
        Cloc = Cloc + 1j * k * np.einsum("enq,mq,q->enm", cg, Lval, w) \
            * det[:, None, None]
        bg = np.einsum("ea,emqa->emq", b_e[sl], gp)
        Cloc = Cloc + 1j * k * np.einsum("nq,emq,q->enm", Lval, bg, w) \
            * det[:, None, None]
        Cloc = Cloc + np.einsum("eab,enqb,emqa,q->enm", A_e[sl], gp, gp, w) \
            * det[:, None, None]

        Mm_loc = m_e[sl][:, None, None] * Mref[None] * det[:, None, None]
        Mp_loc = p_e[sl][:, None, None] * Mref[None] * det[:, None, None]
        Ka_loc = np.einsum("eab,enqb,emqa,q->enm", Af_e[sl], gp, gp, w) \
            * det[:, None, None]

        ids = V.elem_free[sl]
        rows = np.repeat(ids, nloc, axis=1).ravel()
        cols = np.tile(ids, (1, nloc)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        rC.append(rows[keep])
        cC.append(cols[keep])
        vC.append(Cloc.reshape(len(det), -1).ravel()[keep])
        vMm.append(Mm_loc.reshape(len(det), -1).ravel()[keep])
        vMp.append(Mp_loc.reshape(len(det), -1).ravel()[keep])
        vKa.append(Ka_loc.reshape(len(det), -1).ravel()[keep])

        for e_local, e in enumerate(range(sl.start, sl.stop)):
            off = Q.elem_offset[e]
            if off < 0:
                continue
            gq = (k**2) * p_e[e] * np.sqrt(det[e_local]) * GQref
            idr = ids[e_local]
            for n in range(nloc):
                if idr[n] < 0:
                    continue
                rG.extend([idr[n]] * Q.nmodes)
                cG.extend(range(off, off + Q.nmodes))
                vG.extend(gq[n])

    rows = np.concatenate(rC)
    cols = np.concatenate(cC)
    C = _scatter(rows, cols, np.concatenate(vC), V.n_free, V.n_free, complex)
    Mm = _scatter(rows, cols, np.concatenate(vMm), V.n_free, V.n_free, float)
    Mp = _scatter(rows, cols, np.concatenate(vMp), V.n_free, V.n_free, float)
    Ka = _scatter(rows, cols, np.concatenate(vKa), V.n_free, V.n_free, float)
    E = ((k**2) * Mm + Ka).tocsr()
    G = _scatter(np.array(rG, dtype=np.int64), np.array(cG, dtype=np.int64),
                 np.array(vG), V.n_free, Q.n_dofs, float)

    act = Q.active_elements
    mq_m = np.repeat(m_e[act], Q.nmodes)
    mq_p = np.repeat(p_e[act], Q.nmodes)
    return FeSystem(mesh=mesh, spec=spec, V=V, Q=Q, C=C, Mm=Mm, Mp=Mp, Ka=Ka,
                    E=E, G=G, mq_m=mq_m, mq_p=mq_p, ew=ew, geom=geom,
                    quad_degree=qdeg)


def assemble_beta_cross(mesh, spec, row_space, col_space, quad_degree=None):
    """Rectangular matrix B[i, j] = beta(w_i, v_j) for two Lagrange spaces."""
    qdeg = quad_degree if quad_degree is not None else \
        2 * max(row_space.degree, col_space.degree) + 6
    k = spec.k
    geom = ElementMaps(mesh)
    pts, w = triangle_quadrature(qdeg)
    Rval, Rgrad = row_space.basis.values_and_grads(pts)
    Cval, Cgrad = col_space.basis.values_and_grads(pts)
    A_e, b_e, c_e, d_e, _ = _region_arrays(mesh, spec)
    ne = mesh.num_elements
    rr, cc, vv = [], [], []
    for start in range(0, ne, _CHUNK):
        sl = slice(start, min(start + _CHUNK, ne))
        det = geom.detJ[sl]
        gr = np.einsum("eab,nqb->enqa", geom.invJT[sl], Rgrad)
        gc = np.einsum("eab,mqb->emqa", geom.invJT[sl], Cgrad)
        loc = (-(k**2)) * d_e[sl][:, None, None] \
            * np.einsum("nq,mq,q->nm", Rval, Cval, w)[None] \
            * det[:, None, None]
        cg = np.einsum("ea,enqa->enq", c_e[sl], gr)
        loc = loc + 1j * k * np.einsum("enq,mq,q->enm", cg, Cval, w) \
            * det[:, None, None]
        bg = np.einsum("ea,emqa->emq", b_e[sl], gc)
        loc = loc + 1j * k * np.einsum("nq,emq,q->enm", Rval, bg, w) \
            * det[:, None, None]
        loc = loc + np.einsum("eab,enqb,emqa,q->enm", A_e[sl], gr, gc, w) \
            * det[:, None, None]
        idr = row_space.elem_free[sl]
        idc = col_space.elem_free[sl]
        rows = np.repeat(idr, col_space.basis.dim, axis=1).ravel()
        cols = np.tile(idc, (1, row_space.basis.dim)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        rr.append(rows[keep])
        cc.append(cols[keep])
        vv.append(loc.reshape(len(det), -1).ravel()[keep])
    return _scatter(np.concatenate(rr), np.concatenate(cc), np.concatenate(vv),
                    row_space.n_free, col_space.n_free, complex)


def assemble_beta_adjoint(mesh, spec, degree=None, quad_degree=None):
    """Assemble the beta matrix from the conjugated (adjoint) rearrangement.

    Independent code path used to validate slot and conjugation conventions:
    beta(u, v) = (u, -k^2 conj(d) v - ik conj(b) . grad v)
               + (grad u, adj(A) grad v - ik conj(c) v).
    """
    p = spec.degree_primal if degree is None else degree
    qdeg = quad_degree if quad_degree is not None else 2 * p + 6
    k = spec.k
    V = LagrangeSpace(mesh, p)
    geom = ElementMaps(mesh)
    pts, w = triangle_quadrature(qdeg)
    Lval, Lgrad = V.basis.values_and_grads(pts)
    A_e, b_e, c_e, d_e, _ = _region_arrays(mesh, spec)
    ne = mesh.num_elements
    nloc = V.basis.dim
    rr, cc, vv = [], [], []
    for start in range(0, ne, _CHUNK):
        sl = slice(start, min(start + _CHUNK, ne))
        det = geom.detJ[sl]
        gp = np.einsum("eab,nqb->enqa", geom.invJT[sl], Lgrad)
        # (u, -k^2 d_dag v): integrand u * conj(-k^2 d_dag) v = -k^2 d u v
        loc = (-(k**2)) * d_e[sl][:, None, None] \
            * np.einsum("nq,mq,q->nm", Lval, Lval, w)[None] * det[:, None, None]
        # (u, -ik b_dag . grad v): u * conj(-ik b_dag).grad v = ik u b.grad v
        bg = np.einsum("ea,emqa->emq", b_e[sl], gp)
        loc = loc + 1j * k * np.einsum("nq,emq,q->enm", Lval, bg, w) \
            * det[:, None, None]
        # (grad u, A_dag grad v): grad u . conj(A_dag) grad v = (A grad u).grad v
        loc = loc + np.einsum("eab,enqb,emqa,q->enm", A_e[sl], gp, gp, w) \
            * det[:, None, None]
        # (grad u, -ik c_dag v): grad u . (ik c v) = ik (c.grad u) v
        cg = np.einsum("ea,enqa->enq", c_e[sl], gp)
        loc = loc + 1j * k * np.einsum("enq,mq,q->enm", cg, Lval, w) \
            * det[:, None, None]
        ids = V.elem_free[sl]
        rows = np.repeat(ids, nloc, axis=1).ravel()
        cols = np.tile(ids, (1, nloc)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        rr.append(rows[keep])
        cc.append(cols[keep])
        vv.append(loc.reshape(len(det), -1).ravel()[keep])
    return _scatter(np.concatenate(rr), np.concatenate(cc), np.concatenate(vv),
                    V.n_free, V.n_free, complex)


def assemble_pmass_cross(mesh, spec, row_space, broken, quad_degree=None):
    """Matrix P[i, m] = k^2 (p w_i, q_m) coupling a Lagrange and a broken space."""
    qdeg = quad_degree if quad_degree is not None else \
        2 * (row_space.degree + broken.degree) + 4
    geom = ElementMaps(mesh)
    ew = element_weights(mesh, spec)
    pts, w = triangle_quadrature(qdeg)
    Lval = row_space.basis.values(pts)
    Qval = broken.basis.values(pts)
    ref = np.einsum("nq,mq,q->nm", Lval, Qval, w)
    rr, cc, vv = [], [], []
    for e in broken.active_elements:
        off = broken.elem_offset[e]
        loc = (spec.k ** 2) * ew.p[e] * np.sqrt(geom.detJ[e]) * ref
        ids = row_space.elem_free[e]
        for n in range(row_space.basis.dim):
            if ids[n] < 0:
                continue
            rr.extend([ids[n]] * broken.nmodes)
            cc.extend(range(off, off + broken.nmodes))
            vv.extend(loc[n])
    return _scatter(np.array(rr, dtype=np.int64), np.array(cc, dtype=np.int64),
                    np.array(vv), row_space.n_free, broken.n_dofs, float)


def projection_matrix(mesh, row_space, broken, quad_degree=None):
    """Matrix P with (pi_h u)_m = (P u)_m = (u, q_m)_K for u in ``row_space``."""
    qdeg = quad_degree if quad_degree is not None else \
        2 * (row_space.degree + broken.degree) + 4
    geom = ElementMaps(mesh)
    pts, w = triangle_quadrature(qdeg)
    Lval = row_space.basis.values(pts)
    Qval = broken.basis.values(pts)
    ref = np.einsum("mq,nq,q->mn", Qval, Lval, w)
    rr, cc, vv = [], [], []
    for e in broken.active_elements:
        off = broken.elem_offset[e]
        loc = np.sqrt(geom.detJ[e]) * ref
        ids = row_space.elem_free[e]
        for m in range(broken.nmodes):
            for n in range(row_space.basis.dim):
                if ids[n] < 0:
                    continue
                rr.append(off + m)
                cc.append(ids[n])
                vv.append(loc[m, n])
    return _scatter(np.array(rr, dtype=np.int64), np.array(cc, dtype=np.int64),
                    np.array(vv), broken.n_dofs, row_space.n_free, float)


def project_pi_h(mesh, broken, u, quad_degree=20):
    """Elementwise L2 projection of a callable onto the broken space.

    ``u`` maps an (n, 2) array of physical points to values.  For degree 0 the
    result holds the element means (scaled by the orthonormal constant mode).
    """
    geom = ElementMaps(mesh)
    pts, w = triangle_quadrature(quad_degree)
    Qval = broken.basis.values(pts)
    theta = np.zeros(broken.n_dofs, dtype=complex)
    for e in broken.active_elements:
        xy = geom.physical(e, pts)
        vals = np.asarray(u(xy))
        off = broken.elem_offset[e]
        theta[off:off + broken.nmodes] = np.sqrt(geom.detJ[e]) * (Qval * w) @ vals
    return theta


def evaluate_broken(mesh, broken, theta, element, refpts):
    """Values of a broken-space field on one element at reference points."""
    off = broken.elem_offset[element]
    if off < 0:
        return np.zeros(refpts.shape[0], dtype=complex)
    geom = ElementMaps(mesh)
    vals = broken.basis.values(refpts)
    coef = theta[off:off + broken.nmodes]
    return (coef[:, None] * vals).sum(0) / np.sqrt(geom.detJ[element])


def verify_poincare_sample(mesh, element, u, grad_u, quad_degree=20):
    """Ratio ||u - mean(u)||_K / ((h_K / pi) ||grad u||_K) for a smooth sample.

    The elementwise Poincare inequality guarantees the ratio is at most 1 for
    the degree-0 projection; constants return 0.
    """
    from .mesh import shape_data

    geom = ElementMaps(mesh)
    geo = shape_data(mesh)
    pts, w = triangle_quadrature(quad_degree)
    xy = geom.physical(element, pts)
    vals = np.asarray(u(xy), dtype=complex)
    grads = np.asarray(grad_u(xy), dtype=complex)
    det = geom.detJ[element]
    area = det * w.sum()
    mean = det * (w @ vals) / area
    num = np.sqrt(max((w @ np.abs(vals - mean) ** 2) * det, 0.0).real)
    den = np.sqrt(max((w @ (np.abs(grads) ** 2).sum(1)) * det, 0.0).real)
    if den == 0.0:
        return 0.0
    return float(num / ((geo.h[element] / np.pi) * den))
