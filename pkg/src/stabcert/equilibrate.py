"""Vertex-patch equilibrated flux reconstruction and the residual constant rho_h.

For every mesh vertex a the hat function psi_a localizes the discrete residual
into a divergence constraint (a scalar polynomial of degree primal+2 on the
patch) and a target (a vector polynomial of degree primal+1).  The patch
problem minimizes the Afrak^{-1}-weighted distance to the target over
Raviart-Thomas fields of degree primal+2 with continuous normal traces inside
the patch, zero normal trace on the essential part of the patch boundary and
the divergence pinned to the constraint.  Summing the minimizers over all
vertices yields an H(div)-conforming flux with zero normal trace on the
Neumann boundary whose divergence matches the residual load exactly; rho_h is
the largest Afrak^{-1} norm of the resulting residual field over broken fields
normalized by k ||theta||_p = 1.

Normal traces are bookkept against the global edge orientation (ascending
vertex ids), so patch contributions add without per-patch sign tables.  The
flux may leave the domain through the Dirichlet boundary: for a vertex on the
Dirichlet closure the edges through it that lie on the Dirichlet boundary stay
unconstrained and no mean condition is required, while every other vertex gets
the zero-mean multiplier compatible with its divergence data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ._threads import limit_blas_threads
from .fespace import (dubiner_basis, lagrange_basis, gauss_legendre_01,
                      triangle_quadrature)
from .operator import SolveHandle, power_iteration, DENSE_NQ_LIMIT
from .problem import element_weights


class EquilibrationError(Exception):
    """Raised when a patch saddle problem is singular (an internal bug)."""


_BARY_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class _RefTables:
    """Reference-element tables shared across elements for one primal degree."""

    def __init__(self, p, q):
        self.p = p
        self.q = q
        self.r = p + 2
        self.quad_degree = 2 * p + 6
        self.pts, self.w = triangle_quadrature(self.quad_degree)
        self.dub_r = dubiner_basis(self.r)
        self.rvals, self.rgrads = self.dub_r.values_and_grads(self.pts)
        self.dub_flux = dubiner_basis(self.r + 1)
        self.fluxvals = self.dub_flux.values(self.pts)
        self.multvals = self.rvals  # multipliers share the degree-r basis
        self.broken = dubiner_basis(q)
        self.qvals = self.broken.values(self.pts)
        self.lag = lagrange_basis(p)
        self.lvals, self.lgrads = self.lag.values_and_grads(self.pts)
        x, y = self.pts[:, 0], self.pts[:, 1]
        self.bary = np.stack([1.0 - x - y, x, y])
        n_edge = self.r + 1
        self.edge_t, self.edge_w = gauss_legendre_01(n_edge)
        self.legvals = np.polynomial.legendre.legvander(
            2.0 * self.edge_t - 1.0, self.r).T

    @property
    def n_mult(self):
        return self.dub_r.dim

    @property
    def n_flux_modes(self):
        return self.dub_flux.dim


class ElementRTData:
    """Orthonormalized Raviart-Thomas basis and its integrals on one element.

    The raw span is [P_r]^2 (Dubiner components) plus the radial fields
    xi * m_beta(xi) with xi the centered, scaled coordinate; an L2 Cholesky
    orthonormalization keeps all patch matrices well conditioned.
    """

    def __init__(self, mesh, geom, k, ref, a_inv):
        self.element = k
        self.ref = ref
        r = ref.r
        self.n_p = ref.dub_r.dim
        self.n_extra = r + 1
        self.n_raw = 2 * self.n_p + self.n_extra
        det = geom.detJ[k]
        self.sqrt_det = np.sqrt(det)
        self.det = det
        self.scale = self.sqrt_det
        self.center = geom.centroid[k]

        vals, divs = self._primitive(mesh, geom, k, ref.pts,
                                     rvals=ref.rvals, rgrads=ref.rgrads)
        gram = np.einsum("iqa,jqa,q->ij", vals, vals, ref.w) * det
        L = np.linalg.cholesky(gram)
        self.B = sla.solve_triangular(L, np.eye(self.n_raw), lower=True).T
        self.n_rt = self.n_raw
        self.vals = np.einsum("ij,iqa->jqa", self.B, vals)
        self.divs = np.einsum("ij,iq->jq", self.B, divs)

        # Afrak^{-1}-weighted Gram of the orthonormal fields
        self.W = np.einsum("ab,jqb,iqa,q->ij", a_inv, self.vals, self.vals,
                           ref.w) * det

        # expansion in the (orthonormal) degree-(r+1) vector modal basis
        nm = ref.n_flux_modes
        fv = ref.fluxvals / self.sqrt_det
        self.Lam = np.empty((2 * nm, self.n_rt))
        self.Lam[:nm] = np.einsum("mq,jq,q->mj", fv, self.vals[:, :, 0],
                                  ref.w) * det
        self.Lam[nm:] = np.einsum("mq,jq,q->mj", fv, self.vals[:, :, 1],
                                  ref.w) * det

        # divergence against the multiplier basis
        mv = ref.multvals / self.sqrt_det
        self.Dm = np.einsum("mq,jq,q->mj", mv, self.divs, ref.w) * det
        # element integrals of the multiplier basis (for the mean constraint)
        self.mult_integral = (mv * ref.w).sum(1) * det

        # oriented edge-trace moments against Legendre modes
        self.edge_moments = []
        for loc in range(3):
            eid = int(mesh.elem_edges[k, loc])
            va, vb = mesh.edges[eid]
            pa, pb = mesh.vertices[va], mesh.vertices[vb]
            length = np.linalg.norm(pb - pa)
            normal = np.array([pb[1] - pa[1], -(pb[0] - pa[0])]) / length
            epts = pa[None, :] + ref.edge_t[:, None] * (pb - pa)[None, :]
            refpts = geom.reference(k, epts)
            evals, _ = self._primitive(mesh, geom, k, refpts)
            evals = np.einsum("ij,iqa->jqa", self.B, evals)
            tr = evals[:, :, 0] * normal[0] + evals[:, :, 1] * normal[1]
            self.edge_moments.append(
                length * np.einsum("jq,sq,q->js", tr, ref.legvals, ref.edge_w))

    def _primitive(self, mesh, geom, k, refpts, rvals=None, rgrads=None):
        ref = self.ref
        if rvals is None:
            rvals, rgrads = ref.dub_r.values_and_grads(refpts)
        npts = refpts.shape[0]
        n_p, n_extra = self.n_p, self.n_extra
        vals = np.zeros((self.n_raw, npts, 2))
        divs = np.zeros((self.n_raw, npts))
        phys_scalar = rvals / self.sqrt_det
        g = np.einsum("ab,nqb->nqa", geom.invJT[k], rgrads) / self.sqrt_det
        vals[:n_p, :, 0] = phys_scalar
        divs[:n_p] = g[:, :, 0]
        vals[n_p:2 * n_p, :, 1] = phys_scalar
        divs[n_p:2 * n_p] = g[:, :, 1]

        phys = geom.physical(k, refpts)
        xi = (phys - self.center[None, :]) / self.scale
        r = ref.r
        for b in range(n_extra):
            mono = xi[:, 0] ** b * xi[:, 1] ** (r - b)
            vals[2 * n_p + b, :, 0] = xi[:, 0] * mono
            vals[2 * n_p + b, :, 1] = xi[:, 1] * mono
            divs[2 * n_p + b] = (r + 2) / self.scale * mono
        return vals, divs


@dataclass
class PatchData:
    """Divergence constraint and target of one vertex-patch problem.

    ``div_coeffs`` are the multiplier-basis coefficients of the constraint per
    patch element (stacked), ``target_moments`` the raw-basis moments
    (Afrak^{-1} target, v_j) and ``mean_value`` the patch integral of the
    constraint (zero, up to rounding, whenever the mean constraint applies).
    """

    div_coeffs: np.ndarray
    target_moments: np.ndarray
    mean_value: complex


@dataclass
class PatchSolution:
    """Minimizer of one patch problem in the reduced and the raw basis."""

    reduced: np.ndarray
    raw: np.ndarray
    multiplier: np.ndarray
    mean_multiplier: complex


class PatchOperator:
    """Factorized saddle-point system of one vertex patch."""

    def __init__(self, patchset, patch):
        mesh = patchset.mesh
        ref = patchset.ref
        self.patch = patch
        self.elements = patch.elements
        n_el = len(self.elements)
        eldata = [patchset.eldata[k] for k in self.elements]
        n_rt = eldata[0].n_rt
        self.n_rt = n_rt
        self.n_raw = n_el * n_rt
        self.n_mult = n_el * ref.n_mult
        elpos = {int(k): i for i, k in enumerate(self.elements)}

        rows = []
        r1 = ref.r + 1
        for eid in patch.interior_edges:
            k0, k1 = mesh.edge_elements[eid]
            block = np.zeros((r1, self.n_raw))
            for kk, sgn in ((int(k0), 1.0), (int(k1), -1.0)):
                i = elpos[kk]
                loc = int(np.nonzero(mesh.elem_edges[kk] == eid)[0][0])
                block[:, i * n_rt:(i + 1) * n_rt] += \
                    sgn * eldata[i].edge_moments[loc].T
            rows.append(block)
        for eid in patch.solver_essential_edges:
            k0, k1 = mesh.edge_elements[eid]
            kk = int(k0) if int(k0) in elpos else int(k1)
            i = elpos[kk]
            loc = int(np.nonzero(mesh.elem_edges[kk] == eid)[0][0])
            block = np.zeros((r1, self.n_raw))
            block[:, i * n_rt:(i + 1) * n_rt] = eldata[i].edge_moments[loc].T
            rows.append(block)
        if rows:
            Bc = np.vstack(rows)
            norms = np.linalg.norm(Bc, axis=1)
            Bc = Bc / np.where(norms > 0, norms, 1.0)[:, None]
            self.null = sla.null_space(Bc)
        else:
            self.null = np.eye(self.n_raw)
        self.n_sigma = self.null.shape[1]

        Ablocks = sla.block_diag(*[ed.W for ed in eldata])
        A_sigma = self.null.T @ Ablocks @ self.null
        Draw = np.zeros((self.n_mult, self.n_raw))
        evec = np.zeros(self.n_mult)
        for i, ed in enumerate(eldata):
            Draw[i * ref.n_mult:(i + 1) * ref.n_mult,
                 i * n_rt:(i + 1) * n_rt] = ed.Dm
            evec[i * ref.n_mult:(i + 1) * ref.n_mult] = ed.mult_integral
        D = Draw @ self.null
        self.evec = evec
        self.mean_constrained = patch.solver_mean_constraint

        ns = self.n_sigma + self.n_mult + (1 if self.mean_constrained else 0)
        K = np.zeros((ns, ns))
        K[:self.n_sigma, :self.n_sigma] = A_sigma
        K[:self.n_sigma, self.n_sigma:self.n_sigma + self.n_mult] = D.T
        K[self.n_sigma:self.n_sigma + self.n_mult, :self.n_sigma] = D
        if self.mean_constrained:
            K[self.n_sigma:self.n_sigma + self.n_mult, -1] = evec
            K[-1, self.n_sigma:self.n_sigma + self.n_mult] = evec
        self.size = ns
        try:
            self.lu = sla.lu_factor(K)
        except Exception as exc:  # pragma: no cover - indicates a bug
            raise EquilibrationError(
                f"singular patch system at vertex {patch.vertex + 1}: {exc}"
            ) from exc
        if not np.all(np.isfinite(self.lu[0])):
            raise EquilibrationError(
                f"singular patch system at vertex {patch.vertex + 1}")

    def solve_raw(self, rhs):
        """Solve the saddle system for a (possibly complex) right-hand side."""
        if np.iscomplexobj(rhs):
            sol = sla.lu_solve(self.lu, np.ascontiguousarray(rhs.real)) \
                + 1j * sla.lu_solve(self.lu, np.ascontiguousarray(rhs.imag))
        else:
            sol = sla.lu_solve(self.lu, rhs)
        return sol


class PatchOperatorSet:
    """All element flux data, patch factorizations and composed residual maps.

    ``P_u`` and ``P_theta`` map the primal coefficients and the broken
    coefficients into the modal coefficients of the residual field
    adj(A) grad(u_h) - ik conj(c) u_h + flux; ``W`` is the Afrak^{-1} Gram of
    that modal layout ([x-modes; y-modes] per element).
    """

    def __init__(self, system, patches):
        mesh = system.mesh
        spec = system.spec
        self.system = system
        self.mesh = mesh
        self.patches = patches
        self.ref = _RefTables(spec.degree_primal, spec.degree_broken)
        geom = system.geom
        self.geom = geom
        k = spec.k

        ainv = {}
        coefs = {}
        for r, w in spec.weights.items():
            ainv[r] = np.linalg.inv(w.Afrak)
            coefs[r] = spec.coeff(r)
        self.a_inv = ainv

        with limit_blas_threads(1):
            self.eldata = [ElementRTData(mesh, geom, e, self.ref,
                                         ainv[int(mesh.regions[e])])
                           for e in range(mesh.num_elements)]

            ref = self.ref
            nm = ref.n_flux_modes
            self.n_flux_modes = nm
            self.n_res = 2 * nm * mesh.num_elements

            # per-element local matrices entering the patch data
            self._build_local_tables(coefs, k)
            self.patch_ops = [PatchOperator(self, pa) for pa in patches]
            self._compose_residual_maps()

    # -- local integral tables -------------------------------------------

    def _build_local_tables(self, coefs, k):
        mesh, geom, ref = self.mesh, self.geom, self.ref
        ew = element_weights(mesh, self.system.spec)
        self.ew = ew
        w = ref.w
        ne = mesh.num_elements
        nloc = ref.lag.dim
        self.target_u = []     # (3, n_rt, nloc): hat-weighted target moments
        self.divdata_u = []    # (3, n_mult, nloc)
        self.divdata_th = []   # (3, n_mult, n_q)
        self.res_u = []        # (2 nm, nloc): non-flux part of the residual
        nm = ref.n_flux_modes
        for e in range(ne):
            reg = int(mesh.regions[e])
            coef = coefs[reg]
            ainv = self.a_inv[reg]
            det = geom.detJ[e]
            ed = self.eldata[e]
            gp = np.einsum("ab,nqb->nqa", geom.invJT[e], ref.lgrads)
            # field adj(A) grad(L_i) - ik conj(c) L_i at the quad points
            Adag = coef.A.conj().T
            F = np.einsum("ab,nqb->nqa", Adag, gp).astype(complex)
            F -= 1j * k * np.einsum("a,nq->nqa", coef.c.conj(), ref.lvals)
            # scalar k^2 conj(d) L_i + ik conj(b).grad L_i
            S = (k**2) * coef.d.conjugate() * ref.lvals \
                + 1j * k * np.einsum("a,nqa->nq", coef.b.conj(), gp)

            fv = ref.fluxvals / ed.sqrt_det
            resu = np.empty((2 * nm, nloc), dtype=complex)
            resu[:nm] = np.einsum("mq,nq,q->mn", fv, F[:, :, 0], w) * det
            resu[nm:] = np.einsum("mq,nq,q->mn", fv, F[:, :, 1], w) * det
            self.res_u.append(resu)

            mv = ref.multvals / ed.sqrt_det
            qv = ref.qvals / ed.sqrt_det
            tu = np.empty((3, ed.n_rt, nloc), dtype=complex)
            du = np.empty((3, ref.n_mult, nloc), dtype=complex)
            dth = np.empty((3, ref.n_mult, ref.broken.dim))
            AinvF = np.einsum("ab,nqb->nqa", ainv, F)
            for loc in range(3):
                hat = ref.bary[loc]
                tu[loc] = np.einsum("q,jqa,nqa,q->jn", hat, ed.vals, AinvF, w) \
                    * det
                ghat = geom.invJT[e] @ _BARY_GRADS[loc]
                gradterm = np.einsum("a,nqa->nq", ghat.astype(complex), F)
                du[loc] = np.einsum("mq,nq,q->mn", mv, hat * S - gradterm, w) \
                    * det
                dth[loc] = (k**2) * ew.p[e] * np.einsum(
                    "mq,nq,q->mn", mv, hat * qv, w) * det
            self.target_u.append(tu)
            self.divdata_u.append(du)
            self.divdata_th.append(dth)

    # -- patch data and solves ---------------------------------------------

    def _patch_index_maps(self, a):
        """Column maps of patch ``a``: free primal dofs and broken dofs."""
        patch = self.patches[a]
        V, Q = self.system.V, self.system.Q
        ucols, umaps = [], []
        seen = {}
        for k in patch.elements:
            ids = V.elem_free[k]
            local = np.full(ids.shape[0], -1, dtype=np.int64)
            for n, g in enumerate(ids):
                if g < 0:
                    continue
                if g not in seen:
                    seen[g] = len(ucols)
                    ucols.append(int(g))
                local[n] = seen[g]
            umaps.append(local)
        tcols, tmaps = [], []
        for k in patch.elements:
            off = Q.elem_offset[k]
            if off < 0:
                tmaps.append(None)
                continue
            base = len(tcols)
            tcols.extend(range(off, off + Q.nmodes))
            tmaps.append(np.arange(base, base + Q.nmodes))
        return (np.array(ucols, dtype=np.int64), umaps,
                np.array(tcols, dtype=np.int64), tmaps)

    def _patch_rhs_operators(self, a):
        """Matrices mapping (u_loc, theta_loc) to the saddle right-hand side."""
        patch = self.patches[a]
        op = self.patch_ops[a]
        ref = self.ref
        ucols, umaps, tcols, tmaps = self._patch_index_maps(a)
        nu, nt = len(ucols), len(tcols)
        rhs_u = np.zeros((op.size, nu), dtype=complex)
        rhs_t = np.zeros((op.size, nt))
        traw_u = np.zeros((op.n_raw, nu), dtype=complex)
        n_rt = op.n_rt
        for i, k in enumerate(patch.elements):
            loc = int(np.nonzero(self.mesh.elements[k] == patch.vertex)[0][0])
            umap = umaps[i]
            sel = umap >= 0
            cols = umap[sel]
            traw_u[i * n_rt:(i + 1) * n_rt][:, cols] += \
                self.target_u[k][loc][:, sel]
            mrows = slice(op.n_sigma + i * ref.n_mult,
                          op.n_sigma + (i + 1) * ref.n_mult)
            rhs_u[mrows][:, cols] += self.divdata_u[k][loc][:, sel]
            if tmaps[i] is not None:
                rhs_t[mrows][:, tmaps[i]] += self.divdata_th[k][loc]
        rhs_u[:op.n_sigma] = -(op.null.T @ traw_u)
        return ucols, tcols, rhs_u, rhs_t, traw_u

    def patch_data(self, a, theta, u):
        """Divergence constraint and target data of patch ``a``."""
        op = self.patch_ops[a]
        ucols, tcols, rhs_u, rhs_t, traw_u = self._patch_rhs_operators(a)
        u_loc = u[ucols] if len(ucols) else np.zeros(0, dtype=complex)
        t_loc = theta[tcols] if len(tcols) else np.zeros(0, dtype=complex)
        g = rhs_u[op.n_sigma:op.n_sigma + op.n_mult] @ u_loc \
            + rhs_t[op.n_sigma:op.n_sigma + op.n_mult] @ t_loc
        tmom = traw_u @ u_loc
        return PatchData(div_coeffs=g, target_moments=tmom,
                         mean_value=complex(op.evec @ g))

    def solve_patch(self, a, data):
        """Minimizing flux of patch ``a`` for the given data."""
        op = self.patch_ops[a]
        rhs = np.zeros(op.size, dtype=complex)
        rhs[:op.n_sigma] = -(op.null.T @ data.target_moments)
        rhs[op.n_sigma:op.n_sigma + op.n_mult] = data.div_coeffs
        sol = op.solve_raw(rhs)
        y = sol[:op.n_sigma]
        mean_mult = complex(sol[-1]) if op.mean_constrained else 0.0
        return PatchSolution(
            reduced=y,
            raw=op.null @ y,
            multiplier=sol[op.n_sigma:op.n_sigma + op.n_mult],
            mean_multiplier=mean_mult,
        )

    # -- composed linear maps ------------------------------------------------

    def _compose_residual_maps(self):
        mesh = self.mesh
        nm = self.n_flux_modes
        n_res = self.n_res
        V, Q = self.system.V, self.system.Q
        ru, cu, vu = [], [], []
        rt, ct, vt = [], [], []
        self._patch_raw_u = []
        self._patch_raw_t = []
        self._patch_ucols = []
        self._patch_tcols = []
        for a, op in enumerate(self.patch_ops):
            ucols, tcols, rhs_u, rhs_t, _ = self._patch_rhs_operators(a)
            sol_u = op.solve_raw(rhs_u)[:op.n_sigma]
            sol_t = op.solve_raw(rhs_t)[:op.n_sigma]
            raw_u = op.null @ sol_u
            raw_t = op.null @ sol_t
            self._patch_raw_u.append(raw_u)
            self._patch_raw_t.append(raw_t)
            self._patch_ucols.append(ucols)
            self._patch_tcols.append(tcols)
            n_rt = op.n_rt
            for i, k in enumerate(op.elements):
                ed = self.eldata[k]
                block_u = ed.Lam @ raw_u[i * n_rt:(i + 1) * n_rt]
                block_t = ed.Lam @ raw_t[i * n_rt:(i + 1) * n_rt]
                rows = np.arange(2 * nm) + 2 * nm * k
                if len(ucols):
                    ru.append(np.repeat(rows, len(ucols)))
                    cu.append(np.tile(ucols, 2 * nm))
                    vu.append(block_u.ravel())
                if len(tcols):
                    rt.append(np.repeat(rows, len(tcols)))
                    ct.append(np.tile(tcols, 2 * nm))
                    vt.append(block_t.ravel())
        # non-flux residual contribution, once per element
        for k in range(mesh.num_elements):
            ids = V.elem_free[k]
            sel = ids >= 0
            if not sel.any():
                continue
            rows = np.arange(2 * nm) + 2 * nm * k
            ru.append(np.repeat(rows, sel.sum()))
            cu.append(np.tile(ids[sel], 2 * nm))
            vu.append(self.res_u[k][:, sel].ravel())
        self.P_u = sp.coo_matrix(
            (np.concatenate(vu), (np.concatenate(ru), np.concatenate(cu))),
            shape=(n_res, V.n_free)).tocsr()
        if rt:
            self.P_theta = sp.coo_matrix(
                (np.concatenate(vt), (np.concatenate(rt), np.concatenate(ct))),
                shape=(n_res, Q.n_dofs)).tocsr()
        else:
            self.P_theta = sp.csr_matrix((n_res, Q.n_dofs))

        rows, cols, vals = [], [], []
        for k in range(mesh.num_elements):
            ainv = self.a_inv[int(mesh.regions[k])]
            base = 2 * nm * k
            ix = np.arange(nm)
            for aa in range(2):
                for bb in range(2):
                    rows.append(base + aa * nm + ix)
                    cols.append(base + bb * nm + ix)
                    vals.append(np.full(nm, ainv[aa, bb]))
        self.W = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_res, n_res)).tocsr()

    def residual_coefficients(self, theta, u):
        """Modal coefficients of the residual field for one broken field."""
        return self.P_u @ u + self.P_theta @ theta

    def residual_norm(self, coeffs):
        """Afrak^{-1} norm of a residual field given its modal coefficients."""
        return float(np.sqrt(max(np.real(np.vdot(coeffs, self.W @ coeffs)), 0.0)))


@dataclass
class FluxReconstruction:
    """Global equilibrated flux: raw RT coefficients per element."""

    patchset: PatchOperatorSet
    theta: np.ndarray
    u: np.ndarray
    sigma_raw: np.ndarray  # (num_elements, n_rt) complex

    def residual_coefficients(self):
        ps = self.patchset
        nm = ps.n_flux_modes
        out = np.empty(ps.n_res, dtype=complex)
        for k in range(ps.mesh.num_elements):
            out[2 * nm * k:2 * nm * (k + 1)] = \
                ps.eldata[k].Lam @ self.sigma_raw[k]
        return out + sp.csr_matrix.dot(_resu_matrix(ps), self.u)

    def equilibration_residuals(self):
        """Per-element L2 norms of div(sigma) - load and of the load itself."""
        ps = self.patchset
        ref = ps.ref
        mesh, geom = ps.mesh, ps.geom
        spec = ps.system.spec
        k = spec.k
        V, Q = ps.system.V, ps.system.Q
        res = np.empty(mesh.num_elements)
        loads = np.empty(mesh.num_elements)
        w = ref.w
        for e in range(mesh.num_elements):
            ed = ps.eldata[e]
            div_vals = np.einsum("j,jq->q", self.sigma_raw[e], ed.divs)
            coef = spec.coeff(int(mesh.regions[e]))
            u_loc = V.gather(self.u, e)
            uval = np.einsum("n,nq->q", u_loc, ref.lvals)
            gp = np.einsum("ab,nqb->nqa", geom.invJT[e], ref.lgrads)
            ugrad = np.einsum("n,nqa->qa", u_loc, gp)
            load = (k**2) * coef.d.conjugate() * uval \
                + 1j * k * np.einsum("a,qa->q", coef.b.conj(), ugrad)
            off = Q.elem_offset[e]
            if off >= 0:
                tval = np.einsum("n,nq->q", self.theta[off:off + Q.nmodes],
                                 ref.qvals) / ed.sqrt_det
                load = load + (k**2) * ps.ew.p[e] * tval
            det = geom.detJ[e]
            res[e] = np.sqrt(max((w @ np.abs(div_vals - load) ** 2) * det, 0.0))
            loads[e] = np.sqrt(max((w @ np.abs(load) ** 2) * det, 0.0))
        return res, loads

    def normal_jumps(self):
        """Maximal interior normal-trace jump moment and the trace scale."""
        ps = self.patchset
        mesh = ps.mesh
        worst = 0.0
        scale = 1e-300
        for eid in range(mesh.num_edges):
            k0, k1 = mesh.edge_elements[eid]
            if k1 < 0:
                continue
            m0 = _edge_moment(ps, int(k0), eid) @ self.sigma_raw[int(k0)]
            m1 = _edge_moment(ps, int(k1), eid) @ self.sigma_raw[int(k1)]
            worst = max(worst, float(np.abs(m0 - m1).max()))
            scale = max(scale, float(np.abs(m0).max()), float(np.abs(m1).max()))
        return worst, scale

    def neumann_trace(self):
        """Maximal normal-trace moment on the Neumann boundary."""
        ps = self.patchset
        mesh = ps.mesh
        worst = 0.0
        for eid in range(mesh.num_edges):
            if mesh.edge_tags[eid] != "N":
                continue
            k0 = int(mesh.edge_elements[eid, 0])
            m = _edge_moment(ps, k0, eid) @ self.sigma_raw[k0]
            worst = max(worst, float(np.abs(m).max()))
        return worst


def _edge_moment(ps, k, eid):
    loc = int(np.nonzero(ps.mesh.elem_edges[k] == eid)[0][0])
    return ps.eldata[k].edge_moments[loc].T


def _resu_matrix(ps):
    if getattr(ps, "_resu_sparse", None) is None:
        nm = ps.n_flux_modes
        V = ps.system.V
        rows, cols, vals = [], [], []
        for k in range(ps.mesh.num_elements):
            ids = V.elem_free[k]
            sel = ids >= 0
            if not sel.any():
                continue
            r = np.arange(2 * nm) + 2 * nm * k
            rows.append(np.repeat(r, sel.sum()))
            cols.append(np.tile(ids[sel], 2 * nm))
            vals.append(ps.res_u[k][:, sel].ravel())
        ps._resu_sparse = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ps.n_res, V.n_free)).tocsr()
    return ps._resu_sparse


def build_patch_operators(system, patches=None):
    """Element RT data plus factorized patch problems for ``system``."""
    from .mesh import build_patches

    if patches is None:
        patches = build_patches(system.mesh)
    return PatchOperatorSet(system, patches)


def reconstruct_flux(patchset, theta, u=None, handle=None):
    """Equilibrated flux for one broken field: sum of all patch minimizers."""
    theta = np.asarray(theta, dtype=complex)
    if u is None:
        if handle is None:
            handle = SolveHandle(patchset.system)
        u = handle.solve(theta)
    sigma = np.zeros((patchset.mesh.num_elements, patchset.eldata[0].n_rt),
                     dtype=complex)
    for a, op in enumerate(patchset.patch_ops):
        ucols = patchset._patch_ucols[a]
        tcols = patchset._patch_tcols[a]
        raw = np.zeros(op.n_raw, dtype=complex)
        if len(ucols):
            raw += patchset._patch_raw_u[a] @ u[ucols]
        if len(tcols):
            raw += patchset._patch_raw_t[a] @ theta[tcols]
        n_rt = op.n_rt
        for i, k in enumerate(op.elements):
            sigma[k] += raw[i * n_rt:(i + 1) * n_rt]
    return FluxReconstruction(patchset=patchset, theta=theta, u=u,
                              sigma_raw=sigma)


def _dense_rho_pencil_direct(patchset, T):
    """Pencil matrix from element-chunked explicit residual maps."""
    P_u, P_t, W = patchset.P_u, patchset.P_theta, patchset.W
    n_q = T.shape[1]
    block = 2 * patchset.n_flux_modes
    per_chunk = max(1, int(2e7 // max(block * n_q, 1)))
    A = np.zeros((n_q, n_q), dtype=complex)
    ne = patchset.mesh.num_elements
    for e0 in range(0, ne, per_chunk):
        rows = slice(e0 * block, min(e0 + per_chunk, ne) * block)
        Rc = np.asarray(P_u[rows] @ T) + P_t[rows].toarray()
        Wc = W[rows, :][:, rows]
        A += Rc.conj().T @ (Wc @ Rc)
    return 0.5 * (A + A.conj().T)


@dataclass
class RhoResult:
    """Largest residual-field norm over k ||theta||_p = 1."""

    value: float
    raw_value: float
    safety_factor: float
    theta: np.ndarray
    residual: float
    mode: str
    normalization: str = "k*||theta||_p = 1"


def compute_rho(system, patchset, handle=None, safety=1.0 + 1e-6, mode=None,
                power_tol=1e-12):
    """Residual constant: max ||residual field||_{Afrak^{-1}} over
    k ||theta||_p = 1, as the top eigenvalue of the associated Hermitian pencil.
    """
    if handle is None:
        handle = SolveHandle(system)
    n_q = system.Q.n_dofs
    b_diag = (system.spec.k ** 2) * system.mq_p
    if mode is None:
        mode = "dense" if n_q <= DENSE_NQ_LIMIT else "power"
    P_u, P_t, W = patchset.P_u, patchset.P_theta, patchset.W

    if mode == "dense":
        T = handle.dense_T()
        Zuu = (P_u.getH() @ (W @ P_u)).tocsr()
        Zut = (P_u.getH() @ (W @ P_t)).tocsr()
        Ztt = (P_t.getH() @ (W @ P_t)).toarray()
        cross = Zut.getH() @ T
        A = T.conj().T @ (Zuu @ T) + cross + cross.conj().T + Ztt
        A = 0.5 * (A + A.conj().T)
        floor = 1e-10 * max(np.abs(A).max(), 1e-300)
        if np.linalg.eigvalsh(A).max() <= floor:
            # at the cancellation floor of the Gram decomposition: re-form the
            # residual map explicitly so the cancellation happens before the
            # squaring and genuinely tiny rho values resolve
            A = _dense_rho_pencil_direct(patchset, T)
        scale = 1.0 / np.sqrt(b_diag)
        As = A * scale[None, :] * scale[:, None]
        evals, evecs = np.linalg.eigh(As)
        lam = float(evals[-1])
        vec = scale * evecs[:, -1]
        residual = 0.0
    else:
        def apply_a(v):
            r = P_u @ handle.apply_T(v) + P_t @ v
            wr = W @ r
            return handle.apply_T_adjoint(P_u.getH() @ wr) + P_t.getH() @ wr

        lam, vec, residual = power_iteration(apply_a, b_diag, n_q, tol=power_tol)
        if residual > 1e-6:
            raise EquilibrationError(
                f"rho eigen-iteration did not converge (residual {residual:.3e})")
    raw = float(np.sqrt(max(lam, 0.0)))
    return RhoResult(value=raw * safety, raw_value=raw, safety_factor=safety,
                     theta=vec, residual=residual, mode=mode)


def dump_flux(flux, path):
    """Plain-text dump of the flux: per element, modal coefficients by component.

    Ordering: element id, then the x-component coefficients in the orthonormal
    modal basis (ascending degree), then the y-component coefficients.
    """
    ps = flux.patchset
    nm = ps.n_flux_modes
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# flux modal coefficients, {nm} modes per component\n")
        for k in range(ps.mesh.num_elements):
            coeffs = ps.eldata[k].Lam @ flux.sigma_raw[k]
            fh.write(f"element {k + 1}\n")
            for comp, name in ((coeffs[:nm], "x"), (coeffs[nm:], "y")):
                vals = " ".join(f"{z.real!r} {z.imag!r}" for z in comp)
                fh.write(f"{name} {vals}\n")
