"""Certified inf-sup lower bound, reference oracles and efficiency diagnostics.

The certified value is

    gamma_h = (1 - 2 (k h / v)^2 - 2 rho_h) / (1 + 2 theta_h)

with (h, v) the worst-cell diameter/wavespeed pair.  The squared penalty uses
the theorem constant without the 1/pi^2 sharpening that appears in its proof;
the sharper variant is reported as a diagnostic only.  A positive gamma_h
together with a passing Gårding check certifies well-posedness with stability
constant 1/gamma_h in the energy norm.

Reference quantities (discrete inf-sup on refined meshes, continuity constant,
solution-operator bounds, approximation error) are diagnostics and never
influence the certificate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equilibrate import build_patch_operators, compute_rho
from .fespace import assemble, assemble_beta_cross, projection_matrix
from .mesh import build_patches, refine_times
from .operator import SolveHandle, compute_theta, power_iteration
from .problem import garding_check, kfrak, patch_constants, worst_cell

_DENSE_INFSUP_LIMIT = 1200


class CertifyError(Exception):
    """Raised when a pipeline stage fails; the message names the stage."""


@dataclass
class Certificate:
    """Machine-readable certificate; all inputs echoed under conventions."""

    gamma_h: float
    theta_h: float
    rho_h: float
    kh_over_v: float
    garding_margin: float
    verdict: str
    stability_bound: float | None
    conventions: dict
    diagnostics: dict | None = None

    def to_json(self):
        doc = {
            "gamma_h": self.gamma_h,
            "theta_h": self.theta_h,
            "rho_h": self.rho_h,
            "kh_over_v": self.kh_over_v,
            "verdict": self.verdict,
            "stability_bound": self.stability_bound,
            "conventions": dict(self.conventions,
                                garding_margin=self.garding_margin),
        }
        if self.diagnostics is not None:
            doc["diagnostics"] = self.diagnostics
        return _json_17g(doc) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        conv = dict(doc["conventions"])
        margin = conv.pop("garding_margin")
        return cls(
            gamma_h=doc["gamma_h"],
            theta_h=doc["theta_h"],
            rho_h=doc["rho_h"],
            kh_over_v=doc["kh_over_v"],
            garding_margin=margin,
            verdict=doc["verdict"],
            stability_bound=doc["stability_bound"],
            conventions=conv,
            diagnostics=doc.get("diagnostics"),
        )


def _fmt_float(x):
    if not np.isfinite(x):
        raise ValueError(f"non-finite value {x} cannot enter a certificate")
    return format(float(x), ".17g")


def _json_17g(obj, indent=0):
    """Deterministic JSON with floats printed to 17 significant digits."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(str(k))}: {_json_17g(v, indent + 1)}'
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}  {_json_17g(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def gamma_h(theta_h, rho_h, kh_over_v):
    """Certified lower bound (1 - 2 (kh/v)^2 - 2 rho) / (1 + 2 theta)."""
    return (1.0 - 2.0 * kh_over_v**2 - 2.0 * rho_h) / (1.0 + 2.0 * theta_h)


def gamma_h_pi_variant(theta_h, rho_h, kh_over_v):
    """Sharper proof-side variant with the projection constant 1/pi included."""
    return (1.0 - 2.0 * (kh_over_v / np.pi)**2 - 2.0 * rho_h) \
        / (1.0 + 2.0 * theta_h)


@dataclass
class CertificationRun:
    """Certificate plus the assembled objects, for diagnostics and tests."""

    certificate: Certificate
    mesh: object
    spec: object
    system: object
    handle: object
    patches: list
    patchset: object
    theta_result: object
    rho_result: object
    garding: object
    worst: tuple


def run_certification(mesh, spec, safety=1.0 + 1e-6, solver_tol=1e-10,
                      garding_tol=1e-10):
    """Full pipeline: Gårding check, assembly, theta_h, flux, rho_h, gamma_h."""
    stage = "garding_check"
    try:
        garding = garding_check(mesh, spec, tol=garding_tol)
        stage = "worst_cell"
        h_star, v_star = worst_cell(mesh, spec)
        khv = spec.k * h_star / v_star
        stage = "assemble"
        system = assemble(mesh, spec)
        stage = "solve_handle"
        handle = SolveHandle(system, tol=solver_tol)
        stage = "compute_theta"
        theta_res = compute_theta(system, handle, safety=safety)
        stage = "flux_reconstruction"
        patches = build_patches(mesh)
        patchset = build_patch_operators(system, patches)
        stage = "compute_rho"
        rho_res = compute_rho(system, patchset, handle=handle, safety=safety)
    except Exception as exc:
        raise CertifyError(f"stage '{stage}' failed: {exc}") from exc

    value = gamma_h(theta_res.value, rho_res.value, khv)
    certified = value > 0.0 and garding.passed
    conventions = {
        "rho_normalization": "k*||theta||_p = 1",
        "theta_safety_factor": theta_res.safety_factor,
        "rho_safety_factor": rho_res.safety_factor,
        "projection_penalty": "2*(k*h/v)^2, theorem constant without the "
                              "1/pi^2 sharpening",
        "gamma_h_pi_variant": gamma_h_pi_variant(theta_res.value,
                                                 rho_res.value, khv),
        "garding_tol": garding_tol,
        "solver_tol": solver_tol,
        "theta_mode": theta_res.mode,
        "rho_mode": rho_res.mode,
        "inputs": {
            "k": spec.k,
            "degree_primal": spec.degree_primal,
            "degree_broken": spec.degree_broken,
            "num_elements": mesh.num_elements,
            "num_vertices": mesh.num_vertices,
            "num_regions": len(spec.coefficients),
            "h_worst": h_star,
            "wavespeed_worst": v_star,
            "kfrak": kfrak(spec),
            "domain_diameter": mesh.domain_diameter,
        },
    }
    cert = Certificate(
        gamma_h=value,
        theta_h=theta_res.value,
        rho_h=rho_res.value,
        kh_over_v=khv,
        garding_margin=garding.min_margin,
        verdict="certified" if certified else "not-certified",
        stability_bound=(1.0 / value) if certified else None,
        conventions=conventions,
    )
    return CertificationRun(certificate=cert, mesh=mesh, spec=spec,
                            system=system, handle=handle, patches=patches,
                            patchset=patchset, theta_result=theta_res,
                            rho_result=rho_res, garding=garding,
                            worst=(h_star, v_star))


def certify(mesh, spec, **kwargs):
    """Compute the certificate; see :func:`run_certification` for internals."""
    return run_certification(mesh, spec, **kwargs).certificate


def t_coercivity_check(run, samples=100, seed=20240201):
    """Sampled test-function coercivity of beta(u, u + 2 P_h(pi_h u)).

    Draws random fields from the richer space P_{p+2} with the Dirichlet trace
    removed and returns the most negative value of

        [Re beta(u, u + 2 P_h(pi_h u)) - factor * |||u|||^2] / |||u|||^2

    which the certified bound guarantees to be >= 0 up to rounding.
    """
    mesh, spec = run.mesh, run.spec
    sys_e = assemble(mesh, spec, degree=spec.degree_primal + 2)
    Cx = assemble_beta_cross(mesh, spec, sys_e.V, run.system.V)
    Pq = projection_matrix(mesh, sys_e.V, run.system.Q)
    khv = run.certificate.kh_over_v
    factor = 1.0 - 2.0 * khv**2 - 2.0 * run.certificate.rho_h
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(samples):
        u = rng.standard_normal(sys_e.V.n_free) \
            + 1j * rng.standard_normal(sys_e.V.n_free)
        energy = float(np.real(np.vdot(u, sys_e.E @ u)))
        theta = Pq @ u
        x = run.handle.solve(theta)
        lhs = np.real(u @ (sys_e.C @ np.conj(u))
                      + 2.0 * (u @ (Cx @ np.conj(x))))
        worst = min(worst, (lhs - factor * energy) / energy)
    return float(worst)


def _infsup_extremes(C, E, which=("min", "max"), tol=1e-12, maxiter=3000):
    """Smallest/largest generalized singular values of beta in E-geometry.

    Uses that sup over the unit-E sphere of Re beta(u, .) equals the dual
    E-norm of the functional, i.e. the square roots of the extreme
    eigenvalues of (B^H E^{-1} B, E) with B the transposed beta matrix.  The
    sparse path runs pencil power iterations, which converge fast here: the
    extreme singular values of the problems of interest are isolated.
    """
    from .operator import pencil_power_max

    n = C.shape[0]
    B = C.T.tocsr()
    out = {}
    if n <= _DENSE_INFSUP_LIMIT:
        import scipy.linalg as sla

        Ed = E.toarray()
        Bd = B.toarray()
        X = np.linalg.solve(Ed, Bd)
        S = Bd.conj().T @ X
        S = 0.5 * (S + S.conj().T)
        evals = sla.eigh(S, Ed, eigvals_only=True)
        out["min"] = float(np.sqrt(max(evals[0], 0.0)))
        out["max"] = float(np.sqrt(max(evals[-1], 0.0)))
        return out

    lu_e = spla.splu(E.tocsc())
    lu_c = spla.splu(C.tocsc())
    BH = B.conj().T.tocsr()
    E_c = E.astype(complex).tocsr()

    def esolve(v):
        if np.iscomplexobj(v):
            return lu_e.solve(np.ascontiguousarray(v.real)) \
                + 1j * lu_e.solve(np.ascontiguousarray(v.imag))
        return lu_e.solve(v)

    def s_apply(v):
        return BH @ esolve(B @ v)

    def sinv_apply(v):
        # S^{-1} = B^{-1} E B^{-H}; B = C^T so B-solves use the transposed LU
        z = np.conj(lu_c.solve(np.conj(v)))
        return lu_c.solve(E_c @ z, trans="T")

    if "min" in which:
        # gamma_min^{-2} is the top eigenvalue of the pencil (E, S)
        lam, _, _ = pencil_power_max(lambda v: E_c @ v, s_apply, sinv_apply,
                                     n, tol=tol, maxiter=maxiter)
        out["min"] = float(1.0 / np.sqrt(max(lam, 1e-300)))
    if "max" in which:
        # diagnostic only; the top of the continuity spectrum is typically a
        # cluster, where many more iterations buy nothing visible
        lam, _, _ = pencil_power_max(s_apply, lambda v: E_c @ v, esolve,
                                     n, tol=max(tol, 1e-5),
                                     maxiter=min(maxiter, 400))
        out["max"] = float(np.sqrt(max(lam, 0.0)))
    return out


def discrete_infsup_oracle(mesh, spec, refinements=2, degree=None):
    """Discrete inf-sup constant of beta on a uniformly refined mesh.

    This is the reference value the certificate is compared against; it is a
    diagnostic, not a guaranteed quantity.
    """
    fine, _ = refine_times(mesh, refinements)
    system = assemble(fine, spec, degree=degree)
    return _infsup_extremes(system.C, system.E, which=("min",))["min"]


def _prolongation(coarse_sys, fine_sys, ancestor):
    """Nodal interpolation of the coarse space into the nested fine space."""
    mesh_f = fine_sys.mesh
    Vc, Vf = coarse_sys.V, fine_sys.V
    geo_f, geo_c = fine_sys.geom, coarse_sys.geom
    nodes = Vf.basis.nodes
    rows, cols, vals = [], [], []
    done = np.zeros(Vf.n_total, dtype=bool)
    for ef in range(mesh_f.num_elements):
        ec = int(ancestor[ef])
        phys = geo_f.physical(ef, nodes)
        ref_c = geo_c.reference(ec, phys)
        basis_vals = Vc.basis.values(ref_c)  # (nloc_c, n_nodes)
        ids_c = Vc.elem_free[ec]
        for n in range(nodes.shape[0]):
            tot = Vf.elem_dofs[ef, n]
            if done[tot]:
                continue
            done[tot] = True
            rf = Vf.free_index[tot]
            if rf < 0:
                continue
            for m in range(Vc.basis.dim):
                if ids_c[m] < 0:
                    continue
                v = basis_vals[m, n]
                if abs(v) > 1e-14:
                    rows.append(rf)
                    cols.append(ids_c[m])
                    vals.append(v)
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(Vf.n_free, Vc.n_free)).tocsr()


def _coarse_broken_coupling(coarse_sys, fine_sys, ancestor):
    """Matrix k^2 (p phi_i^fine, q_m^coarse) for the nested error pencil."""
    from .fespace import triangle_quadrature

    mesh_f = fine_sys.mesh
    spec = fine_sys.spec
    Q = coarse_sys.Q
    Vf = fine_sys.V
    pts, w = triangle_quadrature(fine_sys.quad_degree)
    Lval = Vf.basis.values(pts)
    ew_f = fine_sys.ew
    rows, cols, vals = [], [], []
    for ef in range(mesh_f.num_elements):
        ec = int(ancestor[ef])
        off = Q.elem_offset[ec]
        if off < 0:
            continue
        phys = fine_sys.geom.physical(ef, pts)
        ref_c = coarse_sys.geom.reference(ec, phys)
        qv = Q.basis.values(ref_c) / np.sqrt(coarse_sys.geom.detJ[ec])
        det = fine_sys.geom.detJ[ef]
        loc = (spec.k ** 2) * ew_f.p[ef] * det * \
            np.einsum("nq,mq,q->nm", Lval, qv, w)
        ids = Vf.elem_free[ef]
        for n in range(Vf.basis.dim):
            if ids[n] < 0:
                continue
            rows.extend([ids[n]] * Q.nmodes)
            cols.extend(range(off, off + Q.nmodes))
            vals.extend(loc[n])
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(Vf.n_free, Q.n_dofs)).tocsr()


@dataclass
class Diagnostics:
    """Reference quantities on refined meshes; never part of the certificate."""

    gamma_ref: float
    epsilon_h: float
    theta_ref: float
    continuity: float
    kfrak: float
    iota_h: float
    efficiency_ratio: float
    gamma_h: float
    refinements: int
    beta_symmetric: bool
    theta_bound_ok: bool
    efficiency_bound_ok: bool | None
    patch_table: list = field(default_factory=list)

    def to_dict(self):
        fin = lambda x: float(x) if np.isfinite(x) else None
        return {
            "gamma_ref": self.gamma_ref,
            "epsilon_h": self.epsilon_h,
            "theta_ref": self.theta_ref,
            "continuity": self.continuity,
            "kfrak": self.kfrak,
            "iota_h": fin(self.iota_h),
            "efficiency_ratio": fin(self.efficiency_ratio),
            "gamma_h": self.gamma_h,
            "refinements": self.refinements,
            "beta_symmetric": self.beta_symmetric,
            "theta_bound_ok": self.theta_bound_ok,
            "efficiency_bound_ok": self.efficiency_bound_ok,
            "note": "diagnostic, not certified",
            "patch_table": self.patch_table,
        }


def efficiency_diagnostics(run, refinements=2, power_tol=1e-6,
                           with_patch_table=True):
    """Reference inf-sup, approximation error and the efficiency factor.

    The continuous quantities are approximated on a ``refinements``-times
    refined mesh: gamma_ref and the continuity constant from the beta pencil
    in E-geometry, the solution bound from the refined singular value problem
    and epsilon_h from the error pencil of the nested solution operators.
    """
    mesh, spec = run.mesh, run.spec
    cert = run.certificate
    fine, ancestor = refine_times(mesh, refinements)
    sys_f = assemble(fine, spec)
    handle_f = SolveHandle(sys_f)

    ext = _infsup_extremes(sys_f.C, sys_f.E)
    gamma_ref, continuity = ext["min"], ext["max"]

    theta_ref = compute_theta(sys_f, handle_f,
                              safety=run.theta_result.safety_factor,
                              power_tol=1e-8, residual_guard=1e-3).value

    Pr = _prolongation(run.system, sys_f, ancestor)
    Gm = _coarse_broken_coupling(run.system, sys_f, ancestor)
    lu_f = handle_f.lu
    GmT = Gm.T.tocsr()
    T_coarse = run.handle

    def d_apply(v):
        fine_part = np.conj(lu_f.solve(Gm @ np.conj(v)))
        return fine_part - Pr @ T_coarse.apply_T(v)

    def d_adjoint(w):
        back = GmT @ np.conj(lu_f.solve(np.conj(w)))
        return back - T_coarse.apply_T_adjoint(Pr.T @ w)

    b_diag = (spec.k ** 2) * run.system.mq_m

    def apply_a(v):
        dv = d_apply(v)
        return d_adjoint(sys_f.E @ dv)

    lam, _, _ = power_iteration(apply_a, b_diag, run.system.Q.n_dofs,
                                tol=power_tol, maxiter=1500)
    epsilon_h = float(np.sqrt(max(lam, 0.0)))

    khv = cert.kh_over_v
    denom = 1.0 - 2.0 * khv**2 - 2.0 * cert.rho_h
    if denom > 0 and theta_ref > 0:
        iota = (1.0 / denom) * (1.0 + (1.0 + 2.0 * epsilon_h)
                                / (2.0 * theta_ref))
    else:
        iota = np.inf
    ratio = gamma_ref / cert.gamma_h if cert.gamma_h > 0 else np.inf

    Csym = run.system.C - run.system.C.T
    rel = spla.norm(Csym) / max(spla.norm(run.system.C), 1e-300)
    symmetric = bool(rel <= 1e-12)
    kf = kfrak(spec)
    theta_ok = bool(cert.theta_h <= theta_ref + epsilon_h
                    + 1e-8 * (1.0 + theta_ref))
    eff_ok = bool(ratio <= 2.0 * kf * iota * 1.05) if symmetric else None

    table = []
    if with_patch_table:
        for pa in run.patches:
            tw, kw = patch_constants(pa, mesh, spec)
            table.append({"vertex": pa.vertex + 1, "h_patch": pa.h_patch,
                          "wavespeed": tw, "contrast": kw})

    diag = Diagnostics(
        gamma_ref=gamma_ref, epsilon_h=epsilon_h, theta_ref=theta_ref,
        continuity=continuity, kfrak=kf, iota_h=float(iota),
        efficiency_ratio=float(ratio), gamma_h=cert.gamma_h,
        refinements=refinements, beta_symmetric=symmetric,
        theta_bound_ok=theta_ok, efficiency_bound_ok=eff_ok,
        patch_table=table,
    )
    return diag
