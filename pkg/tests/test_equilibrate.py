import numpy as np
import pytest
import scipy.linalg as sla

from stabcert import mesh as msh
from stabcert.equilibrate import (build_patch_operators, compute_rho,
                                  dump_flux, reconstruct_flux)
from stabcert.fespace import assemble, LagrangeSpace, assemble_beta_cross, \
    assemble_pmass_cross
from stabcert.operator import SolveHandle
from stabcert.problem import (GardingWeights, ProblemSpec, RegionCoefficients)

from conftest import helmholtz_spec


def random_theta(system, rng):
    n = system.Q.n_dofs
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def test_zero_data_zero_flux(ctx):
    c = ctx(2, 1)
    theta = np.zeros(c.system.Q.n_dofs, dtype=complex)
    u = c.handle.solve(theta)
    for a in range(len(c.patchset.patches)):
        data = c.patchset.patch_data(a, theta, u)
        assert np.abs(data.div_coeffs).max() == 0.0
        assert np.abs(data.target_moments).max() == 0.0
        sol = c.patchset.solve_patch(a, data)
        assert np.abs(sol.raw).max() == 0.0
    flux = reconstruct_flux(c.patchset, theta, u=u)
    assert np.abs(flux.sigma_raw).max() == 0.0


def test_partition_of_unity(ctx, rng):
    """Summing the patch data over the three vertices of an element recovers
    the full load and target (hat functions sum to one, gradients to zero)."""
    c = ctx(2, 2)
    ps = c.patchset
    theta = random_theta(c.system, rng)
    u = c.handle.solve(theta)
    mesh = c.mesh
    div_sum = {e: None for e in range(mesh.num_elements)}
    tgt_sum = {e: None for e in range(mesh.num_elements)}
    for a, pa in enumerate(ps.patches):
        data = ps.patch_data(a, theta, u)
        n_mult = ps.ref.n_mult
        n_rt = ps.patch_ops[a].n_rt
        for i, e in enumerate(pa.elements):
            dpart = data.div_coeffs[i * n_mult:(i + 1) * n_mult]
            tpart = data.target_moments[i * n_rt:(i + 1) * n_rt]
            div_sum[e] = dpart if div_sum[e] is None else div_sum[e] + dpart
            tgt_sum[e] = tpart if tgt_sum[e] is None else tgt_sum[e] + tpart

    # independent evaluation of the load and target moments per element
    ref = ps.ref
    k = c.spec.k
    coef = c.spec.coeff(1)
    for e in range(mesh.num_elements):
        ed = ps.eldata[e]
        det = c.system.geom.detJ[e]
        u_loc = c.system.V.gather(u, e)
        uval = np.einsum("n,nq->q", u_loc, ref.lvals)
        gp = np.einsum("ab,nqb->nqa", c.system.geom.invJT[e], ref.lgrads)
        ugrad = np.einsum("n,nqa->qa", u_loc, gp)
        off = c.system.Q.elem_offset[e]
        tval = np.einsum("n,nq->q", theta[off:off + c.system.Q.nmodes],
                         ref.qvals) / ed.sqrt_det
        load = (k**2) * 1.0 * tval + (k**2) * np.conj(coef.d) * uval \
            + 1j * k * np.einsum("a,qa->q", np.conj(coef.b), ugrad)
        mv = ref.multvals / ed.sqrt_det
        dref = det * np.einsum("mq,q,q->m", mv, load, ref.w)
        assert np.abs(div_sum[e] - dref).max() <= 1e-11 * (1 + np.abs(dref).max())

        field = np.einsum("ab,qb->qa", coef.A.conj().T, ugrad) \
            - 1j * k * np.outer(uval, np.conj(coef.c))
        ainv = ps.a_inv[1]
        afield = np.einsum("ab,qb->qa", ainv, field)
        tref = det * np.einsum("jqa,qa,q->j", ed.vals, afield, ref.w)
        assert np.abs(tgt_sum[e] - tref).max() <= 1e-11 * (1 + np.abs(tref).max())


def test_interior_vertex_compatibility(ctx, rng):
    c = ctx(4, 2)
    theta = random_theta(c.system, rng)
    u = c.handle.solve(theta)
    for a, pa in enumerate(c.patchset.patches):
        if not pa.solver_mean_constraint:
            continue
        data = c.patchset.patch_data(a, theta, u)
        scale = np.linalg.norm(data.div_coeffs)
        assert abs(data.mean_value) <= 1e-11 * max(scale, 1e-300)


def test_data_identity_verified_sign(ctx, rng):
    """(1, d^a) equals k^2 (p psi_a, theta) - beta(psi_a, u_h) for vertices
    whose hat function lies in the constrained space, where both vanish."""
    c = ctx(2, 2)
    theta = random_theta(c.system, rng)
    u = c.handle.solve(theta)
    V = c.system.V
    for a, pa in enumerate(c.patchset.patches):
        if pa.on_dirichlet:
            continue
        hatvec = np.zeros(V.n_free, dtype=complex)
        fid = V.free_index[pa.vertex]
        assert fid >= 0
        hatvec[fid] = 1.0
        bracket = hatvec @ (c.system.G @ np.conj(theta)) \
            - hatvec @ (c.system.C @ np.conj(u))
        data = c.patchset.patch_data(a, theta, u)
        lhs = np.conj(data.mean_value)
        scale = max(np.linalg.norm(data.div_coeffs), 1e-300)
        assert abs(lhs - bracket) <= 1e-11 * scale
        assert abs(lhs) <= 1e-11 * scale
        assert abs(bracket) <= 1e-11 * scale


def test_euler_lagrange_orthogonality(ctx, rng):
    """The minimizer satisfies (Ainv(sigma + target), v) in range(div^T):
    project the gradient of the objective onto the divergence rows."""
    c = ctx(2, 2)
    ps = c.patchset
    theta = random_theta(c.system, rng)
    u = c.handle.solve(theta)
    for a in range(len(ps.patches)):
        op = ps.patch_ops[a]
        data = ps.patch_data(a, theta, u)
        sol = ps.solve_patch(a, data)
        grad = op.null.T @ (sla.block_diag(
            *[ps.eldata[k].W for k in op.elements]) @ sol.raw
            + data.target_moments)
        # grad must lie in the span of the divergence-constraint rows
        Draw = np.zeros((op.n_mult, op.n_raw))
        for i, k in enumerate(op.elements):
            Draw[i * ps.ref.n_mult:(i + 1) * ps.ref.n_mult,
                 i * op.n_rt:(i + 1) * op.n_rt] = ps.eldata[k].Dm
        D = Draw @ op.null
        _, res, _, _ = np.linalg.lstsq(D.T, grad, rcond=None)
        scale = max(np.linalg.norm(data.target_moments), 1e-300)
        resid = np.linalg.norm(D.T @ np.linalg.lstsq(D.T, grad, rcond=None)[0]
                               - grad)
        assert resid <= 1e-10 * scale


def test_minimizer_optimality_under_divfree_perturbations(ctx, rng):
    c = ctx(2, 1)
    ps = c.patchset
    theta = random_theta(c.system, rng)
    u = c.handle.solve(theta)
    for a in (0, len(ps.patches) // 2):
        op = ps.patch_ops[a]
        data = ps.patch_data(a, theta, u)
        sol = ps.solve_patch(a, data)
        W = sla.block_diag(*[ps.eldata[k].W for k in op.elements])

        def objective(raw):
            diff = raw + data.target_moments
            return np.real(np.vdot(diff, W @ diff))

        base = objective(sol.raw)
        # divergence-free, trace-free discrete fields: null space of [B; D]
        Draw = np.zeros((op.n_mult, op.n_raw))
        for i, k in enumerate(op.elements):
            Draw[i * ps.ref.n_mult:(i + 1) * ps.ref.n_mult,
                 i * op.n_rt:(i + 1) * op.n_rt] = ps.eldata[k].Dm
        kernel = sla.null_space(np.vstack([Draw @ op.null,
                                           np.zeros((1, op.n_sigma))]))
        for _ in range(20):
            z = kernel @ (rng.standard_normal(kernel.shape[1])
                          + 1j * rng.standard_normal(kernel.shape[1]))
            pert = op.null @ z
            assert objective(sol.raw + pert) >= base * (1 - 1e-12)


def test_equilibration_identity_random_theta(ctx, rng):
    for p in (1, 2, 3):
        c = ctx(2, p)
        ps = c.patchset
        for _ in range(3):
            theta = random_theta(c.system, rng)
            flux = reconstruct_flux(ps, theta, handle=c.handle)
            res, loads = flux.equilibration_residuals()
            scale = np.linalg.norm(loads)
            assert res.max() <= 1e-10 * scale


def test_flux_conformity(ctx, rng):
    c = ctx(2, 2, neumann=True)
    theta = random_theta(c.system, rng)
    flux = reconstruct_flux(c.patchset, theta, handle=c.handle)
    jump, scale = flux.normal_jumps()
    assert jump <= 1e-12 * max(scale, 1e-300)
    assert flux.neumann_trace() <= 1e-12 * max(scale, 1e-300)


def test_flux_linearity(ctx, rng):
    c = ctx(2, 2)
    t1 = random_theta(c.system, rng)
    t2 = random_theta(c.system, rng)
    f1 = reconstruct_flux(c.patchset, t1, handle=c.handle)
    f2 = reconstruct_flux(c.patchset, t2, handle=c.handle)
    f12 = reconstruct_flux(c.patchset, t1 + (2 - 1j) * t2, handle=c.handle)
    err = np.abs(f12.sigma_raw - f1.sigma_raw - (2 - 1j) * f2.sigma_raw).max()
    assert err <= 1e-11 * np.abs(f12.sigma_raw).max()
    r1 = c.patchset.residual_coefficients(t1, f1.u)
    r2 = c.patchset.residual_coefficients(t2, f2.u)
    r12 = c.patchset.residual_coefficients(t1 + (2 - 1j) * t2, f12.u)
    assert np.abs(r12 - r1 - (2 - 1j) * r2).max() <= 1e-11 * np.abs(r12).max()


def test_prager_synge_bound(ctx, rng):
    c = ctx(2, 2)
    enr = LagrangeSpace(c.mesh, c.spec.degree_primal + 2)
    Cx = assemble_beta_cross(c.mesh, c.spec, enr, c.system.V)
    Px = assemble_pmass_cross(c.mesh, c.spec, enr, c.system.Q)
    sys_enr = assemble(c.mesh, c.spec, degree=c.spec.degree_primal + 2)
    for _ in range(10):
        theta = random_theta(c.system, rng)
        u = c.handle.solve(theta)
        flux = reconstruct_flux(c.patchset, theta, u=u)
        rnorm = c.patchset.residual_norm(flux.residual_coefficients())
        w = rng.standard_normal(enr.n_free) + 1j * rng.standard_normal(enr.n_free)
        lhs = abs(w @ (Px @ np.conj(theta)) - w @ (Cx @ np.conj(u)))
        gw = np.sqrt(np.real(np.vdot(w, sys_enr.Ka @ w)))
        assert lhs <= rnorm * gw * (1 + 1e-8)


def test_rho_exact_solution_is_zero():
    """One Neumann element, reaction-diffusion with constant data: the
    discrete solution solves the continuous problem, so the residual
    constant collapses."""
    m = msh.Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                 np.array([[0, 1, 2]]), np.array([1]),
                 np.array([[0, 1], [1, 2], [2, 0]]), ["N", "N", "N"])
    coef = {1: RegionCoefficients(A=np.eye(2), b=[0, 0], c=[0, 0], d=-1)}
    weights = {1: GardingWeights(m=1.0, p=1.0, Afrak=np.eye(2))}
    for p in (1, 2):
        spec = ProblemSpec(k=1.5, coefficients=coef, weights=weights,
                           degree_primal=p)
        sys = assemble(m, spec)
        handle = SolveHandle(sys)
        ps = build_patch_operators(sys)
        rho = compute_rho(sys, ps, handle=handle)
        assert rho.value <= 1e-9


def test_rho_scales_with_p_weight():
    m = msh.generate_unit_square(2)
    coef = {1: RegionCoefficients(A=np.eye(2), b=[0, 0], c=[0, 0], d=1)}

    def run(pw):
        weights = {1: GardingWeights(m=pw, p=pw, Afrak=np.eye(2))}
        spec = ProblemSpec(k=np.sqrt(10), coefficients=coef, weights=weights,
                           degree_primal=1)
        sys = assemble(m, spec)
        ps = build_patch_operators(sys)
        return compute_rho(sys, ps, handle=SolveHandle(sys)).value

    r1 = run(1.0)
    r4 = run(4.0)
    # scaling p -> 4p scales the load by 4 and the normalization by 2
    assert r4 == pytest.approx(2.0 * r1, rel=1e-9)


def test_rho_dense_and_power_agree(ctx):
    c = ctx(2, 1)
    dense = compute_rho(c.system, c.patchset, handle=c.handle, mode="dense")
    power = compute_rho(c.system, c.patchset, handle=c.handle, mode="power")
    assert abs(dense.value - power.value) <= 1e-8 * dense.value


def test_rho_decays_under_refinement(ctx):
    values = []
    for n in (2, 4, 8):
        c = ctx(n, 1)
        values.append(compute_rho(c.system, c.patchset, handle=c.handle).value)
    assert values[0] > values[1] > values[2]


def test_flux_dump(tmp_path, ctx, rng):
    c = ctx(2, 1)
    theta = random_theta(c.system, rng)
    flux = reconstruct_flux(c.patchset, theta, handle=c.handle)
    path = tmp_path / "flux.txt"
    dump_flux(flux, path)
    text = path.read_text()
    assert text.startswith("# flux modal coefficients")
    assert f"element {c.mesh.num_elements}" in text
