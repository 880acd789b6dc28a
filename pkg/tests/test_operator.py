import numpy as np
import pytest

from stabcert import mesh as msh
from stabcert.fespace import assemble
from stabcert.operator import (OperatorError, SolveHandle, compute_theta,
                               solve_ph)
from stabcert.problem import (GardingWeights, ProblemSpec, RegionCoefficients)

from conftest import helmholtz_spec


def test_zero_input_gives_zero(ctx):
    c = ctx(4, 1)
    x = solve_ph(c.system, np.zeros(c.system.Q.n_dofs), handle=c.handle)
    assert np.abs(x).max() == 0.0


def test_linearity(ctx, rng):
    c = ctx(4, 2)
    n = c.system.Q.n_dofs
    t1 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    t2 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x1 = solve_ph(c.system, t1, handle=c.handle)
    x2 = solve_ph(c.system, t2, handle=c.handle)
    x12 = solve_ph(c.system, t1 + 2.0 * t2, handle=c.handle)
    assert np.abs(x12 - x1 - 2 * x2).max() <= 1e-12 * np.abs(x12).max()


def test_defining_identity_residual(ctx, rng):
    c = ctx(4, 2)
    n = c.system.Q.n_dofs
    theta = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x = c.handle.solve(theta)
    rhs = c.system.G @ np.conj(theta)
    res = np.linalg.norm(c.system.C @ np.conj(x) - rhs) / np.linalg.norm(rhs)
    assert res <= 1e-10


def test_single_active_element_theta():
    # two regions, only one active: the pencil is 1x1
    m = msh.generate_unit_square(1)
    regions = np.array([1, 2])
    m = msh.Mesh(m.vertices, m.elements, regions, m.boundary_edges,
                 ["N"] * 4)
    coef = {r: RegionCoefficients(A=np.eye(2), b=[0, 0], c=[0, 0], d=-1)
            for r in (1, 2)}
    weights = {1: GardingWeights(m=1, p=1, Afrak=np.eye(2)),
               2: GardingWeights(m=1, p=0, Afrak=np.eye(2))}
    spec = ProblemSpec(k=1.0, coefficients=coef, weights=weights,
                       degree_primal=1)
    sys = assemble(m, spec)
    assert sys.Q.n_dofs == 1
    handle = SolveHandle(sys)
    res = compute_theta(sys, handle)
    e0 = np.zeros(1, dtype=complex)
    e0[0] = 1.0
    x = handle.solve(e0)
    direct = sys.energy_norm(x) / (spec.k * sys.theta_m_norm(e0))
    assert res.raw_value == pytest.approx(direct, rel=1e-12)


def test_coercive_case_theta_below_one(ctx, rng):
    # symmetric positive beta with p = m: Cauchy-Schwarz forces theta <= 1
    m = msh.generate_unit_square(4)
    coef = {1: RegionCoefficients(A=np.eye(2), b=[0, 0], c=[0, 0], d=-1)}
    weights = {1: GardingWeights(m=1, p=1, Afrak=np.eye(2))}
    spec = ProblemSpec(k=np.sqrt(10), coefficients=coef, weights=weights,
                       degree_primal=2)
    sys = assemble(m, spec)
    handle = SolveHandle(sys)
    res = compute_theta(sys, handle)
    assert res.value <= 1.0 + 1e-8
    for _ in range(5):
        n = sys.Q.n_dofs
        theta = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        x = handle.solve(theta)
        assert sys.energy_norm(x) <= \
            res.value * spec.k * sys.theta_m_norm(theta) * (1 + 1e-10)


def test_theta_grows_toward_resonance():
    values = []
    for k2 in (10.0, 15.0, 18.0, 19.5):
        m = msh.generate_unit_square(8)
        sys = assemble(m, helmholtz_spec(k2, p=2))
        values.append(compute_theta(sys).value)
    assert all(a < b for a, b in zip(values, values[1:]))


def test_dense_and_power_paths_agree(ctx):
    c = ctx(4, 1)
    dense = compute_theta(c.system, c.handle, mode="dense")
    power = compute_theta(c.system, c.handle, mode="power")
    assert abs(dense.value - power.value) <= 1e-8 * dense.value
    assert power.residual <= 1e-6


def test_singular_system_reported():
    # k^2 exactly at a discrete Dirichlet eigenvalue of the coarse mesh
    m = msh.generate_unit_square(2)
    sys0 = assemble(m, helmholtz_spec(10.0, p=1))
    # the single interior vertex makes C 1x1: find its root k^2 = C_kk/M_kk
    k2 = (sys0.Ka[0, 0] / sys0.Mm[0, 0])
    spec = helmholtz_spec(k2, p=1)
    sys = assemble(m, spec)
    with pytest.raises(OperatorError, match="not invertible"):
        handle = SolveHandle(sys)
        theta = np.ones(sys.Q.n_dofs, dtype=complex)
        handle.solve(theta)
