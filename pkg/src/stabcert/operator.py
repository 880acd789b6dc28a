"""Discrete solution operator and the solution-bound constant Theta_h.

The operator maps a broken field theta to the unique u in V_h with
beta(w, u) = k^2 (p w, theta) for all test functions w.  Because beta is
conjugate-linear in its second slot, the linear system reads
C conj(x) = G conj(theta), so the coefficient map is x = conj(C^{-1} G) theta
and depends linearly on theta.  Theta_h is the largest generalized singular
value of that map measured in the energy norm against k ||theta||_m = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

DENSE_NQ_LIMIT = 2000


class OperatorError(Exception):
    """Raised when the discrete problem cannot be solved reliably."""


class SolveHandle:
    """Factorized beta-system with the conjugation bookkeeping centralized.

    All conjugations needed by the conjugate-linear second slot live here;
    a dedicated identity test covers them.
    """

    def __init__(self, system, tol=1e-10):
        self.system = system
        self.tol = tol
        self.n_v = system.V.n_free
        self.n_q = system.Q.n_dofs
        if self.n_v == 0:
            raise OperatorError("no free degrees of freedom (is the whole "
                                "boundary Dirichlet on a one-element mesh?)")
        try:
            self.lu = spla.splu(system.C.tocsc())
        except RuntimeError as exc:
            raise OperatorError(
                "discrete problem not invertible on this mesh — refine or "
                f"change k ({exc})") from exc
        self._G = system.G.tocsr()
        self._GT = self._G.T.tocsr()

    def solve(self, theta, check=True):
        """Coefficients of the discrete solution for one broken field theta."""
        rhs = self._G @ np.conj(theta)
        xbar = self.lu.solve(rhs)
        if check:
            norm = np.linalg.norm(rhs)
            if norm > 0:
                res = np.linalg.norm(self.system.C @ xbar - rhs) / norm
                if not np.isfinite(res) or res > self.tol:
                    raise OperatorError(
                        "discrete problem not invertible on this mesh — refine "
                        f"or change k (relative residual {res:.3e})")
        return np.conj(xbar)

    def solve_matrix(self, thetas):
        """Apply the solution operator to the columns of ``thetas``."""
        rhs = self._G @ np.conj(thetas)
        return np.conj(self.lu.solve(np.asarray(rhs, dtype=complex)))

    def dense_T(self):
        """The full coefficient matrix T with T theta = solution coefficients."""
        G = np.asarray(self._G.todense(), dtype=complex)
        return np.conj(self.lu.solve(G))

    def apply_T(self, v):
        return np.conj(self.lu.solve(self._G @ np.conj(v)))

    def apply_T_adjoint(self, w):
        """Adjoint of theta -> T theta in the Euclidean inner product."""
        # T = conj(C^{-1} G) with G real, so T^H w = G^T conj(C^{-1} conj(w))
        return self._GT @ np.conj(self.lu.solve(np.conj(w)))


def solve_ph(system, theta, handle=None, tol=1e-10):
    """Discrete solution operator applied to one broken field.

    The defining identity beta(w_h, u) = k^2 (p w_h, theta) is verified via
    the linear residual; failure reports the problem as not invertible.
    """
    if handle is None:
        handle = SolveHandle(system, tol=tol)
    return handle.solve(np.asarray(theta, dtype=complex))


@dataclass
class ThetaResult:
    """Largest energy amplification of the solution operator."""

    value: float
    raw_value: float
    safety_factor: float
    theta: np.ndarray
    residual: float
    mode: str


def power_iteration(apply_a, b_diag, n, tol=1e-10, maxiter=3000):
    """Largest eigenvalue of the Hermitian pencil (A, diag(b)) by power iteration.

    ``apply_a`` must realize a Hermitian positive-semidefinite operator.
    Returns (lambda_max, eigenvector, relative_residual).
    """
    rng = np.random.default_rng(20240517)
    v = np.ones(n, dtype=complex) + 0.01 * rng.standard_normal(n)
    v /= np.sqrt(np.real(np.vdot(v, b_diag * v)))
    lam = 0.0
    for _ in range(maxiter):
        av = apply_a(v)
        lam_new = float(np.real(np.vdot(v, av)))
        w = av / b_diag
        nrm = np.sqrt(np.real(np.vdot(w, b_diag * w)))
        if nrm == 0.0:
            return 0.0, v, 0.0
        v = w / nrm
        if lam_new > 0 and abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    av = apply_a(v)
    res = np.linalg.norm(av - lam * (b_diag * v)) / max(
        np.linalg.norm(lam * (b_diag * v)), 1e-300)
    return lam, v, float(res)


def pencil_power_max(apply_a, apply_b, solve_b, n, tol=1e-12, maxiter=3000,
                     seed=20240517):
    """Largest eigenvalue of a Hermitian-definite pencil (A, B) by the
    iteration v <- B^{-1} A v with the generalized Rayleigh quotient.

    Returns (lambda_max, vector, relative_residual).
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(maxiter):
        av = apply_a(v)
        bv = apply_b(v)
        num = float(np.real(np.vdot(v, av)))
        den = float(np.real(np.vdot(v, bv)))
        lam_new = num / den
        w = solve_b(av)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0, v, 0.0
        v = w / nrm
        if lam_new > 0 and abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    av = apply_a(v)
    bv = apply_b(v)
    res = np.linalg.norm(av - lam * bv) / max(np.linalg.norm(lam * bv), 1e-300)
    return lam, v, float(res)


def compute_theta(system, handle=None, safety=1.0 + 1e-6, mode=None,
                  power_tol=1e-12, residual_guard=1e-6):
    """Solution-bound constant: max |||P_h theta||| over k ||theta||_m = 1.

    Dense formation of the operator column by column is used for moderate
    broken dimensions; beyond ``DENSE_NQ_LIMIT`` a power iteration with the
    factorized system is run.  The reported value multiplies the raw
    eigenvalue estimate by ``safety`` (>= 1, overestimation is conservative).
    The eigenvalue error of the power mode is of the order of the squared
    eigenvector residual, which ``residual_guard`` caps.
    """
    if handle is None:
        handle = SolveHandle(system)
    n_q = system.Q.n_dofs
    if n_q == 0:
        raise OperatorError("broken space is empty (no active elements)")
    b_diag = (system.spec.k ** 2) * system.mq_m
    if mode is None:
        mode = "dense" if n_q <= DENSE_NQ_LIMIT else "power"

    if mode == "dense":
        T = handle.dense_T()
        ET = system.E @ T
        A = T.conj().T @ ET
        herm_defect = np.abs(A - A.conj().T).max() / max(np.abs(A).max(), 1e-300)
        if herm_defect > 1e-12:
            raise OperatorError(f"pencil lost Hermiticity ({herm_defect:.2e})")
        A = 0.5 * (A + A.conj().T)
        scale = 1.0 / np.sqrt(b_diag)
        As = A * scale[None, :] * scale[:, None]
        evals, evecs = np.linalg.eigh(As)
        lam = float(evals[-1])
        vec = scale * evecs[:, -1]
        residual = 0.0
    else:
        def apply_a(v):
            tv = handle.apply_T(v)
            return handle.apply_T_adjoint(system.E @ tv)

        lam, vec, residual = power_iteration(apply_a, b_diag, n_q, tol=power_tol)
        if residual > residual_guard:
            raise OperatorError(
                f"eigen-iteration did not converge (residual {residual:.3e})")
    raw = float(np.sqrt(max(lam, 0.0)))
    return ThetaResult(value=raw * safety, raw_value=raw, safety_factor=safety,
                       theta=vec, residual=residual, mode=mode)
