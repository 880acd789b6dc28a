import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from stabcert._threads import set_blas_threads

set_blas_threads(1)

from stabcert import (ProblemSpec, RegionCoefficients, SolveHandle, assemble,
                      build_patch_operators, generate_unit_square,
                      helmholtz_default_weights)


def helmholtz_spec(k2, p=1, q=0):
    """Unit-coefficient Helmholtz problem with default Gårding weights."""
    coef = {1: RegionCoefficients(A=np.eye(2), b=[0, 0], c=[0, 0], d=1)}
    return ProblemSpec(k=float(np.sqrt(k2)), coefficients=coef,
                       weights=helmholtz_default_weights(coef),
                       degree_primal=p, degree_broken=q)


class FeContext:
    """Lazily assembled discretization shared across tests."""

    def __init__(self, n, p, k2, neumann=False, q=0):
        self.mesh = generate_unit_square(n, dirichlet_only=not neumann)
        self.spec = helmholtz_spec(k2, p=p, q=q)
        self._system = None
        self._handle = None
        self._patchset = None

    @property
    def system(self):
        if self._system is None:
            self._system = assemble(self.mesh, self.spec)
        return self._system

    @property
    def handle(self):
        if self._handle is None:
            self._handle = SolveHandle(self.system)
        return self._handle

    @property
    def patchset(self):
        if self._patchset is None:
            self._patchset = build_patch_operators(self.system)
        return self._patchset


_CTX_CACHE = {}


@pytest.fixture(scope="session")
def ctx():
    def get(n, p, k2=10.0, neumann=False, q=0):
        key = (n, p, k2, neumann, q)
        if key not in _CTX_CACHE:
            _CTX_CACHE[key] = FeContext(n, p, k2, neumann=neumann, q=q)
        return _CTX_CACHE[key]

    return get


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
