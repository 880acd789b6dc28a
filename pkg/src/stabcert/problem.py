"""PDE coefficients, Gårding weights, wavespeeds and related element data.

The boundary value problem is

    -k^2 d u + ik c . grad u - div(ik b u + A grad u) = f

with piecewise-constant complex coefficients (A, b, c, d) per mesh region,
homogeneous Dirichlet data on the D-tagged boundary and a homogeneous flux
condition on the N-tagged boundary.  The weights (m, p, Afrak) encode the
energy norm k^2 m |u|^2 + grad(u) . Afrak grad(u) and the compact-perturbation
weight p of the Gårding inequality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml


class ProblemError(Exception):
    """Raised for inconsistent coefficient or weight data."""


@dataclass(frozen=True)
class RegionCoefficients:
    """Constant complex coefficients (A, b, c, d) of one region."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: complex

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=complex).reshape(2, 2))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=complex).reshape(2))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=complex).reshape(2))
        object.__setattr__(self, "d", complex(self.d))
        for name in ("A", "b", "c"):
            if not np.all(np.isfinite(getattr(self, name).view(float))):
                raise ProblemError(f"coefficient {name} has non-finite entries")
        if not np.isfinite(self.d.real) or not np.isfinite(self.d.imag):
            raise ProblemError("coefficient d is not finite")


@dataclass(frozen=True)
class GardingWeights:
    """Real weights of one region: m > 0, p >= 0, Afrak symmetric positive definite."""

    m: float
    p: float
    Afrak: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", float(self.m))
        object.__setattr__(self, "p", float(self.p))
        A = np.asarray(self.Afrak, dtype=float).reshape(2, 2)
        object.__setattr__(self, "Afrak", A)
        if self.m <= 0:
            raise ProblemError("weight m must be positive")
        if self.p < 0:
            raise ProblemError("weight p must be nonnegative")
        if not np.allclose(A, A.T, rtol=0, atol=1e-13 * max(1.0, abs(A).max())):
            raise ProblemError("weight matrix Afrak must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ProblemError("weight matrix Afrak must be positive definite")

    @property
    def alpha_min(self):
        return float(np.linalg.eigvalsh(self.Afrak)[0])

    @property
    def alpha_max(self):
        return float(np.linalg.eigvalsh(self.Afrak)[1])


@dataclass
class ProblemSpec:
    """Wavenumber, per-region data and discretization degrees."""

    k: float
    coefficients: dict
    weights: dict
    degree_primal: int = 1
    degree_broken: int = 0
    symmetric: bool = False

    def __post_init__(self):
        self.k = float(self.k)
        if self.k <= 0:
            raise ProblemError("wavenumber k must be positive")
        if self.degree_primal < 1 or self.degree_primal > 4:
            raise ProblemError("degree_primal must lie in [1, 4]")
        if self.degree_broken < 0 or self.degree_broken > self.degree_primal + 1:
            raise ProblemError("degree_broken must lie in [0, degree_primal + 1]")
        if set(self.coefficients) != set(self.weights):
            raise ProblemError("coefficient and weight regions differ")
        if all(w.p == 0.0 for w in self.weights.values()):
            raise ProblemError("weight p vanishes in every region "
                               "(p must not be identically zero)")
        for r, w in self.weights.items():
            if w.p > w.m * (1 + 1e-12):
                warnings.warn(
                    f"region {r}: weight p = {w.p:g} exceeds m = {w.m:g}; the "
                    "certified bound assumes p <= m elementwise", stacklevel=2)

    def check_regions(self, mesh):
        missing = set(int(r) for r in np.unique(mesh.regions)) - set(self.coefficients)
        if missing:
            raise ProblemError(f"mesh regions {sorted(missing)} have no coefficients")

    def coeff(self, region):
        return self.coefficients[int(region)]

    def weight(self, region):
        return self.weights[int(region)]


@dataclass
class ElementWeights:
    """Weights and coefficient handles expanded to per-element arrays."""

    m: np.ndarray
    p: np.ndarray
    alpha_min: np.ndarray
    alpha_max: np.ndarray
    active: np.ndarray
    wavespeed: np.ndarray


def element_weights(mesh, spec):
    """Expand the per-region weights onto the elements of ``mesh``."""
    spec.check_regions(mesh)
    ne = mesh.num_elements
    m = np.empty(ne)
    p = np.empty(ne)
    amin = np.empty(ne)
    amax = np.empty(ne)
    for r, w in spec.weights.items():
        sel = mesh.regions == r
        m[sel] = w.m
        p[sel] = w.p
        amin[sel] = w.alpha_min
        amax[sel] = w.alpha_max
    active = p > 0
    theta = np.zeros(ne)
    theta[active] = np.sqrt(p[active] / amax[active])
    return ElementWeights(m=m, p=p, alpha_min=amin, alpha_max=amax,
                          active=active, wavespeed=theta)


def helmholtz_default_weights(coefficients):
    """Default weights p = m = Re d and Afrak = sym(Re A), per region.

    Raises
    ------
    ProblemError
        When Re d <= 0 or the symmetrized real part of A is not positive
        definite in some region, i.e. the default is not applicable.
    """
    out = {}
    for r, coef in coefficients.items():
        dr = coef.d.real
        if dr <= 0:
            raise ProblemError(
                f"region {r}: Helmholtz default weights need Re d > 0 "
                f"(got {dr:g})")
        Ar = 0.5 * (coef.A.real + coef.A.real.T)
        if np.linalg.eigvalsh(Ar).min() <= 0:
            raise ProblemError(
                f"region {r}: Helmholtz default weights need sym(Re A) "
                "positive definite")
        out[r] = GardingWeights(m=dr, p=dr, Afrak=Ar)
    return out


def wavespeed(weights):
    """Element wavespeed sqrt(p / alpha_max); zero when p = 0."""
    if weights.p == 0.0:
        return 0.0
    return float(np.sqrt(weights.p / weights.alpha_max))


def worst_cell(mesh, spec, geometry=None):
    """The pair (h, v) of the element maximizing h_K / wavespeed_K.

    Only elements with p_K > 0 compete; the p-weighted projection error
    vanishes on the others, which would otherwise force an infinite penalty.
    """
    from .mesh import shape_data

    ew = element_weights(mesh, spec)
    if not ew.active.any():
        raise ProblemError("p vanishes on every element; no worst cell exists")
    geo = geometry if geometry is not None else shape_data(mesh)
    ratio = np.where(ew.active, geo.h / np.where(ew.active, ew.wavespeed, 1.0),
                     -np.inf)
    k_star = int(np.argmax(ratio))
    return float(geo.h[k_star]), float(ew.wavespeed[k_star])


@dataclass
class GardingReport:
    """Per-element minimal eigenvalues of the pointwise Gårding margin form."""

    margins: np.ndarray
    min_margin: float
    passed: bool
    tol: float


def garding_margin_matrix(coef, weight, k):
    """Hermitian 3x3 matrix of the pointwise quadratic form, in (u, du/dx, du/dy).

    Its positive semidefiniteness (up to tolerance) on every element is a
    sufficient condition for the Gårding inequality
    Re beta(u, u) >= |||u|||^2 - 2 k^2 ||u||_p^2.
    """
    M = np.zeros((3, 3), dtype=complex)
    M[0, 0] = -k**2 * coef.d
    M[0, 1] = 1j * k * coef.c[0]
    M[0, 2] = 1j * k * coef.c[1]
    M[1, 0] = 1j * k * coef.b[0]
    M[2, 0] = 1j * k * coef.b[1]
    M[1:, 1:] = coef.A
    H = 0.5 * (M + M.conj().T)
    H[0, 0] -= k**2 * (weight.m - 2.0 * weight.p)
    H[1:, 1:] -= weight.Afrak
    return H

def garding_check(mesh, spec, tol=1e-10):
    """Verify the sufficient pointwise condition for the Gårding inequality.

    Returns a report with one margin (minimal eigenvalue of the 3x3 Hermitian
    form) per element; the check passes iff all margins are >= -tol.
    """
    spec.check_regions(mesh)
    per_region = {}
    for r in spec.coefficients:
        H = garding_margin_matrix(spec.coeff(r), spec.weight(r), spec.k)
        per_region[r] = float(np.linalg.eigvalsh(H)[0])
    margins = np.array([per_region[int(r)] for r in mesh.regions])
    mn = float(margins.min())
    return GardingReport(margins=margins, min_margin=mn, passed=mn >= -tol, tol=tol)


def kfrak(spec):
    """The norm-equivalence constant max_K sqrt(p_K / m_K)."""
    return float(max(np.sqrt(w.p / w.m) for w in spec.weights.values()))


def patch_constants(patch, mesh, spec):
    """Local wavespeed and contrast (theta_patch, kappa_patch) of one patch."""
    ws = [spec.weight(mesh.regions[k]) for k in patch.elements]
    p_min = min(w.p for w in ws)
    a_max = max(w.alpha_max for w in ws)
    a_min = min(w.alpha_min for w in ws)
    return float(np.sqrt(p_min / a_max)), float(np.sqrt(a_max / a_min))


# -- configuration files ---------------------------------------------------

def _as_complex(node, what):
    try:
        if isinstance(node, (int, float)):
            return complex(node)
        re, im = node
        return complex(float(re), float(im))
    except (TypeError, ValueError):
        raise ProblemError(f"{what}: expected [re, im] pair") from None


def _as_complex_vec(node, what):
    return np.array([_as_complex(x, what) for x in node], dtype=complex)


def _as_complex_mat(node, what):
    return np.array([[_as_complex(x, what) for x in row] for row in node],
                    dtype=complex)


def loads_config(text):
    """Parse a problem configuration document (YAML; JSON is a subset)."""
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ProblemError("config: top level must be a mapping")
    for key in ("k", "regions"):
        if key not in doc:
            raise ProblemError(f"config: missing key '{key}'")
    coefficients, weights, deferred = {}, {}, []
    for rid, node in doc["regions"].items():
        r = int(rid)
        coef = RegionCoefficients(
            A=_as_complex_mat(node["A"], f"region {r}: A"),
            b=_as_complex_vec(node.get("b", [0, 0]), f"region {r}: b"),
            c=_as_complex_vec(node.get("c", [0, 0]), f"region {r}: c"),
            d=_as_complex(node.get("d", 0), f"region {r}: d"),
        )
        coefficients[r] = coef
        wnode = node.get("weights", "helmholtz-default")
        if wnode == "helmholtz-default":
            deferred.append(r)
        else:
            weights[r] = GardingWeights(m=float(wnode["m"]), p=float(wnode["p"]),
                                        Afrak=np.asarray(wnode["Afrak"], dtype=float))
    for r in deferred:
        weights[r] = helmholtz_default_weights({r: coefficients[r]})[r]
    return ProblemSpec(
        k=float(doc["k"]),
        coefficients=coefficients,
        weights=weights,
        degree_primal=int(doc.get("degree_primal", 1)),
        degree_broken=int(doc.get("degree_broken", 0)),
        symmetric=bool(doc.get("symmetric", False)),
    )


def load_config(path):
    """Read a problem configuration file; see :func:`loads_config`."""
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read())
