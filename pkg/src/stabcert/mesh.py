"""2D simplicial meshes with boundary tags, shape data, refinement and vertex patches.

The ASCII mesh format understood by :func:`load_mesh` / :func:`save_mesh` is::

    nodes <n>
    <id> <x> <y>
    elements <m>
    <id> <v1> <v2> <v3> <region>
    boundary <b>
    <id> <v1> <v2> <tag>

Ids are 1-based and contiguous, the boundary tag is ``D`` (Dirichlet) or
``N`` (Neumann), ``#`` starts a comment and blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIRICHLET = "D"
NEUMANN = "N"

_HANGING_TOL = 1e-10


class MeshError(Exception):
    """Raised when a mesh file cannot be parsed or the mesh fails validation."""


class Mesh:
    """Matching triangulation with region ids and tagged boundary edges.

    Parameters
    ----------
    vertices : (nv, 2) array of vertex coordinates.
    elements : (ne, 3) array of vertex indices, positively oriented.
    regions : (ne,) array of region ids.
    boundary_edges : (nb, 2) array of vertex index pairs.
    boundary_tags : (nb,) array of "D"/"N" tags, one per boundary edge.
    """

    def __init__(self, vertices, elements, regions, boundary_edges, boundary_tags,
                 validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.regions = np.ascontiguousarray(regions, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_tags = np.asarray(boundary_tags, dtype="U1")
        self.parent = None
        self.parent_elements = None
        self._build_connectivity()
        if validate:
            self._validate()
        self.domain_diameter = self._diameter()

    # -- basic counts -----------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def __repr__(self):
        return (f"Mesh({self.num_vertices} vertices, {self.num_elements} elements, "
                f"{self.boundary_edges.shape[0]} boundary edges)")

    # -- connectivity -----------------------------------------------------

    def _build_connectivity(self):
        ne = self.num_elements
        tris = self.elements
        # local edges (v0,v1), (v1,v2), (v2,v0)
        raw = np.stack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=1)
        flat = raw.reshape(-1, 2)
        keys = np.sort(flat, axis=1)
        self.edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        self.elem_edges = inverse.reshape(ne, 3)
        # +1 when the element traverses the edge from the lower to the higher id
        self.elem_edge_sign = np.where(flat[:, 0] < flat[:, 1], 1, -1).reshape(ne, 3)

        nedge = self.edges.shape[0]
        self.edge_elements = -np.ones((nedge, 2), dtype=np.int64)
        counts = np.zeros(nedge, dtype=np.int64)
        self._edge_overfull = []
        for k in range(ne):
            for loc in range(3):
                e = self.elem_edges[k, loc]
                if counts[e] < 2:
                    self.edge_elements[e, counts[e]] = k
                else:
                    self._edge_overfull.append(e)
                counts[e] += 1
        self.edge_counts = counts

        self.edge_tags = np.full(nedge, "", dtype="U1")
        self.boundary_edge_ids = np.full(self.boundary_edges.shape[0], -1,
                                         dtype=np.int64)
        lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}
        self._dup_tagged = []
        for i, (a, b) in enumerate(np.sort(self.boundary_edges, axis=1)):
            eid = lookup.get((int(a), int(b)), -1)
            self.boundary_edge_ids[i] = eid
            if eid >= 0:
                if self.edge_tags[eid]:
                    self._dup_tagged.append(eid)
                self.edge_tags[eid] = self.boundary_tags[i]

        self.vertex_elements = [[] for _ in range(self.num_vertices)]
        for k in range(ne):
            for v in tris[k]:
                self.vertex_elements[v].append(k)

    def signed_areas(self):
        p = self.vertices
        t = self.elements
        d1 = p[t[:, 1]] - p[t[:, 0]]
        d2 = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_vector(self, eid):
        a, b = self.edges[eid]
        return self.vertices[b] - self.vertices[a]

    def edge_normal(self, eid):
        """Unit normal of the ascending-id orientation (rotate tangent by -90 deg)."""
        t = self.edge_vector(eid)
        n = np.array([t[1], -t[0]])
        return n / np.linalg.norm(n)

    def edge_length(self, eid):
        return float(np.linalg.norm(self.edge_vector(eid)))

    def is_boundary_edge(self, eid):
        return self.edge_counts[eid] == 1

    def _diameter(self):
        onbdry = np.zeros(self.num_vertices, dtype=bool)
        for eid in range(self.num_edges):
            if self.edge_counts[eid] == 1:
                onbdry[self.edges[eid]] = True
        pts = self.vertices[onbdry] if onbdry.any() else self.vertices
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(d2.max()))

    # -- validation -------------------------------------------------------

    def _validate(self):
        nv = self.num_vertices
        if self.num_elements == 0:
            raise MeshError("mesh has no elements")
        if self.elements.min() < 0 or self.elements.max() >= nv:
            raise MeshError("element refers to a vertex id out of range")
        for k, tri in enumerate(self.elements):
            if len(set(int(v) for v in tri)) != 3:
                raise MeshError(f"element {k + 1} has repeated vertices")
        areas = self.signed_areas()
        bad = np.nonzero(areas <= 0)[0]
        if bad.size:
            raise MeshError(f"element {bad[0] + 1} is inverted or degenerate "
                            f"(signed area {areas[bad[0]]:g})")
        if self._edge_overfull:
            a, b = self.edges[self._edge_overfull[0]]
            raise MeshError(f"edge ({a + 1}, {b + 1}) is shared by more than "
                            "two elements")
        if self._dup_tagged:
            a, b = self.edges[self._dup_tagged[0]]
            raise MeshError(f"boundary edge ({a + 1}, {b + 1}) is tagged twice")
        bad_decl = np.nonzero(self.boundary_edge_ids < 0)[0]
        if bad_decl.size:
            a, b = self.boundary_edges[bad_decl[0]]
            raise MeshError(f"declared boundary edge ({a + 1}, {b + 1}) is not an "
                            "edge of the triangulation")
        for i, eid in enumerate(self.boundary_edge_ids):
            if self.edge_counts[eid] != 1:
                a, b = self.edges[eid]
                raise MeshError(f"edge ({a + 1}, {b + 1}) is interior but carries a "
                                "boundary tag")
            if self.boundary_tags[i] not in (DIRICHLET, NEUMANN):
                raise MeshError(f"unknown boundary tag '{self.boundary_tags[i]}'")
        self._check_hanging_nodes()
        untagged = [e for e in range(self.num_edges)
                    if self.edge_counts[e] == 1 and not self.edge_tags[e]]
        if untagged:
            a, b = self.edges[untagged[0]]
            raise MeshError(f"boundary edge ({a + 1}, {b + 1}) carries no tag")

    def _check_hanging_nodes(self):
        """A vertex in the relative interior of a once-used edge is a T-junction."""
        pts = self.vertices
        scale = max(pts.max() - pts.min(), 1.0)
        for eid in range(self.num_edges):
            if self.edge_counts[eid] != 1:
                continue
            a, b = self.edges[eid]
            t = pts[b] - pts[a]
            L2 = t @ t
            rel = pts - pts[a]
            cross = np.abs(rel[:, 0] * t[1] - rel[:, 1] * t[0])
            param = (rel @ t) / L2
            inside = (cross <= _HANGING_TOL * scale * np.sqrt(L2)) \
                & (param > _HANGING_TOL) & (param < 1.0 - _HANGING_TOL)
            inside[a] = inside[b] = False
            hits = np.nonzero(inside)[0]
            if hits.size:
                raise MeshError(
                    f"hanging node: vertex {hits[0] + 1} lies inside edge "
                    f"({a + 1}, {b + 1})")


@dataclass
class ElementGeometry:
    """Per-element shape data: diameters, incircle diameters and regularity."""

    h: np.ndarray
    rho: np.ndarray
    kappa: np.ndarray
    kappa_max: float


@dataclass
class VertexPatch:
    """Elements around one vertex plus the boundary bookkeeping of the patch.

    ``neumann_edges`` collects the patch-boundary edges through the vertex that
    lie on the Neumann boundary and ``needs_mean_constraint`` is True exactly
    when that set is empty.  The flux solver uses the refined classification:
    ``solver_free_edges`` (where the reconstructed flux may have a nonzero
    normal trace, i.e. Dirichlet edges through a Dirichlet-boundary vertex) and
    ``solver_mean_constraint`` (True for every vertex away from the Dirichlet
    closure, where the divergence data has zero patch mean).
    """

    vertex: int
    elements: np.ndarray
    h_patch: float
    neumann_edges: list
    essential_edges: list
    needs_mean_constraint: bool
    on_dirichlet: bool
    interior_edges: list = field(default_factory=list)
    solver_free_edges: list = field(default_factory=list)
    solver_essential_edges: list = field(default_factory=list)

    @property
    def solver_mean_constraint(self):
        return not self.on_dirichlet


# -- operations -----------------------------------------------------------

def load_mesh(path):
    """Parse and validate an ASCII mesh file.

    Raises
    ------
    MeshError
        On malformed input or any violation of the matching-mesh invariants,
        naming the offending entity.
    """
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    pos = 0

    def take(expect=None):
        nonlocal pos
        if pos >= len(tokens):
            raise MeshError(f"{path}: unexpected end of file")
        tok = tokens[pos]
        pos += 1
        if expect is not None and tok != expect:
            raise MeshError(f"{path}: expected '{expect}', got '{tok}'")
        return tok

    def take_int():
        tok = take()
        try:
            return int(tok)
        except ValueError:
            raise MeshError(f"{path}: expected integer, got '{tok}'") from None

    def take_float():
        tok = take()
        try:
            return float(tok)
        except ValueError:
            raise MeshError(f"{path}: expected number, got '{tok}'") from None

    take("nodes")
    nv = take_int()
    verts = np.empty((nv, 2))
    for i in range(nv):
        idx = take_int()
        if idx != i + 1:
            raise MeshError(f"{path}: node ids must be 1-based contiguous "
                            f"(got {idx}, expected {i + 1})")
        verts[i, 0] = take_float()
        verts[i, 1] = take_float()

    take("elements")
    ne = take_int()
    elems = np.empty((ne, 3), dtype=np.int64)
    regions = np.empty(ne, dtype=np.int64)
    for i in range(ne):
        idx = take_int()
        if idx != i + 1:
            raise MeshError(f"{path}: element ids must be 1-based contiguous")
        elems[i] = [take_int() - 1, take_int() - 1, take_int() - 1]
        regions[i] = take_int()

    take("boundary")
    nb = take_int()
    bedges = np.empty((nb, 2), dtype=np.int64)
    tags = []
    for i in range(nb):
        idx = take_int()
        if idx != i + 1:
            raise MeshError(f"{path}: boundary ids must be 1-based contiguous")
        bedges[i] = [take_int() - 1, take_int() - 1]
        tags.append(take())
    if pos != len(tokens):
        raise MeshError(f"{path}: trailing tokens after boundary section")
    return Mesh(verts, elems, regions, bedges, tags)


def save_mesh(mesh, path):
    """Write a mesh in the ASCII format (exact layout, round-trip safe)."""
    lines = [f"nodes {mesh.num_vertices}"]
    for i, (x, y) in enumerate(mesh.vertices):
        lines.append(f"{i + 1} {float(x)!r} {float(y)!r}")
    lines.append(f"elements {mesh.num_elements}")
    for i in range(mesh.num_elements):
        a, b, c = mesh.elements[i] + 1
        lines.append(f"{i + 1} {a} {b} {c} {mesh.regions[i]}")
    lines.append(f"boundary {mesh.boundary_edges.shape[0]}")
    for i in range(mesh.boundary_edges.shape[0]):
        a, b = mesh.boundary_edges[i] + 1
        lines.append(f"{i + 1} {a} {b} {mesh.boundary_tags[i]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_unit_square(n, dirichlet_only=True):
    """Structured triangulation of the unit square with 2*n^2 elements.

    Every cell of the n-by-n grid is split along the same diagonal, so all
    elements share one shape-regularity constant.  The whole boundary is
    tagged Dirichlet; with ``dirichlet_only=False`` the bottom edge is
    tagged Neumann instead.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = lambda i, j: j * (n + 1) + i
    verts = np.array([[i / n, j / n] for j in range(n + 1) for i in range(n + 1)])
    elems = []
    for j in range(n):
        for i in range(n):
            v00, v10 = idx(i, j), idx(i + 1, j)
            v01, v11 = idx(i, j + 1), idx(i + 1, j + 1)
            elems.append([v00, v10, v11])
            elems.append([v00, v11, v01])
    bedges, tags = [], []
    bottom = NEUMANN if not dirichlet_only else DIRICHLET
    for i in range(n):
        bedges.append([idx(i, 0), idx(i + 1, 0)])
        tags.append(bottom)
    for j in range(n):
        bedges.append([idx(n, j), idx(n, j + 1)])
        tags.append(DIRICHLET)
    for i in range(n):
        bedges.append([idx(i + 1, n), idx(i, n)])
        tags.append(DIRICHLET)
    for j in range(n):
        bedges.append([idx(0, j + 1), idx(0, j)])
        tags.append(DIRICHLET)
    regions = np.ones(len(elems), dtype=np.int64)
    return Mesh(verts, np.array(elems), regions, np.array(bedges), tags)


def shape_data(mesh):
    """Per-element diameter, incircle diameter and shape-regularity kappa.

    The incircle diameter is 4*area/perimeter; kappa_K = h_K/rho_K >= 1.
    """
    pts = mesh.vertices
    tri = mesh.elements
    e0 = np.linalg.norm(pts[tri[:, 1]] - pts[tri[:, 0]], axis=1)
    e1 = np.linalg.norm(pts[tri[:, 2]] - pts[tri[:, 1]], axis=1)
    e2 = np.linalg.norm(pts[tri[:, 0]] - pts[tri[:, 2]], axis=1)
    h = np.maximum(e0, np.maximum(e1, e2))
    areas = mesh.signed_areas()
    rho = 4.0 * areas / (e0 + e1 + e2)
    kappa = h / rho
    return ElementGeometry(h=h, rho=rho, kappa=kappa, kappa_max=float(kappa.max()))


def build_patches(mesh):
    """One :class:`VertexPatch` per mesh vertex.

    Raises
    ------
    MeshError
        If the elements of some patch are not edge-connected through the
        vertex (a non-manifold "pinwheel" vertex).
    """
    patches = []
    for a in range(mesh.num_vertices):
        elems = np.array(sorted(mesh.vertex_elements[a]), dtype=np.int64)
        if elems.size == 0:
            raise MeshError(f"vertex {a + 1} belongs to no element")
        elem_set = set(int(k) for k in elems)
        through, far = [], []
        for k in elems:
            for loc in range(3):
                eid = int(mesh.elem_edges[k, loc])
                va, vb = mesh.edges[eid]
                if a in (va, vb):
                    if eid not in through:
                        through.append(eid)
                else:
                    far.append(eid)
        interior, bnd_through = [], []
        for eid in through:
            k0, k1 = mesh.edge_elements[eid]
            if k0 in elem_set and k1 in elem_set:
                interior.append(eid)
            else:
                bnd_through.append(eid)
        _check_patch_connected(mesh, elems, interior, a)

        neumann = [e for e in bnd_through if mesh.edge_tags[e] == NEUMANN]
        dirichlet = [e for e in bnd_through if mesh.edge_tags[e] == DIRICHLET]
        on_dirichlet = len(dirichlet) > 0
        essential = sorted(set(far) | (set(bnd_through) - set(neumann)))
        free = dirichlet if on_dirichlet else []
        solver_essential = sorted((set(far) | set(bnd_through)) - set(free))

        vids = np.unique(mesh.elements[elems])
        p = mesh.vertices[vids]
        d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
        patches.append(VertexPatch(
            vertex=a,
            elements=elems,
            h_patch=float(np.sqrt(d2.max())),
            neumann_edges=sorted(neumann),
            essential_edges=essential,
            needs_mean_constraint=len(neumann) == 0,
            on_dirichlet=on_dirichlet,
            interior_edges=sorted(interior),
            solver_free_edges=sorted(free),
            solver_essential_edges=solver_essential,
        ))
    return patches


def _check_patch_connected(mesh, elems, interior_edges, a):
    index = {int(k): i for i, k in enumerate(elems)}
    parent = list(range(len(elems)))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for eid in interior_edges:
        k0, k1 = mesh.edge_elements[eid]
        r0, r1 = root(index[int(k0)]), root(index[int(k1)])
        if r0 != r1:
            parent[r0] = r1
    roots = {root(i) for i in range(len(elems))}
    if len(roots) != 1:
        raise MeshError(f"patch of vertex {a + 1} is not edge-connected")


def refine_uniform(mesh):
    """Red refinement: each triangle is split into four by its edge midpoints.

    Region ids and boundary tags are inherited; the result carries
    ``parent`` (the input mesh) and ``parent_elements`` (child -> parent map).
    """
    nv = mesh.num_vertices
    mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    verts = np.vstack([mesh.vertices, mid])

    elems, regions, parents = [], [], []
    for k in range(mesh.num_elements):
        a, b, c = mesh.elements[k]
        mab = nv + mesh.elem_edges[k, 0]
        mbc = nv + mesh.elem_edges[k, 1]
        mca = nv + mesh.elem_edges[k, 2]
        for child in ([a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]):
            elems.append(child)
            regions.append(mesh.regions[k])
            parents.append(k)

    bedges, tags = [], []
    for i in range(mesh.boundary_edges.shape[0]):
        a, b = mesh.boundary_edges[i]
        eid = mesh.boundary_edge_ids[i]
        m = nv + eid
        bedges.append([a, m])
        bedges.append([m, b])
        tags.extend([mesh.boundary_tags[i]] * 2)

    fine = Mesh(verts, np.array(elems), np.array(regions),
                np.array(bedges), tags)
    fine.parent = mesh
    fine.parent_elements = np.array(parents, dtype=np.int64)
    return fine


def refine_times(mesh, times):
    """Refine ``times`` times; returns (fine_mesh, ancestor_map into ``mesh``)."""
    fine = mesh
    ancestor = np.arange(mesh.num_elements, dtype=np.int64)
    for _ in range(times):
        fine = refine_uniform(fine)
        ancestor = ancestor[fine.parent_elements]
    return fine, ancestor
