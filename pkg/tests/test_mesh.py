import numpy as np
import pytest

from stabcert import mesh as msh


def reference_triangle(tags=("N", "N", "N")):
    return msh.Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                    np.array([[0, 1, 2]]), np.array([1]),
                    np.array([[0, 1], [1, 2], [2, 0]]), list(tags))


def test_reference_triangle_all_dirichlet():
    m = reference_triangle(tags=("D", "D", "D"))
    assert m.num_elements == 1
    assert m.boundary_edges.shape[0] == 3
    assert set(m.boundary_tags) == {"D"}


def test_two_element_square_with_neumann_edge(tmp_path):
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    elems = np.array([[0, 1, 2], [0, 2, 3]])
    bed = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
    m = msh.Mesh(verts, elems, np.array([1, 1]), bed, ["N", "D", "D", "D"])
    assert m.num_elements == 2
    tags = [m.edge_tags[e] for e in m.boundary_edge_ids]
    assert sorted(tags) == ["D", "D", "D", "N"]


def test_hanging_node_rejected():
    # big triangle (A, B, C) against two small ones sharing the midpoint of AB
    verts = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.5],
                      [1.0, 0.0], [1.0, -1.0]])
    elems = np.array([[0, 1, 2], [0, 4, 3], [4, 1, 3]])
    bed = np.array([[1, 2], [2, 0], [0, 4], [4, 1]])
    with pytest.raises(msh.MeshError, match="hanging node"):
        msh.Mesh(verts, elems, np.array([1, 1, 1]), bed, ["D"] * 4)


def test_inverted_element_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(msh.MeshError, match="inverted"):
        msh.Mesh(verts, np.array([[0, 2, 1]]), np.array([1]),
                 np.array([[0, 1], [1, 2], [2, 0]]), ["D", "D", "D"])


def test_untagged_boundary_edge_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(msh.MeshError, match="no tag"):
        msh.Mesh(verts, np.array([[0, 1, 2]]), np.array([1]),
                 np.array([[0, 1], [1, 2]]), ["D", "D"])


def test_interior_edge_tag_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    elems = np.array([[0, 1, 2], [0, 2, 3]])
    bed = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [0, 2]])
    with pytest.raises(msh.MeshError, match="interior"):
        msh.Mesh(verts, elems, np.array([1, 1]), bed, ["D"] * 5)


def test_generator_counts():
    m1 = msh.generate_unit_square(1)
    assert m1.num_elements == 2
    assert m1.boundary_edges.shape[0] == 4
    assert set(m1.boundary_tags) == {"D"}
    m2 = msh.generate_unit_square(2)
    assert m2.num_elements == 8
    assert m2.num_vertices == 9


def test_generator_uniform_shape_regularity():
    geo = msh.shape_data(msh.generate_unit_square(4))
    assert np.allclose(geo.kappa, geo.kappa[0], rtol=1e-13)


def test_shape_data_right_isoceles():
    m = reference_triangle()
    geo = msh.shape_data(m)
    assert geo.h[0] == pytest.approx(np.sqrt(2.0), rel=1e-14)
    assert geo.rho[0] == pytest.approx(2.0 / (2.0 + np.sqrt(2.0)), rel=1e-14)
    assert geo.kappa_max >= 1.0


def test_shape_data_equilateral():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])
    m = msh.Mesh(verts, np.array([[0, 1, 2]]), np.array([1]),
                 np.array([[0, 1], [1, 2], [2, 0]]), ["D"] * 3)
    geo = msh.shape_data(m)
    assert geo.h[0] == pytest.approx(1.0, rel=1e-14)
    assert geo.rho[0] == pytest.approx(1.0 / np.sqrt(3.0), rel=1e-12)


def test_shape_regularity_scale_invariant():
    m = msh.generate_unit_square(3)
    scaled = msh.Mesh(10.0 * m.vertices, m.elements, m.regions,
                      m.boundary_edges, m.boundary_tags)
    assert np.allclose(msh.shape_data(m).kappa, msh.shape_data(scaled).kappa,
                       rtol=1e-13)


def test_patch_flags_all_dirichlet_square():
    m = msh.generate_unit_square(1)
    patches = msh.build_patches(m)
    corner = patches[0]
    assert corner.needs_mean_constraint  # no Neumann edge at the corner
    assert corner.on_dirichlet
    assert not corner.solver_mean_constraint
    assert len(corner.solver_free_edges) > 0


def test_patch_flags_interior_vertex():
    m = msh.generate_unit_square(2)
    patches = msh.build_patches(m)
    center = patches[4]  # vertex (0.5, 0.5)
    assert np.allclose(m.vertices[4], [0.5, 0.5])
    assert center.neumann_edges == []
    assert center.needs_mean_constraint
    assert not center.on_dirichlet
    assert center.solver_mean_constraint
    assert len(center.elements) == 6


def test_patch_flags_neumann_bottom():
    m = msh.generate_unit_square(2, dirichlet_only=False)
    patches = msh.build_patches(m)
    mid_bottom = [p for p in patches
                  if np.allclose(m.vertices[p.vertex], [0.5, 0.0])][0]
    assert len(mid_bottom.neumann_edges) == 2
    assert not mid_bottom.needs_mean_constraint
    assert not mid_bottom.on_dirichlet
    # the flux solver still pins the mean there (trace held zero on Gamma_N)
    assert mid_bottom.solver_mean_constraint


def test_every_element_in_three_patches():
    m = msh.generate_unit_square(3)
    patches = msh.build_patches(m)
    counts = np.zeros(m.num_elements, dtype=int)
    for p in patches:
        counts[p.elements] += 1
    assert (counts == 3).all()


def test_refine_counts_and_tags():
    m = msh.generate_unit_square(1, dirichlet_only=False)
    f = msh.refine_uniform(m)
    assert f.num_elements == 8
    assert abs(f.signed_areas().sum() - 1.0) < 1e-14
    # children of the bottom (Neumann) edge keep the tag
    n_tags = [t for t in f.boundary_tags if t == "N"]
    assert len(n_tags) == 2
    assert msh.shape_data(f).kappa_max == pytest.approx(
        msh.shape_data(m).kappa_max, rel=1e-13)
    assert f.parent is m
    assert (np.sort(np.unique(f.parent_elements)) ==
            np.arange(m.num_elements)).all()


def test_interior_edges_opposite_orientation():
    m = msh.generate_unit_square(3)
    for eid in range(m.num_edges):
        k0, k1 = m.edge_elements[eid]
        if k1 < 0:
            continue
        s0 = m.elem_edge_sign[k0][m.elem_edges[k0] == eid]
        s1 = m.elem_edge_sign[k1][m.elem_edges[k1] == eid]
        assert s0[0] * s1[0] == -1


def test_area_matches_boundary_polygon():
    m = msh.generate_unit_square(5)
    # shoelace over the boundary edges (oriented outward by their tags order)
    total = 0.0
    for i in range(m.boundary_edges.shape[0]):
        a, b = m.boundary_edges[i]
        pa, pb = m.vertices[a], m.vertices[b]
        total += 0.5 * (pa[0] * pb[1] - pb[0] * pa[1])
    assert abs(m.signed_areas().sum() - abs(total)) < 1e-12


def test_save_load_round_trip(tmp_path):
    m = msh.generate_unit_square(3, dirichlet_only=False)
    p1 = tmp_path / "m1.mesh"
    p2 = tmp_path / "m2.mesh"
    msh.save_mesh(m, p1)
    m2 = msh.load_mesh(p1)
    msh.save_mesh(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("nodes 1\n1 0.0 zero\n")
    with pytest.raises(msh.MeshError, match="expected number"):
        msh.load_mesh(path)
