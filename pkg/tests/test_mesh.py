import numpy as np
import pytest

from poromix.mesh import (
    Mesh,
    MeshParseError,
    MeshTopologyError,
    gen_two_squares,
    load_mesh,
    read_mesh,
    refine_uniform,
    save_mesh,
    triangle_areas,
    validate_mesh,
    write_mesh,
)


def _canonical(mesh):
    """Coordinate-based description independent of node numbering."""
    key = lambda i: tuple(np.round(mesh.nodes[i], 12))  # noqa: E731
    tris = sorted((tuple(sorted(key(i) for i in t)), r)
                  for t, r in zip(mesh.triangles.tolist(), mesh.regions.tolist()))
    bnd = sorted((tuple(sorted(key(i) for i in e)), t)
                 for e, t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist()))
    fac = sorted((tuple(sorted(key(i) for i in f)), mesh.regions[p], mesh.regions[m])
                 for f, p, m in zip(mesh.facets.tolist(), mesh.facet_plus, mesh.facet_minus))
    return tris, bnd, fac


def test_reference_mesh_counts():
    m = gen_two_squares(10e-3, 8)
    assert m.h == pytest.approx(1.25e-3)
    assert m.n_triangles == 256
    assert m.n_facets == 8
    validate_mesh(m)


def test_smallest_mesh():
    m = gen_two_squares(1.0, 1)
    assert (m.n_triangles, m.n_facets, m.n_nodes) == (4, 1, 6)
    np.testing.assert_allclose(m.facet_normals, [[0.0, 1.0]])
    assert set(m.boundary_names) == {"bottom", "top", "left", "right"}
    assert m.regions[m.facet_minus[0]] == "A" and m.regions[m.facet_plus[0]] == "B"


def test_n16_facets_nest_in_n8():
    coarse, fine = gen_two_squares(10e-3, 8), gen_two_squares(10e-3, 16)
    assert fine.n_triangles == 1024
    fx = sorted(fine.nodes[fine.facets].reshape(-1, 2)[:, 0].tolist())
    for (i, j) in coarse.facets.tolist():
        a, b = sorted([coarse.nodes[i, 0], coarse.nodes[j, 0]])
        mid = 0.5 * (a + b)
        inside = [x for x in fx if a - 1e-15 <= x <= b + 1e-15]
        assert any(abs(x - mid) < 1e-15 for x in inside)
    assert fine.interface_length() == pytest.approx(coarse.interface_length(), rel=1e-14)


def test_refine_matches_generator():
    L = 10e-3
    r = refine_uniform(gen_two_squares(L, 8))
    validate_mesh(r)
    assert r.h == pytest.approx(L / 16)
    assert _canonical(r) == _canonical(gen_two_squares(L, 16))


def test_refine_counts_and_area():
    m = gen_two_squares(1.0, 3)
    r = refine_uniform(m)
    assert r.n_triangles == 4 * m.n_triangles
    assert r.n_facets == 2 * m.n_facets
    assert triangle_areas(r).sum() == pytest.approx(triangle_areas(m).sum(), rel=1e-14)


def test_refine_single_region_pair():
    m = Mesh(nodes=[[0, 0], [1, 0], [1, 1], [0, 1]], triangles=[[0, 1, 2], [0, 2, 3]],
             regions=["A", "A"], boundary_edges=[[0, 1], [1, 2], [2, 3], [3, 0]],
             boundary_tags=["s"] * 4)
    validate_mesh(m)
    r = refine_uniform(m)
    assert r.n_triangles == 8
    validate_mesh(r)


def test_save_load_round_trip(tmp_path):
    m = gen_two_squares(1.0, 1)
    m2 = load_mesh(save_mesh(m))
    for a in ("nodes", "triangles", "regions", "boundary_edges", "boundary_tags", "facets",
              "facet_plus", "facet_minus", "facet_normals"):
        np.testing.assert_array_equal(getattr(m, a), getattr(m2, a))
    m3 = gen_two_squares(0.1, 3)
    write_mesh(m3, tmp_path / "m.txt")
    np.testing.assert_array_equal(read_mesh(tmp_path / "m.txt").nodes, m3.nodes)


def test_same_region_facet_rejected():
    text = save_mesh(gen_two_squares(1.0, 1)).replace(" B\n", " A\n")
    with pytest.raises(MeshTopologyError, match="same region"):
        load_mesh(text)


def test_clockwise_triangle_rejected():
    m = gen_two_squares(1.0, 1)
    lines = save_mesh(m).splitlines()
    k = lines.index("triangles 4") + 3  # third triangle
    i, j, kk, r = lines[k].split()
    lines[k] = f"{j} {i} {kk} {r}"
    with pytest.raises(MeshTopologyError, match="triangle 2"):
        load_mesh("\n".join(lines))


def test_parse_error_reports_line():
    text = save_mesh(gen_two_squares(1.0, 1)).replace("nodes 6", "nodes six")
    with pytest.raises(MeshParseError) as exc:
        load_mesh(text)
    assert exc.value.lineno == 2


@pytest.mark.parametrize("L,n", [(0.0, 2), (-1.0, 2), (1.0, 0), (1.0, 1.5)])
def test_invalid_generator_input(L, n):
    with pytest.raises(ValueError):
        gen_two_squares(L, n)


def test_mesh_is_read_only():
    m = gen_two_squares(1.0, 2)
    with pytest.raises(ValueError):
        m.nodes[0, 0] = 5.0
