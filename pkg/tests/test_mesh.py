"""Mesh construction, refinement, and conformity audits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abpfem.mesh import (Domain, InvalidH0, MeshError, build_initial_mesh,
                         export_mesh, refine_adaptive, refine_uniform)


def domain_area(domain):
    return {"unit_square": 1.0, "l_shape": 3.0, "slit_square": 4.0}[domain.kind]


def test_domain_diameters():
    assert Domain.unit_square().diameter == pytest.approx(np.sqrt(2.0))
    assert Domain.l_shape().diameter == pytest.approx(2.0 * np.sqrt(2.0))
    assert Domain.slit_square().diameter == pytest.approx(2.0 * np.sqrt(2.0))


def test_unit_square_rect_half():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 0.5)
    assert mesh.ncells == 4
    assert mesh.nvertices == 9
    assert len(mesh.sides) == 12
    assert sum(1 for s in mesh.sides if s.boundary) == 8


def test_lshape_tri_unit():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    assert mesh.ncells == 6
    assert mesh.cell_areas().sum() == pytest.approx(3.0, abs=1e-12)


def test_slit_square_duplicated_vertices():
    mesh = build_initial_mesh(Domain.slit_square(), "rect", 0.5)
    assert mesh.ncells == 16
    coords = [tuple(v) for v in mesh.vertices]
    assert coords.count((0.5, 0.0)) == 2
    assert coords.count((0.0, 0.0)) == 2
    # both lips carry boundary sides
    lips = {s.lip for s in mesh.sides if s.boundary and s.lip != 0}
    assert lips == {-1, 1}


def test_invalid_h0_rect():
    with pytest.raises(InvalidH0):
        build_initial_mesh(Domain.unit_square(), "rect", 0.3)


def test_refine_uniform_rect():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 0.5)
    fine = refine_uniform(mesh)
    assert fine.ncells == 16
    assert fine.cell_sizes().max() == pytest.approx(0.25)
    assert fine.cell_areas().sum() == pytest.approx(mesh.cell_areas().sum(),
                                                    abs=1e-12)


def test_refine_uniform_tri_similarity():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    fine = refine_uniform(mesh)
    assert fine.ncells == 24
    assert fine.cell_areas().sum() == pytest.approx(3.0, abs=1e-12)
    # red refinement: children similar to parents, so the shape measure
    # h^2/area takes the same values before and after
    def classes(m):
        return np.unique(np.round(m.cell_diameters() ** 2 / m.cell_areas(), 9))
    assert np.allclose(classes(mesh), classes(fine))


def test_refine_adaptive_empty_is_identity():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 0.5)
    out = refine_adaptive(mesh, np.array([], dtype=int))
    assert out.ncells == mesh.ncells
    assert np.array_equal(out.cells, mesh.cells)


def test_refine_adaptive_all_equals_uniform_rect():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 0.5)
    a = refine_adaptive(mesh, np.arange(mesh.ncells))
    b = refine_uniform(mesh)
    assert a.ncells == b.ncells
    # same cells up to ordering
    ca = sorted(map(tuple, np.sort(a.vertices[a.cells].reshape(a.ncells, -1), axis=1)))
    cb = sorted(map(tuple, np.sort(b.vertices[b.cells].reshape(b.ncells, -1), axis=1)))
    assert np.allclose(ca, cb)


def test_nvb_single_mark_lshape():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    out = refine_adaptive(mesh, np.array([0]))
    assert 8 <= out.ncells <= 12
    _audit_tri_conformity(out)
    assert out.cell_areas().sum() == pytest.approx(3.0, rel=1e-10)


def _audit_tri_conformity(mesh):
    # every interior side has exactly two cells and matching endpoints
    for s in mesh.sides:
        if s.boundary:
            assert len(s.cells) == 1
        else:
            assert len(set(s.cells)) == 2
    # edge-as-vertex-pair audit: each undirected pair appears in <= 2 cells
    from collections import Counter
    cnt = Counter()
    for tri in mesh.cells:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            cnt[frozenset((tri[a], tri[b]))] += 1
    assert max(cnt.values()) <= 2


def test_marked_cells_strictly_smaller():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)
    marked = np.array([2, 4])
    before = mesh.cell_areas()
    out = refine_adaptive(mesh, marked)
    # no output cell reproduces a marked cell's vertex set
    coords = {frozenset(map(tuple, mesh.vertices[mesh.cells[c]])) for c in marked}
    news = {frozenset(map(tuple, out.vertices[t])) for t in out.cells}
    assert not (coords & news)
    assert out.cell_areas().min() < before[marked].min()


def test_rect_one_irregularity():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 0.5)
    rng = np.random.default_rng(3)
    for _ in range(4):
        marked = rng.choice(mesh.ncells, size=max(1, mesh.ncells // 5),
                            replace=False)
        mesh = refine_adaptive(mesh, marked)
    # hanging list: one hanging vertex per parent edge at most, and every
    # hanging vertex is the midpoint of its parents
    seen = set()
    for slave, va, vb in mesh.hanging:
        key = frozenset((va, vb))
        assert key not in seen
        seen.add(key)
        mid = 0.5 * (mesh.vertices[va] + mesh.vertices[vb])
        assert np.allclose(mesh.vertices[slave], mid, atol=1e-14)
    assert mesh.cell_areas().sum() == pytest.approx(1.0, rel=1e-10)


def test_nvb_min_angle_stabilizes():
    mesh = build_initial_mesh(Domain.l_shape(), "tri", 1.0)

    def min_angle(m):
        p = m.vertices[m.cells]
        best = np.inf
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = (a * b).sum(axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            best = min(best, np.arccos(np.clip(cosang, -1, 1)).min())
        return best

    rng = np.random.default_rng(11)
    meshes = [mesh]
    for _ in range(6):
        marked = rng.choice(meshes[-1].ncells, size=2, replace=False)
        meshes.append(refine_adaptive(meshes[-1], marked))
    floor = min_angle(meshes[2])
    for m in meshes[3:]:
        assert min_angle(m) >= floor - 1e-12


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=10 ** 6), min_size=0,
                max_size=8),
       st.sampled_from(["rect", "tri"]))
def test_area_conservation_random_refinement(marks, kind):
    dom = Domain.l_shape()
    mesh = build_initial_mesh(dom, kind, 1.0)
    for m in marks:
        marked = np.array([m % mesh.ncells])
        mesh = refine_adaptive(mesh, marked)
    assert mesh.cell_areas().sum() == pytest.approx(3.0, rel=1e-10)
    if kind == "tri":
        _audit_tri_conformity(mesh)
    assert mesh.cell_areas().min() > 0


def test_side_lengths_match_endpoints():
    for kind in ("rect", "tri"):
        mesh = build_initial_mesh(Domain.unit_square(), kind, 0.5)
        for s in mesh.sides:
            d = np.linalg.norm(mesh.vertices[s.v1] - mesh.vertices[s.v0])
            assert s.h == pytest.approx(d, rel=1e-14)
            assert np.linalg.norm(s.normal) == pytest.approx(1.0, rel=1e-14)


def test_boundary_sides_tile_boundary():
    for dom, kind, h0, perim in (
            (Domain.unit_square(), "rect", 0.25, 4.0),
            (Domain.l_shape(), "tri", 0.5, 8.0),
            (Domain.slit_square(), "rect", 0.5, 10.0)):  # slit counted twice
        mesh = build_initial_mesh(dom, kind, h0)
        blen = sum(s.h for s in mesh.sides if s.boundary)
        assert blen == pytest.approx(perim, rel=1e-12)


def test_export_roundtrip_header():
    mesh = build_initial_mesh(Domain.unit_square(), "rect", 0.5)
    text = export_mesh(mesh)
    lines = text.strip().split("\n")
    assert lines[0] == "cells=4 vertices=9 kind=rect"
    assert len(lines) == 1 + 9 + 4
    # vertex lines parse back exactly
    v = np.array([[float(t) for t in ln.split()] for ln in lines[1:10]])
    assert np.array_equal(v, mesh.vertices)


def test_cell_sizes_tri_raises():
    mesh = build_initial_mesh(Domain.unit_square(), "tri", 0.5)
    with pytest.raises(MeshError):
        mesh.cell_sizes()
