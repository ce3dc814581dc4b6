import numpy as np
import pytest

from dcinv.grid import build_grid, segment_interior_nodes


def test_counts_2d():
    g = build_grid(2, 4)
    assert g.n_cells == 16
    assert g.n_nodes == 25
    assert len(g.segments) == 4
    assert all(seg.node_indices.size == 5 for seg in g.segments.values())


def test_counts_3d():
    g = build_grid(3, 4)
    assert g.n_cells == 64
    assert g.n_nodes == 125
    assert len(g.segments) == 6
    assert all(seg.node_indices.size == 25 for seg in g.segments.values())


def test_full_scale_2d_constructible():
    g = build_grid(2, 129)
    assert g.n_cells == 129**2
    assert g.h[0] == 1.0 / 129


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_grid(4, 8)
    with pytest.raises(ValueError):
        build_grid(2, 3)


def test_index_maps_are_inverse():
    for dim in (2, 3):
        g = build_grid(dim, 5)
        ids = np.arange(g.n_nodes)
        assert np.array_equal(g.node_index(g.node_multi(ids)), ids)


def test_segments_cover_boundary():
    for dim in (2, 3):
        g = build_grid(dim, 4)
        union = np.unique(np.concatenate([s.node_indices for s in g.segments.values()]))
        assert np.array_equal(union, g.boundary_node_ids())


def test_corners_belong_to_multiple_segments():
    for dim in (2, 3):
        g = build_grid(dim, 4)
        for corner in g.corner_node_ids():
            hits = sum(corner in set(s.node_indices.tolist()) for s in g.segments.values())
            assert hits >= 2


def test_interior_nodes_2d():
    g = build_grid(2, 4)
    inner = segment_interior_nodes(g, g.segments["top"])
    assert inner.size == 3
    corners = set(g.corner_node_ids().tolist())
    assert not corners & set(inner.tolist())


def test_interior_nodes_2d_large_edge():
    g = build_grid(2, 129)
    seg = g.segments["left"]
    assert seg.node_indices.size == 130
    assert segment_interior_nodes(g, seg).size == 128


def test_interior_nodes_3d_face():
    g = build_grid(3, 4)
    inner = segment_interior_nodes(g, g.segments["top"])
    assert inner.size == 9
    # the removed ring holds every node shared with another face
    ring = set(g.segments["top"].node_indices.tolist()) - set(inner.tolist())
    other = set()
    for sid, seg in g.segments.items():
        if sid != "top":
            other |= set(seg.node_indices.tolist())
    assert ring <= other
    assert not other & set(inner.tolist())


def test_local_coords_ordering():
    g2 = build_grid(2, 6)
    for seg in g2.segments.values():
        assert np.all(np.diff(seg.local_coords) > 0)
    g3 = build_grid(3, 4)
    for seg in g3.segments.values():
        c = seg.local_coords
        keys = c[:, 0] * 10 + c[:, 1]
        assert np.all(np.diff(keys) > 0)


def test_spacing_exact():
    g = build_grid(2, 8)
    assert g.h == (0.125, 0.125)


def test_nearest_boundary_node():
    g = build_grid(2, 4)
    assert g.nearest_boundary_node((0.0, 0.5)) == g.node_index((0, 2))
    assert g.nearest_boundary_node((1.0, 0.49)) == g.node_index((4, 2))


def test_node_coords_roundtrip():
    g = build_grid(3, 5)
    ids = np.array([0, 17, g.n_nodes - 1])
    coords = g.node_coords(ids)
    multi = np.round(coords / g.h[0]).astype(int)
    assert np.array_equal(g.node_index(tuple(multi.T)), ids)
