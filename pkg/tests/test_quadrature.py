import numpy as np
import pytest

from svmrkpm.imrk import ImrkShapeContext, RkShapeContext
from svmrkpm.meshing import grid_circle_nodeset, rod_nodeset
from svmrkpm.quadrature import (
    gauss_scheme,
    mirror_interface_nodes,
    scni_cells,
    smoothed_gradients,
    voronoi_cells,
)
from svmrkpm.rk import AnalyticScoreField, BasisSpec, NodeSet, RkKernelSpec

B3 = RkKernelSpec("bspline3", support=2.0)
LIN = BasisSpec(order=1)


def square_nodes(n, side=1.0, support=2.0):
    axis = np.linspace(0.0, side, n)
    h = axis[1] - axis[0]
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    return NodeSet(coords=coords, roles=np.ones(len(coords), int),
                   scores=np.ones(len(coords)),
                   supports=np.full(len(coords), support * h), spacing=h)


class TestGaussScheme:
    def test_unit_square_2x2(self):
        gs = gauss_scheme(((0.0, 0.0), (1.0, 1.0)), cells=1, points_per_axis=2)
        assert len(gs.points) == 4
        assert np.allclose(gs.weights, 0.25)

    def test_weights_sum_to_area(self):
        gs = gauss_scheme(((0.0, -1.0), (2.0, 3.0)), cells=(3, 4),
                          points_per_axis=3)
        assert gs.total_weight == pytest.approx(8.0, rel=1e-12)

    def test_five_point_degree_nine_exact(self):
        gs = gauss_scheme(((0.0,), (1.0,)), cells=1, points_per_axis=5)
        integral = np.sum(gs.weights * gs.points[:, 0] ** 9)
        assert integral == pytest.approx(0.1, abs=1e-14)

    def test_tags_from_field(self):
        field = AnalyticScoreField.plane(axis=0, offset=0.5)
        gs = gauss_scheme(((0.0, 0.0), (1.0, 1.0)), cells=4,
                          points_per_axis=2, score_field=field)
        assert np.array_equal(gs.tags, np.where(gs.points[:, 0] >= 0.5, 1, -1))

    def test_boundary_quadrature_closes(self):
        gs = gauss_scheme(((0.0, 0.0), (2.0, 1.0)), cells=(4, 2),
                          points_per_axis=3)
        assert gs.boundary_weights.sum() == pytest.approx(6.0, rel=1e-12)
        # closed surface: integral of the normal vanishes
        assert np.abs((gs.boundary_weights[:, None]
                       * gs.boundary_normals).sum(axis=0)).max() < 1e-12


class TestMirrorPairs:
    def test_affine_field_offsets(self):
        nodes, field = rod_nodeset(11)
        pairs = mirror_interface_nodes(nodes, eps=1e-3)
        assert len(pairs) == 1
        s_plus = field.values(pairs[0].plus[None])[0]
        s_minus = field.values(pairs[0].minus[None])[0]
        assert s_plus == pytest.approx(1e-3, rel=1e-12)
        assert s_minus == pytest.approx(-1e-3, rel=1e-12)

    def test_circle_normals_radial(self):
        nodes, field = grid_circle_nodeset(21, side=5.0, radius=1.0)
        iface = np.flatnonzero(nodes.interface_mask)
        for i in iface:
            x = nodes.coords[i]
            radial = x / np.linalg.norm(x)
            assert abs(abs(nodes.normals[i] @ radial) - 1.0) < 1e-6

    def test_default_epsilon(self):
        nodes, _ = rod_nodeset(11)
        pairs = mirror_interface_nodes(nodes)
        off = np.linalg.norm(pairs[0].plus - nodes.coords[nodes.interface_mask][0])
        assert off == pytest.approx(1e-3 * nodes.spacing, rel=1e-12)


class TestVoronoi:
    def test_uniform_grid_square_cells(self):
        n = 4
        axis = (np.arange(n) + 0.5) / n
        xx, yy = np.meshgrid(axis, axis, indexing="ij")
        sites = np.column_stack([xx.ravel(), yy.ravel()])
        cx = voronoi_cells(sites, ((0.0, 0.0), (1.0, 1.0)), spacing=1.0 / n)
        assert len(cx.cells) == n * n
        for c in cx.cells:
            assert c.area == pytest.approx(1.0 / n**2, rel=1e-10)
        assert cx.total_area == pytest.approx(1.0, rel=1e-12)

    def test_duplicate_sites_rejected(self):
        sites = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(ValueError, match="duplicate"):
            voronoi_cells(sites, ((0.0, 0.0), (1.0, 1.0)))

    def test_area_conservation_with_mirrors(self):
        nodes, field = grid_circle_nodeset(21, side=5.0, radius=1.0)
        cx = scni_cells(nodes, ((0.0, 0.0), (5.0, 5.0)))
        assert cx.total_area == pytest.approx(25.0, rel=1e-8)
        # without interface nodes
        bulk = nodes.bulk_mask
        plain = voronoi_cells(nodes.coords[bulk], ((0.0, 0.0), (5.0, 5.0)),
                              spacing=nodes.spacing)
        assert plain.total_area == pytest.approx(25.0, rel=1e-8)

    def test_mirror_pair_edges_on_interface(self):
        # straight vertical interface at x = 2.5 with mirrored generators
        nodes, field = rod_nodeset(11)  # reuse 1D roles; build 2D manually
        axis = np.linspace(0.0, 5.0, 11)
        h = axis[1] - axis[0]
        xx, yy = np.meshgrid(axis, axis, indexing="ij")
        coords = np.column_stack([xx.ravel(), yy.ravel()])
        s = coords[:, 0] - 2.5
        keep = np.abs(s) > h / 3
        iface_y = np.linspace(0.0, 5.0, 11)
        iface = np.column_stack([np.full(11, 2.5), iface_y])
        all_coords = np.vstack([coords[keep], iface])
        roles = np.concatenate([np.sign(s[keep]).astype(int),
                                np.zeros(11, int)])
        normals = np.full_like(all_coords, np.nan)
        normals[len(coords[keep]):] = [1.0, 0.0]
        ns = NodeSet(coords=all_coords, roles=roles,
                     scores=np.concatenate([s[keep], np.zeros(11)]),
                     supports=np.full(len(all_coords), 2 * h), spacing=h,
                     normals=normals)
        eps = 1e-3 * h
        cx = scni_cells(ns, ((0.0, 0.0), (5.0, 5.0)), eps=eps)
        assert cx.total_area == pytest.approx(25.0, rel=1e-8)
        pair_cells = [c for c in cx.cells if ns.roles[c.owner] == 0]
        assert len(pair_cells) == 22
        for c in pair_cells:
            on_if = np.abs(c.seg_points[:, 0] - 2.5) < 2 * eps
            assert on_if.any()  # shared edge lies on the interface line
            assert c.tag == (1 if c.site[0] > 2.5 else -1)


class TestSmoothedGradients:
    def test_partition_of_unity_and_linear_constraint(self):
        nodes = square_nodes(6)
        cx = scni_cells(nodes, ((0.0, 0.0), (1.0, 1.0)))
        provider = RkShapeContext(nodes, LIN, B3)
        ids, grads = smoothed_gradients(provider, cx)
        for cids, g in zip(ids, grads):
            assert np.abs(g.sum(axis=0)).max() < 1e-8 / nodes.spacing
            lin = g[:, 0] @ nodes.coords[cids, 0]
            assert lin == pytest.approx(1.0, abs=1e-8)

    def test_single_cell_constant_shape(self):
        class One:
            coords = np.array([[0.5, 0.5]])

            def evaluate(self, pts, side=None, grad=False):
                P = len(pts)
                return (np.zeros((P, 1), int), np.ones((P, 1), bool),
                        np.ones((P, 1)))

        cells = voronoi_cells(np.array([[0.5, 0.5]]), ((0.0, 0.0), (1.0, 1.0)))
        ids, grads = smoothed_gradients(One(), cells)
        assert np.abs(grads[0]).max() < 1e-14

    def test_divergence_consistency(self):
        nodes = square_nodes(6)
        cx = scni_cells(nodes, ((0.0, 0.0), (1.0, 1.0)))
        provider = RkShapeContext(nodes, LIN, B3)
        ids, grads = smoothed_gradients(provider, cx)
        total = np.zeros((len(nodes), 2))
        for c, cids, g in zip(cx.cells, ids, grads):
            total[cids] += c.area * g
        # compare against the boundary integral of each shape function
        bp, bw, bn, _ = cx.boundary_quadrature()
        idx, mask, psi = provider.evaluate(bp, grad=False)
        want = np.zeros((len(nodes), 2))
        q, kk = np.nonzero(mask)
        for k in range(2):
            np.add.at(want[:, k], idx[q, kk], psi[q, kk] * (bw * bn[:, k])[q])
        assert np.abs(total - want).max() < 1e-8

    def test_imrk_first_order_constraint_with_interface(self):
        nodes, field = grid_circle_nodeset(11, side=5.0, radius=1.0)
        cx = scni_cells(nodes, ((0.0, 0.0), (5.0, 5.0)))
        provider = ImrkShapeContext(nodes, field, LIN, B3)
        ids, grads = smoothed_gradients(provider, cx)
        for c, cids, g in zip(cx.cells, ids, grads):
            assert np.abs(g.sum(axis=0)).max() < 1e-8 / nodes.spacing
            for k in range(2):
                lin = g[:, k] @ nodes.coords[cids, k]
                assert lin == pytest.approx(1.0, abs=1e-8)

    def test_mirror_cells_opposite_tags(self):
        nodes, field = grid_circle_nodeset(11, side=5.0, radius=1.0)
        cx = scni_cells(nodes, ((0.0, 0.0), (5.0, 5.0)), score_field=field)
        by_owner = {}
        for c in cx.cells:
            if nodes.roles[c.owner] == 0:
                by_owner.setdefault(c.owner, []).append(c.tag)
            else:
                s = field.values(c.site[None])[0]
                assert c.tag == (1 if s >= 0 else -1)
        for owner, tags in by_owner.items():
            assert sorted(tags) == [-1, 1]
