import numpy as np
import pytest

from svmrkpm.image import SyntheticTruth, make_training_set, otsu_threshold, synth_image
from svmrkpm.interface import (
    InterfaceNode,
    InterfaceOptions,
    SearchPair,
    assemble_nodeset,
    candidate_pairs,
    discretize_image,
    interface_mse,
    merge_interface_nodes,
    newton_search,
    search_interface_nodes,
)
from svmrkpm.rk import AnalyticScoreField, BasisSpec, InterpolatedScoreField, RkKernelSpec
from svmrkpm.svm import SvmKernelSpec, train

PLANE5 = AnalyticScoreField.plane(axis=0, offset=5.0)


def two_column_grid(ell=1.0):
    ys = np.arange(5) * ell
    left = np.column_stack([np.full(5, 5.0 - 0.5 * ell), ys])
    right = np.column_stack([np.full(5, 5.0 + 0.5 * ell), ys])
    coords = np.vstack([left, right])
    scores = np.concatenate([-np.ones(5), np.ones(5)])
    return coords, scores


class TestCandidatePairs:
    def test_two_column_grid_pairs_horizontal(self):
        ell = 1.0
        coords, scores = two_column_grid(ell)
        svs = coords  # every node close to the boundary acts as an SV here
        pairs = candidate_pairs(coords, scores, svs, xi=1.5, voxel_size=ell)
        # oracle: brute-force nearest negative node for every positive node
        pos = coords[scores >= 0]
        neg = coords[scores < 0]
        for p in pos:
            d = np.linalg.norm(neg - p, axis=1)
            assert d.min() == pytest.approx(ell)
        assert len(pairs) == 5
        for pair in pairs:
            assert pair.length == pytest.approx(ell)
            assert abs(pair.direction[1]) < 1e-14  # horizontal

    def test_no_candidates_is_error(self):
        coords, scores = two_column_grid()
        far_svs = np.array([[100.0, 100.0]])
        with pytest.raises(ValueError, match="empty interface"):
            candidate_pairs(coords, scores, far_svs, xi=1.5, voxel_size=1.0)

    def test_default_xi(self):
        import inspect
        sig = inspect.signature(candidate_pairs)
        assert sig.parameters["xi"].default == 1.5

    def test_tied_slaves_both_kept(self):
        coords = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
        scores = np.array([1.0, -1.0, -1.0])
        pairs = candidate_pairs(coords, scores, coords[:1], xi=3.0,
                                voxel_size=1.0)
        assert len(pairs) == 2


class TestNewtonSearch:
    def test_affine_one_iteration(self):
        field = AnalyticScoreField(
            lambda p: (-(p[:, 0] - 5.0), np.tile([-1.0, 0.0], (len(p), 1))))
        pair = SearchPair(master=np.array([4.5, 2.0]),
                          slave=np.array([5.5, 2.0]))
        node = newton_search(pair, field)
        assert node is not None
        assert node.iterations == 1
        assert node.position[0] == pytest.approx(5.0, abs=1e-14)

    def test_circle_field_statistics(self):
        # interpolated circle distance sampled on a grid
        axis = np.linspace(0, 10, 41)
        xx, yy = np.meshgrid(axis, axis, indexing="ij")
        coords = np.column_stack([xx.ravel(), yy.ravel()])
        center = np.array([5.0, 5.0])
        r = np.linalg.norm(coords - center, axis=1)
        scores = 2.5 - r
        h = axis[1] - axis[0]
        field = InterpolatedScoreField(coords, scores, h)
        masters = coords[(scores >= 0) & (r > 2.0)]
        pairs = []
        for m in masters[:40]:
            outward = (m - center) / np.linalg.norm(m - center)
            pairs.append(SearchPair(master=m, slave=m + h * outward))
        nodes, stats = search_interface_nodes(pairs, field, tol=1e-10)
        assert stats.mean_iterations <= 10
        assert stats.mean_residual <= 1e-8

    def test_degenerate_gradient_bisection(self):
        # score flat at the master: Newton step undefined, bracket still valid
        def fn(pts):
            s = -(pts[:, 0] - 5.0) ** 3 + 1e-6
            g = np.zeros_like(pts)
            g[:, 0] = -3.0 * (pts[:, 0] - 5.0) ** 2
            return s, g

        field = AnalyticScoreField(fn)
        pair = SearchPair(master=np.array([5.0, 0.0]),
                          slave=np.array([6.0, 0.0]))
        node = newton_search(pair, field, tol=1e-12)
        assert node is not None
        assert node.position[0] == pytest.approx(5.0 + 1e-2, rel=1e-4)

    def test_tangent_pair_rejected(self):
        pair = SearchPair(master=np.array([4.0, 0.0]),
                          slave=np.array([4.0, 1.0]))  # parallel to interface

        def fn(pts):
            s = np.full(len(pts), 1.0)  # never crosses zero; flat gradient
            return s, np.zeros_like(pts)

        assert newton_search(pair, AnalyticScoreField(fn)) is None


class TestAssemble:
    def make_node(self, x, y, nx=1.0, ny=0.0):
        return InterfaceNode(position=np.array([x, y]), residual=1e-12,
                             iterations=3, normal=np.array([nx, ny]))

    def test_merge_below_tolerance(self):
        nodes = [self.make_node(0.5, 0.5), self.make_node(0.5 + 1e-6, 0.5),
                 self.make_node(0.9, 0.1)]
        merged = merge_interface_nodes(nodes, merge_tol=0.01)
        assert len(merged) == 2

    def test_prune_bulk_near_interface(self):
        coords = np.array([[5.2, 0.0], [6.0, 0.0], [4.0, 0.0]])
        scores = np.array([1.0, 1.0, -1.0])
        inode = self.make_node(5.0, 0.0)
        ns = assemble_nodeset(coords, scores, [inode], voxel_size=1.0,
                              zeta=1.0 / 3.0)
        # node at distance 0.2 * ell removed; others kept
        assert len(ns) == 3
        assert not any(np.allclose(c, [5.2, 0.0]) for c in ns.coords)

    def test_roles_and_normals(self):
        coords = np.array([[6.0, 0.0], [4.0, 0.0]])
        scores = np.array([2.0, -2.0])
        ns = assemble_nodeset(coords, scores, [self.make_node(5.0, 0.0)],
                              voxel_size=1.0)
        assert list(ns.roles) == [1, -1, 0]
        assert np.allclose(ns.normals[2], [1.0, 0.0])
        assert np.isnan(ns.normals[0]).all()

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        base = [self.make_node(x, y) for x, y in rng.uniform(0, 1, (30, 2))]
        perm = [base[i] for i in rng.permutation(30)]
        p1 = np.array([n.position for n in merge_interface_nodes(base)])
        p2 = np.array([n.position for n in merge_interface_nodes(perm)])
        assert np.allclose(np.sort(p1, axis=0), np.sort(p2, axis=0), atol=1e-8)


class TestInterfaceMse:
    TRUTH = SyntheticTruth(circles=(((5.0, 5.0), 2.0),), extent=10.0)

    def test_exact_nodes_zero(self):
        theta = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        pts = 5.0 + 2.0 * np.column_stack([np.cos(theta), np.sin(theta)])
        assert interface_mse(pts, self.TRUTH) == pytest.approx(0.0, abs=1e-15)

    def test_single_offset_node(self):
        pts = np.array([[5.0 + 2.1, 5.0]])  # radially off by 0.1
        assert interface_mse(pts, self.TRUTH) == pytest.approx(0.01)

    def test_empty_error(self):
        with pytest.raises(ValueError, match="empty interface"):
            interface_mse([], self.TRUTH)


class TestPipeline:
    def test_small_synthetic_image(self):
        truth = SyntheticTruth(circles=(((5.0, 5.0), 2.5),), extent=10.0)
        img = synth_image(truth, 50, noise_sigma=0.05, seed=1)
        data = make_training_set(img, otsu_threshold(img))
        model = train(data, C=500.0, spec=SvmKernelSpec("gaussian", gamma=0.25),
                      tol=1e-3)
        nodes, stats, field = discretize_image(img, model)
        assert stats.count > 20
        assert stats.mean_residual <= 1e-8
        assert stats.mean_iterations <= 10
        mse = interface_mse(nodes.coords[nodes.interface_mask], truth)
        assert mse <= 0.04  # coarse 50x50 raster; scales with pixel size
        # every surviving interface node sits on the zero level set
        resid = np.abs(field.values(nodes.coords[nodes.interface_mask]))
        assert resid.max() <= 1e-8
        # no bulk node within zeta * ell of an interface node
        from scipy.spatial import cKDTree
        d, _ = cKDTree(nodes.coords[nodes.interface_mask]).query(
            nodes.coords[nodes.bulk_mask], k=1)
        assert d.min() >= (1.0 / 3.0) * img.voxel_size - 1e-12
