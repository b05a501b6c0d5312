import numpy as np
import pytest

import oracles
from tissueseg.config import ModelConfig
from tissueseg.model import SegmentationModel
from tissueseg.tensor import Tensor, backward, no_grad
from tissueseg.trm import (
    MaskSet,
    TissueGraph,
    boundary_ratio,
    form_edges,
    masked_average,
    project_spatial,
    region_proposal,
    substitute_global,
)


def make_model(**kw):
    base = dict(num_classes=3, base_width=4, node_dim=4, gnn_layers=2, ffn_hidden=8, blocks_per_stage=1)
    base.update(kw)
    return SegmentationModel(ModelConfig(**base), seed=0)


def random_masks(rng, K, H, W, density=None):
    density = rng.uniform(0.02, 0.4) if density is None else density
    masks = (rng.random((K, H, W)) < density).astype(float)
    masks[rng.random(K) < 0.2] = 0.0
    return MaskSet.from_masks(masks)


def graph_for(trm, H, maskset):
    e = trm.edge_mlp(H, form_edges(maskset))
    return TissueGraph(H, form_edges(maskset), e, maskset)


class TestRegionProposal:
    def test_uniform_below_threshold(self):
        ms = region_proposal(np.full((3, 4, 4), 1 / 3), 0.5)
        assert ms.masks.sum() == 0 and not ms.present.any()

    def test_single_hot_pixel_dilates_to_block(self):
        p = np.zeros((2, 5, 5))
        p[0, 2, 2] = 0.9
        p[1] = 1 - p[0]
        ms = region_proposal(p, 0.5)
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1
        np.testing.assert_array_equal(ms.masks[0], expected)
        np.testing.assert_array_equal(ms.masks[0], oracles.region_masks(p, 0.5)[0])

    def test_threshold_is_strict(self):
        assert region_proposal(np.full((2, 3, 3), 0.5), 0.5).masks.sum() == 0

    def test_matches_oracle_on_random_maps(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            K = int(rng.integers(2, 5))
            p = rng.dirichlet(np.ones(K) * 0.5, size=(6, 7)).transpose(2, 0, 1)
            ms = region_proposal(p, 0.5)
            np.testing.assert_array_equal(ms.masks, oracles.region_masks(p, 0.5))
            np.testing.assert_array_equal(ms.present, ms.masks.sum(axis=(1, 2)) > 0)


class TestNodeFeatures:
    def test_full_mask_constant_features(self):
        v = np.array([1.5, -2.0, 0.25])
        F = Tensor(np.broadcast_to(v[:, None, None], (3, 4, 5)).copy())
        h = masked_average(F, MaskSet.from_masks(np.ones((1, 4, 5))), 1e-6).data[0]
        np.testing.assert_allclose(h, v * 20 / (20 + 1e-6), rtol=1e-15)

    def test_empty_mask_gives_zero(self):
        F = Tensor(np.random.default_rng(0).normal(size=(3, 4, 4)))
        h = masked_average(F, MaskSet.from_masks(np.zeros((1, 4, 4))), 1e-6).data[0]
        assert np.all(h == 0.0)

    def test_single_pixel(self):
        F = np.random.default_rng(1).normal(size=(3, 4, 4))
        m = np.zeros((1, 4, 4))
        m[0, 1, 2] = 1
        h = masked_average(Tensor(F), MaskSet.from_masks(m), 1e-6).data[0]
        np.testing.assert_allclose(h, F[:, 1, 2] / (1 + 1e-6), rtol=1e-15)

    def test_is_mean_over_mask_up_to_eps(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ms = random_masks(rng, 3, 6, 6, density=0.5)
            F = rng.normal(size=(4, 6, 6))
            h = masked_average(Tensor(F), ms, 1e-6).data
            for c in np.flatnonzero(ms.present):
                n = ms.masks[c].sum()
                mean = F[:, ms.masks[c] > 0].mean(axis=1)
                np.testing.assert_allclose(h[c], mean * n / (n + 1e-6), rtol=1e-12, atol=1e-15)
                assert abs(1 - n / (n + 1e-6)) < 1e-6

    def test_extract_node_features_uses_projection(self):
        model = make_model()
        d2 = Tensor(np.random.default_rng(3).normal(size=(1, 8, 4, 4)))
        ms = random_masks(np.random.default_rng(4), 3, 4, 4, density=0.5)
        with no_grad():
            h = model.trm.extract_node_features(d2, ms, training=False).data
            F = model.trm.feature_projection(d2, False).data[0]
        np.testing.assert_allclose(h, oracles.masked_pool(F, ms.masks, 1e-6), rtol=1e-12, atol=1e-14)


class TestGlobalSubstitution:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.H = Tensor(rng.normal(size=(4, 3)))
        self.G = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

    def test_all_present(self):
        ms = MaskSet(np.ones((4, 2, 2)), np.ones(4, bool))
        assert np.array_equal(substitute_global(self.H, ms, self.G).data, self.H.data)

    def test_all_absent(self):
        ms = MaskSet(np.zeros((4, 2, 2)), np.zeros(4, bool))
        assert np.array_equal(substitute_global(self.H, ms, self.G).data, self.G.data)

    def test_mixed_partition_and_gradient_route(self):
        present = np.array([True, False, True, False])
        ms = MaskSet(present[:, None, None] * np.ones((4, 2, 2)), present)
        out = substitute_global(self.H, ms, self.G)
        np.testing.assert_array_equal(out.data, oracles.substitute(self.H.data, present, self.G.data))
        backward(out.sum())
        assert np.all(self.G.grad[present] == 0) and np.all(self.G.grad[~present] == 1)


class TestEdges:
    def test_shared_pixel(self):
        m = np.zeros((2, 5, 5))
        m[0, 2, 2] = m[1, 2, 2] = 1
        assert form_edges(MaskSet.from_masks(m)).tolist() == [[0, 1], [1, 0]]

    def test_left_right_halves(self):
        m = np.zeros((2, 6, 6))
        m[0, :, :3] = 1
        m[1, :, 3:] = 1
        ms = MaskSet.from_masks(m)
        assert form_edges(ms).tolist() == [[0, 1], [1, 0]] == [list(e) for e in oracles.edges(m)]

    @pytest.mark.parametrize("gap,expect", [(0, True), (1, True), (2, False), (3, False)])
    def test_gap_threshold(self, gap, expect):
        # each dilation reaches one pixel into the gap, so only gaps of at most one pixel bridge
        m = np.zeros((2, 3, 10))
        m[0, :, 0] = 1
        m[1, :, 1 + gap] = 1
        assert (len(form_edges(MaskSet.from_masks(m))) > 0) == expect

    def test_diagonal_separation(self):
        m = np.zeros((2, 8, 8))
        m[0, :2, :2] = 1
        m[1, 5:, 5:] = 1
        assert len(form_edges(MaskSet.from_masks(m))) == 0

    def test_absent_classes_have_no_edges(self):
        m = np.zeros((3, 4, 4))
        m[0] = 1
        m[2, 0, 0] = 1
        assert form_edges(MaskSet.from_masks(m)).tolist() == [[0, 2], [2, 0]]


class TestEdgeMLP:
    def test_zero_weights_give_output_bias(self):
        model = make_model()
        p = model.params
        for k in ("fc1.weight", "fc2.weight"):
            p[f"trm.edge_mlp.{k}"].data[:] = 0
        p["trm.edge_mlp.fc2.bias"].data[:] = [1, 2, 3, 4]
        H = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        e = model.trm.edge_mlp(H, np.array([[0, 1], [2, 0]]))
        np.testing.assert_array_equal(e.data, [[1, 2, 3, 4]] * 2)

    def test_direction_matters_and_matches_oracle(self):
        model = make_model()
        p = model.params
        for k in ("fc1.bias", "fc2.bias"):
            p[f"trm.edge_mlp.{k}"].data[:] = np.random.default_rng(1).normal(size=4)
        H = np.random.default_rng(2).normal(size=(3, 4))
        e = model.trm.edge_mlp(Tensor(H), np.array([[0, 1], [1, 0]])).data
        assert not np.allclose(e[0], e[1])
        args = [p[f"trm.edge_mlp.{k}"].data for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")]
        ref = oracles.mlp2(np.concatenate([H[0], H[1]]), *args)
        np.testing.assert_allclose(e[0], ref, rtol=1e-12, atol=1e-14)

    def test_boundary_aware_input_width(self):
        model = make_model(boundary_aware_edges=True)
        assert model.params["trm.edge_mlp.fc1.weight"].shape == (4, 10)
        with pytest.raises(ValueError):
            model.trm.edge_mlp(Tensor(np.zeros((3, 4))), np.array([[0, 1]]))


class TestBoundaryRatio:
    def test_contained(self):
        m = np.zeros((2, 5, 5))
        m[0, 2, 2] = 1
        m[1, 1:4, 1:4] = 1
        assert boundary_ratio(MaskSet.from_masks(m), 0, 1) == 1.0

    def test_far_apart(self):
        m = np.zeros((2, 1, 8))
        m[0, 0, 0] = m[1, 0, 7] = 1
        assert boundary_ratio(MaskSet.from_masks(m), 0, 1) == 0.0

    def test_strip_example(self):
        m = np.zeros((2, 1, 8))
        m[0, 0, 0:4] = 1
        m[1, 0, 5] = 1
        ms = MaskSet.from_masks(m)
        assert boundary_ratio(ms, 0, 1) == 0.0
        assert boundary_ratio(ms, 1, 0) == 0.0

    def test_partial(self):
        m = np.zeros((2, 1, 8))
        m[0, 0, 0:4] = 1
        m[1, 0, 4] = 1
        # dilate(j) covers {3, 4, 5}: one of four pixels of i
        assert boundary_ratio(MaskSet.from_masks(m), 0, 1) == 0.25

    def test_absent_class_rejected(self):
        with pytest.raises(ValueError):
            boundary_ratio(MaskSet.from_masks(np.zeros((2, 3, 3))), 0, 1)


class TestEdgeWeight:
    def test_zero_edge(self):
        model = make_model(use_edge_weights=True)
        assert model.trm.edge_weight(Tensor(np.zeros((1, 4)))).data[0] == 0.5

    def test_identity_unit_vector(self):
        model = make_model(use_edge_weights=True)
        model.params["trm.edge_weight.W"].data[:] = np.eye(4)
        w = model.trm.edge_weight(Tensor([[1.0, 0, 0, 0]])).data[0]
        np.testing.assert_allclose(w, 1 / (1 + np.exp(-1.0)), rtol=1e-15)
        assert abs(w - 0.7311) < 1e-4

    def test_directional(self):
        model = make_model(use_edge_weights=True)
        e = np.random.default_rng(0).normal(size=(2, 4))
        w = model.trm.edge_weight(Tensor(e)).data
        assert np.all((w > 0) & (w < 1)) and w[0] != w[1]


class TestSimpleGNN:
    def test_no_edges_gives_relu_bias(self):
        model = make_model(gnn_variant="simple")
        b = np.array([0.5, -1.0, 2.0, 0.0])
        model.params["trm.gnn.layer0.bias"].data[:] = b
        ms = MaskSet.from_masks(np.zeros((3, 4, 4)))
        g = TissueGraph(Tensor(np.ones((3, 4))), np.zeros((0, 2), int), Tensor(np.zeros((0, 4))), ms)
        out = model.trm.gnn_layer_simple(0, g.node_features, g).data
        np.testing.assert_array_equal(out, np.tile(np.maximum(b, 0), (3, 1)))

    def test_single_edge_identity(self):
        model = make_model(gnn_variant="simple")
        model.params["trm.gnn.layer0.W"].data[:] = np.eye(4)
        model.params["trm.gnn.layer0.bias"].data[:] = 0
        H = np.array([[1.0, -2.0, 3.0, -0.5], [0, 0, 0, 0], [0, 0, 0, 0]])
        g = TissueGraph(Tensor(H), np.array([[0, 1]]), Tensor(np.ones((1, 4))), None)
        out = model.trm.gnn_layer_simple(0, g.node_features, g).data
        np.testing.assert_array_equal(out[1], np.maximum(H[0], 0))

    def test_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(11)
        for case in range(100):
            K, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
            model = make_model(gnn_variant="simple", num_classes=K, node_dim=d)
            p = model.params
            p["trm.gnn.layer0.bias"].data[:] = rng.normal(size=d)
            ms = random_masks(rng, K, 5, 5)
            H = rng.normal(size=(K, d))
            g = graph_for(model.trm, Tensor(H), ms)
            out = model.trm.gnn_layer_simple(0, g.node_features, g).data
            ref = oracles.simple_layer(H, [tuple(e) for e in g.edges], g.edge_features.data,
                                       p["trm.gnn.layer0.W"].data, p["trm.gnn.layer0.bias"].data)
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_two_layer_hand_case(self):
        model = make_model(gnn_variant="simple", num_classes=2, node_dim=2)
        p = model.params
        p["trm.gnn.layer0.W"].data[:] = [[1.0, 2.0], [0.0, 1.0]]
        p["trm.gnn.layer0.bias"].data[:] = [0.5, -1.0]
        p["trm.gnn.layer1.W"].data[:] = [[2.0, 0.0], [1.0, -1.0]]
        p["trm.gnn.layer1.bias"].data[:] = [0.0, 1.0]
        H = Tensor([[1.0, 2.0], [3.0, -1.0]])
        edges = np.array([[0, 1], [1, 0]])
        e = Tensor([[1.0, 0.5], [2.0, 1.0]])  # e_01, e_10
        g = TissueGraph(H, edges, e, None)
        out = model.trm.run_gnn(g).data
        # layer 0: node0 <- W h1 * e_10 + b = [1, -1]*[2, 1] + b = [2.5, -2] -> [2.5, 0]
        #          node1 <- W h0 * e_01 + b = [5, 2]*[1, .5] + b = [5.5, 0] -> [5.5, 0]
        # layer 1: node0 <- W' h1 * e_10 + b' = [11, 5.5]*[2, 1] + b' = [22, 6.5]
        #          node1 <- W' h0 * e_01 + b' = [5, 2.5]*[1, .5] + b' = [5, 2.25]
        np.testing.assert_array_equal(out, [[22.0, 6.5], [5.0, 2.25]])

    def test_single_layer_run_equals_layer_call(self):
        model = make_model(gnn_variant="attention", gnn_layers=1)
        rng = np.random.default_rng(4)
        ms = random_masks(rng, 3, 5, 5, density=0.3)
        g = graph_for(model.trm, Tensor(rng.normal(size=(3, 4))), ms)
        a = model.trm.run_gnn(g).data
        b = model.trm.gnn_layer(0, g.node_features, g).data
        assert np.array_equal(a, b) and a.shape == (3, 4)


class TestAttentionGNN:
    def test_coefficients_normalize(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            K = int(rng.integers(2, 6))
            model = make_model(num_classes=K)
            ms = random_masks(rng, K, 6, 6)
            g = graph_for(model.trm, Tensor(rng.normal(size=(K, 4))), ms)
            wh = Tensor(rng.normal(size=(K, 4)) * 3)
            alpha = model.trm.attention_coefficients(0, wh, g).data
            sums = np.zeros(K)
            np.add.at(sums, g.edges[:, 1], alpha)
            has = np.isin(np.arange(K), g.edges[:, 1])
            np.testing.assert_allclose(sums[has], 1.0, atol=1e-9)

    def test_zero_message_weights_leave_residual_path(self):
        model = make_model()
        model.params["trm.gnn.layer0.W"].data[:] = 0
        rng = np.random.default_rng(7)
        H = Tensor(rng.normal(size=(3, 4)))
        ms = random_masks(rng, 3, 5, 5, density=0.5)
        g = graph_for(model.trm, H, ms)
        empty = TissueGraph(H, np.zeros((0, 2), int), Tensor(np.zeros((0, 4))), ms)
        a = model.trm.gnn_layer_attention(0, H, g).data
        b = model.trm.gnn_layer_attention(0, H, empty).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    def test_isolated_node_formula(self):
        from tissueseg import functional as F

        model = make_model()
        p = model.params
        h = Tensor(np.random.default_rng(8).normal(size=(3, 4)))
        g = TissueGraph(h, np.zeros((0, 2), int), Tensor(np.zeros((0, 4))), None)
        out = model.trm.gnn_layer_attention(0, h, g).data
        ln1 = F.layer_norm(h, p["trm.gnn.layer0.ln1.weight"], p["trm.gnn.layer0.ln1.bias"]).data
        hid = np.maximum(ln1 @ p["trm.gnn.layer0.ffn.fc1.weight"].data.T, 0)
        ffn = hid @ p["trm.gnn.layer0.ffn.fc2.weight"].data.T
        ref = F.layer_norm(Tensor(ln1 + ffn), p["trm.gnn.layer0.ln2.weight"], p["trm.gnn.layer0.ln2.bias"]).data
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        model = make_model(num_classes=4)
        ms = random_masks(rng, 4, 6, 6, density=0.3)
        H = rng.normal(size=(4, 4))
        perm = rng.permutation(4)
        g = graph_for(model.trm, Tensor(H), ms)
        gp = graph_for(model.trm, Tensor(H[perm]), MaskSet(ms.masks[perm], ms.present[perm]))
        a = model.trm.run_gnn(g).data
        b = model.trm.run_gnn(gp).data
        assert np.array_equal(a[perm], b)


class TestProjection:
    def test_disjoint_masks(self):
        m = np.zeros((2, 3, 3))
        m[0, 0] = 1
        m[1, 2] = 1
        h = np.array([[1.0, 2.0], [3.0, 4.0]])
        S = project_spatial(Tensor(h), MaskSet.from_masks(m)).data
        np.testing.assert_array_equal(S[:, 0, 1], h[0])
        np.testing.assert_array_equal(S[:, 2, 2], h[1])
        np.testing.assert_array_equal(S[:, 1, 1], [0, 0])

    def test_overlap_sums(self):
        m = np.ones((2, 1, 1))
        S = project_spatial(Tensor([[1.0, 2.0], [0.5, -4.0]]), MaskSet.from_masks(m)).data
        np.testing.assert_array_equal(S[:, 0, 0], [1.5, -2.0])

    def test_empty_masks(self):
        S = project_spatial(Tensor(np.ones((3, 2))), MaskSet.from_masks(np.zeros((3, 4, 4)))).data
        assert np.all(S == 0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            K, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            ms = random_masks(rng, K, 4, 5)
            h = rng.normal(size=(K, d))
            S = project_spatial(Tensor(h), ms).data
            np.testing.assert_allclose(S, oracles.project(h, ms.masks), rtol=1e-12, atol=1e-12)


class TestFuse:
    def test_zero_projection_is_identity(self):
        model = make_model()
        model.params["trm.fuse.conv.weight"].data[:] = 0
        rng = np.random.default_rng(12)
        d2 = Tensor(rng.normal(size=(2, 8, 4, 4)))
        S = Tensor(rng.normal(size=(2, 4, 4, 4)))
        out = model.trm.fuse(d2, S, training=True)
        assert np.array_equal(out.data, d2.data) and out.shape == d2.shape


class TestTRMForward:
    def tiled_probs(self, K, H=8, W=8):
        """Vertical bands, one per class, with confident probabilities."""
        label = np.repeat(np.arange(K), int(np.ceil(W / K)))[:W]
        p = np.full((K, H, W), 0.02)
        for c in range(K):
            p[c][:, label == c] = 1 - 0.02 * (K - 1)
        return p

    def test_tiling_graph(self):
        model = make_model(num_classes=4)
        d2 = Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 8)))
        p = self.tiled_probs(4)
        with no_grad():
            _, graphs = model.trm.forward(p[None], d2, training=False)
        g = graphs[0]
        assert g.masks.present.all() and g.num_nodes == 4
        assert [tuple(e) for e in g.edges] == oracles.edges(oracles.region_masks(p, 0.5))

    def test_degenerate_cascade(self):
        model = make_model()
        d2 = Tensor(np.random.default_rng(1).normal(size=(1, 8, 4, 4)))
        p = np.full((1, 3, 4, 4), 1 / 3)
        with no_grad():
            out, graphs = model.trm.forward(p, d2, training=False)
        g = graphs[0]
        assert len(g.edges) == 0
        np.testing.assert_array_equal(g.node_features.data, model.params["trm.global_embedding"].data)
        # S = 0, so the fused map is D2 plus the eval-mode BN response to zero input
        bias = model.params["trm.fuse.bn.bias"].data
        mean, var = model.params.buffers["trm.fuse.bn.running_mean"], model.params.buffers["trm.fuse.bn.running_var"]
        const = bias - mean / np.sqrt(var + 1e-5) * model.params["trm.fuse.bn.weight"].data
        np.testing.assert_allclose(out.data, d2.data + const[None, :, None, None], rtol=0, atol=1e-15)

    def test_deterministic(self):
        model = make_model()
        rng = np.random.default_rng(2)
        d2 = Tensor(rng.normal(size=(2, 8, 6, 6)))
        p = rng.dirichlet(np.ones(3) * 0.3, size=(2, 6, 6)).transpose(0, 3, 1, 2)
        with no_grad():
            a = model.trm.forward(p, d2, training=False)[0].data
            b = model.trm.forward(p, d2, training=False)[0].data
        assert np.array_equal(a, b)

    def test_global_embedding_gradient_only_through_absent_rows(self):
        model = make_model(num_classes=4)
        rng = np.random.default_rng(3)
        d2 = Tensor(rng.normal(size=(1, 8, 6, 6)), requires_grad=True)
        p = self.tiled_probs(3, 6, 6)
        p = np.concatenate([p, np.zeros((1, 6, 6))])[None]  # class 3 absent
        out, graphs = model.trm.forward(p, d2, training=True)
        model.params.zero_grad()
        backward((out * Tensor(rng.normal(size=out.shape))).sum())
        G = model.params["trm.global_embedding"].grad
        assert np.all(G[:3] == 0)

    def test_all_present_global_embedding_gets_zero(self):
        model = make_model(num_classes=3)
        d2 = Tensor(np.random.default_rng(4).normal(size=(1, 8, 6, 6)))
        out, _ = model.trm.forward(self.tiled_probs(3, 6, 6)[None], d2, training=True)
        model.params.zero_grad()
        backward(out.sum())
        assert np.all(model.params["trm.global_embedding"].grad == 0)
