"""Multiplier rules, propagation, and the conservation property."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from deltalift.autodiff import backward
from deltalift.engine import (
    AttributionError,
    compute_deltas,
    compute_reference,
    contributions,
    deeplift,
    local_multipliers_affine,
    local_multipliers_max,
    local_multipliers_product,
    local_multipliers_rescale,
    propagate_multipliers,
    select_attribution_target,
    zeros_reference,
)
from deltalift.graph import GraphBuilder, forward

from graphgen import random_graph_case


def saturated_relu_net():
    """Two-feature net whose relu is active at the origin reference but
    shut off at (-1, -1); gradients vanish there while the reference
    comparison still assigns credit."""
    b = GraphBuilder()
    x = b.input("x", (2,))
    pre = b.affine("pre", x, [[1.0, 2.0]], [2.0])
    y = b.relu("y", pre)
    b.affine("out", y, [[0.2]], [0.1])
    return b.build(outputs=["out"])


class TestReference:
    def test_zero_reference_bias_free_linear(self, rng):
        b = GraphBuilder()
        x = b.input("x", (3,))
        h = b.affine("h", x, rng.normal(size=(4, 3)), np.zeros(4))
        b.affine("o", h, rng.normal(size=(2, 4)), np.zeros(2))
        g = b.build(outputs=["o"])
        ref = compute_reference(g, {"x": np.zeros(3)})
        for nid in g.nodes:
            assert_allclose(ref[nid], 0.0)

    def test_saturated_relu_net_reference(self):
        g = saturated_relu_net()
        ref = compute_reference(g, {"x": np.zeros(2)})
        assert_allclose(ref["y"], [2.0])
        assert_allclose(ref["out"], [0.5])

    def test_reference_is_plain_forward(self, rng):
        case = random_graph_case(rng)
        ref = compute_reference(case.graph, case.reference)
        tr = forward(case.graph, case.reference)
        for nid in case.graph.nodes:
            assert np.array_equal(ref[nid], tr[nid])


class TestAffineRule:
    def test_scalar_example(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.affine("y", x, [[3.0]], [0.0])
        g = b.build(outputs=["y"])
        m = local_multipliers_affine(g.nodes["y"])
        assert_allclose(m, [[3.0]])
        # delta_x = 2 gives C = 6 = delta_y
        tr = forward(g, {"x": np.array([5.0])})
        ref = compute_reference(g, {"x": np.array([3.0])})
        assert_allclose(m @ (tr["x"] - ref["x"]), tr["y"] - ref["y"])

    def test_random_affine_conserves_exactly(self, rng):
        for _ in range(20):
            out_dim, in_dim = rng.integers(1, 6, size=2)
            w = rng.normal(size=(out_dim, in_dim))
            b = GraphBuilder()
            x = b.input("x", (int(in_dim),))
            b.affine("y", x, w, rng.normal(size=out_dim))
            g = b.build(outputs=["y"])
            xs = rng.normal(size=in_dim)
            x0 = rng.normal(size=in_dim)
            tr = forward(g, {"x": xs})
            ref = compute_reference(g, {"x": x0})
            lhs = local_multipliers_affine(g.nodes["y"]) @ (xs - x0)
            assert_allclose(lhs, tr["y"] - ref["y"], atol=1e-12)

    def test_bias_only_shift_contributes_nothing(self, rng):
        b = GraphBuilder()
        x = b.input("x", (3,))
        b.affine("y", x, rng.normal(size=(2, 3)), rng.normal(size=2))
        g = b.build(outputs=["y"])
        point = rng.normal(size=3)
        report = deeplift(g, {"x": point}, {"x": point}, target=("y", 0))
        assert_allclose(report.contributions["x"], 0.0)
        # activations themselves are far from zero
        assert np.abs(forward(g, {"x": point})["y"]).max() > 0

    def test_conv_dense_matrix_matches_forward(self, rng):
        b = GraphBuilder()
        x = b.input("x", (7, 2))
        b.conv1d("c", x, rng.normal(size=(3, 3, 2)), np.zeros(3), stride=2)
        g = b.build(outputs=["c"])
        dense = local_multipliers_affine(g.nodes["c"], input_shape=(7, 2))
        v = rng.normal(size=(7, 2))
        assert_allclose(dense @ v.ravel(), forward(g, {"x": v})["c"].ravel())


class TestMaxRule:
    def _pool_pair(self):
        b = GraphBuilder()
        v = b.input("v", (2,))
        b.maxpool1d("p", v, 2, 2)
        return b.build(outputs=["p"])

    def test_window_example(self):
        g = self._pool_pair()
        tr = forward(g, {"v": np.array([3.0, 5.0])})
        ref = compute_reference(g, {"v": np.array([4.0, 1.0])})
        mult, contrib = local_multipliers_max(g.nodes["p"], tr, ref)
        assert_allclose(contrib, [0.0, 1.0])
        assert_allclose(mult, [0.0, 0.25])

    def test_input_at_reference_contributes_nothing(self):
        g = self._pool_pair()
        point = np.array([2.0, 7.0])
        tr = forward(g, {"v": point})
        ref = compute_reference(g, {"v": point})
        _, contrib = local_multipliers_max(g.nodes["p"], tr, ref)
        assert_allclose(contrib, 0.0)

    def test_tie_routes_all_delta_to_lowest_index(self):
        g = self._pool_pair()
        tr = forward(g, {"v": np.array([5.0, 5.0])})
        ref = compute_reference(g, {"v": np.array([1.0, 2.0])})
        _, contrib = local_multipliers_max(g.nodes["p"], tr, ref)
        delta_y = 5.0 - 2.0
        assert_allclose(contrib, [delta_y, 0.0])
        assert_allclose(contrib.sum(), delta_y)


class TestRescaleRule:
    def test_relu_partial_shutoff(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.relu("r", x)
        g = b.build(outputs=["r"])
        tr = forward(g, {"x": np.array([-1.0])})
        ref = compute_reference(g, {"x": np.array([2.0])})
        m = local_multipliers_rescale(g.nodes["r"], tr, ref)
        assert_allclose(m, [2.0 / 3.0])

    def test_sigmoid_limit_is_derivative_at_reference(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.sigmoid("s", x)
        g = b.build(outputs=["s"])
        x0 = np.array([0.7])
        tr = forward(g, {"x": x0 + 1e-9})
        ref = compute_reference(g, {"x": x0})
        m = local_multipliers_rescale(g.nodes["s"], tr, ref)
        s0 = 1 / (1 + np.exp(-x0))
        assert_allclose(m, s0 * (1 - s0), atol=1e-12)

    def test_tanh_direct_ratio(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.tanh("t", x)
        g = b.build(outputs=["t"])
        tr = forward(g, {"x": np.array([3.0])})
        ref = compute_reference(g, {"x": np.array([0.0])})
        m = local_multipliers_rescale(g.nodes["t"], tr, ref)
        assert_allclose(m, [np.tanh(3.0) / 3.0])

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh"])
    def test_continuity_across_stability_threshold(self, kind, rng):
        # the ratio just above eps_stable and the derivative fallback just
        # below it must agree closely: no jump at the switch
        b = GraphBuilder()
        x = b.input("x", (1,))
        getattr(b, kind)("y", x)
        g = b.build(outputs=["y"])
        for _ in range(20):
            x0 = rng.normal(size=1)
            eps = 1e-7
            ref = compute_reference(g, {"x": x0})
            above = local_multipliers_rescale(
                g.nodes["y"], forward(g, {"x": x0 + 1.01 * eps}), ref
            )
            below = local_multipliers_rescale(
                g.nodes["y"], forward(g, {"x": x0 + 0.99 * eps}), ref
            )
            assert abs(above[0] - below[0]) < 1e-6


class TestProductRule:
    def _product_graph(self):
        b = GraphBuilder()
        a = b.input("a", (1,))
        c = b.input("c", (1,))
        b.product("p", a, c)
        return b.build(outputs=["p"])

    def test_zero_references_split_symmetrically(self):
        g = self._product_graph()
        tr = forward(g, {"a": np.array([2.0]), "c": np.array([3.0])})
        ref = compute_reference(g, {"a": np.zeros(1), "c": np.zeros(1)})
        m1, m2 = local_multipliers_product(g.nodes["p"], tr, ref)
        c1 = m1 * (tr["a"] - ref["a"])
        c2 = m2 * (tr["c"] - ref["c"])
        assert_allclose(c1, [3.0])
        assert_allclose(c2, [3.0])
        assert_allclose(c1 + c2, tr["p"] - ref["p"])

    def test_unit_references_hand_expansion(self):
        g = self._product_graph()
        tr = forward(g, {"a": np.array([3.0]), "c": np.array([4.0])})
        ref = compute_reference(g, {"a": np.ones(1), "c": np.ones(1)})
        m1, m2 = local_multipliers_product(g.nodes["p"], tr, ref)
        assert_allclose(m1 * 2.0, [5.0])
        assert_allclose(m2 * 3.0, [6.0])
        assert_allclose(m1 * 2.0 + m2 * 3.0, tr["p"] - ref["p"])

    def test_operand_at_reference_gets_zero(self, rng):
        g = self._product_graph()
        a, c0, c1 = rng.normal(size=3)
        tr = forward(g, {"a": np.array([a]), "c": np.array([c1])})
        ref = compute_reference(g, {"a": np.array([a]), "c": np.array([c0])})
        m1, m2 = local_multipliers_product(g.nodes["p"], tr, ref)
        assert_allclose(m1 * 0.0, 0.0)
        assert_allclose(m2 * (c1 - c0), tr["p"] - ref["p"])


class TestPropagation:
    def test_two_stacked_affine_layers_compose_weights(self, rng):
        w1 = rng.normal(size=(4, 3))
        w2 = rng.normal(size=(2, 4))
        b = GraphBuilder()
        x = b.input("x", (3,))
        h = b.affine("h", x, w1, rng.normal(size=4))
        b.affine("o", h, w2, rng.normal(size=2))
        g = b.build(outputs=["o"])
        tr = forward(g, {"x": rng.normal(size=3)})
        ref = compute_reference(g, {"x": rng.normal(size=3)})
        for j in range(2):
            mm = propagate_multipliers(g, tr, ref, ("o", j))
            assert_allclose(mm["x"], (w2 @ w1)[j], atol=1e-12)

    def test_merged_affine_pair_equals_single_layer(self, rng):
        # chain-rule consistency: h = W2 (W1 x + b1) + b2 must attribute
        # exactly like the algebraically merged single layer
        w1 = rng.normal(size=(5, 3))
        b1 = rng.normal(size=5)
        w2 = rng.normal(size=(2, 5))
        b2 = rng.normal(size=2)
        stacked = GraphBuilder()
        x = stacked.input("x", (3,))
        h = stacked.affine("h", x, w1, b1)
        stacked.affine("o", h, w2, b2)
        g_two = stacked.build(outputs=["o"])

        merged = GraphBuilder()
        x = merged.input("x", (3,))
        merged.affine("o", x, w2 @ w1, w2 @ b1 + b2)
        g_one = merged.build(outputs=["o"])

        xs = {"x": rng.normal(size=3)}
        x0 = {"x": rng.normal(size=3)}
        r_two = deeplift(g_two, xs, x0, target=("o", 1))
        r_one = deeplift(g_one, xs, x0, target=("o", 1))
        assert_allclose(r_two.contributions["x"], r_one.contributions["x"],
                        atol=1e-12)

    def test_propagation_deterministic(self, rng):
        case = random_graph_case(rng)
        tr = forward(case.graph, case.inputs)
        ref = compute_reference(case.graph, case.reference)
        m1 = propagate_multipliers(case.graph, tr, ref, case.target)
        m2 = propagate_multipliers(case.graph, tr, ref, case.target)
        for nid in case.graph.nodes:
            assert np.array_equal(m1[nid], m2[nid])

    def test_multiplier_of_target_is_one(self, rng):
        case = random_graph_case(rng)
        tr = forward(case.graph, case.inputs)
        ref = compute_reference(case.graph, case.reference)
        mm = propagate_multipliers(case.graph, tr, ref, case.target)
        t_node, t_index = case.target
        assert mm[t_node].flat[t_index] == 1.0

    def test_softmax_in_path_rejected(self, rng):
        b = GraphBuilder()
        x = b.input("x", (3,))
        s = b.softmax("s", x)
        b.affine("o", s, rng.normal(size=(1, 3)), np.zeros(1))
        g = b.build(outputs=["o"])
        tr = forward(g, {"x": rng.normal(size=3)})
        ref = compute_reference(g, {"x": rng.normal(size=3)})
        with pytest.raises(AttributionError, match="softmax"):
            propagate_multipliers(g, tr, ref, ("o", 0))


class TestContributions:
    def test_linear_model_end_to_end(self, rng):
        w = rng.normal(size=(1, 4))
        b = GraphBuilder()
        x = b.input("x", (4,))
        b.affine("y", x, w, rng.normal(size=1))
        g = b.build(outputs=["y"])
        xs = rng.normal(size=4)
        x0 = rng.normal(size=4)
        report = deeplift(g, {"x": xs}, {"x": x0}, target=("y", 0))
        assert_allclose(report.contributions["x"], w[0] * (xs - x0))
        assert report.residual < 1e-12

    def test_input_equal_reference_all_zero(self, rng):
        case = random_graph_case(rng)
        report = deeplift(case.graph, case.inputs, case.inputs,
                          target=case.target)
        assert_allclose(report.contributions["x"], 0.0, atol=1e-12)
        assert report.delta_target == 0.0

    def test_summation_to_delta_random_graphs(self):
        rng = np.random.default_rng(7)
        kinds_seen = set()
        for _ in range(120):
            case = random_graph_case(rng)
            kinds_seen |= case.kinds
            report = deeplift(case.graph, case.inputs, case.reference,
                              target=case.target)
            tol = max(1e-9, 1e-6 * abs(report.delta_target))
            assert report.residual <= tol, (case.kinds, report.residual)
        assert {"conv1d", "maxpool1d", "maxout", "product", "prelu",
                "sigmoid", "tanh", "relu", "affine"} <= kinds_seen


class TestTargetSelection:
    def test_sigmoid_head_targets_pre_activation(self, rng):
        b = GraphBuilder()
        x = b.input("x", (2,))
        pre = b.affine("pre", x, rng.normal(size=(1, 2)), np.zeros(1))
        b.sigmoid("out", pre)
        g = b.build(outputs=["out"])
        assert select_attribution_target(g) == ("pre", 0)

    def test_softmax_head_uses_predicted_class(self, rng):
        b = GraphBuilder()
        x = b.input("x", (2,))
        pre = b.affine("pre", x, rng.normal(size=(3, 2)), np.zeros(3))
        b.softmax("out", pre)
        g = b.build(outputs=["out"])
        tr = forward(g, {"x": np.array([1.0, -0.5])})
        node, index = select_attribution_target(g, trace=tr)
        assert node == "pre"
        assert index == int(np.argmax(tr["out"]))
        assert select_attribution_target(g, class_index=2) == ("pre", 2)
        with pytest.raises(AttributionError, match="class_index"):
            select_attribution_target(g)

    def test_explicit_hidden_target_honored(self, rng):
        case = random_graph_case(rng)
        hidden = [nid for nid in case.graph.nodes
                  if case.graph.nodes[nid].kind != "input"][0]
        assert select_attribution_target(case.graph, (hidden, 0)) == (hidden, 0)

    def test_headless_graph_requires_explicit_target(self, rng):
        b = GraphBuilder()
        x = b.input("x", (2,))
        b.affine("y", x, rng.normal(size=(2, 2)), np.zeros(2))
        g = b.build(outputs=["y"])
        with pytest.raises(AttributionError, match="explicit"):
            select_attribution_target(g)


class TestRedundantInputsHead:
    """Additive features behind a saturating head: contributions to the
    squashed output shrink as redundant features pile up, while the
    pre-activation target keeps them at full scale."""

    def _graph(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        s = b.affine("s", x, [[1.0, 1.0]], [0.0])
        b.sigmoid("t", s)
        return b.build(outputs=["t"])

    def test_one_active_feature(self):
        g = self._graph()
        report = deeplift(g, {"x": np.array([100.0, 0.0])}, target=("t", 0))
        assert_allclose(report.contributions["x"], [0.5, 0.0], atol=1e-9)

    def test_two_active_features_attenuate(self):
        g = self._graph()
        report = deeplift(g, {"x": np.array([100.0, 100.0])}, target=("t", 0))
        assert_allclose(report.contributions["x"], [0.25, 0.25], atol=1e-9)

    def test_pre_activation_target_avoids_attenuation(self):
        g = self._graph()
        for point in ([100.0, 0.0], [100.0, 100.0]):
            report = deeplift(g, {"x": np.array(point)})  # auto: pre-sigmoid
            assert report.target == ("s", 0)
            assert_allclose(report.contributions["x"][0], 100.0, atol=1e-9)


class TestPiecewiseLinearEquivalence:
    def test_zero_bias_zero_reference_matches_gradient_times_input(self):
        # relu/maxpool/affine nets with zero bias and zero reference:
        # every reference activation is 0, so multipliers collapse to
        # gradients away from kinks
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(40):
            case = random_graph_case(rng, piecewise_linear_only=True,
                                     zero_bias=True, with_head=False)
            inputs = case.inputs
            report = deeplift(case.graph, inputs, zeros_reference(case.graph),
                              target=case.target)
            tr = forward(case.graph, inputs)
            grads = backward(case.graph, tr, case.target)
            gi = grads["x"] * inputs["x"]
            if np.min(np.abs(tr["x"])) < 1e-6:
                continue  # skip near-kink draws
            assert_allclose(report.contributions["x"], gi, atol=1e-9)
            checked += 1
        assert checked >= 30
