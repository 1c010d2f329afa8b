"""Piecewise-linear decomposition of maxout units along the input path."""

import numpy as np
from numpy.testing import assert_allclose

from deltalift.engine import (
    compute_reference,
    deeplift,
    local_multipliers_maxout,
    maxout_segments,
)
from deltalift.graph import GraphBuilder, forward


def maxout_unit(weights, biases):
    """Single maxout layer; weights (pieces, out, in), biases (pieces, out)."""
    weights = np.asarray(weights, dtype=float)
    b = GraphBuilder()
    x = b.input("x", (weights.shape[2],))
    b.maxout("m", x, weights, biases)
    return b.build(outputs=["m"])


def envelope_piece_by_sampling(node, x0, x1, unit, n_points=10000):
    """Oracle: dominating piece at dense path samples, by direct evaluation."""
    w = node.params["weights"][:, unit, :]
    b = node.params["biases"][:, unit]
    ts = np.linspace(0.0, 1.0, n_points)
    path = x0[None, :] + ts[:, None] * (x1 - x0)[None, :]
    vals = path @ w.T + b[None, :]  # (n_points, pieces)
    return ts, vals


def segments_piece_at(decomp, ts):
    """Piece index the decomposition assigns to each path parameter."""
    out = np.empty(len(ts), dtype=int)
    for i, t in enumerate(ts):
        for seg in decomp.segments:
            if seg.t_start - 1e-12 <= t <= seg.t_end + 1e-12:
                out[i] = seg.piece
                break
    return out


class TestTwoPieceExample:
    # pieces f1(x) = x and f2(x) = 2x - 1 cross at x = 1; the path from
    # reference 0 to input 2 splits evenly between them
    def setup_method(self):
        self.graph = maxout_unit([[[1.0]], [[2.0]]], [[0.0], [-1.0]])
        self.node = self.graph.nodes["m"]

    def test_segments(self):
        dec = maxout_segments(self.node, np.zeros(1), np.array([2.0]))
        assert [s.piece for s in dec.segments] == [0, 1]
        assert_allclose([s.fraction for s in dec.segments], [0.5, 0.5])
        assert_allclose(dec.fractions.sum(), 1.0, atol=1e-12)

    def test_multiplier_and_conservation(self):
        dec = maxout_segments(self.node, np.zeros(1), np.array([2.0]))
        m = local_multipliers_maxout(self.node, dec)
        assert_allclose(m, [1.5])
        tr = forward(self.graph, {"x": np.array([2.0])})
        ref = compute_reference(self.graph, {"x": np.zeros(1)})
        assert_allclose(m @ (tr["x"] - ref["x"]), tr["m"] - ref["m"])
        assert_allclose(tr["m"] - ref["m"], [3.0])

    def test_degenerate_path_single_segment(self):
        dec = maxout_segments(self.node, np.array([2.0]), np.array([2.0]))
        assert len(dec.segments) == 1
        assert dec.segments[0].fraction == 1.0
        # at x = 2 the steeper piece dominates
        assert dec.segments[0].piece == 1


def test_single_piece_reduces_to_affine_rule(rng):
    w = rng.normal(size=(1, 3, 4))
    b = rng.normal(size=(1, 3))
    graph = maxout_unit(w, b)
    node = graph.nodes["m"]
    for unit in range(3):
        dec = maxout_segments(node, rng.normal(size=4), rng.normal(size=4),
                              unit=unit)
        assert len(dec.segments) == 1
        assert dec.segments[0].fraction == 1.0
        assert_allclose(local_multipliers_maxout(node, dec), w[0, unit])


class TestRandomDecompositions:
    def test_dense_sampling_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(30):
            pieces = int(rng.integers(2, 6))
            in_dim = int(rng.integers(1, 5))
            w = rng.normal(size=(pieces, 1, in_dim))
            b = rng.normal(size=(pieces, 1))
            graph = maxout_unit(w, b)
            node = graph.nodes["m"]
            x0 = rng.normal(size=in_dim)
            x1 = rng.normal(size=in_dim)
            dec = maxout_segments(node, x0, x1)
            ts, vals = envelope_piece_by_sampling(node, x0, x1, 0)
            assigned = segments_piece_at(dec, ts)
            # the assigned piece must attain the envelope at every sample
            attained = vals[np.arange(len(ts)), assigned]
            assert_allclose(attained, vals.max(axis=1), atol=1e-9)
            # and where the margin is clear the identity must match exactly
            top2 = np.sort(vals, axis=1)[:, -2:]
            clear = (top2[:, 1] - top2[:, 0]) > 1e-9
            assert (assigned[clear] == vals[clear].argmax(axis=1)).all()

    def test_fractions_partition_unity(self, rng):
        for _ in range(50):
            pieces = int(rng.integers(1, 7))
            in_dim = int(rng.integers(1, 5))
            graph = maxout_unit(
                rng.normal(size=(pieces, 2, in_dim)), rng.normal(size=(pieces, 2))
            )
            node = graph.nodes["m"]
            for unit in range(2):
                dec = maxout_segments(node, rng.normal(size=in_dim),
                                      rng.normal(size=in_dim), unit=unit)
                assert abs(dec.fractions.sum() - 1.0) < 1e-12
                assert (dec.fractions >= 0).all()
                bounds = [s.t_start for s in dec.segments]
                assert bounds == sorted(bounds)

    def test_summation_to_delta_residual(self, rng):
        for _ in range(50):
            pieces = int(rng.integers(1, 6))
            in_dim = int(rng.integers(1, 5))
            out_dim = int(rng.integers(1, 4))
            graph = maxout_unit(
                rng.normal(size=(pieces, out_dim, in_dim)),
                rng.normal(size=(pieces, out_dim)),
            )
            x0 = rng.normal(size=in_dim)
            x1 = rng.normal(size=in_dim)
            for unit in range(out_dim):
                report = deeplift(graph, {"x": x1}, {"x": x0},
                                  target=("m", unit))
                assert report.residual < 1e-9
