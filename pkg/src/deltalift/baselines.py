"""Comparison attribution methods: gradient*input and epsilon-LRP.

Gradient*input is the first-order Taylor score around zero.  The LRP
filtering rule redistributes relevance proportionally to weighted
activations with an epsilon-stabilized denominator; on piecewise-linear
networks (affine, conv1d, maxpool1d, relu) with biases included in the
denominators it converges to gradient*input as epsilon goes to zero,
which ``equivalence_report`` demonstrates over a random ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import _pool_argmax_rows, backward
from .engine import (
    AttributionError,
    ContributionReport,
    select_attribution_target,
)
from .graph import (
    Graph,
    GraphBuilder,
    Tensor,
    conv1d_windows,
    forward,
    topo_order,
)


def gradient_times_input(graph: Graph, inputs: dict[str, Tensor], target=None,
                         class_index=None,
                         reference_input: dict[str, Tensor] | None = None
                         ) -> ContributionReport:
    """Per-feature scores gradient * input for one sample.

    The target resolves like attribution targets elsewhere: explicit, or
    the pre-nonlinearity head.  With ``reference_input`` given, scores
    become gradient * (input - reference); the default reference is zero.
    The report's residual records how far the scores are from the
    difference-from-reference of the target (gradients conserve nothing,
    so this is diagnostic, not small).
    """
    graph.require_valid()
    trace = forward(graph, inputs)
    resolved = select_attribution_target(graph, target, class_index, trace)
    grads = backward(graph, trace, resolved)

    if reference_input is None:
        reference_input = {
            nid: np.zeros(graph.nodes[nid].output_shape)
            for nid in graph.input_ids()
        }
    ref_trace = forward(graph, reference_input)

    scores = {}
    mults = {}
    deltas = {}
    for input_id in graph.input_ids():
        d = trace[input_id] - ref_trace[input_id]
        g = grads[input_id]
        scores[input_id] = g * d
        mults[input_id] = g
        deltas[input_id] = d
    t_node, t_index = resolved
    delta_t = float(trace[t_node].flat[t_index] - ref_trace[t_node].flat[t_index])
    total = float(sum(s.sum() for s in scores.values()))
    return ContributionReport(
        target=resolved,
        method="grad_input",
        contributions=scores,
        multipliers=mults,
        deltas=deltas,
        delta_target=delta_t,
        residual=abs(total - delta_t),
    )


# ---------------------------------------------------------------------------
# epsilon-LRP


LRP_KINDS = frozenset(["input", "affine", "conv1d", "maxpool1d", "relu"])


@dataclass
class RelevanceTrace:
    """Per-node relevances from one LRP backward pass.

    ``bias_relevance`` records, per filtering node, the share absorbed by
    the bias and stabilizer terms; adding it back restores the layer-sum
    telescoping (exactly, at epsilon = 0).
    """

    relevances: dict[str, Tensor]
    bias_relevance: dict[str, float]
    epsilon: float
    target: tuple[str, int]

    def __getitem__(self, node_id: str) -> Tensor:
        return self.relevances[node_id]


def _sign_pos(x: Tensor) -> Tensor:
    return np.where(x >= 0, 1.0, -1.0)


def lrp_epsilon(graph: Graph, inputs: dict[str, Tensor], target=None,
                epsilon: float = 1e-9, class_index=None) -> RelevanceTrace:
    """Relevance propagation with the epsilon-stabilized filtering rule.

    Supports piecewise-linear graphs: affine and conv1d filter layers
    (bias included in the denominator), winner-take-all unpooling for
    maxpool1d, and pass-through rectifiers.  The target's relevance is
    seeded with its own activation.  Raises AttributionError on any
    other node kind.
    """
    graph.require_valid()
    unsupported = sorted(
        {n.kind for n in graph.nodes.values() if n.kind not in LRP_KINDS}
    )
    trace = forward(graph, inputs)
    resolved = select_attribution_target(graph, target, class_index, trace)
    t_node, t_index = resolved

    relevance = {nid: np.zeros(graph.nodes[nid].output_shape) for nid in graph.nodes}
    relevance[t_node].flat[t_index] = trace[t_node].flat[t_index]
    bias_rel: dict[str, float] = {}

    for node_id in reversed(topo_order(graph)):
        node = graph.nodes[node_id]
        if node.kind == "input":
            continue
        r_out = relevance[node_id]
        if not r_out.any():
            continue
        if node.kind not in LRP_KINDS:
            raise AttributionError(
                f"lrp does not support node '{node.id}' of kind '{node.kind}' "
                f"(unsupported kinds present: {unsupported})"
            )
        src = node.inputs[0]
        x = trace[src]
        if node.kind == "relu":
            relevance[src] += r_out
        elif node.kind == "maxpool1d":
            width, stride = int(node.params["width"]), int(node.params["stride"])
            rows = _pool_argmax_rows(x, width, stride)
            if x.ndim == 1:
                np.add.at(relevance[src], rows, r_out)
            else:
                cols = np.arange(x.shape[1])[None, :]
                np.add.at(relevance[src], (rows, cols), r_out)
        elif node.kind == "affine":
            w, b = node.params["weights"], node.params["bias"]
            a = trace[node_id]
            denom = a + epsilon * _sign_pos(a)
            share = r_out / denom
            relevance[src] += (x.ravel() * (w.T @ share)).reshape(x.shape)
            bias_rel[node_id] = bias_rel.get(node_id, 0.0) + float(
                ((b + epsilon * _sign_pos(a)) * share).sum()
            )
        elif node.kind == "conv1d":
            filters, b = node.params["filters"], node.params["bias"]
            stride = int(node.params["stride"])
            width = filters.shape[1]
            a = trace[node_id]
            denom = a + epsilon * _sign_pos(a)
            share = r_out / denom  # (P, F)
            win = conv1d_windows(x, width, stride)  # (P, C, K)
            msg = np.einsum("pck,fkc,pf->pkc", win, filters, share)
            acc = relevance[src]
            rows = stride * np.arange(share.shape[0])
            for k in range(width):
                acc[rows + k, :] += msg[:, k, :]
            bias_rel[node_id] = bias_rel.get(node_id, 0.0) + float(
                ((b[None, :] + epsilon * _sign_pos(a)) * share).sum()
            )
    return RelevanceTrace(relevance, bias_rel, epsilon, resolved)


def lrp_as_contribution_report(graph: Graph, inputs: dict[str, Tensor],
                               trace: RelevanceTrace) -> ContributionReport:
    """Package input-layer relevances in the common report shape."""
    scores = {nid: trace[nid].copy() for nid in graph.input_ids()}
    deltas = {nid: np.asarray(inputs[nid], dtype=np.float64) for nid in scores}
    mults = {}
    for nid, score in scores.items():
        d = deltas[nid]
        safe = np.where(d != 0.0, d, 1.0)
        mults[nid] = np.where(d != 0.0, score / safe, 0.0)
    fwd = forward(graph, inputs)
    t_node, t_index = trace.target
    delta_t = float(fwd[t_node].flat[t_index])
    total = float(sum(s.sum() for s in scores.values()))
    return ContributionReport(
        target=trace.target,
        method="lrp",
        contributions=scores,
        multipliers=mults,
        deltas=deltas,
        delta_target=delta_t,
        residual=abs(total - delta_t),
    )


# ---------------------------------------------------------------------------
# Equivalence of epsilon-LRP and gradient*input on piecewise-linear nets


@dataclass
class EnsembleSpec:
    """Random ReLU multi-layer perceptron ensemble for the equivalence check.

    Nets are resampled until every affine output entry has magnitude at
    least ``preactivation_floor``: those values are the LRP denominators,
    and near-zero denominators inflate finite-epsilon error without
    saying anything about the epsilon -> 0 limit.
    """

    n_nets: int = 100
    depth_range: tuple[int, int] = (2, 4)
    width_range: tuple[int, int] = (4, 12)
    input_dim_range: tuple[int, int] = (3, 8)
    seed: int = 0
    preactivation_floor: float = 1e-6


@dataclass
class EquivalenceRow:
    net_id: int
    epsilon: float
    max_rel_dev: float
    mean_rel_dev: float


def random_relu_mlp(rng: np.random.Generator, spec: EnsembleSpec):
    """One random ReLU MLP with nonzero biases, plus an admissible input."""
    for _ in range(1000):
        depth = int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1))
        in_dim = int(rng.integers(spec.input_dim_range[0], spec.input_dim_range[1] + 1))
        b = GraphBuilder()
        prev = b.input("x", (in_dim,))
        dim = in_dim
        for layer in range(depth - 1):
            width = int(rng.integers(spec.width_range[0], spec.width_range[1] + 1))
            w = rng.normal(size=(width, dim)) / np.sqrt(dim)
            bias = rng.normal(size=width) * 0.5
            prev = b.affine(f"fc{layer}", prev, w, bias)
            prev = b.relu(f"act{layer}", prev)
            dim = width
        w = rng.normal(size=(1, dim)) / np.sqrt(dim)
        bias = rng.normal(size=1) * 0.5
        out = b.affine("head", prev, w, bias)
        graph = b.build(outputs=[out])
        x = rng.normal(size=in_dim)

        trace = forward(graph, {"x": x})
        floors = [
            float(np.min(np.abs(trace[n.id])))
            for n in graph.nodes.values()
            if n.kind == "affine"
        ]
        if min(floors) >= spec.preactivation_floor:
            return graph, {"x": x}
    raise RuntimeError("could not sample an admissible net; floor too high?")


def _relative_deviation(lrp_scores: Tensor, gi_scores: Tensor) -> Tensor:
    return np.abs(lrp_scores - gi_scores) / (np.abs(gi_scores) + 1e-12)


def equivalence_report(spec: EnsembleSpec, epsilons) -> list[EquivalenceRow]:
    """Deviation between epsilon-LRP and gradient*input per net and epsilon.

    For each sampled net the target is the final affine unit; deviations
    are elementwise |lrp - g*x| / (|g*x| + 1e-12) over input features.
    As epsilon shrinks the deviation goes to zero.
    """
    rng = np.random.default_rng(spec.seed)
    epsilons = [float(e) for e in epsilons]
    rows: list[EquivalenceRow] = []
    for net_id in range(spec.n_nets):
        graph, inputs = random_relu_mlp(rng, spec)
        gi = gradient_times_input(graph, inputs, target=("head", 0))
        gi_scores = gi.contributions["x"]
        for eps in epsilons:
            rel = lrp_epsilon(graph, inputs, target=("head", 0), epsilon=eps)
            dev = _relative_deviation(rel["x"], gi_scores)
            rows.append(
                EquivalenceRow(net_id, eps, float(dev.max()), float(dev.mean()))
            )
    return rows


def write_equivalence_tsv(path, rows: list[EquivalenceRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("net_id\tepsilon\tmax_rel_dev\tmean_rel_dev\n")
        for row in rows:
            fh.write(
                f"{row.net_id}\t{row.epsilon:g}\t{row.max_rel_dev:.12g}\t"
                f"{row.mean_rel_dev:.12g}\n"
            )
