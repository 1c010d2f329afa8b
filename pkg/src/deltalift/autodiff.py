"""Reverse-mode differentiation over forward traces.

``backward`` computes the gradient of one scalar activation (the target)
with respect to every node activation in the graph; training additionally
collects parameter gradients through the same sweep.  The finite
difference checker is the numerical oracle for all of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import (
    ForwardTrace,
    Graph,
    GraphError,
    Tensor,
    conv1d_windows,
    forward,
    topo_order,
)


@dataclass
class GradientTrace:
    """Per-node d(target)/d(activation) arrays for one backward pass."""

    gradients: dict[str, Tensor]
    target: tuple[str, int]

    def __getitem__(self, node_id: str) -> Tensor:
        return self.gradients[node_id]


def resolve_target(graph: Graph, target) -> tuple[str, int]:
    """Normalize a target reference to ``(node_id, flat_index)``."""
    if isinstance(target, str):
        node_id, index = target, 0
    else:
        node_id, index = target
    if node_id not in graph.nodes:
        raise GraphError(f"target node '{node_id}' does not exist")
    size = int(np.prod(graph.nodes[node_id].output_shape))
    index = int(index)
    if not 0 <= index < size:
        raise GraphError(
            f"target index {index} out of range for node '{node_id}' "
            f"with {size} elements"
        )
    return node_id, index


def _maxout_active_pieces(node, x: Tensor) -> tuple[Tensor, Tensor]:
    """Active piece index per output unit (lowest index wins ties)."""
    w, b = node.params["weights"], node.params["biases"]
    z = np.einsum("poi,i->po", w, x.ravel()) + b
    return z.argmax(axis=0), z


def _pool_argmax_rows(x: Tensor, width: int, stride: int) -> Tensor:
    """Input row index of each window's max (first index on ties).

    Shape (n_windows,) for vector input, (n_windows, channels) otherwise.
    """
    win = conv1d_windows(x, width, stride)
    am = win.argmax(axis=-1)
    offsets = stride * np.arange(win.shape[0])
    if x.ndim == 1:
        return offsets + am
    return offsets[:, None] + am


def vjp_node(node, grad_out: Tensor, trace: ForwardTrace, grads: dict,
             param_grads: dict | None = None) -> None:
    """Accumulate input (and optionally parameter) gradients for one node."""
    kind = node.kind
    if kind == "input":
        return
    src = node.inputs[0]
    x = trace[src]

    if kind == "affine":
        w = node.params["weights"]
        grads[src] += (w.T @ grad_out).reshape(x.shape)
        if param_grads is not None:
            pg = param_grads.setdefault(node.id, {})
            pg["weights"] = pg.get("weights", 0.0) + np.outer(grad_out, x.ravel())
            pg["bias"] = pg.get("bias", 0.0) + grad_out
    elif kind == "conv1d":
        filters = node.params["filters"]
        stride = int(node.params["stride"])
        n_filt, width, _ = filters.shape
        contrib = np.einsum("pf,fkc->pkc", grad_out, filters)
        n_win = grad_out.shape[0]
        rows = stride * np.arange(n_win)
        gin = grads[src]
        for k in range(width):
            gin[rows + k, :] += contrib[:, k, :]
        if param_grads is not None:
            win = conv1d_windows(x, width, stride)  # (P, C, K)
            pg = param_grads.setdefault(node.id, {})
            pg["filters"] = pg.get("filters", 0.0) + np.einsum(
                "pf,pck->fkc", grad_out, win
            )
            pg["bias"] = pg.get("bias", 0.0) + grad_out.sum(axis=0)
    elif kind == "maxpool1d":
        width, stride = int(node.params["width"]), int(node.params["stride"])
        rows = _pool_argmax_rows(x, width, stride)
        if x.ndim == 1:
            np.add.at(grads[src], rows, grad_out)
        else:
            cols = np.arange(x.shape[1])[None, :]
            np.add.at(grads[src], (rows, cols), grad_out)
    elif kind == "relu":
        grads[src] += grad_out * (x > 0)
    elif kind == "prelu":
        slopes = node.params["slopes"]
        grads[src] += grad_out * np.where(x > 0, 1.0, slopes)
        if param_grads is not None:
            gs = grad_out * np.where(x > 0, 0.0, x)
            if slopes.shape == (1,):
                gs = gs.sum(keepdims=True).reshape(1)
            elif x.ndim > 1:
                gs = gs.reshape(-1, x.shape[-1]).sum(axis=0)
            pg = param_grads.setdefault(node.id, {})
            pg["slopes"] = pg.get("slopes", 0.0) + gs
    elif kind == "sigmoid":
        y = trace[node.id]
        grads[src] += grad_out * y * (1.0 - y)
    elif kind == "tanh":
        y = trace[node.id]
        grads[src] += grad_out * (1.0 - y * y)
    elif kind == "maxout":
        w = node.params["weights"]
        active, _ = _maxout_active_pieces(node, x)
        out_dim = w.shape[1]
        w_active = w[active, np.arange(out_dim), :]  # (out, in)
        grads[src] += (w_active.T @ grad_out).reshape(x.shape)
        if param_grads is not None:
            pg = param_grads.setdefault(node.id, {})
            dw = np.zeros_like(w)
            db = np.zeros_like(node.params["biases"])
            np.add.at(
                dw,
                (active, np.arange(out_dim)),
                grad_out[:, None] * x.ravel()[None, :],
            )
            np.add.at(db, (active, np.arange(out_dim)), grad_out)
            pg["weights"] = pg.get("weights", 0.0) + dw
            pg["biases"] = pg.get("biases", 0.0) + db
    elif kind == "product":
        a, b = node.inputs
        grads[a] += grad_out * trace[b]
        grads[b] += grad_out * trace[a]
    elif kind == "softmax":
        y = trace[node.id]
        grads[src] += y * (grad_out - np.dot(grad_out, y))
    else:
        raise GraphError(f"no gradient rule for node kind '{kind}'")


def vjp_sweep(graph: Graph, trace: ForwardTrace, seeds: dict[str, Tensor],
              want_param_grads: bool = False):
    """Reverse sweep from seed gradients; returns (grads, param_grads)."""
    grads = {nid: np.zeros(graph.nodes[nid].output_shape) for nid in graph.nodes}
    for node_id, seed in seeds.items():
        grads[node_id] += seed
    param_grads: dict | None = {} if want_param_grads else None
    for node_id in reversed(topo_order(graph)):
        node = graph.nodes[node_id]
        if node.kind == "input":
            continue
        grad_out = grads[node_id]
        if not grad_out.any():
            continue
        vjp_node(node, grad_out, trace, grads, param_grads)
    return grads, param_grads


def backward(graph: Graph, trace: ForwardTrace, target) -> GradientTrace:
    """Gradient of the target activation w.r.t. every node activation.

    ``target`` is a ``(node_id, flat_index)`` pair (or a bare node id,
    meaning index 0).  ReLU passes gradient only where active, maxpool
    routes to the first argmax of each window, maxout differentiates the
    active piece.
    """
    graph.require_valid()
    node_id, index = resolve_target(graph, target)
    seed = np.zeros(graph.nodes[node_id].output_shape)
    seed.flat[index] = 1.0
    grads, _ = vjp_sweep(graph, trace, {node_id: seed})
    return GradientTrace(grads, (node_id, index))


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class FiniteDifferenceReport:
    max_rel_deviation: float
    tolerance: float
    passed: bool
    notes: list[str] = field(default_factory=list)
    perturbed: bool = False


def _kink_distance(graph: Graph, trace: ForwardTrace) -> float:
    """Smallest margin to a non-differentiable point across the trace.

    Measures |pre-activation| for relu/prelu, the gap between the top two
    window entries for maxpool, and the gap between the top two pieces
    for maxout.
    """
    margin = np.inf
    for node in graph.nodes.values():
        if node.kind in ("relu", "prelu"):
            x = trace[node.inputs[0]]
            if x.size:
                margin = min(margin, float(np.min(np.abs(x))))
        elif node.kind == "maxpool1d":
            x = trace[node.inputs[0]]
            win = conv1d_windows(x, int(node.params["width"]), int(node.params["stride"]))
            if win.shape[-1] > 1:
                top2 = np.sort(win, axis=-1)[..., -2:]
                margin = min(margin, float(np.min(top2[..., 1] - top2[..., 0])))
        elif node.kind == "maxout":
            _, z = _maxout_active_pieces(node, trace[node.inputs[0]])
            if z.shape[0] > 1:
                top2 = np.sort(z, axis=0)[-2:, :]
                margin = min(margin, float(np.min(top2[1] - top2[0])))
    return margin


def finite_difference_check(
    graph: Graph,
    inputs: dict[str, Tensor],
    target,
    h: float = 1e-5,
    tolerance: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> FiniteDifferenceReport:
    """Compare analytic gradients against central differences.

    Deviations are measured as |analytic - numeric| relative to the
    larger of the two magnitudes, floored at 1 so near-zero gradients
    are compared absolutely.  Inputs sitting within ``10 h`` of a kink
    (relu zero, tied window max, tied maxout pieces) are nudged with a
    small deterministic perturbation first, and the report says so.
    """
    graph.require_valid()
    target = resolve_target(graph, target)
    rng = np.random.default_rng(0) if rng is None else rng
    notes: list[str] = []
    perturbed = False
    work = {k: np.asarray(v, dtype=np.float64).copy() for k, v in inputs.items()}

    margin_floor = 10.0 * h
    for _ in range(8):
        trace = forward(graph, work)
        if _kink_distance(graph, trace) >= margin_floor:
            break
        perturbed = True
        for key in work:
            work[key] = work[key] + rng.uniform(-50 * h, 50 * h, size=work[key].shape)
    else:
        notes.append("could not move input off a kink; deviations may be large")
    if perturbed:
        notes.append("input within 10h of a kink: applied a small perturbation")

    trace = forward(graph, work)
    analytic = backward(graph, trace, target)
    t_node, t_index = target

    max_dev = 0.0
    for input_id in graph.input_ids():
        base = work[input_id]
        grad = analytic[input_id]
        flat = base.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = forward(graph, work)[t_node].flat[t_index]
            flat[i] = keep - h
            f_minus = forward(graph, work)[t_node].flat[t_index]
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad.flat[i]
            dev = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_dev = max(max_dev, dev)

    return FiniteDifferenceReport(
        max_rel_deviation=max_dev,
        tolerance=tolerance,
        passed=max_dev <= tolerance,
        notes=notes,
        perturbed=perturbed,
    )
