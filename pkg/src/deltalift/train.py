"""Mini-batch SGD with momentum on cross-entropy, seeded and deterministic.

The trainer accepts graphs ending in a 1-unit sigmoid head or a softmax
head.  Loss gradients are seeded at the pre-head node (sigmoid(z) - y,
or softmax(z) - onehot), which is exact and avoids saturating logs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import vjp_sweep
from .genomics import auroc
from .graph import Graph, GraphError, Tensor, forward


class TrainingError(Exception):
    """Training aborted: bad head, non-finite loss, degenerate data."""


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0  # L2 on weight matrices and filters only

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(payload) - known
        if extra:
            raise TrainingError(f"unknown training config fields: {sorted(extra)}")
        return cls(**payload)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1)
            fh.write("\n")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_auroc: float


def _resolve_head(graph: Graph) -> tuple[str, str]:
    """Return (head id, pre-activation id); head must be sigmoid or softmax."""
    if len(graph.outputs) != 1:
        raise TrainingError("training expects a single-output graph")
    head = graph.nodes[graph.outputs[0]]
    if head.kind == "sigmoid" and head.output_shape == (1,):
        return head.id, head.inputs[0]
    if head.kind == "softmax":
        return head.id, head.inputs[0]
    raise TrainingError(
        f"graph head '{head.id}' ({head.kind}, shape {head.output_shape}) is "
        "not a 1-unit sigmoid or a softmax"
    )


def _as_input_dict(graph: Graph, x) -> dict[str, Tensor]:
    if isinstance(x, dict):
        return x
    ids = graph.input_ids()
    if len(ids) != 1:
        raise TrainingError("bare-array samples need a single-input graph")
    return {ids[0]: x}


def _loss_and_seed(graph: Graph, trace, head_id: str, pre_id: str, label: int):
    """Cross-entropy loss and its gradient w.r.t. the pre-head activation."""
    head = graph.nodes[head_id]
    z = trace[pre_id]
    if head.kind == "sigmoid":
        y = float(label)
        loss = float(np.logaddexp(0.0, z[0]) - y * z[0])
        seed = trace[head_id] - y
    else:
        k = int(label)
        if not 0 <= k < z.size:
            raise TrainingError(f"label {k} outside softmax range {z.size}")
        loss = float(np.logaddexp.reduce(z) - z[k])
        seed = trace[head_id].copy()
        seed[k] -= 1.0
    return loss, {pre_id: seed}


def _trainable_params(graph: Graph) -> dict[str, dict[str, np.ndarray]]:
    params: dict[str, dict[str, np.ndarray]] = {}
    for node in graph.nodes.values():
        arrays = {
            key: value.copy()
            for key, value in node.params.items()
            if isinstance(value, np.ndarray)
        }
        if arrays:
            params[node.id] = arrays
    return params


def train_step(graph: Graph, batch, config: TrainConfig, velocity):
    """One SGD-with-momentum update over a mini-batch.

    ``batch`` is a sequence of (inputs, label) pairs; gradients are
    averaged over the batch in order, so the update is deterministic.
    Returns (updated graph, updated velocity, mean loss).
    """
    head_id, pre_id = _resolve_head(graph)
    params = _trainable_params(graph)
    grand: dict[str, dict[str, np.ndarray]] = {
        nid: {k: np.zeros_like(v) for k, v in arrs.items()}
        for nid, arrs in params.items()
    }
    total_loss = 0.0
    for x, label in batch:
        inputs = _as_input_dict(graph, x)
        trace = forward(graph, inputs)
        loss, seeds = _loss_and_seed(graph, trace, head_id, pre_id, label)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss!r}; aborting")
        total_loss += loss
        _, pgrads = vjp_sweep(graph, trace, seeds, want_param_grads=True)
        for nid, arrs in pgrads.items():
            for key, g in arrs.items():
                grand[nid][key] += g

    scale = 1.0 / len(batch)
    if velocity is None:
        velocity = {
            nid: {k: np.zeros_like(v) for k, v in arrs.items()}
            for nid, arrs in params.items()
        }
    updates: dict[str, dict[str, np.ndarray]] = {}
    for nid, arrs in params.items():
        new_arrs = {}
        for key, value in arrs.items():
            g = grand[nid][key] * scale
            if config.weight_decay and key in ("weights", "filters"):
                g = g + config.weight_decay * value
            v = velocity[nid][key]
            v *= config.momentum
            v -= config.learning_rate * g
            new_arrs[key] = value + v
        updates[nid] = new_arrs
    return graph.replace_params(updates), velocity, total_loss * scale


def evaluate(graph: Graph, dataset) -> tuple[float, float]:
    """Mean loss and auROC of the positive-class score over a dataset."""
    head_id, pre_id = _resolve_head(graph)
    losses = []
    scores = []
    labels = []
    for x, label in dataset:
        trace = forward(graph, _as_input_dict(graph, x))
        loss, _ = _loss_and_seed(graph, trace, head_id, pre_id, label)
        losses.append(loss)
        out = trace[head_id]
        scores.append(float(out[0] if out.size == 1 else out[-1]))
        labels.append(int(label))
    return float(np.mean(losses)), auroc(scores, labels)


def train_loop(graph: Graph, train_set, val_set=None,
               config: TrainConfig | None = None, verbose: bool = False):
    """Train for ``config.epochs`` epochs; returns (graph, [EpochStats]).

    Shuffling, batching and updates all derive from ``config.seed``, so
    two runs with the same seed produce identical final weights.
    """
    config = config or TrainConfig()
    graph.require_valid()
    _resolve_head(graph)
    if not train_set:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(config.seed)
    velocity = None
    history: list[EpochStats] = []
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            graph, velocity, loss = train_step(graph, batch, config, velocity)
            epoch_loss += loss
            n_batches += 1
        train_loss = epoch_loss / n_batches
        if val_set:
            val_loss, val_roc = evaluate(graph, val_set)
        else:
            val_loss, val_roc = float("nan"), float("nan")
        history.append(EpochStats(epoch, train_loss, val_loss, val_roc))
        if verbose:
            print(
                f"epoch {epoch}: train_loss={train_loss:.4f} "
                f"val_loss={val_loss:.4f} val_auroc={val_roc:.4f}"
            )
    return graph, history


def write_loss_curve(path, history: list[EpochStats]) -> None:
    """Loss curve TSV: epoch, train_loss, val_loss, val_auroc."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tval_auroc\n")
        for row in history:
            fh.write(
                f"{row.epoch}\t{row.train_loss:.8g}\t{row.val_loss:.8g}\t"
                f"{row.val_auroc:.8g}\n"
            )
