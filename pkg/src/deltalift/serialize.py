"""Model files: versioned JSON with row-major weight arrays.

The format is UTF-8 text with top-level fields ``version``, ``nodes``,
``outputs`` and ``constraint_groups``.  Arrays are stored as
``{"shape": [...], "values": [flat row-major floats]}`` so files stay
human-inspectable and diff-friendly.  Floats round-trip bit-exactly
(shortest-repr encoding).
"""

from __future__ import annotations

import json

import numpy as np

from .graph import ConstraintGroup, Graph, GraphError, NodeSpec

FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Malformed or unsupported model file."""


def _encode_param(value):
    if isinstance(value, np.ndarray):
        return {"shape": list(value.shape), "values": value.ravel().tolist()}
    if isinstance(value, tuple):  # input shape
        return list(value)
    return value


def _decode_param(node_id, key, value):
    if isinstance(value, dict):
        if set(value) != {"shape", "values"}:
            raise ModelFormatError(
                f"node '{node_id}': param '{key}' must carry 'shape' and 'values'"
            )
        arr = np.asarray(value["values"], dtype=np.float64)
        shape = tuple(int(s) for s in value["shape"])
        if arr.size != int(np.prod(shape)):
            raise ModelFormatError(
                f"node '{node_id}': param '{key}' has {arr.size} values "
                f"for shape {shape}"
            )
        return arr.reshape(shape)
    if isinstance(value, list):
        return tuple(value)
    return value


def graph_to_dict(graph: Graph) -> dict:
    nodes = []
    for node in graph.nodes.values():
        nodes.append(
            {
                "id": node.id,
                "kind": node.kind,
                "inputs": list(node.inputs),
                "output_shape": list(node.output_shape),
                "params": {k: _encode_param(v) for k, v in node.params.items()},
            }
        )
    return {
        "version": FORMAT_VERSION,
        "nodes": nodes,
        "outputs": list(graph.outputs),
        "constraint_groups": [
            {"input": g.input_id, "indices": list(g.indices), "total": g.total}
            for g in graph.constraint_groups
        ],
    }


def graph_from_dict(payload: dict) -> Graph:
    if not isinstance(payload, dict):
        raise ModelFormatError("model file must hold a JSON object at top level")
    version = payload.get("version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version!r}; this build reads "
            f"version {FORMAT_VERSION}"
        )
    for key in ("nodes", "outputs"):
        if key not in payload:
            raise ModelFormatError(f"model file is missing the '{key}' field")

    nodes = []
    for entry in payload["nodes"]:
        try:
            node_id = entry["id"]
            kind = entry["kind"]
            params = {
                k: _decode_param(node_id, k, v)
                for k, v in entry.get("params", {}).items()
            }
            node = NodeSpec(
                node_id,
                kind,
                tuple(entry.get("inputs", ())),
                tuple(entry["output_shape"]),
                params,
            )
        except ModelFormatError:
            raise
        except KeyError as exc:
            raise ModelFormatError(
                f"node entry {entry.get('id', '?')!r} is missing field {exc}"
            ) from exc
        except (GraphError, ValueError) as exc:
            raise ModelFormatError(str(exc)) from exc
        nodes.append(node)

    groups = []
    for i, entry in enumerate(payload.get("constraint_groups", [])):
        try:
            groups.append(
                ConstraintGroup(entry["input"], tuple(entry["indices"]), entry["total"])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"constraint group {i} is malformed: {exc}") from exc

    try:
        return Graph(nodes, tuple(payload["outputs"]), groups)
    except GraphError as exc:
        raise ModelFormatError(str(exc)) from exc


def save_model(graph: Graph, path) -> None:
    """Write the graph to ``path``; the graph must validate first."""
    graph.require_valid()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph), fh, indent=1, allow_nan=False)
        fh.write("\n")


def load_model(path) -> Graph:
    """Read a graph back; ``load(save(g))`` reproduces ``g`` exactly.

    Raises ModelFormatError with a location for syntactically broken
    files and an explicit message for version mismatches or unknown
    node kinds.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(
                f"{path}: parse error at line {exc.lineno} column {exc.colno}: "
                f"{exc.msg}"
            ) from exc
    graph = graph_from_dict(payload)
    graph.require_valid()
    return graph
