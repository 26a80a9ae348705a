"""Plan-node featurization: raw features and the learned projection.

Each node yields three raw blocks: a one-hot over operator types, a
multi-hot over touched tables, and per-catalog-column 6-vectors describing
predicate usage, indexed (join, =, >, >=, <, <=):

* a column appearing in any join predicate gets 1 at the join position;
* an in-range numeric literal v maps to (v - min)/(max - min) + 1, i.e.
  into [1, 2];
* a literal outside [min, max] maps to -1 when no tuple can satisfy the
  predicate and to 2 when every tuple does;
* string equality literals map through a deterministic FNV-1a hash into
  [1, 2]; other comparators on strings have no interval meaning and are
  rejected;
* untouched positions stay 0, and the last predicate in plan order wins
  when several hit the same (column, comparator) slot.

The learned projection runs the one-hot through a node-type layer, each
column 6-vector through that column's dedicated layer, max-pools column
embeddings per table, and concatenates everything (the table multi-hot
passes through raw).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .plans import COMPARATORS, PAD_NODE, SYNTHETIC_NODES, edge_lists, postorder

CASE_INDEX = {op: i for i, op in enumerate(COMPARATORS)}


class EncodingError(ValueError):
    """Featurization failure (unknown operator, bad comparator, ...)."""


def fnv1a_unit(text):
    """64-bit FNV-1a hash of the UTF-8 bytes, scaled into [0, 1)."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h / 2.0 ** 64


@dataclass
class RawNodeFeatures:
    node_type_onehot: np.ndarray  # (|operators|,)
    table_multihot: np.ndarray    # (|tables|,)
    column_cases: np.ndarray      # (|columns|, 6) in global column order


@dataclass
class RawPlanFeatures:
    """Pure structural featurization of a whole plan, post-order row order.

    Cacheable: contains no learned state.  Edge indices refer to post-order
    positions; ``pad_mask`` marks synthetic "⊥" padding leaves.
    """

    onehots: np.ndarray          # (N, |operators|)
    multihots: np.ndarray        # (N, |tables|)
    cases: np.ndarray            # (N, |columns|, 6)
    child_to_parent: np.ndarray  # (E, 2) int
    parent_to_child: np.ndarray  # (E, 2) int
    pad_mask: np.ndarray         # (N,) bool
    node_types: tuple

    @property
    def n_nodes(self):
        return self.onehots.shape[0]


@dataclass
class GraphBatch:
    """Projected node features plus the structure the tree models consume."""

    node_features: "nm.Tensor"   # (N, d_node)
    child_to_parent: np.ndarray  # (E, 2) int
    parent_to_child: np.ndarray  # (E, 2) int
    postorder: np.ndarray        # (N,) int, a valid topological order
    pad_mask: np.ndarray         # (N,) bool

    @property
    def n_nodes(self):
        return self.node_features.shape[0]


def encode_node_type(node_type, vocabulary):
    """One-hot over the operator vocabulary; all-zeros for synthetic nodes."""
    vec = np.zeros(len(vocabulary), dtype=np.float64)
    if node_type in SYNTHETIC_NODES:
        return vec
    try:
        vec[list(vocabulary).index(node_type)] = 1.0
    except ValueError:
        raise EncodingError(f"unknown operator {node_type!r}") from None
    return vec


def encode_tables(tables, catalog):
    """Multi-hot over catalog tables."""
    vec = np.zeros(len(catalog.tables), dtype=np.float64)
    for t in tables:
        idx = catalog.table_index.get(t)
        if idx is None:
            raise EncodingError(f"unknown table {t!r}")
        vec[idx] = 1.0
    return vec


def _out_of_range_code(comparator, value, stats):
    # Unsatisfiable predicates encode as -1, tautologies over the range as 2.
    if comparator == "=":
        return -1.0
    if comparator in (">", ">="):
        return -1.0 if value > stats.max else 2.0
    return -1.0 if value < stats.min else 2.0


def encode_predicate_column(predicates, column):
    """The 6-vector for one catalog column given a node's predicate list."""
    vec = np.zeros(6, dtype=np.float64)
    qualified = column.qualified
    for pred in predicates:
        if pred.kind == "join":
            if pred.column == qualified or pred.other_column == qualified:
                vec[CASE_INDEX["join"]] = 1.0
            continue
        if pred.column != qualified:
            continue
        slot = CASE_INDEX[pred.comparator]
        if column.value_type == "string":
            if pred.comparator != "=":
                raise EncodingError(
                    f"comparator {pred.comparator!r} has no interval meaning on string column {qualified!r}")
            vec[slot] = fnv1a_unit(str(pred.value)) + 1.0
            continue
        value = float(pred.value)
        if value < column.min or value > column.max:
            vec[slot] = _out_of_range_code(pred.comparator, value, column)
        else:
            span = column.max - column.min
            frac = 0.0 if span == 0.0 else (value - column.min) / span
            vec[slot] = frac + 1.0
    return vec


def raw_node_features(node, catalog):
    return RawNodeFeatures(
        node_type_onehot=encode_node_type(node.node_type, catalog.operator_vocabulary),
        table_multihot=encode_tables(node.tables, catalog),
        column_cases=np.stack([encode_predicate_column(node.predicates, c) for c in catalog.columns])
        if catalog.columns else np.zeros((0, 6)),
    )


def raw_plan_features(tree, catalog):
    """Featurize every node of a plan (pure; rows in post-order)."""
    nodes = postorder(tree)
    per_node = [raw_node_features(n, catalog) for n in nodes]
    cp, pc = edge_lists(tree)
    return RawPlanFeatures(
        onehots=np.stack([f.node_type_onehot for f in per_node]),
        multihots=np.stack([f.table_multihot for f in per_node]),
        cases=np.stack([f.column_cases for f in per_node]),
        child_to_parent=np.array(cp, dtype=np.intp).reshape(-1, 2),
        parent_to_child=np.array(pc, dtype=np.intp).reshape(-1, 2),
        pad_mask=np.array([n.node_type == PAD_NODE for n in nodes], dtype=bool),
        node_types=tuple(n.node_type for n in nodes),
    )


# ---------------------------------------------------------------------------
# Learned projection


def init_encoder_params(catalog, d_type, d_col, rng):
    """Node-type layer plus one dedicated layer per catalog column."""
    params = {}
    n_ops = len(catalog.operator_vocabulary)
    params["encoder.node_type.W"] = nm.Parameter(
        "encoder.node_type.W", nm.uniform_init((n_ops, d_type), n_ops, rng))
    params["encoder.node_type.b"] = nm.Parameter(
        "encoder.node_type.b", nm.uniform_init((1, d_type), n_ops, rng))
    for col in catalog.columns:
        params[f"encoder.col.{col.qualified}.W"] = nm.Parameter(
            f"encoder.col.{col.qualified}.W", nm.uniform_init((6, d_col), 6, rng))
        params[f"encoder.col.{col.qualified}.b"] = nm.Parameter(
            f"encoder.col.{col.qualified}.b", nm.uniform_init((1, d_col), 6, rng))
    return params


def encoder_dims(params):
    """(d_type, d_col) as recorded in the parameter shapes."""
    d_type = params["encoder.node_type.W"].tensor.shape[1]
    d_col = None
    for name, p in params.items():
        if name.startswith("encoder.col.") and name.endswith(".W"):
            d_col = p.tensor.shape[1]
            break
    return d_type, 0 if d_col is None else d_col


def encoder_output_dim(catalog, d_type, d_col):
    return d_type + len(catalog.tables) + len(catalog.tables) * d_col


def _max_pool(embeddings, n, d_col):
    # True elementwise max across k same-shape matrices: flatten each to a
    # column, stack side by side, reduce per row, unflatten.
    if len(embeddings) == 1:
        return embeddings[0]
    cols = [nm.reshape(e, (n * d_col, 1)) for e in embeddings]
    stacked = nm.concat(cols, axis=1)
    return nm.reshape(nm.row_max(stacked), (n, d_col))


def project_nodes(raw, params, catalog):
    """Project raw features for all nodes at once -> (N, d_node) tensor."""
    d_type, d_col = encoder_dims(params)
    n = raw.n_nodes
    dtype = params["encoder.node_type.W"].tensor.data.dtype
    type_emb = nm.relu(nm.linear(
        nm.const(raw.onehots, dtype),
        params["encoder.node_type.W"].tensor,
        params["encoder.node_type.b"].tensor,
    ))
    parts = [type_emb, nm.const(raw.multihots, dtype)]
    for table in catalog.tables:
        embeddings = []
        for qualified in catalog.columns_by_table[table.name]:
            ci = catalog.column_index[qualified]
            emb = nm.relu(nm.linear(
                nm.const(raw.cases[:, ci, :], dtype),
                params[f"encoder.col.{qualified}.W"].tensor,
                params[f"encoder.col.{qualified}.b"].tensor,
            ))
            embeddings.append(emb)
        if embeddings:
            parts.append(_max_pool(embeddings, n, d_col))
        else:
            parts.append(nm.zeros((n, d_col), dtype=dtype))
    return nm.concat(parts, axis=1)


def project_node(raw_node, params, catalog):
    """Single-node projection -> flat feature vector of length d_node."""
    single = RawPlanFeatures(
        onehots=raw_node.node_type_onehot[None, :],
        multihots=raw_node.table_multihot[None, :],
        cases=raw_node.column_cases[None, :, :],
        child_to_parent=np.zeros((0, 2), dtype=np.intp),
        parent_to_child=np.zeros((0, 2), dtype=np.intp),
        pad_mask=np.zeros(1, dtype=bool),
        node_types=("",),
    )
    out = project_nodes(single, params, catalog)
    return nm.reshape(out, (out.shape[1],))


def encode_plan(tree, catalog, params):
    """Full plan featurization -> GraphBatch (differentiable projection)."""
    raw = raw_plan_features(tree, catalog)
    return encode_raw(raw, params, catalog)


def encode_raw(raw, params, catalog):
    """GraphBatch from a cached RawPlanFeatures."""
    return GraphBatch(
        node_features=project_nodes(raw, params, catalog),
        child_to_parent=raw.child_to_parent,
        parent_to_child=raw.parent_to_child,
        postorder=np.arange(raw.n_nodes, dtype=np.intp),
        pad_mask=raw.pad_mask,
    )
