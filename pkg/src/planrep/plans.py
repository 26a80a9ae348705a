"""Query-plan tree data model: JSON ingestion, validation, traversals.

Plans are ordered rooted trees.  Node arity is unrestricted at ingestion;
``binarize`` rewrites a tree into strict binary form for the convolution
model that requires it, padding unary nodes with a reserved "⊥" leaf and
splitting wider nodes into left-deep chains of "PassThrough" combiners.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

COMPARATORS = ("join", "=", ">", ">=", "<", "<=")
LOCAL_COMPARATORS = ("=", ">", ">=", "<", "<=")

PAD_NODE = "⊥"
PASSTHROUGH_NODE = "PassThrough"
SYNTHETIC_NODES = frozenset({PAD_NODE, PASSTHROUGH_NODE})


class PlanValidationError(ValueError):
    """Invalid plan or catalog content; carries the offending JSON path."""

    def __init__(self, message, path="$"):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ColumnStats:
    name: str
    table: str
    value_type: str  # "numeric" | "string"
    distinct_count: int
    min: float | None = None
    max: float | None = None

    def __post_init__(self):
        if self.value_type not in ("numeric", "string"):
            raise PlanValidationError(f"unknown column type {self.value_type!r}")
        if self.distinct_count <= 0:
            raise PlanValidationError(f"column {self.name!r}: distinct_count must be positive")
        if self.value_type == "numeric":
            if self.min is None or self.max is None:
                raise PlanValidationError(f"numeric column {self.name!r} needs min and max")
            if self.min > self.max:
                raise PlanValidationError(f"column {self.name!r}: min {self.min} > max {self.max}")

    @property
    def qualified(self):
        return f"{self.table}.{self.name}"


@dataclass(frozen=True)
class TableStats:
    name: str
    row_count: int
    columns: tuple[ColumnStats, ...]

    def __post_init__(self):
        if self.row_count <= 0:
            raise PlanValidationError(f"table {self.name!r}: row_count must be positive")


class Catalog:
    """Table/column statistics plus the fixed operator vocabulary.

    Orderings are frozen at construction because encoding positions and
    the per-column projection layers depend on them.
    """

    def __init__(self, tables, operator_vocabulary):
        self.tables = tuple(tables)
        self.operator_vocabulary = tuple(operator_vocabulary)
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise PlanValidationError("duplicate table names in catalog")
        if len(set(self.operator_vocabulary)) != len(self.operator_vocabulary):
            raise PlanValidationError("duplicate operator names in catalog")
        self.table_index = {t.name: i for i, t in enumerate(self.tables)}
        self.operator_index = {op: i for i, op in enumerate(self.operator_vocabulary)}
        self.columns = tuple(c for t in self.tables for c in t.columns)
        self.column_index = {}
        for i, c in enumerate(self.columns):
            if c.qualified in self.column_index:
                raise PlanValidationError(f"duplicate column {c.qualified!r} in catalog")
            self.column_index[c.qualified] = i
        self.columns_by_table = {t.name: tuple(c.qualified for c in t.columns) for t in self.tables}

    def column(self, qualified):
        idx = self.column_index.get(qualified)
        if idx is None:
            raise PlanValidationError(f"unknown column {qualified!r}")
        return self.columns[idx]

    def to_json_dict(self):
        return {
            "operators": list(self.operator_vocabulary),
            "tables": [
                {
                    "name": t.name,
                    "row_count": t.row_count,
                    "columns": [
                        {
                            "name": c.name,
                            "type": c.value_type,
                            "distinct": c.distinct_count,
                            **({"min": c.min, "max": c.max} if c.value_type == "numeric" else {}),
                        }
                        for c in t.columns
                    ],
                }
                for t in self.tables
            ],
        }

    def to_json_bytes(self):
        return (json.dumps(self.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")

    def fingerprint(self):
        """Hash of the canonical catalog JSON; stored in checkpoints."""
        return hashlib.sha256(self.to_json_bytes()).hexdigest()

    @classmethod
    def from_json_dict(cls, data):
        try:
            operators = list(data["operators"])
            tables = []
            for t in data["tables"]:
                cols = []
                for c in t["columns"]:
                    cols.append(ColumnStats(
                        name=str(c["name"]),
                        table=str(t["name"]),
                        value_type=str(c["type"]),
                        distinct_count=int(c["distinct"]),
                        min=float(c["min"]) if "min" in c and c["min"] is not None else None,
                        max=float(c["max"]) if "max" in c and c["max"] is not None else None,
                    ))
                tables.append(TableStats(str(t["name"]), int(t["row_count"]), tuple(cols)))
        except (KeyError, TypeError) as exc:
            raise PlanValidationError(f"malformed catalog JSON: {exc}") from exc
        return cls(tables, operators)

    @classmethod
    def from_json_bytes(cls, data):
        if isinstance(data, (bytes, bytearray)):
            data = data.decode("utf-8")
        return cls.from_json_dict(json.loads(data))


@dataclass(frozen=True)
class Predicate:
    kind: str  # "join" | "local"
    column: str
    comparator: str
    value: float | str | None = None
    other_column: str | None = None

    def __post_init__(self):
        if self.kind not in ("join", "local"):
            raise PlanValidationError(f"unknown predicate kind {self.kind!r}")
        if self.kind == "join":
            if self.comparator != "join" or self.other_column is None or self.value is not None:
                raise PlanValidationError("join predicate needs comparator 'join', other_column and no value")
        else:
            if self.comparator not in LOCAL_COMPARATORS or self.value is None or self.other_column is not None:
                raise PlanValidationError(
                    f"local predicate needs comparator in {LOCAL_COMPARATORS} and a value")


@dataclass(frozen=True)
class PlanNode:
    node_type: str
    tables: tuple[str, ...] = ()
    predicates: tuple[Predicate, ...] = ()
    children: tuple["PlanNode", ...] = ()


@dataclass(frozen=True)
class PlanTree:
    root: PlanNode
    plan_id: str = ""
    query_id: str = ""
    latency_ms: float | None = None

    def __post_init__(self):
        if self.latency_ms is not None and not self.latency_ms > 0:
            raise PlanValidationError(f"latency_ms must be positive, got {self.latency_ms}")


# ---------------------------------------------------------------------------
# JSON ingestion / serialization


def _parse_predicate(raw, catalog, path):
    if not isinstance(raw, dict):
        raise PlanValidationError("predicate must be an object", path)
    kind = raw.get("kind")
    op = raw.get("op")
    column = raw.get("column")
    if column not in catalog.column_index:
        raise PlanValidationError(f"unknown column {column!r}", path)
    if kind == "join":
        if op != "join":
            raise PlanValidationError(f"join predicate has op {op!r}", path)
        other = raw.get("other_column")
        if other not in catalog.column_index:
            raise PlanValidationError(f"unknown column {other!r}", path)
        return Predicate(kind="join", column=column, comparator="join", other_column=other)
    if kind == "local":
        if op not in LOCAL_COMPARATORS:
            raise PlanValidationError(f"unknown comparator {op!r}", path)
        value = raw.get("value")
        if not isinstance(value, (int, float, str)) or isinstance(value, bool):
            raise PlanValidationError(f"bad literal {value!r}", path)
        stats = catalog.column(column)
        if stats.value_type == "string":
            if op != "=":
                raise PlanValidationError(
                    f"comparator {op!r} has no interval meaning on string column {column!r}", path)
            value = str(value)
        else:
            if isinstance(value, str):
                raise PlanValidationError(f"string literal on numeric column {column!r}", path)
            value = float(value)
        return Predicate(kind="local", column=column, comparator=op, value=value)
    raise PlanValidationError(f"unknown predicate kind {kind!r}", path)


def _parse_node(raw, catalog, path):
    if not isinstance(raw, dict):
        raise PlanValidationError("node must be an object", path)
    node_type = raw.get("node_type")
    if node_type not in catalog.operator_index and node_type not in SYNTHETIC_NODES:
        raise PlanValidationError(f"unknown operator {node_type!r}", path)
    tables = raw.get("tables", [])
    if not isinstance(tables, list):
        raise PlanValidationError("tables must be a list", path)
    for t in tables:
        if t not in catalog.table_index:
            raise PlanValidationError(f"unknown table {t!r}", f"{path}.tables")
    predicates = tuple(
        _parse_predicate(p, catalog, f"{path}.predicates[{i}]")
        for i, p in enumerate(raw.get("predicates", []))
    )
    children = tuple(
        _parse_node(c, catalog, f"{path}.children[{i}]")
        for i, c in enumerate(raw.get("children", []))
    )
    return PlanNode(node_type=node_type, tables=tuple(tables), predicates=predicates, children=children)


def parse_plan_json(data, catalog):
    """Parse and validate a plan document (bytes, str, or parsed dict)."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise PlanValidationError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict) or "plan" not in data:
        raise PlanValidationError("missing 'plan' key")
    latency = data.get("latency_ms")
    if latency is not None:
        if not isinstance(latency, (int, float)) or isinstance(latency, bool) or latency <= 0:
            raise PlanValidationError(f"latency_ms must be a positive number, got {latency!r}", "$.latency_ms")
        latency = float(latency)
    root = _parse_node(data["plan"], catalog, "$.plan")
    return PlanTree(
        root=root,
        plan_id=str(data.get("plan_id", "")),
        query_id=str(data.get("query_id", "")),
        latency_ms=latency,
    )


def _node_to_dict(node):
    preds = []
    for p in node.predicates:
        if p.kind == "join":
            preds.append({"kind": "join", "column": p.column, "op": "join", "other_column": p.other_column})
        else:
            preds.append({"kind": "local", "column": p.column, "op": p.comparator, "value": p.value})
    return {
        "node_type": node.node_type,
        "tables": list(node.tables),
        "predicates": preds,
        "children": [_node_to_dict(c) for c in node.children],
    }


def serialize_plan(tree):
    """Inverse of parse_plan_json (dict form)."""
    out = {"query_id": tree.query_id, "plan_id": tree.plan_id, "plan": _node_to_dict(tree.root)}
    if tree.latency_ms is not None:
        out["latency_ms"] = tree.latency_ms
    return out


def plan_to_json_bytes(tree):
    return json.dumps(serialize_plan(tree), sort_keys=True, ensure_ascii=False).encode("utf-8")


# ---------------------------------------------------------------------------
# Traversals and structure


def postorder(tree_or_node):
    """Nodes with children (left to right) before parents; root last."""
    root = tree_or_node.root if isinstance(tree_or_node, PlanTree) else tree_or_node
    out = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            out.append(node)
        else:
            stack.append((node, True))
            for child in reversed(node.children):
                stack.append((child, False))
    return out


def node_count(tree_or_node):
    return len(postorder(tree_or_node))


def edge_lists(tree_or_node):
    """Both edge orientations, indexed by post-order position.

    ``parent_to_child[i]`` is ``child_to_parent[i]`` with endpoints swapped.
    """
    order = postorder(tree_or_node)
    pos = {id(n): i for i, n in enumerate(order)}
    child_to_parent = []
    for node in order:
        for child in node.children:
            child_to_parent.append((pos[id(child)], pos[id(node)]))
    parent_to_child = [(dst, src) for (src, dst) in child_to_parent]
    return child_to_parent, parent_to_child


def binarize(tree):
    """Rewrite so every internal node has exactly two children.

    Unary nodes get a "⊥" padding leaf; nodes with more than two children
    become a left-deep chain of "PassThrough" combiners.  Original node
    payloads and the relative post-order of original leaves are preserved;
    already-binary trees come back structurally identical.
    """

    def rewrite(node):
        kids = [rewrite(c) for c in node.children]
        if len(kids) == 1:
            kids.append(PlanNode(node_type=PAD_NODE))
        while len(kids) > 2:
            kids = [PlanNode(node_type=PASSTHROUGH_NODE, children=(kids[0], kids[1]))] + kids[2:]
        return replace(node, children=tuple(kids))

    return replace(tree, root=rewrite(tree.root))
