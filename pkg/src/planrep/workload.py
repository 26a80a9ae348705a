"""Synthetic workload: catalog/plan generators and an analytic latency oracle.

The oracle is a fixed, published formula so that model-quality claims are
checkable end to end; it makes no claim of matching any real engine.

Cardinalities (uniformity assumptions):

* scan: row_count * prod(sel(p)) over the node's local predicates, with
  sel(col = v) = 1/distinct and sel(col < v) = clamp((v-min)/(max-min))
  (direction flipped for >);
* join: card(L) * card(R) * prod(1 / max(distinct(l), distinct(r))) over
  its join predicates.

Per-node costs (rows are child output cardinalities):

* Seq Scan: rows_in               * Index Scan: 2*log2(1+rows_in) + rows_out
* Hash Join: rows_L + rows_R      * Nested Loop: rows_L * max(1, rows_R/1000)
* Merge Join: rows_L + rows_R plus rows*log2(1+rows) for each child whose
  subtree root does not already provide order (Sort, Index Scan, Merge Join)
* Sort: rows*log2(1+rows)         * Aggregate: rows

latency_ms = 0.001 * sum(costs), multiplied by lognormal(0, sigma) noise
when sigma > 0.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .plans import (
    Catalog,
    ColumnStats,
    PlanNode,
    PlanTree,
    Predicate,
    TableStats,
    parse_plan_json,
    plan_to_json_bytes,
    postorder,
    serialize_plan,
)

log = logging.getLogger(__name__)

DEFAULT_OPERATORS = (
    "Seq Scan",
    "Index Scan",
    "Hash Join",
    "Merge Join",
    "Nested Loop",
    "Sort",
    "Aggregate",
)

JOIN_OPERATORS = ("Hash Join", "Merge Join", "Nested Loop")
SCAN_OPERATORS = ("Seq Scan", "Index Scan")
_SORTED_PROVIDERS = ("Sort", "Index Scan", "Merge Join")


class WorkloadError(ValueError):
    """Generator misconfiguration or malformed external plan input."""


@dataclass
class GenConfig:
    seed: int = 0
    n_tables: int = 8
    columns_per_table: tuple = (3, 6)
    row_count_range: tuple = (1_000, 1_000_000)
    max_joins: int = 10            # capped at n_tables - 1
    min_joins: int = 0
    max_join_predicates: int = 3
    max_local_predicates: int = 5
    join_type_mix: tuple = (0.4, 0.3, 0.3)  # Hash, Merge, Nested Loop
    index_scan_prob: float = 0.35
    root_extra_prob: float = 0.3   # chance of a Sort/Aggregate on top
    string_column_ratio: float = 0.25
    many_to_many_ratio: float = 0.3
    noise_sigma: float = 0.0

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Catalog generation


def gen_catalog(config):
    """Deterministic synthetic catalog; column 0 of each table is a key."""
    rng = np.random.default_rng(config.seed)
    tables = []
    for t in range(config.n_tables):
        name = f"t{t + 1}"
        row_count = int(rng.integers(config.row_count_range[0], config.row_count_range[1] + 1))
        n_cols = int(rng.integers(config.columns_per_table[0], config.columns_per_table[1] + 1))
        cols = [ColumnStats(name="id", table=name, value_type="numeric",
                            distinct_count=row_count, min=1.0, max=float(row_count))]
        for c in range(1, n_cols):
            if rng.random() < config.string_column_ratio:
                cols.append(ColumnStats(
                    name=f"c{c}", table=name, value_type="string",
                    distinct_count=int(rng.integers(2, 1001))))
            else:
                lo = round(float(rng.uniform(-1000.0, 1000.0)), 3)
                span = round(float(rng.uniform(1.0, 10000.0)), 3)
                cols.append(ColumnStats(
                    name=f"c{c}", table=name, value_type="numeric",
                    distinct_count=int(rng.integers(2, min(row_count, 10000) + 1)),
                    min=lo, max=lo + span))
        tables.append(TableStats(name=name, row_count=row_count, columns=tuple(cols)))
    return Catalog(tables, DEFAULT_OPERATORS)


# ---------------------------------------------------------------------------
# Plan generation


def _subtree_tables(node):
    return sorted({t for n in postorder(node) for t in n.tables})


def _gen_scan(table, catalog, config, rng):
    node_type = "Index Scan" if rng.random() < config.index_scan_prob else "Seq Scan"
    stats = catalog.tables[catalog.table_index[table]]
    preds = []
    for _ in range(int(rng.integers(0, config.max_local_predicates + 1))):
        col = stats.columns[int(rng.integers(0, len(stats.columns)))]
        if col.value_type == "string":
            preds.append(Predicate(kind="local", column=col.qualified, comparator="=",
                                   value=f"v{int(rng.integers(0, col.distinct_count))}"))
        else:
            comparator = ("=", ">", ">=", "<", "<=")[int(rng.integers(0, 5))]
            span = col.max - col.min
            # Deliberately sample past the range sometimes to exercise the
            # out-of-range encodings.
            value = round(float(rng.uniform(col.min - 0.25 * span, col.max + 0.25 * span)), 3)
            preds.append(Predicate(kind="local", column=col.qualified, comparator=comparator, value=value))
    return PlanNode(node_type=node_type, tables=(table,), predicates=tuple(preds))


def _pick_join_column(tables, catalog, rng, key_side):
    table = tables[int(rng.integers(0, len(tables)))]
    stats = catalog.tables[catalog.table_index[table]]
    if key_side:
        return stats.columns[0].qualified
    return stats.columns[int(rng.integers(0, len(stats.columns)))].qualified


def _gen_join(left, right, catalog, config, rng):
    mix = np.asarray(config.join_type_mix, dtype=np.float64)
    algo = JOIN_OPERATORS[int(rng.choice(len(JOIN_OPERATORS), p=mix / mix.sum()))]
    left_tables = _subtree_tables(left)
    right_tables = _subtree_tables(right)
    preds = []
    touched = []
    for _ in range(int(rng.integers(1, config.max_join_predicates + 1))):
        many_to_many = rng.random() < config.many_to_many_ratio
        lcol = _pick_join_column(left_tables, catalog, rng, key_side=not many_to_many)
        rcol = _pick_join_column(right_tables, catalog, rng, key_side=False)
        preds.append(Predicate(kind="join", column=lcol, comparator="join", other_column=rcol))
        for qualified in (lcol, rcol):
            table = qualified.split(".")[0]
            if table not in touched:
                touched.append(table)
    return PlanNode(node_type=algo, tables=tuple(touched), predicates=tuple(preds), children=(left, right))


def gen_plan(catalog, config, rng, query_id="", plan_id=""):
    """Random join tree over 1..max_joins+1 base tables (no latency label)."""
    max_joins = min(config.max_joins, len(catalog.tables) - 1)
    min_joins = min(config.min_joins, max_joins)
    n_joins = int(rng.integers(min_joins, max_joins + 1))
    picked = rng.choice(len(catalog.tables), size=n_joins + 1, replace=False)
    subtrees = [_gen_scan(catalog.tables[int(i)].name, catalog, config, rng) for i in picked]
    while len(subtrees) > 1:
        i = int(rng.integers(0, len(subtrees)))
        j = int(rng.integers(0, len(subtrees) - 1))
        if j >= i:
            j += 1
        left, right = subtrees[i], subtrees[j]
        for k in sorted((i, j), reverse=True):
            subtrees.pop(k)
        subtrees.append(_gen_join(left, right, catalog, config, rng))
    root = subtrees[0]
    if rng.random() < config.root_extra_prob:
        extra = "Sort" if rng.random() < 0.5 else "Aggregate"
        root = PlanNode(node_type=extra, children=(root,))
    return PlanTree(root=root, plan_id=plan_id, query_id=query_id)


# ---------------------------------------------------------------------------
# Analytic latency oracle


def _local_selectivity(pred, stats):
    if pred.comparator == "=":
        return 1.0 / stats.distinct_count
    value = float(pred.value)
    span = stats.max - stats.min
    if span == 0.0:
        frac = 1.0 if value >= stats.max else 0.0
    else:
        frac = min(max((value - stats.min) / span, 0.0), 1.0)
    return frac if pred.comparator in ("<", "<=") else 1.0 - frac


def _scan_cardinality(node, catalog):
    table = catalog.tables[catalog.table_index[node.tables[0]]]
    card = float(table.row_count)
    for pred in node.predicates:
        card *= _local_selectivity(pred, catalog.column(pred.column))
    return float(table.row_count), card


def _join_selectivity(node, catalog):
    sel = 1.0
    for pred in node.predicates:
        if pred.kind != "join":
            continue
        left = catalog.column(pred.column)
        right = catalog.column(pred.other_column)
        sel /= max(left.distinct_count, right.distinct_count)
    return sel


def _log2_term(rows):
    return rows * math.log2(1.0 + rows)


def _node_cost(node, catalog, children):
    """(rows_out, cost) with children as [(node, rows_out), ...]."""
    kind = node.node_type
    if kind in SCAN_OPERATORS:
        rows_in, rows_out = _scan_cardinality(node, catalog)
        if kind == "Seq Scan":
            return rows_out, rows_in
        return rows_out, 2.0 * math.log2(1.0 + rows_in) + rows_out
    if kind in JOIN_OPERATORS:
        (lnode, lrows), (rnode, rrows) = children
        rows_out = lrows * rrows * _join_selectivity(node, catalog)
        if kind == "Hash Join":
            return rows_out, lrows + rrows
        if kind == "Nested Loop":
            return rows_out, lrows * max(1.0, rrows / 1000.0)
        cost = lrows + rrows
        for child, rows in ((lnode, lrows), (rnode, rrows)):
            if child.node_type not in _SORTED_PROVIDERS:
                cost += _log2_term(rows)
        return rows_out, cost
    if kind == "Sort":
        (_, rows) = children[0]
        return rows, _log2_term(rows)
    if kind == "Aggregate":
        (_, rows) = children[0]
        return rows, rows
    raise WorkloadError(f"oracle has no cost model for operator {kind!r}")


def _walk_costs(node, catalog):
    children = [_walk_costs(c, catalog) for c in node.children]
    rows_out, cost = _node_cost(node, catalog, [(c, r) for (c, r, _) in children])
    return node, rows_out, cost + sum(total for (_, _, total) in children)


def oracle_latency(plan, catalog, sigma=0.0, noise_seed=0):
    """Deterministic analytic latency in ms; lognormal noise when sigma>0."""
    root = plan.root if isinstance(plan, PlanTree) else plan
    _, _, total = _walk_costs(root, catalog)
    latency = 0.001 * total
    if sigma > 0.0:
        latency *= float(np.random.default_rng(noise_seed).lognormal(0.0, sigma))
    return latency


def label_plan(plan, catalog, config, noise_seed=0):
    return replace(plan, latency_ms=oracle_latency(plan, catalog, config.noise_sigma, noise_seed))


# ---------------------------------------------------------------------------
# Candidate sets (hint-set simulation via structural perturbation)


@dataclass
class CandidateSet:
    query_id: str
    plans: list  # PlanTrees sharing query_id, oracle latencies attached


def _apply_at(root, target, fn):
    counter = [0]

    def rec(node):
        new_children = tuple(rec(c) for c in node.children)
        rebuilt = replace(node, children=new_children)
        idx = counter[0]
        counter[0] += 1
        return fn(rebuilt) if idx == target else rebuilt

    return rec(root)


def perturb_plan(root, rng, mutations=1):
    """Hint-like structural perturbations: force join algorithm, force scan
    type, or commute a join's inputs."""
    for _ in range(mutations):
        nodes = postorder(root)
        joins = [i for i, n in enumerate(nodes) if n.node_type in JOIN_OPERATORS]
        scans = [i for i, n in enumerate(nodes) if n.node_type in SCAN_OPERATORS]
        actions = []
        if joins:
            actions += ["algo", "swap"]
        if scans:
            actions += ["scan"]
        action = actions[int(rng.integers(0, len(actions)))]
        if action == "algo":
            target = joins[int(rng.integers(0, len(joins)))]
            options = [op for op in JOIN_OPERATORS if op != nodes[target].node_type]
            new_type = options[int(rng.integers(0, len(options)))]
            root = _apply_at(root, target, lambda n: replace(n, node_type=new_type))
        elif action == "swap":
            target = joins[int(rng.integers(0, len(joins)))]
            root = _apply_at(root, target, lambda n: replace(n, children=(n.children[1], n.children[0])))
        else:
            target = scans[int(rng.integers(0, len(scans)))]
            flipped = "Seq Scan" if nodes[target].node_type == "Index Scan" else "Index Scan"
            root = _apply_at(root, target, lambda n: replace(n, node_type=flipped))
    return root


def _canonical(root):
    return json.dumps(serialize_plan(PlanTree(root=root)), sort_keys=True)


def gen_candidate_set(catalog, config, query_seed, k=13):
    """One base plan plus k-1 structurally distinct perturbed variants.

    Candidate plans need at least one join so enough distinct variants
    exist; all plans share a query_id and carry oracle latencies.
    """
    rng = np.random.default_rng(query_seed)
    base_config = replace(config, min_joins=max(1, config.min_joins))
    query_id = f"q{query_seed}"
    base = gen_plan(catalog, base_config, rng, query_id=query_id).root
    variants = {_canonical(base): base}
    attempts = 0
    while len(variants) < k and attempts < 500 * k:
        mutant = perturb_plan(base, rng, mutations=1 + int(rng.integers(0, 3)))
        variants.setdefault(_canonical(mutant), mutant)
        attempts += 1
    if len(variants) < k:
        raise WorkloadError(f"could not find {k} distinct candidate plans for seed {query_seed}")
    plans = []
    for i, root in enumerate(list(variants.values())[:k]):
        tree = PlanTree(root=root, plan_id=f"{query_id}.p{i}", query_id=query_id)
        plans.append(label_plan(tree, catalog, config, noise_seed=[query_seed, i]))
    return CandidateSet(query_id=query_id, plans=plans)


# ---------------------------------------------------------------------------
# Dataset files


def _split_counts(n, ratios):
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return n_train, n_val, n - n_train - n_val


def gen_dataset(out_dir, catalog, config, n_queries, split=(0.8, 0.1, 0.1), candidates_per_query=0):
    """Write catalog.json, plans.jsonl and manifest.json under out_dir.

    With candidates_per_query > 0 each query contributes a full candidate
    set; otherwise one labeled plan per query.  Byte-identical for equal
    seeds.  Split assignment respects query_id grouping.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = []
    query_ids = []
    for q in range(n_queries):
        if candidates_per_query > 0:
            cset = gen_candidate_set(catalog, config, query_seed=config.seed * 1_000_003 + q,
                                     k=candidates_per_query)
            qid = cset.query_id
            plans.extend(cset.plans)
        else:
            qid = f"q{q:06d}"
            rng = np.random.default_rng([config.seed, q])
            tree = gen_plan(catalog, config, rng, query_id=qid, plan_id=f"{qid}.p0")
            plans.append(label_plan(tree, catalog, config, noise_seed=[config.seed, q, 0]))
        query_ids.append(qid)

    order = np.random.default_rng(config.seed).permutation(len(query_ids))
    n_train, n_val, _ = _split_counts(len(query_ids), split)
    splits = {
        "train": sorted(query_ids[int(i)] for i in order[:n_train]),
        "validation": sorted(query_ids[int(i)] for i in order[n_train:n_train + n_val]),
        "test": sorted(query_ids[int(i)] for i in order[n_train + n_val:]),
    }
    manifest = {
        "catalog_fingerprint": catalog.fingerprint(),
        "config": config.to_dict(),
        "n_queries": n_queries,
        "candidates_per_query": candidates_per_query,
        "split_ratios": list(split),
        "splits": splits,
    }
    (out / "catalog.json").write_bytes(catalog.to_json_bytes())
    with open(out / "plans.jsonl", "wb") as f:
        for plan in plans:
            f.write(plan_to_json_bytes(plan) + b"\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir):
    """(catalog, {"train"/"validation"/"test": [PlanTree]}, manifest)."""
    data = Path(data_dir)
    catalog = Catalog.from_json_bytes((data / "catalog.json").read_bytes())
    manifest = json.loads((data / "manifest.json").read_text())
    if manifest.get("catalog_fingerprint") != catalog.fingerprint():
        raise WorkloadError(
            f"{data}: catalog.json does not match the manifest fingerprint (dataset was modified)")
    assignment = {qid: name for name, qids in manifest["splits"].items() for qid in qids}
    splits = {"train": [], "validation": [], "test": []}
    with open(data / "plans.jsonl", "rb") as f:
        for line in f:
            if not line.strip():
                continue
            tree = parse_plan_json(line, catalog)
            split = assignment.get(tree.query_id)
            if split is None:
                raise WorkloadError(f"plan {tree.plan_id!r} has query_id outside the manifest splits")
            splits[split].append(tree)
    return catalog, splits, manifest


def group_candidate_sets(trees):
    """Group plans by query_id (insertion order preserved)."""
    groups = {}
    for tree in trees:
        groups.setdefault(tree.query_id, []).append(tree)
    return [CandidateSet(query_id=qid, plans=plans) for qid, plans in groups.items()]


# ---------------------------------------------------------------------------
# Best-effort ingestion of EXPLAIN (FORMAT JSON) output


DEFAULT_EXPLAIN_ALIASES = {
    "Seq Scan": "Seq Scan",
    "Index Scan": "Index Scan",
    "Index Only Scan": "Index Scan",
    "Bitmap Heap Scan": "Seq Scan",
    "Hash Join": "Hash Join",
    "Merge Join": "Merge Join",
    "Nested Loop": "Nested Loop",
    "Sort": "Sort",
    "Incremental Sort": "Sort",
    "Aggregate": "Aggregate",
    "GroupAggregate": "Aggregate",
    "HashAggregate": "Aggregate",
    # Physical glue nodes spliced out entirely.
    "Hash": None,
    "Materialize": None,
    "Memoize": None,
    "Gather": None,
    "Gather Merge": None,
    "Limit": None,
}

_CONDITION_RE = re.compile(r"^([\w.]+)\s*(=|>=|<=|>|<)\s*(.+?)$")


def _parse_literal(text):
    text = text.strip()
    if text.startswith("'"):
        end = text.rfind("'")
        return text[1:end] if end > 0 else text.strip("'")
    try:
        return float(text)
    except ValueError:
        return None


def _resolve_column(name, relation, catalog):
    if name in catalog.column_index:
        return name
    if relation and f"{relation}.{name}" in catalog.column_index:
        return f"{relation}.{name}"
    return None


def _explain_predicates(raw, relation, catalog, dropped):
    preds = []
    for key in ("Hash Cond", "Merge Cond", "Join Filter", "Index Cond", "Filter"):
        text = raw.get(key)
        if not text:
            continue
        for clause in re.split(r"\s+AND\s+", str(text)):
            m = _CONDITION_RE.match(clause.strip().lstrip("(").rstrip(")").strip())
            if not m:
                dropped[0] += 1
                continue
            left, op, right = m.groups()
            left_col = _resolve_column(left, relation, catalog)
            if left_col is None:
                dropped[0] += 1
                continue
            right_col = _resolve_column(right.strip("()"), relation, catalog)
            if right_col is not None and op == "=":
                preds.append({"kind": "join", "column": left_col, "op": "join", "other_column": right_col})
                continue
            literal = _parse_literal(re.sub(r"::\w+(\s+\w+)*$", "", right))
            if literal is None or op not in ("=", ">", ">=", "<", "<="):
                dropped[0] += 1
                continue
            stats = catalog.column(left_col)
            if stats.value_type == "string" and op != "=":
                dropped[0] += 1
                continue
            preds.append({"kind": "local", "column": left_col, "op": op, "value": literal})
    return preds


def _convert_explain_node(raw, catalog, aliases, dropped):
    pg_type = raw.get("Node Type")
    if pg_type not in aliases:
        raise WorkloadError(f"no alias for EXPLAIN node type {pg_type!r}")
    children = []
    for sub in raw.get("Plans", []):
        children.extend(_convert_explain_node(sub, catalog, aliases, dropped))
    mapped = aliases[pg_type]
    if mapped is None:
        return children  # splice glue nodes out
    relation = raw.get("Relation Name")
    tables = [relation] if relation else []
    return [{
        "node_type": mapped,
        "tables": tables,
        "predicates": _explain_predicates(raw, relation, catalog, dropped),
        "children": children,
    }]


def ingest_explain(data, catalog, aliases=None):
    """Map EXPLAIN (FORMAT JSON, ANALYZE) output onto a PlanTree.

    Unmappable predicates are dropped with a logged warning count; the
    root's Actual Total Time becomes the latency label when present.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if isinstance(data, str):
        data = json.loads(data)
    if isinstance(data, list):
        if not data:
            raise WorkloadError("empty EXPLAIN document")
        data = data[0]
    if not isinstance(data, dict) or "Plan" not in data:
        raise WorkloadError("EXPLAIN document has no 'Plan' root key")
    aliases = DEFAULT_EXPLAIN_ALIASES if aliases is None else aliases
    dropped = [0]
    roots = _convert_explain_node(data["Plan"], catalog, aliases, dropped)
    if len(roots) != 1:
        raise WorkloadError("EXPLAIN plan did not reduce to a single root")
    if dropped[0]:
        log.warning("ingest_explain: dropped %d unmappable predicates", dropped[0])
    doc = {"query_id": "", "plan_id": "", "plan": roots[0]}
    total = data["Plan"].get("Actual Total Time")
    if total is not None and float(total) > 0:
        doc["latency_ms"] = float(total)
    return parse_plan_json(doc, catalog)
