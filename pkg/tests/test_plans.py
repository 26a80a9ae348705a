"""Plan tree model: parsing, validation, traversals, binarization."""

import json

import pytest
from hypothesis import given, settings, strategies as st

from planrep import plans
from planrep.plans import (
    PAD_NODE,
    PASSTHROUGH_NODE,
    Catalog,
    PlanNode,
    PlanTree,
    PlanValidationError,
    Predicate,
    binarize,
    edge_lists,
    parse_plan_json,
    plan_to_json_bytes,
    postorder,
    serialize_plan,
)

from conftest import join, join_pred, local, scan, tree_of


class TestParse:
    def test_single_node_plan(self, small_catalog):
        doc = {"query_id": "q1", "plan_id": "p1", "latency_ms": 10.0,
               "plan": {"node_type": "Seq Scan", "tables": ["t1"], "predicates": [], "children": []}}
        tree = parse_plan_json(json.dumps(doc), small_catalog)
        assert tree.latency_ms == 10.0
        assert tree.root.node_type == "Seq Scan"
        assert tree.root.children == ()
        assert plans.node_count(tree) == 1

    def test_three_node_join_plan(self, small_catalog):
        doc = {
            "query_id": "q", "plan_id": "p",
            "plan": {
                "node_type": "Hash Join", "tables": ["t1", "t2"],
                "predicates": [{"kind": "join", "column": "t1.c1", "op": "join", "other_column": "t2.c1"}],
                "children": [
                    {"node_type": "Seq Scan", "tables": ["t1"], "predicates": [], "children": []},
                    {"node_type": "Index Scan", "tables": ["t2"],
                     "predicates": [{"kind": "local", "column": "t2.c1", "op": "<=", "value": 15}],
                     "children": []},
                ],
            },
        }
        tree = parse_plan_json(json.dumps(doc).encode(), small_catalog)
        assert len(tree.root.children) == 2
        assert tree.root.children[1].predicates[0].value == 15.0

    def test_unknown_table_names_it(self, small_catalog):
        doc = {"plan": {"node_type": "Seq Scan", "tables": ["nope"], "predicates": [], "children": []}}
        with pytest.raises(PlanValidationError, match="nope"):
            parse_plan_json(doc, small_catalog)

    def test_unknown_operator_with_path(self, small_catalog):
        doc = {"plan": {"node_type": "Hash Join", "tables": [], "predicates": [], "children": [
            {"node_type": "Quantum Scan", "tables": [], "predicates": [], "children": []},
            {"node_type": "Seq Scan", "tables": [], "predicates": [], "children": []},
        ]}}
        with pytest.raises(PlanValidationError, match=r"children\[0\]"):
            parse_plan_json(doc, small_catalog)

    def test_unknown_column_in_predicate(self, small_catalog):
        doc = {"plan": {"node_type": "Seq Scan", "tables": ["t1"],
                        "predicates": [{"kind": "local", "column": "t1.zz", "op": "=", "value": 1}],
                        "children": []}}
        with pytest.raises(PlanValidationError, match=r"predicates\[0\]"):
            parse_plan_json(doc, small_catalog)

    def test_malformed_predicate(self, small_catalog):
        doc = {"plan": {"node_type": "Seq Scan", "tables": ["t1"],
                        "predicates": [{"kind": "local", "column": "t1.c1", "op": "~", "value": 1}],
                        "children": []}}
        with pytest.raises(PlanValidationError, match="comparator"):
            parse_plan_json(doc, small_catalog)

    def test_string_column_interval_comparator_rejected(self, small_catalog):
        doc = {"plan": {"node_type": "Seq Scan", "tables": ["t1"],
                        "predicates": [{"kind": "local", "column": "t1.c2", "op": ">", "value": "x"}],
                        "children": []}}
        with pytest.raises(PlanValidationError, match="interval"):
            parse_plan_json(doc, small_catalog)

    def test_negative_latency_rejected(self, small_catalog):
        doc = {"latency_ms": -1.0,
               "plan": {"node_type": "Seq Scan", "tables": [], "predicates": [], "children": []}}
        with pytest.raises(PlanValidationError, match="latency"):
            parse_plan_json(doc, small_catalog)

    def test_unknown_fields_ignored(self, small_catalog):
        doc = {"plan": {"node_type": "Seq Scan", "tables": [], "predicates": [], "children": [],
                        "Startup Cost": 3.25},
               "engine": "toy"}
        assert parse_plan_json(doc, small_catalog).root.node_type == "Seq Scan"

    def test_round_trip(self, small_catalog, three_node_plan):
        data = plan_to_json_bytes(three_node_plan)
        again = parse_plan_json(data, small_catalog)
        assert again == three_node_plan
        assert plan_to_json_bytes(again) == data


class TestCatalog:
    def test_round_trip_and_fingerprint(self, small_catalog):
        data = small_catalog.to_json_bytes()
        again = Catalog.from_json_bytes(data)
        assert again.to_json_bytes() == data
        assert again.fingerprint() == small_catalog.fingerprint()

    def test_duplicate_table_rejected(self, small_catalog):
        t = small_catalog.tables[0]
        with pytest.raises(PlanValidationError, match="duplicate"):
            Catalog([t, t], small_catalog.operator_vocabulary)

    def test_min_above_max_rejected(self):
        from planrep.plans import ColumnStats
        with pytest.raises(PlanValidationError):
            ColumnStats(name="c", table="t", value_type="numeric", distinct_count=2, min=5.0, max=1.0)


class TestPostorder:
    def test_three_nodes(self):
        b, c = scan("t1"), scan("t2")
        a = PlanNode(node_type="Hash Join", children=(b, c))
        assert postorder(a) == [b, c, a]

    def test_left_deep_chain(self, small_catalog):
        s1, s2, s3 = scan("t1"), scan("t2"), scan("t3")
        j1 = PlanNode(node_type="Hash Join", children=(s1, s2))
        j2 = PlanNode(node_type="Hash Join", children=(j1, s3))
        assert postorder(j2) == [s1, s2, j1, s3, j2]

    def test_single_node(self):
        n = scan("t1")
        assert postorder(n) == [n]

    def test_permutation_and_topological_property(self):
        # children always appear before their parent
        root = PlanNode(node_type="Sort", children=(
            PlanNode(node_type="Hash Join", children=(scan("t1"), scan("t2"), scan("t3"))),
        ))
        order = postorder(root)
        assert len(order) == len(set(map(id, order))) == 5
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for child in node.children:
                assert pos[id(child)] < pos[id(node)]
        assert order[-1] is root


class TestEdgeLists:
    def test_two_children(self):
        b, c = scan("t1"), scan("t2")
        a = PlanNode(node_type="Hash Join", children=(b, c))
        cp, pc = edge_lists(a)
        assert cp == [(0, 2), (1, 2)]
        assert pc == [(2, 0), (2, 1)]

    def test_single_node_empty(self):
        cp, pc = edge_lists(scan("t1"))
        assert cp == [] and pc == []

    def test_mutual_reverses_and_count(self):
        root = PlanNode(node_type="Sort", children=(
            PlanNode(node_type="Hash Join", children=(scan("t1"), scan("t2"))),
        ))
        cp, pc = edge_lists(root)
        assert len(cp) == len(pc) == plans.node_count(root) - 1
        assert [(d, s) for (s, d) in cp] == pc


class TestBinarize:
    def test_unary_gets_pad_child(self):
        tree = tree_of(PlanNode(node_type="Sort", children=(scan("t1"),)))
        out = binarize(tree)
        kids = out.root.children
        assert len(kids) == 2
        assert kids[0].node_type == "Seq Scan"
        assert kids[1].node_type == PAD_NODE

    def test_ternary_becomes_left_deep(self):
        a, b, c = scan("t1"), scan("t2"), scan("t3")
        tree = tree_of(PlanNode(node_type="Hash Join", children=(a, b, c)))
        out = binarize(tree)
        root = out.root
        assert len(root.children) == 2
        passthrough, last = root.children
        assert passthrough.node_type == PASSTHROUGH_NODE
        assert [n.tables for n in passthrough.children] == [("t1",), ("t2",)]
        assert last.tables == ("t3",)

    def test_idempotent_on_binary(self, three_node_plan):
        once = binarize(three_node_plan)
        assert once == three_node_plan
        assert binarize(once) == once

    def test_preserves_payloads_and_leaf_order(self):
        leaves = [scan(f"t{i}") for i in (1, 2, 3)]
        root = PlanNode(node_type="Hash Join", children=tuple(leaves))
        wrapped = PlanNode(node_type="Sort", children=(root,))
        out = binarize(tree_of(wrapped))
        original_payloads = [(n.node_type, n.tables) for n in postorder(wrapped)]
        new_nodes = postorder(out.root)
        new_payloads = [(n.node_type, n.tables) for n in new_nodes
                        if n.node_type not in (PAD_NODE, PASSTHROUGH_NODE)]
        assert sorted(new_payloads) == sorted(original_payloads)
        original_leaf_order = [n.tables for n in postorder(wrapped) if not n.children]
        new_leaf_order = [n.tables for n in new_nodes
                          if not n.children and n.node_type != PAD_NODE]
        assert new_leaf_order == original_leaf_order

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_binarize_properties_random_trees(self, data):
        def build(depth):
            arity = data.draw(st.integers(0, 3 if depth < 3 else 0))
            children = tuple(build(depth + 1) for _ in range(arity))
            kind = "Hash Join" if children else "Seq Scan"
            return PlanNode(node_type=kind, tables=("t1",) if not children else (), children=children)

        root = build(0)
        out = binarize(tree_of(root)).root
        for node in postorder(out):
            assert len(node.children) in (0, 2)
        original_leaves = [n for n in postorder(root) if not n.children]
        new_leaves = [n for n in postorder(out) if not n.children and n.node_type != PAD_NODE]
        assert len(new_leaves) == len(original_leaves)


class TestPredicateInvariants:
    def test_join_predicate_shape(self):
        with pytest.raises(PlanValidationError):
            Predicate(kind="join", column="a.b", comparator="=", other_column="c.d")
        with pytest.raises(PlanValidationError):
            Predicate(kind="join", column="a.b", comparator="join", value=1.0, other_column="c.d")
        with pytest.raises(PlanValidationError):
            Predicate(kind="local", column="a.b", comparator="join", value=1.0)
        assert Predicate(kind="join", column="a.b", comparator="join", other_column="c.d").value is None

    def test_zero_latency_rejected(self):
        with pytest.raises(PlanValidationError):
            PlanTree(root=scan("t1"), latency_ms=0.0)
