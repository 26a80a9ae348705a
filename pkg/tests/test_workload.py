"""Generators, the analytic latency oracle, candidate sets, dataset files."""

import json
import logging
from dataclasses import replace

import numpy as np
import pytest

from planrep import workload
from planrep.plans import Catalog, ColumnStats, PlanNode, PlanTree, TableStats, parse_plan_json
from planrep.workload import (
    GenConfig,
    WorkloadError,
    gen_candidate_set,
    gen_catalog,
    gen_dataset,
    gen_plan,
    ingest_explain,
    label_plan,
    load_dataset,
    oracle_latency,
    perturb_plan,
)

from conftest import join_pred, local, scan, tree_of


class TestGenCatalog:
    def test_deterministic_bytes(self):
        cfg = GenConfig(seed=11, n_tables=5)
        assert gen_catalog(cfg).to_json_bytes() == gen_catalog(cfg).to_json_bytes()

    def test_table_count_honored(self):
        for n in (1, 3, 25):
            assert len(gen_catalog(GenConfig(seed=0, n_tables=n)).tables) == n

    def test_numeric_ranges_valid(self):
        catalog = gen_catalog(GenConfig(seed=2, n_tables=10))
        for col in catalog.columns:
            if col.value_type == "numeric":
                assert col.min <= col.max
            assert col.distinct_count >= 1

    def test_different_seeds_differ(self):
        a = gen_catalog(GenConfig(seed=1)).to_json_bytes()
        b = gen_catalog(GenConfig(seed=2)).to_json_bytes()
        assert a != b


class TestGenPlan:
    def test_no_joins_gives_single_scan(self):
        cfg = GenConfig(seed=0, n_tables=4, max_joins=0, root_extra_prob=0.0)
        catalog = gen_catalog(cfg)
        tree = gen_plan(catalog, cfg, np.random.default_rng(0))
        assert tree.root.children == ()
        assert tree.root.node_type in ("Seq Scan", "Index Scan")

    def test_round_trips_through_parser(self):
        cfg = GenConfig(seed=3, n_tables=5, max_joins=4)
        catalog = gen_catalog(cfg)
        for i in range(20):
            tree = gen_plan(catalog, cfg, np.random.default_rng(i), query_id=f"q{i}")
            from planrep.plans import plan_to_json_bytes
            again = parse_plan_json(plan_to_json_bytes(tree), catalog)
            assert again == tree

    def test_join_budget_respected_over_many_draws(self):
        cfg = GenConfig(seed=4, n_tables=6, max_joins=3, root_extra_prob=0.2)
        catalog = gen_catalog(cfg)
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            tree = gen_plan(catalog, cfg, rng)
            joins = sum(1 for n in _nodes(tree.root) if n.node_type in workload.JOIN_OPERATORS)
            assert joins <= cfg.max_joins
            locals_per_scan = [len(n.predicates) for n in _nodes(tree.root)
                               if n.node_type in workload.SCAN_OPERATORS]
            assert all(c <= cfg.max_local_predicates for c in locals_per_scan)


def _nodes(root):
    out = [root]
    for c in root.children:
        out.extend(_nodes(c))
    return out


def _flat_catalog(row_count=1000):
    """One table, one numeric column with a friendly range."""
    t = TableStats(name="t1", row_count=row_count, columns=(
        ColumnStats(name="c1", table="t1", value_type="numeric",
                    distinct_count=10, min=0.0, max=100.0),
    ))
    return Catalog([t], workload.DEFAULT_OPERATORS)


class TestOracle:
    def test_bare_seq_scan_hand_value(self):
        catalog = _flat_catalog(1000)
        tree = tree_of(scan("t1"))
        assert oracle_latency(tree, catalog) == 1.0  # 0.001 * 1000 rows

    def test_index_scan_hand_value(self):
        catalog = _flat_catalog(1000)
        tree = tree_of(scan("t1", node_type="Index Scan"))
        expected = 0.001 * (2.0 * np.log2(1001.0) + 1000.0)
        assert abs(oracle_latency(tree, catalog) - expected) < 1e-12

    def test_selectivity_hand_values(self):
        catalog = _flat_catalog(1000)
        # col <= 25 keeps a quarter of rows; equality keeps 1/distinct
        tree = tree_of(PlanNode(node_type="Sort", children=(
            scan("t1", [local("t1.c1", "<=", 25.0)]),)))
        rows_out = 1000 * 0.25
        expected = 0.001 * (1000.0 + rows_out * np.log2(1.0 + rows_out))
        assert abs(oracle_latency(tree, catalog) - expected) < 1e-12

    def test_adding_predicate_never_increases_latency(self):
        cfg = GenConfig(seed=5, n_tables=5, max_joins=4, root_extra_prob=0.3)
        catalog = gen_catalog(cfg)
        rng = np.random.default_rng(1)
        checked = 0
        for i in range(300):
            tree = gen_plan(catalog, cfg, np.random.default_rng(i))
            scans = [n for n in _nodes(tree.root) if n.node_type in workload.SCAN_OPERATORS]
            target = scans[int(rng.integers(len(scans)))]
            stats = catalog.tables[catalog.table_index[target.tables[0]]]
            col = stats.columns[int(rng.integers(len(stats.columns)))]
            if col.value_type == "string":
                pred = local(col.qualified, "=", "v0")
            else:
                pred = local(col.qualified, "<=",
                             float(rng.uniform(col.min, col.max)))
            base = oracle_latency(tree, catalog)
            tightened = _with_extra_pred(tree, target, pred)
            assert oracle_latency(tightened, catalog) <= base + 1e-9
            checked += 1
        assert checked == 300

    def test_hash_join_child_swap_invariance(self):
        catalog = gen_catalog(GenConfig(seed=6, n_tables=4))
        t1, t2 = catalog.tables[0].name, catalog.tables[1].name
        c1 = catalog.tables[0].columns[0].qualified
        c2 = catalog.tables[1].columns[0].qualified
        left, right = scan(t1), scan(t2)
        pred = join_pred(c1, c2)
        a = PlanNode(node_type="Hash Join", tables=(t1, t2), predicates=(pred,), children=(left, right))
        b = PlanNode(node_type="Hash Join", tables=(t1, t2), predicates=(pred,), children=(right, left))
        assert oracle_latency(tree_of(a), catalog) == oracle_latency(tree_of(b), catalog)

    def test_strictly_positive_and_deterministic(self):
        cfg = GenConfig(seed=7, n_tables=5, max_joins=5)
        catalog = gen_catalog(cfg)
        for i in range(100):
            tree = gen_plan(catalog, cfg, np.random.default_rng(i))
            a = oracle_latency(tree, catalog)
            assert a > 0.0 and np.isfinite(a)
            assert oracle_latency(tree, catalog) == a

    def test_noise_deterministic_per_seed(self):
        catalog = _flat_catalog()
        tree = tree_of(scan("t1"))
        a = oracle_latency(tree, catalog, sigma=0.5, noise_seed=42)
        b = oracle_latency(tree, catalog, sigma=0.5, noise_seed=42)
        c = oracle_latency(tree, catalog, sigma=0.5, noise_seed=43)
        assert a == b != c
        assert a != oracle_latency(tree, catalog)


class TestCandidateSets:
    def test_k1_is_base_plan_only(self):
        cfg = GenConfig(seed=8, n_tables=5, max_joins=3)
        catalog = gen_catalog(cfg)
        cset = gen_candidate_set(catalog, cfg, query_seed=1, k=1)
        assert len(cset.plans) == 1

    def test_thirteen_distinct_plans_share_query_id(self):
        cfg = GenConfig(seed=9, n_tables=6, max_joins=4)
        catalog = gen_catalog(cfg)
        cset = gen_candidate_set(catalog, cfg, query_seed=5, k=13)
        assert len(cset.plans) == 13
        assert len({p.query_id for p in cset.plans}) == 1
        canon = {workload._canonical(p.root) for p in cset.plans}
        assert len(canon) == 13
        for p in cset.plans:
            assert p.latency_ms > 0

    def test_distinct_latencies_in_most_sets(self):
        cfg = GenConfig(seed=10, n_tables=6, max_joins=4)
        catalog = gen_catalog(cfg)
        distinct = 0
        total = 1000
        for q in range(total):
            cset = gen_candidate_set(catalog, cfg, query_seed=q, k=13)
            if len({round(p.latency_ms, 12) for p in cset.plans}) >= 2:
                distinct += 1
        assert distinct / total >= 0.95

    def test_perturbation_preserves_validity(self):
        cfg = GenConfig(seed=11, n_tables=5, max_joins=3, min_joins=1)
        catalog = gen_catalog(cfg)
        rng = np.random.default_rng(0)
        tree = gen_plan(catalog, cfg, rng)
        mutated = perturb_plan(tree.root, rng, mutations=3)
        from planrep.plans import plan_to_json_bytes
        parse_plan_json(plan_to_json_bytes(tree_of(mutated)), catalog)


class TestGenDataset:
    def test_split_counts_and_grouping(self, tmp_path):
        cfg = GenConfig(seed=12, n_tables=4, max_joins=2)
        catalog = gen_catalog(cfg)
        manifest = gen_dataset(tmp_path / "d", catalog, cfg, n_queries=100)
        assert len(manifest["splits"]["train"]) == 80
        assert len(manifest["splits"]["validation"]) == 10
        assert len(manifest["splits"]["test"]) == 10
        all_qids = [q for s in manifest["splits"].values() for q in s]
        assert len(all_qids) == len(set(all_qids)) == 100

    def test_regeneration_byte_identical(self, tmp_path):
        cfg = GenConfig(seed=13, n_tables=4, max_joins=2)
        catalog = gen_catalog(cfg)
        gen_dataset(tmp_path / "a", catalog, cfg, n_queries=20)
        gen_dataset(tmp_path / "b", catalog, cfg, n_queries=20)
        for name in ("catalog.json", "plans.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_load_round_trip(self, tmp_path):
        cfg = GenConfig(seed=14, n_tables=4, max_joins=2)
        catalog = gen_catalog(cfg)
        gen_dataset(tmp_path / "d", catalog, cfg, n_queries=30)
        loaded_catalog, splits, manifest = load_dataset(tmp_path / "d")
        assert loaded_catalog.fingerprint() == catalog.fingerprint()
        assert len(splits["train"]) == 24
        assert all(t.latency_ms > 0 for part in splits.values() for t in part)

    def test_candidate_dataset_grouping(self, tmp_path):
        cfg = GenConfig(seed=15, n_tables=5, max_joins=3)
        catalog = gen_catalog(cfg)
        gen_dataset(tmp_path / "d", catalog, cfg, n_queries=6, candidates_per_query=5)
        _, splits, manifest = load_dataset(tmp_path / "d")
        assert manifest["candidates_per_query"] == 5
        sets = workload.group_candidate_sets(splits["train"] + splits["validation"] + splits["test"])
        assert len(sets) == 6
        assert all(len(s.plans) == 5 for s in sets)

    def test_tampered_catalog_detected(self, tmp_path):
        cfg = GenConfig(seed=16, n_tables=4, max_joins=2)
        catalog = gen_catalog(cfg)
        gen_dataset(tmp_path / "d", catalog, cfg, n_queries=5)
        other = gen_catalog(GenConfig(seed=99, n_tables=4))
        (tmp_path / "d" / "catalog.json").write_bytes(other.to_json_bytes())
        with pytest.raises(WorkloadError, match="fingerprint"):
            load_dataset(tmp_path / "d")


EXPLAIN_MINIMAL = {
    "Plan": {
        "Node Type": "Seq Scan",
        "Relation Name": "t1",
        "Actual Total Time": 12.5,
    }
}


class TestIngestExplain:
    def test_minimal_seq_scan(self):
        catalog = _flat_catalog()
        tree = ingest_explain(json.dumps([EXPLAIN_MINIMAL]), catalog)
        assert tree.root.node_type == "Seq Scan"
        assert tree.root.tables == ("t1",)
        assert tree.latency_ms == 12.5

    def test_nested_plans_preserve_arity(self):
        catalog = gen_catalog(GenConfig(seed=17, n_tables=2, columns_per_table=(2, 2)))
        t1, t2 = catalog.tables[0].name, catalog.tables[1].name
        c1 = catalog.tables[0].columns[0].qualified
        c2 = catalog.tables[1].columns[0].qualified
        doc = {"Plan": {
            "Node Type": "Hash Join",
            "Hash Cond": f"({c1} = {c2})",
            "Actual Total Time": 99.0,
            "Plans": [
                {"Node Type": "Seq Scan", "Relation Name": t1},
                {"Node Type": "Hash", "Plans": [
                    {"Node Type": "Seq Scan", "Relation Name": t2}]},
            ],
        }}
        tree = ingest_explain(doc, catalog)
        assert tree.root.node_type == "Hash Join"
        assert len(tree.root.children) == 2  # the Hash glue node is spliced out
        assert tree.root.predicates[0].kind == "join"

    def test_unknown_node_type_listed(self):
        catalog = _flat_catalog()
        doc = {"Plan": {"Node Type": "Custom Scan", "Relation Name": "t1"}}
        with pytest.raises(WorkloadError, match="Custom Scan"):
            ingest_explain(doc, catalog)

    def test_missing_plan_key(self):
        with pytest.raises(WorkloadError, match="Plan"):
            ingest_explain({"Not A Plan": {}}, _flat_catalog())

    def test_unmappable_predicates_dropped_with_warning(self, caplog):
        catalog = _flat_catalog()
        doc = {"Plan": {
            "Node Type": "Seq Scan", "Relation Name": "t1",
            "Filter": "((c1 > 5) AND (lower(name) ~~ '%x%'))",
        }}
        with caplog.at_level(logging.WARNING):
            tree = ingest_explain(doc, catalog)
        assert len(tree.root.predicates) == 1  # the simple clause survives
        assert any("dropped" in r.message for r in caplog.records)

    def test_alias_maps_index_only_scan(self):
        catalog = _flat_catalog()
        doc = {"Plan": {"Node Type": "Index Only Scan", "Relation Name": "t1"}}
        tree = ingest_explain(doc, catalog)
        assert tree.root.node_type == "Index Scan"


def _with_extra_pred(tree, target, pred):
    def rec(node):
        children = tuple(rec(c) for c in node.children)
        if node is target:
            return replace(node, predicates=node.predicates + (pred,), children=children)
        return replace(node, children=children)

    return replace(tree, root=rec(tree.root))
