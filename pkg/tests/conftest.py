"""Shared fixtures: a handcrafted catalog and plan builders."""

import numpy as np
import pytest

from planrep.plans import Catalog, ColumnStats, PlanNode, PlanTree, Predicate, TableStats
from planrep.workload import DEFAULT_OPERATORS


@pytest.fixture
def small_catalog():
    """Three tables with ranges chosen for exact predicate encodings.

    t1.c1: numeric [0, 100], t1.c2: string, t2.c1: numeric [10, 20],
    t3.c1: numeric degenerate [5, 5].
    """
    tables = [
        TableStats(name="t1", row_count=1000, columns=(
            ColumnStats(name="c1", table="t1", value_type="numeric", distinct_count=10, min=0.0, max=100.0),
            ColumnStats(name="c2", table="t1", value_type="string", distinct_count=50),
        )),
        TableStats(name="t2", row_count=500, columns=(
            ColumnStats(name="c1", table="t2", value_type="numeric", distinct_count=5, min=10.0, max=20.0),
        )),
        TableStats(name="t3", row_count=50, columns=(
            ColumnStats(name="c1", table="t3", value_type="numeric", distinct_count=1, min=5.0, max=5.0),
        )),
    ]
    return Catalog(tables, DEFAULT_OPERATORS)


def scan(table, preds=(), node_type="Seq Scan"):
    return PlanNode(node_type=node_type, tables=(table,), predicates=tuple(preds))


def join(left, right, preds=(), node_type="Hash Join", tables=None):
    if tables is None:
        tables = tuple(sorted({p.column.split(".")[0] for p in preds}
                              | {p.other_column.split(".")[0] for p in preds if p.other_column}))
    return PlanNode(node_type=node_type, tables=tables, predicates=tuple(preds), children=(left, right))


def local(column, comparator, value):
    return Predicate(kind="local", column=column, comparator=comparator, value=value)


def join_pred(column, other_column):
    return Predicate(kind="join", column=column, comparator="join", other_column=other_column)


def tree_of(root, plan_id="p0", query_id="q0", latency_ms=None):
    return PlanTree(root=root, plan_id=plan_id, query_id=query_id, latency_ms=latency_ms)


@pytest.fixture
def three_node_plan(small_catalog):
    """Hash join over two scans, with join and local predicates."""
    root = join(
        scan("t1", [local("t1.c1", "<=", 50.0)]),
        scan("t2", [local("t2.c1", ">", 5.0)], node_type="Index Scan"),
        [join_pred("t1.c1", "t2.c1")],
    )
    return tree_of(root, latency_ms=12.5)


def random_params(shapes, rng, names=None):
    """dict of Parameters with random small values."""
    from planrep import numerics as nm
    out = {}
    for i, shape in enumerate(shapes):
        name = names[i] if names else f"p{i}"
        out[name] = nm.Parameter(name, nm.Tensor(rng.uniform(-1.0, 1.0, size=shape)))
    return out
