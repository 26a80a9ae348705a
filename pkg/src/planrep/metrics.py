"""Evaluation metrics: Q-error, rank correlation, plan suboptimality.

Percentiles use the nearest-rank convention (index ceil(q*N)-1 on the
ascending sort) and "top q% mean" is the mean of the ceil(q*N) smallest
values, i.e. the average over the best cases with the worst tail trimmed.
Both choices are bit-reproducible (no interpolation).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    """Domain violation (nonpositive latency, constant rank input, ...)."""


def q_error(estimated, actual):
    """max/min ratio of the two latencies; 1 is perfect, symmetric."""
    if estimated <= 0 or actual <= 0:
        raise MetricsError(f"q_error needs positive latencies, got ({estimated}, {actual})")
    return max(estimated, actual) / min(estimated, actual)


def q_errors(estimated, actual):
    est = np.asarray(estimated, dtype=np.float64)
    act = np.asarray(actual, dtype=np.float64)
    if est.shape != act.shape:
        raise MetricsError("estimated/actual length mismatch")
    if np.any(est <= 0) or np.any(act <= 0):
        raise MetricsError("q_error needs positive latencies")
    return np.maximum(est, act) / np.minimum(est, act)


def average_ranks(values):
    """1-based ranks; ties share the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    n = len(v)
    while i < n:
        j = i
        while j + 1 < n and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys):
    """Pearson correlation of average-tie ranks, in [-1, 1]."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise MetricsError("spearman needs two equal-length vectors of length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricsError("spearman is undefined on a constant vector")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx * rx).sum() * (ry * ry).sum()))


def plan_suboptimality(candidates):
    """Actual latency of the predicted-best candidate over the true best.

    ``candidates`` is a sequence of (predicted_ms, actual_ms); ties in the
    predicted latency break toward the lowest index.
    """
    cands = list(candidates)
    if not cands:
        raise MetricsError("plan_suboptimality needs at least one candidate")
    actual = np.asarray([a for (_, a) in cands], dtype=np.float64)
    if np.any(actual <= 0):
        raise MetricsError("actual latencies must be positive")
    predicted = np.asarray([p for (p, _) in cands], dtype=np.float64)
    chosen = int(np.argmin(predicted))  # first minimum wins on ties
    return float(actual[chosen] / actual.min())


@dataclass(frozen=True)
class QuantileSummary:
    median: float
    p90: float
    p99: float
    top50_mean: float
    top90_mean: float
    top99_mean: float

    def to_dict(self):
        return {
            "median": self.median,
            "p90": self.p90,
            "p99": self.p99,
            "top50_mean": self.top50_mean,
            "top90_mean": self.top90_mean,
            "top99_mean": self.top99_mean,
        }


def _nearest_rank(sorted_values, q):
    idx = math.ceil(q * len(sorted_values)) - 1
    return float(sorted_values[max(idx, 0)])


def _top_mean(sorted_values, q):
    count = math.ceil(q * len(sorted_values))
    return float(np.mean(sorted_values[:max(count, 1)]))


def quantile_report(values):
    """Median/90th/99th nearest-rank percentiles and best-q% means."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise MetricsError("quantile_report needs at least one value")
    return QuantileSummary(
        median=_nearest_rank(v, 0.50),
        p90=_nearest_rank(v, 0.90),
        p99=_nearest_rank(v, 0.99),
        top50_mean=_top_mean(v, 0.50),
        top90_mean=_top_mean(v, 0.90),
        top99_mean=_top_mean(v, 0.99),
    )


@dataclass
class EvalReport:
    """Cost-estimation accuracy of one model on one split."""

    model_kind: str
    edge_direction: str
    q_error_summary: QuantileSummary
    spearman: float
    per_sample_q_errors: np.ndarray
    mean_inference_ms: float | None = None
    suboptimality_summary: QuantileSummary | None = None

    CSV_COLUMNS = (
        "model", "edge_direction",
        "median_qerror", "p90_qerror", "p99_qerror", "spearman",
        "top50_mean_qerror", "top99_mean_qerror",
        "top90_mean_qerror", "mean_inference_ms", "n_samples",
    )

    def csv_row(self):
        s = self.q_error_summary
        return {
            "model": self.model_kind,
            "edge_direction": self.edge_direction,
            "median_qerror": s.median,
            "p90_qerror": s.p90,
            "p99_qerror": s.p99,
            "spearman": self.spearman,
            "top50_mean_qerror": s.top50_mean,
            "top99_mean_qerror": s.top99_mean,
            "top90_mean_qerror": s.top90_mean,
            "mean_inference_ms": "" if self.mean_inference_ms is None else self.mean_inference_ms,
            "n_samples": int(len(self.per_sample_q_errors)),
        }

    def to_json_dict(self):
        out = {
            "model": self.model_kind,
            "edge_direction": self.edge_direction,
            "q_error": self.q_error_summary.to_dict(),
            "spearman": self.spearman,
            "n_samples": int(len(self.per_sample_q_errors)),
        }
        if self.mean_inference_ms is not None:
            out["mean_inference_ms"] = self.mean_inference_ms
        if self.suboptimality_summary is not None:
            out["plan_suboptimality"] = self.suboptimality_summary.to_dict()
        return out


def evaluate_estimates(model_kind, edge_direction, predicted_ms, actual_ms):
    per_sample = q_errors(predicted_ms, actual_ms)
    return EvalReport(
        model_kind=model_kind,
        edge_direction=edge_direction,
        q_error_summary=quantile_report(per_sample),
        spearman=spearman(predicted_ms, actual_ms),
        per_sample_q_errors=per_sample,
    )


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(EvalReport.CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def reports_to_json(reports):
    return json.dumps([r.to_json_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def per_sample_csv(q_error_values):
    """Tidy per-sample errors for external plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample", "q_error"])
    for i, q in enumerate(q_error_values):
        writer.writerow([i, float(q)])
    return buf.getvalue()


def time_inference(predict_fn, items, repetitions, warmup=1):
    """Mean and standard deviation of wall-clock ms per prediction.

    Times the forward passes only: ``items`` should already be encoded
    inputs for ``predict_fn``.  Warmup repetitions are excluded.
    """
    if repetitions <= 0:
        raise MetricsError("repetitions must be positive")
    if not items:
        raise MetricsError("nothing to time")
    for _ in range(warmup):
        for item in items:
            predict_fn(item)
    per_rep = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for item in items:
            predict_fn(item)
        per_rep.append((time.perf_counter() - start) * 1000.0 / len(items))
    arr = np.asarray(per_rep)
    return float(arr.mean()), float(arr.std())
