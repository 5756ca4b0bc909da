"""Recall@k, MRR@k and NDCG@k with binary, multi-positive judgments."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

RECALL_KS = (1, 5, 20, 100)
RANK_KS = (10, 20)


class JudgmentError(ValueError):
    pass


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class QueryJudgment:
    query_id: str
    positives: frozenset
    task_tag: str = "mixed"

    def __post_init__(self):
        if not self.positives:
            raise JudgmentError(f"query {self.query_id!r} has no positives")


def _ids(ranked):
    return ranked.doc_ids if hasattr(ranked, "doc_ids") else list(ranked)


def _check(judgment, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    if not judgment.positives:
        raise JudgmentError(f"query {judgment.query_id!r} has no positives")


def recall_at_k(ranked, judgment, k):
    _check(judgment, k)
    hits = sum(1 for d in _ids(ranked)[:k] if d in judgment.positives)
    return hits / len(judgment.positives)


def mrr_at_k(ranked, judgment, k):
    _check(judgment, k)
    for rank, d in enumerate(_ids(ranked)[:k], start=1):
        if d in judgment.positives:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked, judgment, k):
    _check(judgment, k)
    dcg = sum(1.0 / math.log2(i + 1) for i, d in enumerate(_ids(ranked)[:k], start=1) if d in judgment.positives)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(len(judgment.positives), k) + 1))
    return dcg / ideal


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)  # (metric, k, tag) -> mean
    counts: dict = field(default_factory=dict)  # tag -> number of queries

    def get(self, metric, k, tag="all"):
        return self.values[(metric, k, tag)]

    def lines(self):
        return [f"{m},{k},{t},{v:.6f}" for (m, k, t), v in sorted(self.values.items())]

    def table(self):
        cols = [("R", k) for k in RECALL_KS] + [(m, k) for k in RANK_KS for m in ("MRR", "NDCG")]
        cols = [c for c in cols if any((c[0], c[1], t) in self.values for t in self.counts)]
        head = f"{'task':<8}{'n':>6}" + "".join(f"{m + '@' + str(k):>10}" for m, k in cols)
        rows = [head]
        for tag in sorted(self.counts, key=lambda t: (t == "all", t)):
            cells = "".join(f"{100 * self.values[(m, k, tag)]:>10.2f}" for m, k in cols)
            rows.append(f"{tag:<8}{self.counts[tag]:>6}" + cells)
        return "\n".join(rows)


def evaluate_run(runs, judgments, ks=RECALL_KS, rank_ks=RANK_KS) -> MetricsReport:
    """Average per-query metrics per task tag and over all judged queries.

    ``runs`` maps query id -> ranked list (or is a list of RankedList);
    unjudged runs are ignored, judged queries without a run are an error.
    """
    if not isinstance(runs, dict):
        runs = {r.query_id: r for r in runs}
    missing = [j.query_id for j in judgments if j.query_id not in runs]
    if missing:
        raise CoverageError(f"{len(missing)} judged queries have no ranked list, e.g. {missing[0]!r}")
    sums = defaultdict(float)
    counts = defaultdict(int)
    for j in judgments:
        ranked = runs[j.query_id]
        per_query = {("R", k): recall_at_k(ranked, j, k) for k in ks}
        for k in rank_ks:
            per_query[("MRR", k)] = mrr_at_k(ranked, j, k)
            per_query[("NDCG", k)] = ndcg_at_k(ranked, j, k)
        for tag in (j.task_tag, "all"):
            counts[tag] += 1
            for (m, k), v in per_query.items():
                sums[(m, k, tag)] += v
    values = {key: total / counts[key[2]] for key, total in sums.items()}
    return MetricsReport(values, dict(counts))


def judgments_for(queries):
    return [QueryJudgment(q.id, frozenset(q.positives), q.task_tag) for q in queries]
