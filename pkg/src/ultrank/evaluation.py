"""Ranking quality metrics and run evaluation.

DCG@k uses exponential gains and a log2 position discount:

    DCG@k = sum_{i=1..k} (2^grade_i - 1) / log2(i + 1)

Gains can be switched to linear for ablations.  When ranking by score, ties
break by doc_id ascending so evaluation is deterministic.  NDCG divides by
the ideal DCG of the same grade multiset; a query whose ideal DCG is zero
(no relevant documents at all) reports NDCG 0 by convention.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError


def _gain(grade: float, gain: str) -> float:
    if gain == "exp":
        return 2.0**grade - 1.0
    if gain == "linear":
        return float(grade)
    raise DataError(f"unknown gain kind {gain!r}")


def dcg_at_k(grades_in_rank_order: Sequence[float], k: int, gain: str = "exp") -> float:
    """DCG of a list already sorted by the ranking under evaluation."""
    if k < 1:
        raise DataError("k must be at least 1")
    total = 0.0
    for i, grade in enumerate(grades_in_rank_order[:k], start=1):
        total += _gain(grade, gain) / math.log2(i + 1)
    return total


def ideal_dcg_at_k(grades: Sequence[float], k: int, gain: str = "exp") -> float:
    return dcg_at_k(sorted(grades, reverse=True), k, gain)


def ndcg_at_k(grades_in_rank_order: Sequence[float], k: int, gain: str = "exp") -> float:
    ideal = ideal_dcg_at_k(grades_in_rank_order, k, gain)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(grades_in_rank_order, k, gain) / ideal


def rank_documents(doc_scores: Mapping[str, float]) -> list[str]:
    """Doc ids by score descending, ties broken by doc_id ascending."""
    return [d for d, _ in sorted(doc_scores.items(), key=lambda kv: (-kv[1], kv[0]))]


@dataclass(frozen=True)
class MetricsReport:
    run_id: str
    k: int
    per_query: dict[str, tuple[float, float]]  # query_id -> (dcg, ndcg)
    macro_dcg: float
    macro_ndcg: float
    query_count: int
    skipped_queries: int


def evaluate_run(
    scores: Mapping[tuple[str, str], float],
    annotations: Iterable[tuple[str, str, int]],
    k: int = 10,
    run_id: str = "run",
    gain: str = "exp",
    threads: int = 1,
) -> MetricsReport:
    """Macro-averaged DCG@k and NDCG@k of ``scores`` against annotations.

    ``annotations`` yields (query_id, doc_id, grade) triples.  Every
    annotated pair must have a score; scored pairs without an annotation are
    ignored, and queries that appear only in ``scores`` are skipped and
    counted.  With ``threads > 1`` queries are evaluated in a thread pool;
    results are aggregated in sorted query order either way, so the report
    does not depend on scheduling.
    """
    by_query: dict[str, dict[str, int]] = {}
    for query_id, doc_id, grade in annotations:
        by_query.setdefault(query_id, {})[doc_id] = int(grade)
    if not by_query:
        raise DataError("no annotations to evaluate against")

    score_queries = {q for q, _ in scores}
    skipped = len(score_queries - set(by_query))

    def one_query(query_id: str) -> tuple[str, float, float]:
        grades_by_doc = by_query[query_id]
        doc_scores = {}
        for doc_id in grades_by_doc:
            try:
                doc_scores[doc_id] = scores[(query_id, doc_id)]
            except KeyError:
                raise DataError(
                    f"annotated pair ({query_id!r}, {doc_id!r}) is missing a score"
                ) from None
        ranked = rank_documents(doc_scores)
        grades = [grades_by_doc[d] for d in ranked]
        return query_id, dcg_at_k(grades, k, gain), ndcg_at_k(grades, k, gain)

    ordered = sorted(by_query)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one_query, ordered))
    else:
        rows = [one_query(q) for q in ordered]

    per_query = {q: (dcg, ndcg) for q, dcg, ndcg in rows}
    n = len(per_query)
    macro_dcg = sum(v[0] for v in per_query.values()) / n
    macro_ndcg = sum(v[1] for v in per_query.values()) / n
    return MetricsReport(
        run_id=run_id,
        k=k,
        per_query=per_query,
        macro_dcg=macro_dcg,
        macro_ndcg=macro_ndcg,
        query_count=n,
        skipped_queries=skipped,
    )


def format_report(reports: Sequence[MetricsReport]) -> str:
    """Human-readable comparison table; deterministic, no timestamps."""
    width = max(len(r.run_id) for r in reports) + 2
    lines = [f"{'run':<{width}}{'queries':>8}  {'DCG@k':>12}  {'NDCG@k':>8}"]
    for r in reports:
        lines.append(
            f"{r.run_id:<{width}}{r.query_count:>8}  {r.macro_dcg:>12.5f}  {r.macro_ndcg:>8.5f}"
        )
    best = max(reports, key=lambda r: r.macro_dcg)
    lines.append("")
    lines.append(f"best by DCG@{best.k}: {best.run_id} ({best.macro_dcg:.5f})")
    return "\n".join(lines) + "\n"


def write_report(path: str | Path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(reports))


def write_per_query_metrics(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query_id\tdcg\tndcg\n")
        for query_id in sorted(report.per_query):
            dcg, ndcg = report.per_query[query_id]
            fh.write(f"{query_id}\t{dcg!r}\t{ndcg!r}\n")
