"""Classic lexical ranking features over (query, document) pairs.

All extractors are pure functions of their inputs.  The feature vector has a
fixed, documented column order so that dump files, model inputs, and the tree
ensemble all agree byte for byte:

    tf_sum, idf_sum, tfidf_sum, bm25, ql_dirichlet, ql_jm, query_len, doc_len

Sums iterate over the query token sequence with multiplicity, so a repeated
query term contributes once per occurrence.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .corpus import CorpusStats, Document, Query
from .errors import DataError

FEATURE_NAMES: tuple[str, ...] = (
    "tf_sum",
    "idf_sum",
    "tfidf_sum",
    "bm25",
    "ql_dirichlet",
    "ql_jm",
    "query_len",
    "doc_len",
)

NUM_FEATURES = len(FEATURE_NAMES)


@dataclass(frozen=True)
class FeatureParams:
    k1: float = 1.2
    b: float = 0.75
    mu: float = 2000.0
    lambda_jm: float = 0.1

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise DataError("k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise DataError("b must lie in [0, 1]")
        if self.mu <= 0:
            raise DataError("mu must be positive")
        if not 0.0 < self.lambda_jm < 1.0:
            raise DataError("lambda_jm must lie in (0, 1)")


@dataclass(frozen=True)
class FeatureVector:
    tf_sum: float
    idf_sum: float
    tfidf_sum: float
    bm25: float
    ql_dirichlet: float
    ql_jm: float
    query_len: float
    doc_len: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)

    def by_name(self, name: str) -> float:
        if name not in FEATURE_NAMES:
            raise DataError(f"unknown feature {name!r}; valid names: {', '.join(FEATURE_NAMES)}")
        return float(getattr(self, name))


def idf(term: str, stats: CorpusStats) -> float:
    """Smoothed inverse document frequency, non-negative for any df."""
    df = stats.doc_freq.get(term, 0)
    return math.log((stats.num_docs - df + 0.5) / (df + 0.5) + 1.0)


def _doc_tf(doc: Document) -> tuple[Counter, int]:
    tokens = doc.full_tokens()
    return Counter(tokens), len(tokens)


def bm25(query: Query, doc: Document, stats: CorpusStats, params: FeatureParams = FeatureParams()) -> float:
    tf, dl = _doc_tf(doc)
    return _bm25(query.tokens, tf, dl, stats, params)


def _bm25(q_tokens, tf: Counter, dl: int, stats: CorpusStats, params: FeatureParams) -> float:
    if stats.avg_doc_len == 0:
        norm = 1.0
    else:
        norm = 1.0 - params.b + params.b * dl / stats.avg_doc_len
    score = 0.0
    for term in q_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += idf(term, stats) * f * (params.k1 + 1.0) / (f + params.k1 * norm)
    return score


def _collection_prob(term: str, stats: CorpusStats) -> float:
    """P(term | collection) with a floor of half a count for unseen terms."""
    if stats.total_terms == 0:
        raise DataError("collection has no terms; cannot form a language model")
    ctf = stats.collection_tf.get(term, 0)
    if ctf == 0:
        return 0.5 / stats.total_terms
    return ctf / stats.total_terms


def ql_dirichlet(query: Query, doc: Document, stats: CorpusStats, params: FeatureParams = FeatureParams()) -> float:
    tf, dl = _doc_tf(doc)
    return _ql_dirichlet(query.tokens, tf, dl, stats, params)


def _ql_dirichlet(q_tokens, tf: Counter, dl: int, stats: CorpusStats, params: FeatureParams) -> float:
    score = 0.0
    for term in q_tokens:
        p_c = _collection_prob(term, stats)
        score += math.log((tf.get(term, 0) + params.mu * p_c) / (dl + params.mu))
    return score


def ql_jm(query: Query, doc: Document, stats: CorpusStats, params: FeatureParams = FeatureParams()) -> float:
    tf, dl = _doc_tf(doc)
    return _ql_jm(query.tokens, tf, dl, stats, params)


def _ql_jm(q_tokens, tf: Counter, dl: int, stats: CorpusStats, params: FeatureParams) -> float:
    lam = params.lambda_jm
    score = 0.0
    for term in q_tokens:
        p_ml = tf.get(term, 0) / dl if dl > 0 else 0.0
        p = (1.0 - lam) * p_ml + lam * _collection_prob(term, stats)
        score += math.log(p)
    return score


def extract_features(
    query: Query,
    doc: Document,
    stats: CorpusStats,
    params: FeatureParams = FeatureParams(),
) -> FeatureVector:
    """Compute the full fixed-order feature vector for one pair."""
    tf, dl = _doc_tf(doc)
    tf_sum = 0.0
    idf_sum = 0.0
    tfidf_sum = 0.0
    for term in query.tokens:
        f = tf.get(term, 0)
        w = idf(term, stats)
        tf_sum += f
        idf_sum += w
        tfidf_sum += f * w
    return FeatureVector(
        tf_sum=tf_sum,
        idf_sum=idf_sum,
        tfidf_sum=tfidf_sum,
        bm25=_bm25(query.tokens, tf, dl, stats, params),
        ql_dirichlet=_ql_dirichlet(query.tokens, tf, dl, stats, params),
        ql_jm=_ql_jm(query.tokens, tf, dl, stats, params),
        query_len=float(len(query.tokens)),
        doc_len=float(dl),
    )


# ---------------------------------------------------------------------------
# Feature dump file: header line, then one tab-separated row per pair.
# ---------------------------------------------------------------------------

_HEADER = ("query_id", "doc_id") + FEATURE_NAMES


def write_feature_file(
    path: str | Path, rows: Iterable[tuple[str, str, FeatureVector]]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(_HEADER) + "\n")
        for query_id, doc_id, vector in rows:
            values = "\t".join(repr(float(v)) for v in vector.as_array())
            fh.write(f"{query_id}\t{doc_id}\t{values}\n")


def read_feature_file(path: str | Path) -> dict[tuple[str, str], FeatureVector]:
    out: dict[tuple[str, str], FeatureVector] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != _HEADER:
            raise DataError(f"{path}: unexpected feature file header")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(_HEADER)} fields")
            try:
                values = [float(v) for v in parts[2:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            out[(parts[0], parts[1])] = FeatureVector(*values)
    if not out:
        raise DataError(f"{path}: feature file has no rows")
    return out


class FeatureCache:
    """Lazy per-(query, doc) feature memo shared by the training loops."""

    def __init__(self, stats: CorpusStats, params: FeatureParams = FeatureParams()):
        self.stats = stats
        self.params = params
        self._memo: dict[tuple[str, str], FeatureVector] = {}

    def get(self, query: Query, doc: Document) -> FeatureVector:
        key = (query.query_id, doc.doc_id)
        vec = self._memo.get(key)
        if vec is None:
            vec = extract_features(query, doc, self.stats, self.params)
            self._memo[key] = vec
        return vec
