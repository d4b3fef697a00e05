"""Corpus model: tokenization, documents, queries, collection statistics,
and a synthetic corpus generator with known ground-truth relevance.

Documents carry separate title and content token streams; everything that
scores a document works on ``Document.full_tokens()``, which joins the two
with a reserved separator token.  The separator contains punctuation, so
:func:`tokenize` can never produce it and no query can ever match it.
"""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError

TITLE_SEP = "|"

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\x00-\x7f]")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase ``text`` and split it into tokens.

    Runs of basic Latin letters and digits form one token each; ASCII
    whitespace and punctuation only separate tokens.  Every character outside
    the basic Latin alphanumeric range is emitted as its own single-character
    token, which keeps scripts without word boundaries usable.
    """
    return tuple(_TOKEN_RE.findall(text.lower()))


class FreqBucket(str, enum.Enum):
    """Query-frequency bucket from the traffic logs."""

    HIGH = "high"
    MID = "mid"
    LOW = "low"


@dataclass(frozen=True)
class Document:
    doc_id: str
    title_tokens: tuple[str, ...] = ()
    content_tokens: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise DataError("document id must be non-empty")

    def full_tokens(self) -> tuple[str, ...]:
        """Title and content joined with the reserved separator token."""
        if self.title_tokens and self.content_tokens:
            return self.title_tokens + (TITLE_SEP,) + self.content_tokens
        return self.title_tokens + self.content_tokens


@dataclass(frozen=True)
class Query:
    query_id: str
    tokens: tuple[str, ...]
    freq_bucket: FreqBucket = FreqBucket.MID

    def __post_init__(self) -> None:
        if not self.query_id:
            raise DataError("query id must be non-empty")


@dataclass(frozen=True)
class CorpusStats:
    """Aggregate collection statistics used by the feature extractors.

    ``avg_doc_len * num_docs`` equals the total token count exactly up to one
    floating-point rounding, because the average is computed as the exact
    integer total divided by the document count.
    """

    num_docs: int
    avg_doc_len: float
    doc_freq: Mapping[str, int]
    total_terms: int
    collection_tf: Mapping[str, int]


def build_corpus_stats(documents: Iterable[Document]) -> CorpusStats:
    docs = list(documents)
    if not docs:
        raise DataError("cannot build statistics for an empty corpus")
    seen: set[str] = set()
    doc_freq: Counter[str] = Counter()
    collection_tf: Counter[str] = Counter()
    total = 0
    for doc in docs:
        if doc.doc_id in seen:
            raise DataError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        tokens = doc.full_tokens()
        total += len(tokens)
        collection_tf.update(tokens)
        doc_freq.update(set(tokens))
    return CorpusStats(
        num_docs=len(docs),
        avg_doc_len=total / len(docs),
        doc_freq=dict(doc_freq),
        total_terms=total,
        collection_tf=dict(collection_tf),
    )


class Corpus:
    """Immutable bundle of documents and queries with shared statistics."""

    def __init__(self, documents: Iterable[Document], queries: Iterable[Query]):
        self._docs: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in self._docs:
                raise DataError(f"duplicate doc_id {doc.doc_id!r}")
            self._docs[doc.doc_id] = doc
        self._queries: dict[str, Query] = {}
        for query in queries:
            if query.query_id in self._queries:
                raise DataError(f"duplicate query_id {query.query_id!r}")
            self._queries[query.query_id] = query
        self.stats = build_corpus_stats(self._docs.values())

    @property
    def documents(self) -> dict[str, Document]:
        return self._docs

    @property
    def queries(self) -> dict[str, Query]:
        return self._queries

    def doc(self, doc_id: str) -> Document:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise DataError(f"unknown doc_id {doc_id!r}") from None

    def query(self, query_id: str) -> Query:
        try:
            return self._queries[query_id]
        except KeyError:
            raise DataError(f"unknown query_id {query_id!r}") from None

    def vocabulary(self) -> tuple[str, ...]:
        """All distinct document and query terms, sorted for reproducibility."""
        terms = set(self.stats.doc_freq)
        for query in self._queries.values():
            terms.update(query.tokens)
        return tuple(sorted(terms))


# Default grade mix per query-frequency bucket, indexed by grade 0..4, and the
# default bucket mix itself.  Both reflect the skew of a production annotation
# pool: frequent queries collect far more relevant results than rare ones.
DEFAULT_GRADE_MIX: dict[FreqBucket, tuple[float, ...]] = {
    FreqBucket.HIGH: (0.3550, 0.1596, 0.3506, 0.1299, 0.0049),
    FreqBucket.MID: (0.5113, 0.0940, 0.3132, 0.0800, 0.0015),
    FreqBucket.LOW: (0.7078, 0.0516, 0.2133, 0.0271, 0.0002),
}

DEFAULT_BUCKET_MIX: tuple[float, float, float] = (
    1092 / 4701,  # high
    1820 / 4701,  # mid
    1789 / 4701,  # low
)

_BUCKET_ORDER = (FreqBucket.HIGH, FreqBucket.MID, FreqBucket.LOW)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic corpus generator.

    Relevance is planted through vocabulary overlap: a grade-``g`` document
    for a query copies roughly ``g/4`` of the query's terms into its text.
    Each copied term may repeat a random number of times, independent of the
    grade, so raw term frequency is a noisy signal while distinct-term
    overlap is the clean one.
    """

    vocab_size: int = 400
    num_queries: int = 100
    docs_per_query: int = 10
    query_len: tuple[int, int] = (2, 4)
    title_len: tuple[int, int] = (2, 4)
    content_len: tuple[int, int] = (6, 14)
    max_term_repeat: int = 3
    bucket_mix: tuple[float, float, float] = DEFAULT_BUCKET_MIX
    grade_mix: Mapping[FreqBucket, tuple[float, ...]] | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 8:
            raise DataError("vocab_size must be at least 8")
        if self.num_queries < 1:
            raise DataError("num_queries must be positive")
        if self.docs_per_query < 1:
            raise DataError("docs_per_query must be positive")
        if self.max_term_repeat < 1:
            raise DataError("max_term_repeat must be positive")
        for lo, hi in (self.query_len, self.title_len, self.content_len):
            if lo < 1 or hi < lo:
                raise DataError("length ranges must satisfy 1 <= lo <= hi")
        if self.query_len[1] > self.vocab_size:
            raise DataError("query_len may not exceed vocab_size")

    def grade_distribution(self, bucket: FreqBucket) -> tuple[float, ...]:
        mix = self.grade_mix or DEFAULT_GRADE_MIX
        dist = tuple(mix[bucket])
        if len(dist) != 5 or abs(sum(dist) - 1.0) > 1e-6 or min(dist) < 0:
            raise DataError(f"grade distribution for {bucket.value} must be a 5-way pmf")
        return dist


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *tags))))


def generate_synthetic_corpus(
    config: SynthConfig, seed: int
) -> tuple[list[Document], list[Query], dict[tuple[str, str], int]]:
    """Generate documents, queries, and ground-truth grades.

    Bit-reproducible for a fixed (config, seed) pair.  Returns the documents,
    the queries, and a map from (query_id, doc_id) to the true grade.
    """
    rng = _rng(seed, 0)
    vocab = np.array([f"w{i:04d}" for i in range(config.vocab_size)])
    # Zipf-flavored background usage so the collection has common and rare terms.
    background_p = 1.0 / np.arange(1, config.vocab_size + 1)
    background_p /= background_p.sum()

    documents: list[Document] = []
    queries: list[Query] = []
    truth: dict[tuple[str, str], int] = {}

    for qi in range(config.num_queries):
        bucket = _BUCKET_ORDER[rng.choice(3, p=config.bucket_mix)]
        qlen = int(rng.integers(config.query_len[0], config.query_len[1] + 1))
        q_term_ids = rng.choice(config.vocab_size, size=qlen, replace=False)
        q_tokens = tuple(vocab[q_term_ids])
        query_id = f"q{qi:05d}"
        queries.append(Query(query_id, q_tokens, bucket))

        grade_p = config.grade_distribution(bucket)
        for di in range(config.docs_per_query):
            grade = int(rng.choice(5, p=grade_p))
            doc_id = f"{query_id}_d{di:03d}"
            doc = _synthesize_document(doc_id, grade, q_term_ids, vocab, background_p, config, rng)
            documents.append(doc)
            truth[(query_id, doc_id)] = grade
    return documents, queries, truth


def _synthesize_document(
    doc_id: str,
    grade: int,
    q_term_ids: np.ndarray,
    vocab: np.ndarray,
    background_p: np.ndarray,
    config: SynthConfig,
    rng: np.random.Generator,
) -> Document:
    qlen = len(q_term_ids)
    n_overlap = 0 if grade == 0 else max(1, int(qlen * grade / 4 + 0.5))
    n_overlap = min(n_overlap, qlen)
    overlap_ids = rng.choice(q_term_ids, size=n_overlap, replace=False) if n_overlap else np.array([], dtype=int)
    repeat = int(rng.integers(1, config.max_term_repeat + 1))

    def background(count: int) -> list[str]:
        out = []
        while len(out) < count:
            tid = int(rng.choice(len(vocab), p=background_p))
            if tid not in q_term_ids:
                out.append(str(vocab[tid]))
        return out

    title_len = int(rng.integers(config.title_len[0], config.title_len[1] + 1))
    title: list[str] = []
    if grade >= 3 and n_overlap:
        title.append(str(vocab[overlap_ids[0]]))
    title.extend(background(title_len - len(title)))

    content_len = int(rng.integers(config.content_len[0], config.content_len[1] + 1))
    injected = [str(vocab[t]) for t in overlap_ids for _ in range(repeat)]
    filler = background(max(2, content_len - len(injected)))
    content = injected + filler
    rng.shuffle(content)

    return Document(doc_id, tuple(title), tuple(content))


# ---------------------------------------------------------------------------
# File formats.  All three are tab-separated text with one record per line.
# ---------------------------------------------------------------------------


def _check_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value:
        raise DataError(f"{what} may not contain tabs or newlines: {value!r}")
    return value


def write_corpus_file(path: str | Path, documents: Iterable[Document]) -> None:
    """Write ``doc_id TAB title TAB content`` lines, tokens space-joined."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(
                f"{_check_field(doc.doc_id, 'doc_id')}\t"
                f"{' '.join(doc.title_tokens)}\t{' '.join(doc.content_tokens)}\n"
            )


def read_corpus_file(path: str | Path) -> list[Document]:
    documents = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            documents.append(Document(parts[0], tokenize(parts[1]), tokenize(parts[2])))
    if not documents:
        raise DataError(f"{path}: corpus file is empty")
    return documents


def write_query_file(path: str | Path, queries: Iterable[Query]) -> None:
    """Write ``query_id TAB text TAB freq_bucket`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for query in queries:
            fh.write(
                f"{_check_field(query.query_id, 'query_id')}\t"
                f"{' '.join(query.tokens)}\t{query.freq_bucket.value}\n"
            )


def read_query_file(path: str | Path) -> list[Query]:
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                bucket = FreqBucket(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown freq bucket {parts[2]!r}") from None
            queries.append(Query(parts[0], tokenize(parts[1]), bucket))
    if not queries:
        raise DataError(f"{path}: query file is empty")
    return queries


def write_relevance_file(path: str | Path, truth: Mapping[tuple[str, str], int]) -> None:
    """Write ``query_id TAB doc_id TAB grade`` lines in sorted key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for (query_id, doc_id), grade in sorted(truth.items()):
            fh.write(f"{query_id}\t{doc_id}\t{int(grade)}\n")


def read_relevance_file(path: str | Path) -> dict[tuple[str, str], int]:
    truth: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                grade = int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: grade must be an integer") from None
            if not 0 <= grade <= 4:
                raise DataError(f"{path}:{lineno}: grade must be in 0..4")
            truth[(parts[0], parts[1])] = grade
    if not truth:
        raise DataError(f"{path}: relevance file is empty")
    return truth
