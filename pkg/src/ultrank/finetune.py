"""Fine-tuning on human relevance annotations.

Annotations carry graded labels (0..4); training binarizes them at grade 2
and builds sampled groups of one positive plus ``group_size - 1`` negatives
per query.  The group loss is a softmax cross-entropy with the positive in
the last slot; with a group size of 2 it reduces exactly, bit for bit, to
the pairwise sigmoid loss because both run through the same shifted-softmax
code path.  A whole-list variant ("listwise") trains on each query's full
annotated list with the binarized labels normalized to a distribution.
Queries from the high-frequency bucket can be duplicated to weight the
head of the traffic distribution.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, FreqBucket
from .errors import DataError
from .evaluation import dcg_at_k, rank_documents
from .features import FeatureParams
from .neural import autodiff as ad
from .neural.model import ScorerConfig, WideDeepScorer, forward_backward
from .neural.optim import adamw_init, adamw_step

logger = logging.getLogger(__name__)

RELEVANT_GRADE_THRESHOLD = 2


@dataclass(frozen=True)
class AnnotatedExample:
    query_id: str
    doc_id: str
    grade: int
    bucket: FreqBucket

    def __post_init__(self) -> None:
        if not 0 <= self.grade <= 4:
            raise DataError(f"grade must be in 0..4, got {self.grade}")


def binarize(grade: int) -> int:
    """1 for grades 2 and above, else 0."""
    if not 0 <= grade <= 4:
        raise DataError(f"grade must be in 0..4, got {grade}")
    return int(grade >= RELEVANT_GRADE_THRESHOLD)


def write_annotation_file(path, examples: Iterable[AnnotatedExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in sorted(examples, key=lambda e: (e.query_id, e.doc_id)):
            fh.write(f"{ex.query_id}\t{ex.doc_id}\t{ex.grade}\t{ex.bucket.value}\n")


def read_annotation_file(path) -> list[AnnotatedExample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{line_no}: expected 4 tab-separated fields")
            query_id, doc_id, grade_s, bucket_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                raise DataError(f"{path}:{line_no}: bad grade {grade_s!r}") from None
            try:
                bucket = FreqBucket(bucket_s)
            except ValueError:
                raise DataError(f"{path}:{line_no}: bad frequency bucket {bucket_s!r}") from None
            out.append(AnnotatedExample(query_id, doc_id, grade, bucket))
    return out


# ---------------------------------------------------------------------------
# Losses: one shifted-softmax path shared by both objectives
# ---------------------------------------------------------------------------


def _group_log_prob_last(scores: ad.Tensor) -> ad.Tensor:
    """Log-probability of the last element under a softmax over the vector."""
    return ad.slice_(ad.log_softmax(scores), slice(-1, None))


def softmax_negatives_loss(group_scores: ad.Tensor, log_variant: bool = True) -> ad.Tensor:
    """Group loss for one sampled group with the positive in the last slot.

    The log variant is standard softmax cross-entropy on the positive; the
    non-log variant negates the positive's softmax probability itself.
    """
    if group_scores.value.ndim != 1 or group_scores.value.shape[0] < 2:
        raise DataError("a group needs at least two scores")
    log_p = _group_log_prob_last(group_scores)
    picked = log_p if log_variant else ad.exp(log_p)
    return ad.mul(ad.tensor_sum(picked), -1.0)


def pairwise_loss(pos_score: ad.Tensor, neg_score: ad.Tensor, log_variant: bool = True) -> ad.Tensor:
    """Sigmoid preference loss on one (positive, negative) score pair.

    Implemented by stacking the two scores and reusing the group loss, so a
    group of size 2 is numerically identical to this loss by construction:
    ``sigmoid(p - n) == softmax([n, p])[-1]``.
    """
    stacked = ad.concat([ad.reshape(neg_score, (1,)), ad.reshape(pos_score, (1,))])
    return softmax_negatives_loss(stacked, log_variant=log_variant)


# ---------------------------------------------------------------------------
# Group sampling, head duplication, splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampledGroup:
    query_id: str
    doc_ids: tuple[str, ...]  # positive is the final element

    @property
    def positive_doc_id(self) -> str:
        return self.doc_ids[-1]


def sample_groups(
    examples: Sequence[AnnotatedExample],
    group_size: int,
    seed: int,
    groups_per_query: int = 1,
) -> list[SampledGroup]:
    """Sampled training groups: per query, one uniform positive and
    ``group_size - 1`` negatives, positive last.

    Negatives are drawn without replacement when the query has enough
    distinct ones, falling back to replacement otherwise.  Queries with no
    positive or no negative after binarization are skipped and counted in a
    log line.  A query whose annotations appear several times (head
    duplication) yields proportionally more groups, so duplication shifts
    the batch composition toward those queries.
    """
    if group_size < 2:
        raise DataError("group_size must be at least 2")
    if groups_per_query < 1:
        raise DataError("groups_per_query must be positive")
    by_query: dict[str, list[AnnotatedExample]] = {}
    for ex in examples:
        by_query.setdefault(ex.query_id, []).append(ex)

    groups: list[SampledGroup] = []
    skipped = 0
    for query_id in sorted(by_query):
        rows = by_query[query_id]
        pos = sorted({e.doc_id for e in rows if binarize(e.grade) == 1})
        neg = sorted({e.doc_id for e in rows if binarize(e.grade) == 0})
        if not pos or not neg:
            skipped += 1
            continue
        multiplicity = len(rows) // len({e.doc_id for e in rows})
        rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence((seed, 0xF7, zlib.crc32(query_id.encode("utf-8"))))
            )
        )
        for _ in range(groups_per_query * max(multiplicity, 1)):
            positive = pos[int(rng.integers(len(pos)))]
            need = group_size - 1
            if need <= len(neg):
                picks = rng.choice(len(neg), size=need, replace=False)
            else:
                picks = rng.choice(len(neg), size=need, replace=True)
            doc_ids = tuple(neg[int(i)] for i in picks) + (positive,)
            groups.append(SampledGroup(query_id, doc_ids))
    if skipped:
        logger.info("skipped %d single-class queries while sampling groups", skipped)
    return groups


def duplicate_head_queries(
    examples: Sequence[AnnotatedExample], factor: int, seed: int
) -> list[AnnotatedExample]:
    """Repeat every high-frequency-bucket annotation ``factor`` times, then
    shuffle deterministically.  ``factor = 1`` still shuffles."""
    if factor < 1:
        raise DataError("factor must be at least 1")
    out: list[AnnotatedExample] = []
    for ex in examples:
        copies = factor if ex.bucket is FreqBucket.HIGH else 1
        out.extend([ex] * copies)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xD0))))
    order = rng.permutation(len(out))
    return [out[int(i)] for i in order]


def split_by_query(
    examples: Sequence[AnnotatedExample], ratio: float, seed: int
) -> tuple[list[AnnotatedExample], list[AnnotatedExample]]:
    """Deterministic train/validation split on whole queries.

    The train side receives ``int(n_queries * ratio)`` shuffled queries.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError("ratio must be strictly between 0 and 1")
    query_ids = sorted({e.query_id for e in examples})
    if len(query_ids) < 2:
        raise DataError("need at least two queries to split")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x59))))
    order = rng.permutation(len(query_ids))
    n_train = int(len(query_ids) * ratio)
    if n_train == 0 or n_train == len(query_ids):
        raise DataError("split ratio leaves one side empty")
    train_queries = {query_ids[int(i)] for i in order[:n_train]}
    train = [e for e in examples if e.query_id in train_queries]
    val = [e for e in examples if e.query_id not in train_queries]
    return train, val


# ---------------------------------------------------------------------------
# The fine-tuning loop
# ---------------------------------------------------------------------------

PAIRWISE = "pairwise"
SOFTMAX_NEGATIVES = "softmax_negatives"
LISTWISE = "listwise"
FINETUNE_LOSSES = (PAIRWISE, SOFTMAX_NEGATIVES, LISTWISE)


@dataclass(frozen=True)
class FinetuneConfig:
    loss: str = SOFTMAX_NEGATIVES
    group_size: int = 2
    head_dup_factor: int = 2
    split_ratio: float = 0.8
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    log_variant: bool = True
    groups_per_query: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in FINETUNE_LOSSES:
            raise DataError(f"loss must be one of {FINETUNE_LOSSES}")
        if self.group_size < 2:
            raise DataError("group_size must be at least 2")
        if self.loss == PAIRWISE and self.group_size != 2:
            raise DataError("pairwise loss implies group_size 2")
        if self.head_dup_factor < 1:
            raise DataError("head_dup_factor must be at least 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise DataError("split_ratio must be strictly between 0 and 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be non-negative and batch_size positive")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.groups_per_query < 1:
            raise DataError("groups_per_query must be positive")


def _listwise_units(
    examples: Sequence[AnnotatedExample],
) -> list[tuple[str, tuple[str, ...], np.ndarray]]:
    """Whole-list training units for the listwise objective: one per query
    occurrence, with binarized labels normalized to a distribution.

    Queries with no positive label have nothing to normalize and are
    skipped with a log line; duplicated queries contribute one unit per
    copy, mirroring the group sampler.
    """
    by_query: dict[str, list[AnnotatedExample]] = {}
    for ex in examples:
        by_query.setdefault(ex.query_id, []).append(ex)
    units: list[tuple[str, tuple[str, ...], np.ndarray]] = []
    skipped = 0
    for query_id in sorted(by_query):
        rows = by_query[query_id]
        grades = {e.doc_id: e.grade for e in rows}
        doc_ids = tuple(sorted(grades))
        labels = np.array([binarize(grades[d]) for d in doc_ids], dtype=np.float64)
        if labels.sum() == 0 or len(doc_ids) < 2:
            skipped += 1
            continue
        targets = labels / labels.sum()
        multiplicity = max(len(rows) // len(doc_ids), 1)
        units.extend([(query_id, doc_ids, targets)] * multiplicity)
    if skipped:
        logger.info("skipped %d queries with no positive label for the listwise loss", skipped)
    return units


@dataclass
class FinetuneResult:
    scorer: WideDeepScorer
    best_epoch: int  # 0 means the starting weights won
    val_dcg_history: list[float]  # index 0 is before any update
    train_loss_history: list[float]


def _validation_dcg(
    scorer: WideDeepScorer,
    corpus: Corpus,
    examples: Sequence[AnnotatedExample],
    feature_params: FeatureParams,
    k: int = 10,
) -> float:
    from .pretrain import score_pairs  # late import avoids a cycle

    pairs = [(e.query_id, e.doc_id) for e in examples]
    scores = score_pairs(scorer, corpus, pairs, feature_params)
    grades = {(e.query_id, e.doc_id): e.grade for e in examples}
    by_query: dict[str, dict[str, float]] = {}
    for (q, d), s in scores.items():
        by_query.setdefault(q, {})[d] = s
    total = 0.0
    for q in sorted(by_query):
        ranked = rank_documents(by_query[q])
        total += dcg_at_k([grades[(q, d)] for d in ranked], k)
    return total / len(by_query) if by_query else 0.0


def finetune(
    scorer: WideDeepScorer,
    corpus: Corpus,
    annotations: Sequence[AnnotatedExample],
    cfg: FinetuneConfig,
    feature_params: FeatureParams = FeatureParams(),
) -> FinetuneResult:
    """Fine-tune a pretrained scorer on graded annotations.

    The data is split by query; head duplication applies to the train side
    only.  Validation DCG@10 is measured before training (epoch 0) and
    after every epoch, and the weights from the best epoch are returned,
    ties resolved toward the earliest.
    """
    if not annotations:
        raise DataError("no annotations to fine-tune on")
    train, val = split_by_query(annotations, cfg.split_ratio, cfg.seed)
    train = duplicate_head_queries(train, cfg.head_dup_factor, cfg.seed)

    from .pretrain import _Encoder, listwise_loss  # shared encoding cache and loss
    from .neural.model import build_vocab

    vocab = build_vocab(corpus.vocabulary())
    scorer = scorer.clone()  # leave the caller's checkpoint untouched
    encoder = _Encoder(corpus, scorer.cfg, vocab, feature_params)
    opt = adamw_init(scorer.params, cfg.learning_rate, weight_decay=cfg.weight_decay)

    best = scorer.clone()
    best_epoch = 0
    best_dcg = _validation_dcg(scorer, corpus, val, feature_params)
    val_history = [best_dcg]
    loss_history: list[float] = []
    logger.info("finetune epoch 0 val DCG@10 %.6f", best_dcg)

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        if cfg.loss == LISTWISE:
            units = _listwise_units(train)
        else:
            groups = sample_groups(
                train, cfg.group_size, cfg.seed * 7919 + epoch, cfg.groups_per_query
            )
            units = [(g.query_id, g.doc_ids, None) for g in groups]
        if not units:
            raise DataError("no trainable groups after binarization")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xFE, epoch))))
        order = rng.permutation(len(units))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [units[int(i)] for i in order[lo : lo + cfg.batch_size]]
            ids = np.concatenate(
                [
                    np.stack([encoder.encode(query_id, d) for d in doc_ids])
                    for query_id, doc_ids, _ in chunk
                ]
            )
            feats = np.concatenate(
                [
                    np.stack([encoder.feature_row(query_id, d) for d in doc_ids])
                    for query_id, doc_ids, _ in chunk
                ]
            )

            def batch_loss(scores: ad.Tensor) -> ad.Tensor:
                total = None
                offset = 0
                for _, doc_ids, targets in chunk:
                    n = len(doc_ids)
                    group_scores = ad.slice_(scores, slice(offset, offset + n))
                    if cfg.loss == PAIRWISE:
                        piece = pairwise_loss(
                            ad.slice_(group_scores, slice(-1, None)),
                            ad.slice_(group_scores, slice(0, 1)),
                            log_variant=cfg.log_variant,
                        )
                    elif cfg.loss == LISTWISE:
                        piece = listwise_loss(
                            group_scores,
                            targets,
                            np.ones(n, dtype=np.float64),
                            log_variant=cfg.log_variant,
                        )
                    else:
                        piece = softmax_negatives_loss(group_scores, log_variant=cfg.log_variant)
                    total = piece if total is None else ad.add(total, piece)
                    offset += n
                assert total is not None
                return ad.mul(total, 1.0 / len(chunk))

            loss_value, grads = forward_backward(scorer, ids, feats, batch_loss)
            adamw_step(scorer.params, grads, opt)
            epoch_loss += loss_value * len(chunk)
        epoch_loss /= len(units)
        loss_history.append(epoch_loss)
        dcg = _validation_dcg(scorer, corpus, val, feature_params)
        val_history.append(dcg)
        logger.info(
            "finetune epoch %d loss %.6f val DCG@10 %.6f (%.2fs)",
            epoch,
            epoch_loss,
            dcg,
            time.perf_counter() - start,
        )
        if dcg > best_dcg:
            best = scorer.clone()
            best_epoch = epoch
            best_dcg = dcg
    return FinetuneResult(
        scorer=best,
        best_epoch=best_epoch,
        val_dcg_history=val_history,
        train_loss_history=loss_history,
    )
