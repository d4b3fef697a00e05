"""Debiased pretraining on click logs.

Each click session becomes a refined training list:

1. the session's raw labels are ``y = delta * click + fhat`` where ``fhat``
   is the min-max-normalized refinement feature within the list;
2. documents after the last clicked position may be replaced by random
   negatives (label 0), since the user plausibly never saw them;
3. extra random negatives from other queries in the batch are appended with
   label 0;
4. the targets are ``softmax(y / tau)`` over the augmented list.

The listwise objective weights each entry by an inverse propensity weight
(1 for every random negative); the pairwise objective trains on preference
pairs built from three prioritized rules.  Joint propensity training keeps a
logit per logged position, scores it with a normalized sigmoid, and performs
mirrored update steps: the ranker is weighted by inverse normalized
examination probabilities and the position model by inverse normalized
ranker relevance, both detached.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .clicklog import (
    MAX_LOGGED_POSITIONS,
    ClickSession,
    PropensityModel,
    click_ratio_propensity,
    dla_propensity,
    estimate_click_ratios,
    filter_sessions,
    uniform_propensity,
)
from .corpus import Corpus
from .errors import DataError, NumericError
from .features import FEATURE_NAMES, FeatureCache, FeatureParams
from .neural import autodiff as ad
from .neural.model import ScorerConfig, WideDeepScorer, encode_pair, build_vocab, forward_backward
from .neural.optim import AdamWState, adamw_init, adamw_step

logger = logging.getLogger(__name__)

FEATURE_MARGIN = 1e-9

# Largest inverse-relevance weight one logged click may carry in the joint
# propensity update; clipping bounds the variance contributed by clicks on
# documents the ranker is already confident are irrelevant.
REL_WEIGHT_CAP = 1e3

LISTWISE_AS_WRITTEN = "listwise_as_written"
LISTWISE_LOG = "listwise_log"
PAIRWISE_PRIORITY = "pairwise_priority"
LOSS_KINDS = (LISTWISE_AS_WRITTEN, LISTWISE_LOG, PAIRWISE_PRIORITY)

IPW_NONE = "none"
IPW_CLICK_RATIO = "click_ratio"
IPW_DLA = "dla"
IPW_KINDS = (IPW_NONE, IPW_CLICK_RATIO, IPW_DLA)


def minmax_normalize(values: Sequence[float]) -> np.ndarray:
    """Scale to [0, 1] within the list; a constant list maps to all 0.5."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot normalize an empty list")
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        return (arr - lo) / (hi - lo)
    return np.full_like(arr, 0.5)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def refine_labels(
    clicks: Sequence[bool],
    feature_values: Sequence[float],
    delta: float = 2.0,
    tau: float = 0.1,
) -> np.ndarray:
    """Soft training targets for one un-augmented list.

    Permutation equivariant, sums to 1, and clicked documents dominate
    unclicked ones whenever ``delta > 1`` because the feature term lies in
    [0, 1] while a click contributes ``delta``.
    """
    if len(clicks) != len(feature_values):
        raise DataError("clicks and feature_values must have equal length")
    if len(clicks) == 0:
        raise DataError("cannot refine an empty list")
    if tau <= 0:
        raise DataError("tau must be positive")
    fhat = minmax_normalize(feature_values)
    y = delta * np.asarray(clicks, dtype=np.float64) + fhat
    return _softmax_np(y / tau)


@dataclass(frozen=True)
class RefinedEntry:
    doc_id: str
    position: int | None  # 1-based logged position; None for injected negatives
    click: bool
    feature: float
    raw_label: float
    is_random_negative: bool


@dataclass(frozen=True)
class RefinedList:
    query_id: str
    entries: tuple[RefinedEntry, ...]

    def targets(self, tau: float) -> np.ndarray:
        if tau <= 0:
            raise DataError("tau must be positive")
        raw = np.array([e.raw_label for e in self.entries])
        return _softmax_np(raw / tau)

    def position_weight_vector(self, weights: np.ndarray) -> np.ndarray:
        """Per-entry propensity weight; every random negative gets 1."""
        out = np.ones(len(self.entries))
        for i, entry in enumerate(self.entries):
            if not entry.is_random_negative and entry.position is not None:
                out[i] = weights[entry.position - 1]
        return out


def build_refined_list(
    session: ClickSession,
    feature_values: Sequence[float],
    delta: float = 2.0,
) -> RefinedList:
    """Raw refined labels for a logged session, before any augmentation."""
    if len(feature_values) != len(session.ranked_doc_ids):
        raise DataError("one feature value per shown document is required")
    fhat = minmax_normalize(feature_values)
    entries = tuple(
        RefinedEntry(
            doc_id=doc_id,
            position=i + 1,
            click=bool(session.clicks[i]),
            feature=float(feature_values[i]),
            raw_label=delta * float(session.clicks[i]) + float(fhat[i]),
            is_random_negative=False,
        )
        for i, doc_id in enumerate(session.ranked_doc_ids)
    )
    return RefinedList(session.query_id, entries)


def _pool_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xA2))))


def _sample_pool(
    pool: Sequence[str], k: int, rng: np.random.Generator, what: str
) -> list[str]:
    if not pool:
        raise DataError(f"empty document pool for {what}")
    if k <= len(pool):
        picks = rng.choice(len(pool), size=k, replace=False)
    else:
        logger.warning("pool of %d smaller than %d; sampling %s with replacement", len(pool), k, what)
        picks = rng.choice(len(pool), size=k, replace=True)
    return [pool[int(i)] for i in picks]


def inject_random_negatives(
    rlist: RefinedList,
    doc_pool: Sequence[str],
    k: int,
    seed: int,
    feature_lookup: Callable[[str], float] | None = None,
) -> RefinedList:
    """Append ``k`` random-negative entries with raw label 0.

    ``doc_pool`` should hold documents of other queries from the same batch.
    Sampling is without replacement unless the pool is too small, in which
    case it falls back to replacement with a warning.
    """
    if k < 0:
        raise DataError("k must be non-negative")
    if k == 0:
        return rlist
    rng = _pool_rng(seed)
    existing = {e.doc_id for e in rlist.entries}
    pool = [d for d in doc_pool if d not in existing]
    extras = tuple(
        RefinedEntry(
            doc_id=doc_id,
            position=None,
            click=False,
            feature=float(feature_lookup(doc_id)) if feature_lookup else 0.0,
            raw_label=0.0,
            is_random_negative=True,
        )
        for doc_id in _sample_pool(pool, k, rng, "random negatives")
    )
    return RefinedList(rlist.query_id, rlist.entries + extras)


def replace_post_click(
    rlist: RefinedList,
    doc_pool: Sequence[str],
    seed: int,
    feature_lookup: Callable[[str], float] | None = None,
) -> RefinedList:
    """Swap every document after the last clicked position for a random
    negative, keeping the position slot.  A list with no clicks is returned
    unchanged."""
    clicked_positions = [e.position for e in rlist.entries if e.click and e.position]
    if not clicked_positions:
        return rlist
    last = max(clicked_positions)
    tail = [e for e in rlist.entries if e.position is not None and e.position > last]
    if not tail:
        return rlist
    rng = _pool_rng(seed)
    existing = {e.doc_id for e in rlist.entries}
    pool = [d for d in doc_pool if d not in existing]
    replacements = _sample_pool(pool, len(tail), rng, "post-click replacement")
    swap = dict(zip((e.position for e in tail), replacements))
    entries = tuple(
        e
        if e.position is None or e.position <= last
        else RefinedEntry(
            doc_id=swap[e.position],
            position=e.position,
            click=False,
            feature=float(feature_lookup(swap[e.position])) if feature_lookup else 0.0,
            raw_label=0.0,
            is_random_negative=True,
        )
        for e in rlist.entries
    )
    return RefinedList(rlist.query_id, entries)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def listwise_loss(
    scores: ad.Tensor,
    targets: np.ndarray,
    position_weights: np.ndarray,
    log_variant: bool = True,
) -> ad.Tensor:
    """Propensity-weighted listwise loss over one list.

    The log variant is ``-sum_j pw_j * t_j * log softmax(x)_j`` and is the
    default; the as-written variant drops the log and is kept selectable for
    fidelity to the original objective.
    """
    if scores.value.ndim != 1 or len(targets) != scores.value.shape[0]:
        raise DataError("scores and targets must be equal-length vectors")
    if len(position_weights) != len(targets):
        raise DataError("one position weight per entry is required")
    coeff = ad.constant(np.asarray(position_weights) * np.asarray(targets))
    term = ad.log_softmax(scores) if log_variant else ad.softmax(scores)
    return ad.mul(ad.tensor_sum(ad.mul(coeff, term)), -1.0)


def build_priority_pairs(rlist: RefinedList) -> list[tuple[int, int]]:
    """Preference pairs (winner_index, loser_index) from three rules.

    1. a clicked document beats an unclicked one;
    2. between shown documents with the same click flag, a refinement
       feature gap larger than ``FEATURE_MARGIN`` decides;
    3. a shown document beats a random negative.

    When rules disagree, precedence is rule 1, then rule 3, then rule 2; at
    most one pair is emitted per unordered document pair, so the output is
    antisymmetric by construction.  Two random negatives never form a pair.
    """
    pairs: list[tuple[int, int]] = []
    entries = rlist.entries
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            a, b = entries[i], entries[j]
            if a.click != b.click:
                pairs.append((i, j) if a.click else (j, i))
            elif a.is_random_negative != b.is_random_negative:
                pairs.append((j, i) if a.is_random_negative else (i, j))
            elif not a.is_random_negative and abs(a.feature - b.feature) > FEATURE_MARGIN:
                pairs.append((i, j) if a.feature > b.feature else (j, i))
    return pairs


def pairwise_pretrain_loss(
    scores: ad.Tensor,
    pairs: Sequence[tuple[int, int]],
    log_variant: bool = True,
) -> ad.Tensor:
    """Mean pairwise preference loss.

    Per pair the as-written form is ``-sigmoid(x_w - x_l)``, which equals
    ``-exp(x_w) / (exp(x_w) + exp(x_l))``; the log variant takes the log of
    the sigmoid.  An empty pair list yields loss 0 with a warning.
    """
    if not pairs:
        logger.warning("no preference pairs in batch; loss is 0")
        return ad.constant(0.0)
    winners = np.array([p[0] for p in pairs])
    losers = np.array([p[1] for p in pairs])
    diff = ad.add(ad.take(scores, winners), ad.mul(ad.take(scores, losers), -1.0))
    per_pair = ad.log_sigmoid(diff) if log_variant else ad.sigmoid(diff)
    return ad.mul(ad.mean(per_pair), -1.0)


# ---------------------------------------------------------------------------
# Configuration and the training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    delta: float = 2.0
    tau: float = 0.1
    refinement_feature: str = "bm25"
    num_random_negatives: int = 2
    replace_post_click: bool = True
    ipw: str = IPW_NONE
    ipw_alpha: float = 0.25
    loss: str = LISTWISE_LOG
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.delta < 0 or self.tau <= 0:
            raise DataError("delta must be non-negative and tau positive")
        if self.refinement_feature not in FEATURE_NAMES:
            raise DataError(f"unknown refinement feature {self.refinement_feature!r}")
        if self.num_random_negatives < 0:
            raise DataError("num_random_negatives must be non-negative")
        if self.ipw not in IPW_KINDS:
            raise DataError(f"ipw must be one of {IPW_KINDS}")
        if self.loss not in LOSS_KINDS:
            raise DataError(f"loss must be one of {LOSS_KINDS}")
        if self.ipw == IPW_DLA and self.loss == PAIRWISE_PRIORITY:
            raise DataError("joint propensity training requires a listwise loss")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be non-negative and batch_size positive")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.ipw_alpha < 0:
            raise DataError("ipw_alpha must be non-negative")


@dataclass
class PreparedList:
    """A refined list with everything the scorer needs to train on it."""

    rlist: RefinedList
    ids: np.ndarray  # (n_entries, max_seq_len) token ids
    features: np.ndarray  # (n_entries, num_features)
    targets: np.ndarray
    pairs: list[tuple[int, int]]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    wall_time: float
    propensity_loss: float | None = None


class _Encoder:
    """Caches token encodings and feature rows per (query, doc) pair."""

    def __init__(self, corpus: Corpus, scorer_cfg: ScorerConfig, vocab, feature_params):
        self.corpus = corpus
        self.cfg = scorer_cfg
        self.vocab = vocab
        self.cache = FeatureCache(corpus.stats, feature_params)
        self._ids: dict[tuple[str, str], np.ndarray] = {}

    def encode(self, query_id: str, doc_id: str) -> np.ndarray:
        key = (query_id, doc_id)
        ids = self._ids.get(key)
        if ids is None:
            query = self.corpus.query(query_id)
            doc = self.corpus.doc(doc_id)
            ids = encode_pair(query.tokens, doc.full_tokens(), self.vocab, self.cfg)
            self._ids[key] = ids
        return ids

    def feature_row(self, query_id: str, doc_id: str) -> np.ndarray:
        return self.cache.get(self.corpus.query(query_id), self.corpus.doc(doc_id)).as_array()

    def refinement_value(self, query_id: str, doc_id: str, name: str) -> float:
        return self.cache.get(self.corpus.query(query_id), self.corpus.doc(doc_id)).by_name(name)


def prepare_batch(
    sessions: Sequence[ClickSession],
    encoder: _Encoder,
    cfg: PretrainConfig,
    batch_seed: int,
) -> list[PreparedList]:
    """Refine, augment, and encode one batch of sessions.

    Random negatives for each list are drawn from the documents shown for
    the *other* queries in the batch.  Batches where every session shares
    one query skip augmentation (with a warning via the pool sampler).
    """
    docs_by_query: dict[str, set[str]] = {}
    for session in sessions:
        docs_by_query.setdefault(session.query_id, set()).update(session.ranked_doc_ids)

    prepared = []
    for offset, session in enumerate(sessions):
        pool = sorted(
            d
            for q, docs in docs_by_query.items()
            if q != session.query_id
            for d in docs
        )
        values = [
            encoder.refinement_value(session.query_id, d, cfg.refinement_feature)
            for d in session.ranked_doc_ids
        ]
        rlist = build_refined_list(session, values, cfg.delta)
        lookup = lambda d, q=session.query_id: encoder.refinement_value(q, d, cfg.refinement_feature)
        if cfg.replace_post_click and pool:
            rlist = replace_post_click(rlist, pool, batch_seed * 1013 + offset * 2, lookup)
        if cfg.num_random_negatives > 0 and pool:
            rlist = inject_random_negatives(
                rlist, pool, cfg.num_random_negatives, batch_seed * 1013 + offset * 2 + 1, lookup
            )
        ids = np.stack([encoder.encode(session.query_id, e.doc_id) for e in rlist.entries])
        feats = np.stack([encoder.feature_row(session.query_id, e.doc_id) for e in rlist.entries])
        prepared.append(
            PreparedList(
                rlist=rlist,
                ids=ids,
                features=feats,
                targets=rlist.targets(cfg.tau),
                pairs=build_priority_pairs(rlist) if cfg.loss == PAIRWISE_PRIORITY else [],
            )
        )
    return prepared


def _batch_ranker_loss(
    scores: ad.Tensor,
    batch: Sequence[PreparedList],
    cfg: PretrainConfig,
    weights_fn: Callable[[PreparedList], np.ndarray],
) -> ad.Tensor:
    if cfg.loss == PAIRWISE_PRIORITY:
        offset = 0
        pairs: list[tuple[int, int]] = []
        for plist in batch:
            pairs.extend((w + offset, l + offset) for w, l in plist.pairs)
            offset += len(plist.rlist.entries)
        return pairwise_pretrain_loss(scores, pairs)
    log_variant = cfg.loss == LISTWISE_LOG
    total = None
    offset = 0
    for plist in batch:
        n = len(plist.rlist.entries)
        piece = listwise_loss(
            ad.slice_(scores, slice(offset, offset + n)),
            plist.targets,
            weights_fn(plist),
            log_variant=log_variant,
        )
        total = piece if total is None else ad.add(total, piece)
        offset += n
    assert total is not None
    return total


def dla_propensity_objective(
    score_values: np.ndarray,
    batch: Sequence[PreparedList],
    logits: ad.Tensor,
) -> ad.Tensor | None:
    """Mirrored position-model objective over the real logged entries.

    Each list contributes the negative log of the normalized examination
    probabilities ``sigmoid(logits)`` at its logged positions, with every
    click weighted by the detached inverse normalized ranker relevance
    ``exp(mean(x) - x_j)`` (clipped at ``REL_WEIGHT_CAP``).  Lists with
    fewer than two logged entries carry no signal and are skipped; returns
    None when nothing in the batch does.
    """
    total: ad.Tensor | None = None
    offset = 0
    for plist in batch:
        entries = plist.rlist.entries
        logged = [
            (i, e) for i, e in enumerate(entries) if e.position is not None and not e.is_random_negative
        ]
        offset_next = offset + len(entries)
        if len(logged) >= 2:
            idx = np.array([i for i, _ in logged])
            positions = np.array([e.position - 1 for _, e in logged])
            x = score_values[offset + idx]
            # Reference the list's mean score, not any single document: with
            # a fixed reference entry the exponential would systematically
            # favor every other position (Jensen), skewing the estimate.
            rel_weights = np.exp(np.minimum(x.mean() - x, np.log(REL_WEIGHT_CAP)))
            # Raw click indicators, not refined targets: each click is an
            # independent examination observation, and normalizing across a
            # multi-click list would undercount the deep positions.
            clicks = np.array([float(e.click) for _, e in logged])
            p = ad.sigmoid(ad.take(logits, positions))
            dist = ad.div(p, ad.tensor_sum(p))
            coeff = ad.constant(rel_weights * clicks)
            piece = ad.mul(ad.tensor_sum(ad.mul(coeff, ad.log(dist))), -1.0)
            total = piece if total is None else ad.add(total, piece)
        offset = offset_next
    return total


def dla_step(
    scorer: WideDeepScorer,
    propensity: PropensityModel,
    batch: Sequence[PreparedList],
    scorer_opt: AdamWState,
    propensity_opt: AdamWState,
    cfg: PretrainConfig,
) -> tuple[float, float]:
    """One mirrored update of the ranker and the position model.

    The ranker takes a listwise-log step weighted by the detached inverse
    normalized examination probabilities ``sig(l_1) / sig(l_i)`` (1 for
    random negatives).  The position model then takes a listwise-log step
    over the logged positions, scored by its own logits and weighted by the
    detached inverse normalized ranker relevance: with ``p`` the softmax of
    the ranker scores over the logged entries, entry ``j`` gets
    ``p_mean / p_j = exp(mean(x) - x_j)``, each click counting as one
    observation.  The softmax form is translation invariant, which matters
    because the listwise ranker objective only constrains score
    differences, and the mean-score reference keeps the weight's
    expectation identical across positions.  Weights are clipped to
    ``REL_WEIGHT_CAP`` to bound the variance of rare low-relevance clicks.
    Position 1 keeps examination weight 1 by construction.
    """
    if propensity.kind != "dla":
        raise DataError("dla_step requires a dla propensity model")
    exam_weights = propensity.position_weights()

    ids = np.concatenate([p.ids for p in batch])
    feats = np.concatenate([p.features for p in batch])

    def ranker_loss(scores: ad.Tensor) -> ad.Tensor:
        return _batch_ranker_loss(
            scores, batch, cfg, lambda plist: plist.rlist.position_weight_vector(exam_weights)
        )

    rank_loss, grads = forward_backward(scorer, ids, feats, ranker_loss)
    adamw_step(scorer.params, grads, scorer_opt)

    score_values = scorer.score(ids, feats)
    logits_leaf = ad.Tensor(propensity.position_logits)
    total = dla_propensity_objective(score_values, batch, logits_leaf)
    prop_loss = 0.0
    if total is not None:
        if not np.isfinite(total.value):
            raise NumericError("non-finite propensity loss")
        total.backward()
        grad = logits_leaf.grad if logits_leaf.grad is not None else np.zeros_like(propensity.position_logits)
        params = {"position_logits": propensity.position_logits}
        adamw_step(params, {"position_logits": grad}, propensity_opt)
        prop_loss = float(total.value)
    return rank_loss, prop_loss


def pretrain(
    corpus: Corpus,
    sessions: Iterable[ClickSession],
    cfg: PretrainConfig,
    scorer_cfg: ScorerConfig | None = None,
    feature_params: FeatureParams = FeatureParams(),
    initial_scorer: WideDeepScorer | None = None,
) -> tuple[WideDeepScorer, PropensityModel | None, list[EpochStats]]:
    """Train a scorer on a filtered click log.

    The log hygiene rules are re-applied defensively.  Returns the trained
    scorer, the propensity model actually used (None when ipw is "none"),
    and per-epoch statistics.  With ``epochs = 0`` the scorer is returned at
    its freshly initialized state.
    """
    sessions = filter_sessions(sessions)
    if not sessions:
        raise DataError("click log is empty after filtering")

    vocab = build_vocab(corpus.vocabulary())
    if scorer_cfg is None:
        scorer_cfg = ScorerConfig(vocab_size=len(vocab) + 4)
    encoder = _Encoder(corpus, scorer_cfg, vocab, feature_params)

    scorer = initial_scorer if initial_scorer is not None else WideDeepScorer.initialize(scorer_cfg, cfg.seed)
    scorer_opt = adamw_init(scorer.params, cfg.learning_rate, weight_decay=cfg.weight_decay)

    propensity: PropensityModel | None = None
    propensity_opt: AdamWState | None = None
    if cfg.ipw == IPW_CLICK_RATIO:
        propensity = click_ratio_propensity(estimate_click_ratios(sessions), cfg.ipw_alpha)
    elif cfg.ipw == IPW_DLA:
        if cfg.replace_post_click:
            logger.warning(
                "post-click replacement hides unclicked deep impressions from "
                "the position model; propensity estimates may degrade"
            )
        propensity = dla_propensity()
        propensity_opt = adamw_init({"position_logits": propensity.position_logits}, cfg.learning_rate)

    static_weights = (
        propensity.position_weights()
        if propensity is not None and propensity.kind == "click_ratio"
        else np.ones(MAX_LOGGED_POSITIONS)
    )

    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xE9, epoch))))
        order = rng.permutation(len(sessions))
        epoch_loss = 0.0
        epoch_prop_loss = 0.0
        n_lists = 0
        for batch_no, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch_sessions = [sessions[i] for i in order[lo : lo + cfg.batch_size]]
            batch_seed = (cfg.seed * 1_000_003 + epoch) * 131_071 + batch_no
            batch = prepare_batch(batch_sessions, encoder, cfg, batch_seed)
            if cfg.ipw == IPW_DLA:
                assert propensity is not None and propensity_opt is not None
                loss_value, prop_loss = dla_step(scorer, propensity, batch, scorer_opt, propensity_opt, cfg)
                epoch_prop_loss += prop_loss
            else:
                ids = np.concatenate([p.ids for p in batch])
                feats = np.concatenate([p.features for p in batch])
                loss_value, grads = forward_backward(
                    scorer,
                    ids,
                    feats,
                    lambda s: _batch_ranker_loss(
                        s, batch, cfg, lambda plist: plist.rlist.position_weight_vector(static_weights)
                    ),
                )
                adamw_step(scorer.params, grads, scorer_opt)
            epoch_loss += loss_value
            n_lists += len(batch)
        stats = EpochStats(
            epoch=epoch + 1,
            loss=epoch_loss / max(n_lists, 1),
            wall_time=time.perf_counter() - start,
            propensity_loss=(epoch_prop_loss / max(n_lists, 1)) if cfg.ipw == IPW_DLA else None,
        )
        logger.info("pretrain epoch %d loss %.6f (%.2fs)", stats.epoch, stats.loss, stats.wall_time)
        history.append(stats)
    scorer.check_finite()
    return scorer, propensity, history


def score_pairs(
    scorer: WideDeepScorer,
    corpus: Corpus,
    pairs: Sequence[tuple[str, str]],
    feature_params: FeatureParams = FeatureParams(),
    batch_size: int = 256,
) -> dict[tuple[str, str], float]:
    """Model scores for (query_id, doc_id) pairs, batched for speed."""
    vocab = build_vocab(corpus.vocabulary())
    encoder = _Encoder(corpus, scorer.cfg, vocab, feature_params)
    out: dict[tuple[str, str], float] = {}
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        ids = np.stack([encoder.encode(q, d) for q, d in chunk])
        feats = np.stack([encoder.feature_row(q, d) for q, d in chunk])
        values = scorer.score(ids, feats)
        for key, value in zip(chunk, values):
            out[key] = float(value)
    return out


def write_training_log(path, history: Sequence[EpochStats]) -> None:
    """One ``epoch TAB loss TAB wall_time`` line per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\twall_time_s\n")
        for row in history:
            fh.write(f"{row.epoch}\t{row.loss!r}\t{row.wall_time:.3f}\n")
