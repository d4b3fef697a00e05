"""End-to-end acceptance checks for the ranking pipeline.

One test per headline property: exact gradients for every training loss,
click-ratio debiasing, propensity recovery from a shuffled log, the value
of annotation fine-tuning, head-query duplication, GBDT ensemble dominance,
the DCG oracle, and bit-reproducible experiment runs.  Each test prints a
one-line summary with its key numbers.
"""

from __future__ import annotations

import hashlib
import math
import subprocess
import sys
import time
from itertools import permutations

import numpy as np
import pytest

from ultrank.neural import autodiff as ad
from ultrank.clicklog import (
    ClickSimConfig,
    click_ratio_propensity,
    estimate_click_ratios,
    filter_sessions,
    simulate_log,
)
from ultrank.corpus import Corpus, FreqBucket, SynthConfig, generate_synthetic_corpus
from ultrank.ensemble import (
    EnsembleDataset,
    GBDTHyperparams,
    lambdarank_gradients,
    train_gbdt,
)
from ultrank.evaluation import dcg_at_k, evaluate_run, rank_documents
from ultrank.features import FEATURE_NAMES, extract_features
from ultrank.finetune import (
    AnnotatedExample,
    FinetuneConfig,
    duplicate_head_queries,
    finetune,
    pairwise_loss,
    softmax_negatives_loss,
    split_by_query,
)
from ultrank.neural.model import (
    NUM_RESERVED_IDS,
    ScorerConfig,
    WideDeepScorer,
    grad_check,
)
from ultrank.pretrain import (
    PretrainConfig,
    PreparedList,
    RefinedEntry,
    RefinedList,
    dla_propensity_objective,
    listwise_loss,
    pairwise_pretrain_loss,
    pretrain,
    score_pairs,
)

GRAD_TOL = 1e-4


def _report(name: str, detail: str) -> None:
    print(f"[acceptance] {name}: {detail}", flush=True)


# ---------------------------------------------------------------------------
# Gradient correctness for every implemented loss.
# ---------------------------------------------------------------------------


def test_acceptance_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xAC1)))
    cfg = ScorerConfig(
        vocab_size=40,
        embed_dim=8,
        num_layers=1,
        num_heads=2,
        ff_dim=12,
        max_seq_len=12,
        feature_proj_dim=4,
        mlp_dims=(6, 1),
    )
    n = 8
    ids = rng.integers(0, cfg.vocab_size, size=(n, cfg.max_seq_len))
    features = rng.standard_normal((n, 8))

    targets = rng.random(n)
    targets = targets / targets.sum()
    weights = rng.uniform(1.0, 2.5, size=n)
    exam_logits = rng.standard_normal(10)
    exam = 1.0 / (1.0 + np.exp(-exam_logits))
    exam_weights = exam[0] / exam[rng.integers(0, 10, size=n)]
    pairs = [(0, 1), (2, 3), (4, 5), (0, 6), (7, 2)]

    cases = {
        "listwise log": lambda s: listwise_loss(s, targets, weights, log_variant=True),
        "listwise as-written": lambda s: listwise_loss(s, targets, weights, log_variant=False),
        "listwise, examination weights": lambda s: listwise_loss(
            s, targets, exam_weights, log_variant=True
        ),
        "pairwise priority log": lambda s: pairwise_pretrain_loss(s, pairs, log_variant=True),
        "pairwise priority as-written": lambda s: pairwise_pretrain_loss(
            s, pairs, log_variant=False
        ),
        "softmax negatives log": lambda s: softmax_negatives_loss(s, log_variant=True),
        "softmax negatives as-written": lambda s: softmax_negatives_loss(s, log_variant=False),
        "annotation pairwise log": lambda s: pairwise_loss(
            ad.slice_(s, slice(-1, None)), ad.slice_(s, slice(0, 1)), log_variant=True
        ),
        "annotation pairwise as-written": lambda s: pairwise_loss(
            ad.slice_(s, slice(-1, None)), ad.slice_(s, slice(0, 1)), log_variant=False
        ),
    }
    worst_overall = 0.0
    for label, loss_fn in cases.items():
        scorer = WideDeepScorer.initialize(cfg, seed=hash(label) & 0xFF)
        worst = grad_check(scorer, ids, features, loss_fn, num_coords=120, seed=3)
        assert worst < GRAD_TOL, f"{label}: max rel err {worst:.3e}"
        worst_overall = max(worst_overall, worst)

    # Position-model side of the joint estimator: analytic gradient of the
    # objective with respect to all ten position logits vs central differences.
    def make_batch() -> list[PreparedList]:
        list_a = RefinedList(
            "q1",
            (
                RefinedEntry("a1", 1, True, 0.4, 2.4, False),
                RefinedEntry("a2", 2, False, 0.1, 0.1, False),
                RefinedEntry("a3", 3, True, 0.9, 2.9, False),
                RefinedEntry("a4", 4, False, 0.5, 0.5, False),
                RefinedEntry("a5", None, False, 0.2, 0.0, True),
            ),
        )
        list_b = RefinedList(
            "q2",
            (
                RefinedEntry("b1", 2, False, 0.3, 0.3, False),
                RefinedEntry("b2", 5, True, 0.8, 2.8, False),
                RefinedEntry("b3", 7, True, 0.6, 2.6, False),
                RefinedEntry("b4", None, False, 0.1, 0.0, True),
            ),
        )
        out = []
        for rlist in (list_a, list_b):
            k = len(rlist.entries)
            out.append(
                PreparedList(
                    rlist=rlist,
                    ids=np.zeros((k, 4), dtype=np.int64),
                    features=np.zeros((k, 8)),
                    targets=np.full(k, 1.0 / k),
                    pairs=[],
                )
            )
        return out

    batch = make_batch()
    score_values = rng.standard_normal(sum(len(p.rlist.entries) for p in batch))
    logits = rng.standard_normal(10)

    def objective(vec: np.ndarray) -> tuple[float, np.ndarray | None]:
        leaf = ad.Tensor(vec.copy())
        total = dla_propensity_objective(score_values, batch, leaf)
        assert total is not None
        total.backward()
        return float(total.value), leaf.grad

    value, analytic = objective(logits)
    assert analytic is not None and analytic.shape == (10,)
    eps = 1e-6
    worst_logits = 0.0
    for i in range(10):
        up = logits.copy()
        up[i] += eps
        down = logits.copy()
        down[i] -= eps
        numeric = (objective(up)[0] - objective(down)[0]) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-4)
        worst_logits = max(worst_logits, err)
    assert worst_logits < GRAD_TOL, f"position-model logits: max rel err {worst_logits:.3e}"

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report(
        "gradients",
        f"PASS max rel err {max(worst_overall, worst_logits):.2e} < {GRAD_TOL} ({elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# Click-ratio IPW beats unweighted pretraining on held-out queries.
# ---------------------------------------------------------------------------

_A2_SYNTH = SynthConfig(vocab_size=300, num_queries=500, docs_per_query=20)
_A2_LOG_SESSIONS = 25  # 400 logged queries x 25 sessions = 10^4 sessions
_A2_HELD_OUT = 100


def _mean_heldout_dcg(scorer, corpus, truth, pairs, k=10):
    scores = score_pairs(scorer, corpus, pairs)
    per_query: dict[str, dict[str, float]] = {}
    for (q, d), s in scores.items():
        per_query.setdefault(q, {})[d] = s
    return float(
        np.mean(
            [
                dcg_at_k([truth[(q, d)] for d in rank_documents(ds)], k)
                for q, ds in per_query.items()
            ]
        )
    )


def _debias_trial(seed: int) -> tuple[float, float]:
    """Held-out DCG@10 for unweighted vs click-ratio-weighted pretraining.

    The logging ranker orders candidates shortest-document-first: document
    length is a real model feature that anti-correlates with relevance here,
    so the position bias it induces is a systematic, feature-expressible
    tilt the weighting has to undo.
    """
    documents, queries, truth = generate_synthetic_corpus(_A2_SYNTH, seed=seed)
    corpus = Corpus(documents, queries)
    qids = sorted(q.query_id for q in queries)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xA2A2))))
    order = rng.permutation(len(qids))
    held = {qids[int(i)] for i in order[:_A2_HELD_OUT]}

    logging_scores: dict[str, dict[str, float]] = {}
    for (q, d) in truth:
        if q in held:
            continue
        fv = extract_features(corpus.query(q), corpus.doc(d), corpus.stats)
        logging_scores.setdefault(q, {})[d] = -fv.by_name("doc_len")
    rankings = {q: rank_documents(s) for q, s in logging_scores.items()}
    entries = [
        (q, rankings[q]) for q in sorted(rankings) for _ in range(_A2_LOG_SESSIONS)
    ]
    sessions = simulate_log(
        truth, entries, ClickSimConfig(eta=1.0, epsilon_noise=0.2, seed=seed)
    )

    scorer_cfg = ScorerConfig(
        vocab_size=NUM_RESERVED_IDS + len(corpus.vocabulary()),
        embed_dim=8,
        num_layers=1,
        num_heads=2,
        ff_dim=16,
        max_seq_len=24,
        feature_proj_dim=4,
        mlp_dims=(8, 1),
    )
    held_pairs = sorted((q, d) for (q, d) in truth if q in held)
    out = {}
    for ipw in ("none", "click_ratio"):
        cfg = PretrainConfig(
            ipw=ipw,
            ipw_alpha=0.25,
            loss="listwise_log",
            epochs=1,
            batch_size=32,
            learning_rate=3e-3,
            seed=seed,
        )
        scorer, _, _ = pretrain(corpus, sessions, cfg, scorer_cfg)
        out[ipw] = _mean_heldout_dcg(scorer, corpus, truth, held_pairs)
    return out["none"], out["click_ratio"]


def test_acceptance_click_ratio_ipw_beats_unweighted():
    start = time.perf_counter()
    total_sessions = (_A2_SYNTH.num_queries - _A2_HELD_OUT) * _A2_LOG_SESSIONS
    assert _A2_SYNTH.num_queries >= 500 and total_sessions >= 10_000
    wins = 0
    diffs = []
    for seed in range(10):
        none_dcg, ipw_dcg = _debias_trial(seed)
        diffs.append(ipw_dcg - none_dcg)
        if ipw_dcg > none_dcg:
            wins += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0
    detail = (
        f"wins {wins}/10, diffs "
        + " ".join(f"{d:+.4f}" for d in diffs)
        + f" ({elapsed:.0f}s)"
    )
    assert wins >= 8, detail
    _report("debiasing", f"PASS {detail}")


# ---------------------------------------------------------------------------
# Propensity recovery from a shuffled-ranking click log.
# ---------------------------------------------------------------------------


def test_acceptance_propensity_recovery_from_shuffled_log():
    start = time.perf_counter()
    synth = SynthConfig(vocab_size=120, num_queries=50, docs_per_query=10)
    documents, queries, truth = generate_synthetic_corpus(synth, seed=11)
    docs_by_query: dict[str, list[str]] = {}
    for (q, d) in truth:
        docs_by_query.setdefault(q, []).append(d)
    entries = [
        (q, sorted(ds)) for q, ds in sorted(docs_by_query.items()) for _ in range(2000)
    ]
    assert len(entries) == 100_000
    cfg = ClickSimConfig(eta=1.0, epsilon_noise=0.1, shuffle_top10=True, seed=11)
    log = simulate_log(truth, entries, cfg)
    kept = filter_sessions(log)
    cr = np.array(estimate_click_ratios(kept))

    # Per-session shuffling makes relevance position-independent, so the
    # click-rate ratio cr_1/cr_i recovers the examination ratio e_1/e_i = i.
    ratios = cr[0] / cr
    expected = np.arange(1, 11, dtype=float)
    rel_err = np.abs(ratios - expected) / expected
    assert rel_err.max() < 0.10, f"worst position rel err {rel_err.max():.3f}"

    # The quarter-power transform reproduces (cr_1/cr_i)^0.25 bit-for-bit.
    model = click_ratio_propensity(tuple(cr), alpha=0.25)
    assert np.array_equal(np.array(model.position_weights()), (cr[0] / cr) ** 0.25)

    # The published top-10 weight table is the quarter-power transform of the
    # click ratios it implies (first position normalized to 1).
    published = (1.0, 1.0, 1.19, 1.44, 1.58, 1.89, 1.95, 2.12, 2.26, 2.51)
    implied_cr = tuple(1.0 / w**4 for w in published)
    recovered = click_ratio_propensity(implied_cr, alpha=0.25).position_weights()
    assert tuple(round(w, 2) for w in recovered) == published
    assert round(2**0.25, 2) == 1.19

    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    _report(
        "propensity recovery",
        f"PASS max rel err {rel_err.max():.3f} < 0.10 over positions 1-10 ({elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# Fine-tuning on annotations improves a pretrained checkpoint.
# ---------------------------------------------------------------------------

_A4_SYNTH = SynthConfig(vocab_size=200, num_queries=100, docs_per_query=20)
_A4_HELD_OUT = 25


def _finetune_trial(seed: int) -> tuple[float, float]:
    documents, queries, truth = generate_synthetic_corpus(_A4_SYNTH, seed=seed)
    corpus = Corpus(documents, queries)
    bucket_of = {q.query_id: q.freq_bucket for q in queries}
    qids = sorted(q.query_id for q in queries)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xA4A4))))
    order = rng.permutation(len(qids))
    held = {qids[int(i)] for i in order[:_A4_HELD_OUT]}
    held_pairs = sorted((q, d) for (q, d) in truth if q in held)

    logging_scores: dict[str, dict[str, float]] = {}
    for (q, d) in truth:
        if q in held:
            continue
        fv = extract_features(corpus.query(q), corpus.doc(d), corpus.stats)
        logging_scores.setdefault(q, {})[d] = -fv.by_name("doc_len")
    rankings = {q: rank_documents(s) for q, s in logging_scores.items()}
    entries = [(q, rankings[q]) for q in sorted(rankings) for _ in range(12)]
    sessions = simulate_log(
        truth, entries, ClickSimConfig(eta=1.0, epsilon_noise=0.2, seed=seed)
    )
    scorer_cfg = ScorerConfig(
        vocab_size=NUM_RESERVED_IDS + len(corpus.vocabulary()),
        embed_dim=8,
        num_layers=1,
        num_heads=2,
        ff_dim=16,
        max_seq_len=24,
        feature_proj_dim=4,
        mlp_dims=(8, 1),
    )
    pre_cfg = PretrainConfig(
        ipw="none",
        loss="listwise_log",
        epochs=1,
        batch_size=32,
        learning_rate=3e-3,
        seed=seed,
    )
    checkpoint, _, _ = pretrain(corpus, sessions, pre_cfg, scorer_cfg)
    before = _mean_heldout_dcg(checkpoint, corpus, truth, held_pairs)

    annotations = [
        AnnotatedExample(q, d, g, bucket_of[q])
        for (q, d), g in sorted(truth.items())
        if q not in held
    ]
    ft_cfg = FinetuneConfig(
        epochs=5,
        learning_rate=1e-3,
        batch_size=8,
        groups_per_query=8,
        head_dup_factor=1,
        seed=seed,
    )
    result = finetune(checkpoint, corpus, annotations, ft_cfg)
    after = _mean_heldout_dcg(result.scorer, corpus, truth, held_pairs)
    return before, after


def test_acceptance_finetuning_improves_pretrained_checkpoint():
    start = time.perf_counter()
    wins = 0
    diffs = []
    for seed in range(10):
        before, after = _finetune_trial(seed)
        diffs.append(after - before)
        if after > before:
            wins += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 300.0
    detail = (
        f"wins {wins}/10, diffs "
        + " ".join(f"{d:+.3f}" for d in diffs)
        + f" ({elapsed:.0f}s)"
    )
    assert wins >= 8, detail
    _report("fine-tuning", f"PASS {detail}")


# ---------------------------------------------------------------------------
# Head-query duplication: no worse on average, and mechanically exact.
# ---------------------------------------------------------------------------

_A5_SYNTH = SynthConfig(vocab_size=200, num_queries=120, docs_per_query=20)


def _duplication_trial(seed: int) -> tuple[float, float]:
    documents, queries, truth = generate_synthetic_corpus(_A5_SYNTH, seed=seed)
    corpus = Corpus(documents, queries)
    bucket_of = {q.query_id: q.freq_bucket for q in queries}
    annotations = [
        AnnotatedExample(q, d, g, bucket_of[q]) for (q, d), g in sorted(truth.items())
    ]
    scorer_cfg = ScorerConfig(
        vocab_size=NUM_RESERVED_IDS + len(corpus.vocabulary()),
        embed_dim=8,
        num_layers=1,
        num_heads=2,
        ff_dim=16,
        max_seq_len=24,
        feature_proj_dim=4,
        mlp_dims=(8, 1),
    )
    vals = {}
    histories = {}
    for factor in (1, 2):
        scorer = WideDeepScorer.initialize(scorer_cfg, seed=seed)
        cfg = FinetuneConfig(
            epochs=2,
            learning_rate=1e-3,
            batch_size=8,
            groups_per_query=1,
            head_dup_factor=factor,
            seed=seed,
        )
        result = finetune(scorer, corpus, annotations, cfg)
        vals[factor] = max(result.val_dcg_history)
        histories[factor] = result.val_dcg_history
    # Validation isolation: the held-out slice and the starting weights are
    # shared, so the pre-training validation score must be bit-identical.
    assert histories[1][0] == histories[2][0]
    return vals[1], vals[2]


def test_acceptance_head_duplication_not_worse():
    start = time.perf_counter()

    # Mechanism, exactly: every high-frequency example appears `factor`
    # times, every other example once, and the validation split never
    # contains a duplicated query.
    documents, queries, truth = generate_synthetic_corpus(_A5_SYNTH, seed=0)
    bucket_of = {q.query_id: q.freq_bucket for q in queries}
    annotations = [
        AnnotatedExample(q, d, g, bucket_of[q]) for (q, d), g in sorted(truth.items())
    ]
    assert {e.bucket for e in annotations} == set(FreqBucket)
    duplicated = duplicate_head_queries(annotations, 2, seed=0)
    counts: dict[tuple[str, str], int] = {}
    for example in duplicated:
        counts[(example.query_id, example.doc_id)] = (
            counts.get((example.query_id, example.doc_id), 0) + 1
        )
    for example in annotations:
        expected = 2 if example.bucket is FreqBucket.HIGH else 1
        assert counts[(example.query_id, example.doc_id)] == expected
    assert sorted(
        (e.query_id, e.doc_id) for e in duplicate_head_queries(annotations, 1, seed=0)
    ) == sorted((e.query_id, e.doc_id) for e in annotations)

    train, val = split_by_query(annotations, 0.8, seed=0)
    train_queries = {e.query_id for e in train}
    val_queries = {e.query_id for e in val}
    assert train_queries.isdisjoint(val_queries)
    assert {e.query_id for e in duplicate_head_queries(train, 2, seed=0)} == train_queries

    base_vals = []
    dup_vals = []
    for seed in range(10):
        v1, v2 = _duplication_trial(seed)
        base_vals.append(v1)
        dup_vals.append(v2)
    mean1 = float(np.mean(base_vals))
    mean2 = float(np.mean(dup_vals))
    elapsed = time.perf_counter() - start
    detail = f"mean val DCG@10 factor1={mean1:.4f} factor2={mean2:.4f} ({elapsed:.0f}s)"
    assert mean2 >= mean1, detail
    _report("head duplication", f"PASS {detail}")


# ---------------------------------------------------------------------------
# GBDT ensemble dominance plus lambda-gradient identities.
# ---------------------------------------------------------------------------


def _graded_table(num_queries: int, docs: int, seed: int) -> EnsembleDataset:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    query_ids = []
    doc_ids = []
    grades = []
    rows = []
    for qi in range(num_queries):
        qid = f"q{qi:03d}"
        doc_grades = rng.integers(0, 5, size=docs)
        while len(set(doc_grades.tolist())) < 2:
            doc_grades = rng.integers(0, 5, size=docs)
        for di in range(docs):
            g = int(doc_grades[di])
            feature_row = {name: 0.0 for name in FEATURE_NAMES}
            feature_row["bm25"] = g + 0.8 * rng.standard_normal()
            feature_row["tf_sum"] = rng.standard_normal()
            feature_row["doc_len"] = float(rng.integers(5, 30))
            query_ids.append(qid)
            doc_ids.append(f"d{qi:03d}_{di}")
            grades.append(g)
            rows.append(
                [feature_row[name] for name in FEATURE_NAMES]
                + [0.5 * g + rng.standard_normal()]
            )
    columns = tuple(FEATURE_NAMES) + ("run_neural",)
    return EnsembleDataset(
        query_ids=tuple(query_ids),
        doc_ids=tuple(doc_ids),
        grades=np.array(grades, dtype=np.int64),
        matrix=np.array(rows, dtype=np.float64),
        columns=columns,
    )


def _mean_dcg_of_scores(dataset: EnsembleDataset, scores: np.ndarray, k: int = 10) -> float:
    dcgs = []
    qids = np.array(dataset.query_ids)
    for qid in sorted(set(dataset.query_ids)):
        mask = qids == qid
        s = scores[mask]
        g = dataset.grades[mask]
        order = np.argsort(-s, kind="stable")
        dcgs.append(dcg_at_k([int(x) for x in g[order]], k))
    return float(np.mean(dcgs))


def test_acceptance_ensemble_dominance_and_lambda_identities():
    start = time.perf_counter()
    dataset = _graded_table(50, 8, seed=77)
    hyper = GBDTHyperparams(num_iterations=50)
    model = train_gbdt(dataset, hyper, k=10)
    predictions = model.predict(dataset)
    model_dcg = _mean_dcg_of_scores(dataset, predictions)
    column_dcgs = {
        name: _mean_dcg_of_scores(dataset, dataset.matrix[:, j])
        for j, name in enumerate(dataset.columns)
    }
    best_column, best_dcg = max(column_dcgs.items(), key=lambda item: item[1])
    assert model_dcg >= best_dcg, (
        f"model {model_dcg:.5f} vs best column {best_column} {best_dcg:.5f}"
    )

    # Pair-level antisymmetry is exact in floating point: each two-document
    # query adds and subtracts the same product, so the gradients mirror
    # bit-for-bit and their sum is literally zero.
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xAC6)))
    num_cases = 200
    scores2 = rng.standard_normal(2 * num_cases)
    grades2 = np.zeros(2 * num_cases, dtype=np.int64)
    for i in range(num_cases):
        a, b = rng.choice(5, size=2, replace=False)
        grades2[2 * i] = a
        grades2[2 * i + 1] = b
    qids2 = np.repeat([f"p{i:03d}" for i in range(num_cases)], 2)
    grad2, hess2 = lambdarank_gradients(scores2, grades2, qids2, k=10)
    for i in range(num_cases):
        lo, hi = 2 * i, 2 * i + 1
        assert grad2[lo] == -grad2[hi]
        assert grad2[lo] + grad2[hi] == 0.0
        assert hess2[lo] == hess2[hi]
        winner = lo if grades2[lo] > grades2[hi] else hi
        assert grad2[winner] < 0.0

    # Across many documents the per-query sum telescopes to zero; summing
    # with compensated arithmetic keeps it at the rounding floor.
    scores_t = rng.standard_normal(len(dataset.grades))
    grad_t, _ = lambdarank_gradients(
        scores_t, dataset.grades, np.array(dataset.query_ids), k=10
    )
    qarr = np.array(dataset.query_ids)
    worst_sum = max(
        abs(math.fsum(grad_t[qarr == qid])) for qid in sorted(set(dataset.query_ids))
    )
    assert worst_sum < 1e-12, f"per-query gradient sum {worst_sum:.2e}"

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report(
        "ensemble",
        f"PASS model DCG {model_dcg:.5f} >= best column {best_dcg:.5f} "
        f"({best_column}); per-query lambda sum <= {worst_sum:.1e} ({elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# DCG oracle: optimality by brute force and pinned hand values.
# ---------------------------------------------------------------------------


def test_acceptance_dcg_matches_brute_force_and_hand_values():
    start = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xAC7)))
    checked = 0
    for length in range(1, 7):
        for _ in range(12):
            grades = [int(g) for g in rng.integers(0, 5, size=length)]
            best_perm = max(
                dcg_at_k(list(p), 10) for p in permutations(grades)
            )
            sorted_dcg = dcg_at_k(sorted(grades, reverse=True), 10)
            assert sorted_dcg == pytest.approx(best_perm, rel=1e-12)
            checked += 1

    assert dcg_at_k([4, 3, 0], 10) == pytest.approx(19.41650, abs=1e-5)
    # Worst ordering of the same list: the grade-3 document contributes
    # 2^3 - 1 = 7 at rank two, the grade-4 one 15/2 at rank three.
    assert dcg_at_k([0, 3, 4], 10) == pytest.approx(11.91651, abs=1e-5)

    elapsed = time.perf_counter() - start
    _report(
        "metric oracle",
        f"PASS grade-sorted order optimal on {checked} lists; "
        f"hand values 19.41650 and 11.91651 match ({elapsed:.1f}s)",
    )


@pytest.mark.xfail(
    strict=True,
    reason=(
        "historical hand value 9.39272 used the raw grade 3 instead of the "
        "exponential gain 2^3 - 1 = 7 for the middle document (and rounds "
        "its own arithmetic to 9.39279); the module's definition gives "
        "11.91651 for the reversed list, asserted above"
    ),
)
def test_acceptance_dcg_reversed_list_matches_historical_value():
    assert dcg_at_k([0, 3, 4], 10) == pytest.approx(9.39272, abs=1e-5)


# ---------------------------------------------------------------------------
# Determinism: seeded experiments are bit-reproducible and evaluation is
# thread-count invariant.
# ---------------------------------------------------------------------------

_A8_SETTINGS = """\
[experiment]
seed = 5
threads = 1
annotated_ratio = 0.7
sessions_per_query = 4
variants = listwise_log:none, listwise_log:click_ratio, listwise_log:dla, pairwise_priority:none

[corpus]
vocab_size = 40
num_queries = 8
docs_per_query = 10

[clicks]
epsilon_noise = 0.35

[scorer]
embed_dim = 8
num_layers = 1
num_heads = 2
ff_dim = 16
max_seq_len = 24
feature_proj_dim = 4

[pretrain]
epochs = 1
batch_size = 8

[finetune]
epochs = 1
batch_size = 4

[ensemble]
num_iterations = 5
"""


def _run_experiment(out_dir, config_path, threads: int = 1):
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "ultrank.cli",
            "experiment",
            "--out-dir",
            str(out_dir),
            "--config",
            str(config_path),
            "--seed",
            "5",
            "--threads",
            str(threads),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def _digest_tree(root) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.iterdir())
        if p.is_file()
    }


def test_acceptance_seeded_experiment_is_bit_reproducible(tmp_path):
    start = time.perf_counter()
    config_path = tmp_path / "settings.ini"
    config_path.write_text(_A8_SETTINGS)
    run_a = tmp_path / "run_a"
    run_b = tmp_path / "run_b"
    _run_experiment(run_a, config_path)
    _run_experiment(run_b, config_path)
    digests_a = _digest_tree(run_a)
    digests_b = _digest_tree(run_b)
    assert digests_a.keys() == digests_b.keys()
    mismatched = [name for name in digests_a if digests_a[name] != digests_b[name]]
    assert not mismatched, f"artifacts differ between identical runs: {mismatched}"

    # The evaluation stage must not depend on the worker count.
    run_c = tmp_path / "run_c"
    _run_experiment(run_c, config_path, threads=4)
    assert (run_c / "report.txt").read_bytes() == (run_a / "report.txt").read_bytes()

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xAC8)))
    scores = {}
    annotations = []
    for qi in range(40):
        for di in range(12):
            qid, did = f"q{qi:02d}", f"d{di:02d}"
            scores[(qid, did)] = float(rng.standard_normal())
            annotations.append((qid, did, int(rng.integers(0, 5))))
    reports = {
        threads: evaluate_run(scores, annotations, k=10, run_id="probe", threads=threads)
        for threads in (1, 2, 4)
    }
    base = reports[1].macro_dcg
    worst = max(abs(reports[t].macro_dcg - base) for t in (2, 4))
    assert worst < 1e-9, f"macro DCG drifts {worst:.2e} across thread counts"

    elapsed = time.perf_counter() - start
    _report(
        "determinism",
        f"PASS {len(digests_a)} artifacts byte-identical; "
        f"macro DCG thread drift {worst:.1e} ({elapsed:.1f}s)",
    )
