"""End-to-end experiment pipeline and its INI configuration.

The experiment chains every stage over one synthetic corpus: click logs are
simulated under a position-biased user model on top of a term-frequency
logging ranker, several pretraining variants (loss x debiasing) are trained
on those clicks, each is fine-tuned on the annotated query slice, and a
boosted tree ensemble combines the hand features with every variant's
scores.  All stages write plain-text artifacts into one output directory
and are skipped when their outputs already exist, so an interrupted run
resumes where it stopped.  Everything is seeded; two runs with the same
settings produce byte-identical reports.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .clicklog import (
    ClickSession,
    ClickSimConfig,
    read_click_log,
    simulate_log,
    write_click_log,
)
from .corpus import (
    Corpus,
    Document,
    Query,
    SynthConfig,
    generate_synthetic_corpus,
    read_corpus_file,
    read_query_file,
    read_relevance_file,
    write_corpus_file,
    write_query_file,
    write_relevance_file,
)
from .ensemble import (
    GBDTHyperparams,
    assemble_rows,
    load_gbdt,
    save_gbdt,
    train_gbdt,
    tune_gbdt,
)
from .errors import DataError
from .evaluation import MetricsReport, evaluate_run, rank_documents, write_report
from .features import FeatureVector, extract_features, read_feature_file, write_feature_file
from .finetune import (
    AnnotatedExample,
    FinetuneConfig,
    finetune,
    read_annotation_file,
    write_annotation_file,
)
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.model import NUM_RESERVED_IDS, ScorerConfig, build_vocab
from .pretrain import (
    IPW_KINDS,
    LOSS_KINDS,
    PAIRWISE_PRIORITY,
    IPW_DLA,
    PretrainConfig,
    pretrain,
    score_pairs,
)

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS: tuple[tuple[str, str], ...] = (
    ("listwise_log", "none"),
    ("listwise_log", "click_ratio"),
    ("listwise_log", "dla"),
    ("pairwise_priority", "none"),
)


@dataclass(frozen=True)
class ScorerSize:
    """The scorer dimensions; vocab_size is derived from the corpus."""

    embed_dim: int = 16
    num_layers: int = 1
    num_heads: int = 2
    ff_dim: int = 32
    max_seq_len: int = 24
    feature_proj_dim: int = 8

    def build(self, vocab_terms: int) -> ScorerConfig:
        return ScorerConfig(
            vocab_size=NUM_RESERVED_IDS + vocab_terms,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            ff_dim=self.ff_dim,
            max_seq_len=self.max_seq_len,
            feature_proj_dim=self.feature_proj_dim,
        )


@dataclass(frozen=True)
class ExperimentSettings:
    seed: int = 0
    threads: int = 1
    annotated_ratio: float = 0.7
    sessions_per_query: int = 15
    variants: tuple[tuple[str, str], ...] = DEFAULT_VARIANTS
    synth: SynthConfig = SynthConfig(num_queries=60)
    clicks: ClickSimConfig = ClickSimConfig(eta=1.0, epsilon_noise=0.1)
    scorer: ScorerSize = ScorerSize()
    pretrain: PretrainConfig = PretrainConfig(epochs=2, batch_size=8, learning_rate=1e-3)
    finetune: FinetuneConfig = FinetuneConfig(epochs=2, batch_size=8, learning_rate=3e-4)
    gbdt: GBDTHyperparams = GBDTHyperparams()
    tune_ensemble: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.annotated_ratio < 1.0:
            raise DataError("annotated_ratio must be strictly between 0 and 1")
        if self.sessions_per_query < 1:
            raise DataError("sessions_per_query must be positive")
        if self.threads < 1:
            raise DataError("threads must be positive")
        if not self.variants:
            raise DataError("at least one pretraining variant is required")
        for loss, ipw in self.variants:
            if loss not in LOSS_KINDS:
                raise DataError(f"unknown variant loss {loss!r}")
            if ipw not in IPW_KINDS:
                raise DataError(f"unknown variant debiasing {ipw!r}")
            if loss == PAIRWISE_PRIORITY and ipw == IPW_DLA:
                raise DataError("joint propensity training requires a listwise loss")


# ---------------------------------------------------------------------------
# INI settings file
# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _variants(text: str) -> tuple[tuple[str, str], ...]:
    out = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ValueError(f"variant {chunk!r} is not of the form loss:debiasing")
        loss, ipw = chunk.split(":", 1)
        out.append((loss.strip(), ipw.strip()))
    if not out:
        raise ValueError("empty variant list")
    return tuple(out)


_SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "experiment": {
        "seed": int,
        "threads": int,
        "annotated_ratio": float,
        "sessions_per_query": int,
        "variants": _variants,
    },
    "corpus": {
        "vocab_size": int,
        "num_queries": int,
        "docs_per_query": int,
        "max_term_repeat": int,
    },
    "clicks": {
        "eta": float,
        "epsilon_noise": float,
        "shuffle_top10": _bool,
    },
    "scorer": {
        "embed_dim": int,
        "num_layers": int,
        "num_heads": int,
        "ff_dim": int,
        "max_seq_len": int,
        "feature_proj_dim": int,
    },
    "pretrain": {
        "delta": float,
        "tau": float,
        "refinement_feature": str,
        "num_random_negatives": int,
        "replace_post_click": _bool,
        "ipw_alpha": float,
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "weight_decay": float,
    },
    "finetune": {
        "loss": str,
        "group_size": int,
        "head_dup_factor": int,
        "split_ratio": float,
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "weight_decay": float,
        "log_variant": _bool,
        "groups_per_query": int,
    },
    "ensemble": {
        "num_leaves": int,
        "max_depth": int,
        "learning_rate": float,
        "num_iterations": int,
        "min_samples_leaf": int,
        "tune": _bool,
    },
}


def load_settings(path: str | Path | None = None) -> ExperimentSettings:
    """Settings from an INI file; every key optional, unknown keys rejected."""
    values: dict[str, dict[str, object]] = {section: {} for section in _SCHEMA}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise DataError(f"{path}: malformed settings file: {exc}") from None
        for section in parser.sections():
            if section not in _SCHEMA:
                raise DataError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                conv = _SCHEMA[section].get(key)
                if conv is None:
                    raise DataError(f"{path}: unknown key {key!r} in [{section}]")
                try:
                    values[section][key] = conv(raw)
                except ValueError as exc:
                    raise DataError(f"{path}: bad value for {section}.{key}: {exc}") from None

    exp = values["experiment"]
    settings = ExperimentSettings(
        seed=exp.get("seed", 0),
        threads=exp.get("threads", 1),
        annotated_ratio=exp.get("annotated_ratio", 0.7),
        sessions_per_query=exp.get("sessions_per_query", 15),
        variants=exp.get("variants", DEFAULT_VARIANTS),
        synth=replace(SynthConfig(num_queries=60), **values["corpus"]),
        clicks=replace(ClickSimConfig(eta=1.0, epsilon_noise=0.1), **values["clicks"]),
        scorer=ScorerSize(**values["scorer"]),
        pretrain=replace(
            PretrainConfig(epochs=2, batch_size=8, learning_rate=1e-3), **values["pretrain"]
        ),
        finetune=replace(
            FinetuneConfig(epochs=2, batch_size=8, learning_rate=3e-4), **values["finetune"]
        ),
        gbdt=replace(GBDTHyperparams(), **{k: v for k, v in values["ensemble"].items() if k != "tune"}),
        tune_ensemble=values["ensemble"].get("tune", False),
    )
    for section, pairs in values.items():
        for key, value in sorted(pairs.items()):
            logger.info("settings: %s.%s = %r", section, key, value)
    return settings


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------


def variant_name(loss: str, ipw: str) -> str:
    return f"{loss}.{ipw}"


def _exists(*paths: Path) -> bool:
    return all(p.exists() for p in paths)


def write_scores(path: str | Path, scores: Mapping[tuple[str, str], float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query_id\tdoc_id\tscore\n")
        for (q, d) in sorted(scores):
            fh.write(f"{q}\t{d}\t{scores[(q, d)]!r}\n")


def read_scores(path: str | Path) -> dict[tuple[str, str], float]:
    out: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "query_id\tdoc_id\tscore":
            raise DataError(f"{path}: unexpected score file header")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                out[(parts[0], parts[1])] = float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad score {parts[2]!r}") from None
    return out


def stage_synth(settings: ExperimentSettings, out_dir: Path) -> None:
    """Corpus, ground truth, and the annotated/held-out query split."""
    paths = [out_dir / n for n in ("corpus.tsv", "queries.tsv", "qrels.tsv",
                                   "annotations.tsv", "test_qrels.tsv")]
    if _exists(*paths):
        logger.info("reusing existing corpus artifacts in %s", out_dir)
        return
    documents, queries, truth = generate_synthetic_corpus(settings.synth, settings.seed)
    write_corpus_file(out_dir / "corpus.tsv", documents)
    write_query_file(out_dir / "queries.tsv", queries)
    write_relevance_file(out_dir / "qrels.tsv", truth)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((settings.seed, 0x5117))))
    query_ids = sorted(q.query_id for q in queries)
    order = rng.permutation(len(query_ids))
    n_annotated = int(len(query_ids) * settings.annotated_ratio)
    if n_annotated == 0 or n_annotated == len(query_ids):
        raise DataError("annotated_ratio leaves one side of the split empty")
    annotated = {query_ids[int(i)] for i in order[:n_annotated]}
    bucket_of = {q.query_id: q.freq_bucket for q in queries}
    annotations = [
        AnnotatedExample(q, d, g, bucket_of[q]) for (q, d), g in truth.items() if q in annotated
    ]
    test_truth = {(q, d): g for (q, d), g in truth.items() if q not in annotated}
    write_annotation_file(out_dir / "annotations.tsv", annotations)
    write_relevance_file(out_dir / "test_qrels.tsv", test_truth)
    logger.info(
        "synthesized %d docs, %d queries (%d annotated, %d held out)",
        len(documents), len(queries), n_annotated, len(query_ids) - n_annotated,
    )


def load_corpus(out_dir: Path) -> Corpus:
    documents = read_corpus_file(out_dir / "corpus.tsv")
    queries = read_query_file(out_dir / "queries.tsv")
    return Corpus(documents, queries)


def stage_features(out_dir: Path) -> dict[tuple[str, str], FeatureVector]:
    """Classic text features for every pair in the ground truth."""
    path = out_dir / "features.tsv"
    if path.exists():
        logger.info("reusing %s", path)
        return read_feature_file(path)
    corpus = load_corpus(out_dir)
    truth = read_relevance_file(out_dir / "qrels.tsv")
    rows = []
    for q, d in sorted(truth):
        rows.append((q, d, extract_features(corpus.query(q), corpus.doc(d), corpus.stats)))
    write_feature_file(path, rows)
    return {(q, d): fv for q, d, fv in rows}


def logging_rankings(
    features: Mapping[tuple[str, str], FeatureVector]
) -> dict[str, list[str]]:
    """The production ranker being logged: term-frequency order per query."""
    by_query: dict[str, dict[str, float]] = {}
    for (q, d), fv in features.items():
        by_query.setdefault(q, {})[d] = fv.by_name("tf_sum")
    return {q: rank_documents(scores) for q, scores in sorted(by_query.items())}


def stage_clicklog(settings: ExperimentSettings, out_dir: Path) -> list[ClickSession]:
    path = out_dir / "clicklog.tsv"
    if path.exists():
        logger.info("reusing %s", path)
        return read_click_log(path)
    features = stage_features(out_dir)
    truth = read_relevance_file(out_dir / "qrels.tsv")
    rankings = logging_rankings(features)
    entries = [
        (q, rankings[q]) for q in sorted(rankings) for _ in range(settings.sessions_per_query)
    ]
    cfg = replace(settings.clicks, seed=settings.seed)
    sessions = simulate_log(truth, entries, cfg)
    write_click_log(path, sessions)
    logger.info("simulated %d sessions over %d queries", len(sessions), len(rankings))
    return sessions


def stage_pretrain(
    settings: ExperimentSettings,
    out_dir: Path,
    loss: str,
    ipw: str,
    corpus: Corpus,
    sessions: Sequence[ClickSession],
):
    from .neural.model import WideDeepScorer  # local import keeps module load light

    name = variant_name(loss, ipw)
    path = out_dir / f"pretrain_{name}.npz"
    if path.exists():
        logger.info("reusing %s", path)
        scorer, _, _ = load_checkpoint(path)
        return scorer
    cfg = replace(settings.pretrain, loss=loss, ipw=ipw, seed=settings.seed)
    scorer_cfg = settings.scorer.build(len(corpus.vocabulary()))
    scorer, _, history = pretrain(corpus, sessions, cfg, scorer_cfg)
    save_checkpoint(path, scorer, extra={"stage": "pretrain", "variant": name,
                                         "epochs": [h.loss for h in history]})
    return scorer


def stage_finetune(settings, out_dir: Path, name: str, scorer, corpus: Corpus):
    path = out_dir / f"finetune_{name}.npz"
    if path.exists():
        logger.info("reusing %s", path)
        tuned, _, _ = load_checkpoint(path)
        return tuned
    annotations = read_annotation_file(out_dir / "annotations.tsv")
    cfg = replace(settings.finetune, seed=settings.seed)
    result = finetune(scorer, corpus, annotations, cfg)
    save_checkpoint(
        path,
        result.scorer,
        extra={
            "stage": "finetune",
            "variant": name,
            "best_epoch": result.best_epoch,
            "val_dcg": result.val_dcg_history,
        },
    )
    return result.scorer


def stage_scores(out_dir: Path, name: str, scorer, corpus: Corpus) -> dict[tuple[str, str], float]:
    path = out_dir / f"scores_{name}.tsv"
    if path.exists():
        logger.info("reusing %s", path)
        return read_scores(path)
    truth = read_relevance_file(out_dir / "qrels.tsv")
    scores = score_pairs(scorer, corpus, sorted(truth))
    write_scores(path, scores)
    return scores


def stage_ensemble(
    settings: ExperimentSettings,
    out_dir: Path,
    features: Mapping[tuple[str, str], FeatureVector],
    variant_scores: Mapping[str, Mapping[tuple[str, str], float]],
) -> dict[tuple[str, str], float]:
    score_path = out_dir / "scores_ensemble.tsv"
    model_path = out_dir / "ensemble_model.txt"
    if _exists(score_path, model_path):
        logger.info("reusing %s", score_path)
        return read_scores(score_path)

    annotations = read_annotation_file(out_dir / "annotations.tsv")
    train_data = assemble_rows(annotations, features, variant_scores)
    if model_path.exists():
        model = load_gbdt(model_path)
    elif settings.tune_ensemble:
        model, best, _ = tune_gbdt(train_data, seed=settings.seed)
        logger.info("tuned ensemble: %s", best)
        save_gbdt(model_path, model)
    else:
        model = train_gbdt(train_data, settings.gbdt)
        save_gbdt(model_path, model)

    test_truth = read_relevance_file(out_dir / "test_qrels.tsv")
    bucket_of = {q.query_id: q.freq_bucket for q in read_query_file(out_dir / "queries.tsv")}
    test_rows = [AnnotatedExample(q, d, g, bucket_of[q]) for (q, d), g in sorted(test_truth.items())]
    test_data = assemble_rows(test_rows, features, variant_scores)
    predictions = model.predict(test_data)
    scores = {
        (q, d): float(s)
        for q, d, s in zip(test_data.query_ids, test_data.doc_ids, predictions)
    }
    write_scores(score_path, scores)
    return scores


def run_experiment(settings: ExperimentSettings, out_dir: str | Path) -> Path:
    """Run (or resume) the full chain and write the comparison report.

    Returns the report path.  Every artifact lands in ``out_dir``; rerunning
    with the same settings reuses whatever already exists there.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stage_synth(settings, out_dir)
    features = stage_features(out_dir)
    sessions = stage_clicklog(settings, out_dir)
    corpus = load_corpus(out_dir)

    variant_scores: dict[str, dict[tuple[str, str], float]] = {}
    for loss, ipw in settings.variants:
        name = variant_name(loss, ipw)
        logger.info("=== variant %s ===", name)
        pretrained = stage_pretrain(settings, out_dir, loss, ipw, corpus, sessions)
        tuned = stage_finetune(settings, out_dir, name, pretrained, corpus)
        variant_scores[name] = stage_scores(out_dir, name, tuned, corpus)

    ensemble_scores = stage_ensemble(settings, out_dir, features, variant_scores)

    test_truth = read_relevance_file(out_dir / "test_qrels.tsv")
    triples = [(q, d, g) for (q, d), g in sorted(test_truth.items())]
    reports: list[MetricsReport] = []
    bm25_scores = {key: features[key].by_name("bm25") for key in features}
    reports.append(
        evaluate_run(bm25_scores, triples, run_id="bm25", threads=settings.threads)
    )
    for name in sorted(variant_scores):
        reports.append(
            evaluate_run(variant_scores[name], triples, run_id=name, threads=settings.threads)
        )
    reports.append(
        evaluate_run(ensemble_scores, triples, run_id="ensemble", threads=settings.threads)
    )
    report_path = out_dir / "report.txt"
    write_report(report_path, reports)
    logger.info("report written to %s", report_path)
    return report_path
