"""Desk-scale unbiased learning-to-rank pipeline.

The package covers the full path from a synthetic corpus through biased
click simulation, debiased neural pretraining, annotation fine-tuning, and
a LambdaRank tree ensemble, with deterministic artifacts at every stage.
"""

from .corpus import (
    Corpus,
    Document,
    FreqBucket,
    Query,
    SynthConfig,
    build_corpus_stats,
    generate_synthetic_corpus,
    tokenize,
)
from .clicklog import (
    ClickSession,
    ClickSimConfig,
    PropensityModel,
    attractiveness,
    click_ratio_propensity,
    dla_propensity,
    estimate_click_ratios,
    examination_probability,
    filter_sessions,
    simulate_clicks,
    simulate_log,
    uniform_propensity,
)
from .ensemble import (
    EnsembleDataset,
    GBDTHyperparams,
    GBDTModel,
    assemble_rows,
    lambdarank_gradients,
    load_gbdt,
    save_gbdt,
    train_gbdt,
    tune_gbdt,
)
from .errors import DataError, NumericError
from .evaluation import (
    MetricsReport,
    dcg_at_k,
    evaluate_run,
    ideal_dcg_at_k,
    ndcg_at_k,
    rank_documents,
)
from .features import (
    FEATURE_NAMES,
    FeatureParams,
    FeatureVector,
    extract_features,
    idf,
)
from .finetune import (
    AnnotatedExample,
    FinetuneConfig,
    FinetuneResult,
    binarize,
    duplicate_head_queries,
    finetune,
    pairwise_loss,
    sample_groups,
    softmax_negatives_loss,
    split_by_query,
)
from .pipeline import ExperimentSettings, load_settings, run_experiment
from .pretrain import (
    PretrainConfig,
    RefinedEntry,
    RefinedList,
    build_priority_pairs,
    build_refined_list,
    inject_random_negatives,
    listwise_loss,
    minmax_normalize,
    pairwise_pretrain_loss,
    pretrain,
    refine_labels,
    replace_post_click,
    score_pairs,
)

__version__ = "0.1.0"
