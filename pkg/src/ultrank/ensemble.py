"""Gradient-boosted tree ensemble over hand features and model scores.

The ensemble trains on tabular rows that join graded annotations with the
classic text features and any number of named score columns from the neural
rankers.  Boosting follows the LambdaRank scheme: for every in-query pair
whose grades differ, the higher-graded document receives the pairwise
gradient ``-sigmoid(s_loser - s_winner) * |dDCG@10|`` and the lower-graded
one its negation, where ``|dDCG@10|`` is the DCG@10 change from swapping the
two documents in the current ranking.  Trees grow leaf-wise with exact
greedy splits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .evaluation import ndcg_at_k
from .features import FEATURE_NAMES, FeatureVector
from .finetune import AnnotatedExample

logger = logging.getLogger(__name__)

_EPS = 1e-6
DCG_CUTOFF = 10


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleDataset:
    """Rows sorted by (query_id, doc_id); one column per feature name."""

    query_ids: tuple[str, ...]
    doc_ids: tuple[str, ...]
    grades: np.ndarray  # (n,) int
    matrix: np.ndarray  # (n, n_columns) float64
    columns: tuple[str, ...]

    def __post_init__(self) -> None:
        n = len(self.query_ids)
        if not (len(self.doc_ids) == self.grades.shape[0] == self.matrix.shape[0] == n):
            raise DataError("dataset rows are misaligned")
        if self.matrix.shape[1] != len(self.columns):
            raise DataError("dataset columns are misaligned")

    def query_row_indices(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, q in enumerate(self.query_ids):
            out.setdefault(q, []).append(i)
        return {q: np.array(rows) for q, rows in out.items()}


def assemble_rows(
    annotations: Sequence[AnnotatedExample],
    features: Mapping[tuple[str, str], FeatureVector],
    score_columns: Mapping[str, Mapping[tuple[str, str], float]] | None = None,
) -> EnsembleDataset:
    """Join annotations with features and score columns into one table.

    Every annotated (query, doc) pair must appear in ``features`` and in
    each score column; a missing pair raises DataError naming it.  Rows are
    sorted by (query_id, doc_id) so downstream ties break on doc id.
    """
    if not annotations:
        raise DataError("no annotations to assemble")
    score_columns = dict(score_columns or {})
    ordered = sorted(annotations, key=lambda e: (e.query_id, e.doc_id))
    seen = set()
    for ex in ordered:
        key = (ex.query_id, ex.doc_id)
        if key in seen:
            raise DataError(f"duplicate annotation for {key}")
        seen.add(key)

    columns = FEATURE_NAMES + tuple(sorted(score_columns))
    rows = np.empty((len(ordered), len(columns)), dtype=np.float64)
    for i, ex in enumerate(ordered):
        key = (ex.query_id, ex.doc_id)
        fv = features.get(key)
        if fv is None:
            raise DataError(f"missing features for {key}")
        rows[i, : len(FEATURE_NAMES)] = fv.as_array()
        for j, name in enumerate(columns[len(FEATURE_NAMES) :], start=len(FEATURE_NAMES)):
            col = score_columns[name]
            if key not in col:
                raise DataError(f"missing score {name!r} for {key}")
            rows[i, j] = float(col[key])
    return EnsembleDataset(
        query_ids=tuple(e.query_id for e in ordered),
        doc_ids=tuple(e.doc_id for e in ordered),
        grades=np.array([e.grade for e in ordered], dtype=np.int64),
        matrix=rows,
        columns=columns,
    )


# ---------------------------------------------------------------------------
# LambdaRank gradients
# ---------------------------------------------------------------------------


def _rank_discounts(order_len: int, k: int) -> np.ndarray:
    """Discount 1/log2(rank + 1) for 1-based ranks up to ``k``, else 0."""
    ranks = np.arange(1, order_len + 1, dtype=np.float64)
    disc = 1.0 / np.log2(ranks + 1.0)
    disc[ranks > k] = 0.0
    return disc


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def lambdarank_gradients(
    scores: np.ndarray,
    grades: np.ndarray,
    query_ids: Sequence[str],
    k: int = DCG_CUTOFF,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradient and hessian for one boosting round.

    Within each query, documents are ranked by descending score (ties keep
    row order, which is doc-id order for assembled datasets).  Every pair
    with unequal grades contributes ``rho * |dDCG|`` where
    ``rho = sigmoid(s_loser - s_winner)``: subtracted from the winner's
    gradient, added to the loser's.  The hessian adds
    ``rho * (1 - rho) * |dDCG|`` to both.  Gradients sum to zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    grades = np.asarray(grades)
    if scores.shape[0] != grades.shape[0] or scores.shape[0] != len(query_ids):
        raise DataError("scores, grades, and query_ids must align")
    grad = np.zeros_like(scores)
    hess = np.zeros_like(scores)

    by_query: dict[str, list[int]] = {}
    for i, q in enumerate(query_ids):
        by_query.setdefault(q, []).append(i)

    for q in sorted(by_query):
        rows = np.array(by_query[q])
        order = rows[np.argsort(-scores[rows], kind="stable")]
        disc = _rank_discounts(len(order), k)
        gains = np.power(2.0, grades[order].astype(np.float64)) - 1.0
        for a in range(len(order)):
            for b in range(a + 1, len(order)):
                i, j = order[a], order[b]
                if grades[i] == grades[j]:
                    continue
                winner, loser = (i, j) if grades[i] > grades[j] else (j, i)
                delta = abs((gains[a] - gains[b]) * (disc[a] - disc[b]))
                if delta == 0.0:
                    continue
                rho = _sigmoid(scores[loser] - scores[winner])
                grad[winner] -= rho * delta
                grad[loser] += rho * delta
                curvature = rho * (1.0 - rho) * delta
                hess[winner] += curvature
                hess[loser] += curvature
    return grad, hess


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class Tree:
    nodes: list[TreeNode] = field(default_factory=list)

    def predict_rows(self, matrix: np.ndarray) -> np.ndarray:
        out = np.empty(matrix.shape[0], dtype=np.float64)
        for r in range(matrix.shape[0]):
            node = self.nodes[0]
            while not node.is_leaf:
                node = self.nodes[node.left if matrix[r, node.feature] <= node.threshold else node.right]
            out[r] = node.value
        return out


@dataclass(frozen=True)
class GBDTHyperparams:
    num_leaves: int = 15
    max_depth: int = 5
    learning_rate: float = 0.1
    num_iterations: int = 100
    min_samples_leaf: int = 5

    def __post_init__(self) -> None:
        if self.num_leaves < 2:
            raise DataError("num_leaves must be at least 2")
        if self.max_depth < 1:
            raise DataError("max_depth must be at least 1")
        if self.learning_rate < 0:
            raise DataError("learning_rate must be non-negative")
        if self.num_iterations < 0:
            raise DataError("num_iterations must be non-negative")
        if self.min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be at least 1")


@dataclass
class _LeafCandidate:
    node_index: int
    rows: np.ndarray
    depth: int
    gain: float
    feature: int
    threshold: float
    left_rows: np.ndarray
    right_rows: np.ndarray


def _leaf_value(g_sum: float, h_sum: float) -> float:
    # Plain float, not np.float64: leaf values reach the text dump via repr().
    return float(-g_sum / (h_sum + _EPS))


def _best_split(
    matrix: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    rows: np.ndarray,
    min_samples: int,
) -> tuple[float, int, float, np.ndarray, np.ndarray] | None:
    """Exact greedy search over every feature and midpoint threshold.

    Returns (gain, feature, threshold, left_rows, right_rows) for the best
    strictly positive gain, or None.  Ties keep the first candidate in
    (feature, threshold) scan order, so results do not depend on dict or
    hash order.
    """
    g_total = grad[rows].sum()
    h_total = hess[rows].sum()
    parent = g_total * g_total / (h_total + _EPS)
    best: tuple[float, int, float, np.ndarray, np.ndarray] | None = None
    n = len(rows)
    g_node = grad[rows]
    h_node = hess[rows]
    positions = np.arange(1, n)
    for f in range(matrix.shape[1]):
        values = matrix[rows, f]
        order = np.argsort(values, kind="stable")
        v_sorted = values[order]
        g_prefix = np.cumsum(g_node[order])[:-1]
        h_prefix = np.cumsum(h_node[order])[:-1]
        valid = v_sorted[:-1] < v_sorted[1:]
        valid &= (positions >= min_samples) & (n - positions >= min_samples)
        if not valid.any():
            continue
        gr = g_total - g_prefix
        hr = h_total - h_prefix
        gain = g_prefix * g_prefix / (h_prefix + _EPS) + gr * gr / (hr + _EPS) - parent
        gain[~valid] = -np.inf
        p = int(np.argmax(gain))  # first maximum wins, keeping ties deterministic
        if gain[p] <= 0.0:
            continue
        if best is None or gain[p] > best[0]:
            threshold = (v_sorted[p] + v_sorted[p + 1]) / 2.0
            mask = values <= threshold
            best = (float(gain[p]), f, float(threshold), rows[mask], rows[~mask])
    return best


def _build_tree(
    matrix: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    hyper: GBDTHyperparams,
) -> Tree:
    tree = Tree()
    all_rows = np.arange(matrix.shape[0])
    root = TreeNode(value=_leaf_value(grad.sum(), hess.sum()))
    tree.nodes.append(root)

    candidates: list[_LeafCandidate] = []

    def consider(node_index: int, rows: np.ndarray, depth: int) -> None:
        if depth >= hyper.max_depth or len(rows) < 2 * hyper.min_samples_leaf:
            return
        found = _best_split(matrix, grad, hess, rows, hyper.min_samples_leaf)
        if found is None:
            return
        gain, feature, threshold, left_rows, right_rows = found
        candidates.append(
            _LeafCandidate(node_index, rows, depth, gain, feature, threshold, left_rows, right_rows)
        )

    consider(0, all_rows, 0)
    num_leaves = 1
    while num_leaves < hyper.num_leaves and candidates:
        # Earliest-added candidate wins gain ties: scan keeps first maximum.
        best_i = 0
        for i in range(1, len(candidates)):
            if candidates[i].gain > candidates[best_i].gain:
                best_i = i
        cand = candidates.pop(best_i)
        node = tree.nodes[cand.node_index]
        node.feature = cand.feature
        node.threshold = cand.threshold
        left = TreeNode(value=_leaf_value(grad[cand.left_rows].sum(), hess[cand.left_rows].sum()))
        right = TreeNode(value=_leaf_value(grad[cand.right_rows].sum(), hess[cand.right_rows].sum()))
        node.left = len(tree.nodes)
        tree.nodes.append(left)
        node.right = len(tree.nodes)
        tree.nodes.append(right)
        num_leaves += 1
        consider(node.left, cand.left_rows, cand.depth + 1)
        consider(node.right, cand.right_rows, cand.depth + 1)
    return tree


# ---------------------------------------------------------------------------
# Boosting
# ---------------------------------------------------------------------------


@dataclass
class GBDTModel:
    columns: tuple[str, ...]
    hyper: GBDTHyperparams
    base_score: float
    trees: list[Tree]

    def predict_matrix(self, matrix: np.ndarray, columns: Sequence[str]) -> np.ndarray:
        if tuple(columns) != self.columns:
            raise DataError(
                f"column mismatch: model expects {self.columns}, got {tuple(columns)}"
            )
        out = np.full(matrix.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            out += self.hyper.learning_rate * tree.predict_rows(matrix)
        return out

    def predict(self, dataset: EnsembleDataset) -> np.ndarray:
        return self.predict_matrix(dataset.matrix, dataset.columns)


def train_gbdt(
    dataset: EnsembleDataset,
    hyper: GBDTHyperparams = GBDTHyperparams(),
    k: int = DCG_CUTOFF,
) -> GBDTModel:
    """Boost LambdaRank trees from a zero base score.

    At least one query must mix grades, otherwise no pair produces a
    gradient and boosting would be a no-op.
    """
    has_variation = False
    for rows in dataset.query_row_indices().values():
        if len(set(dataset.grades[rows].tolist())) > 1:
            has_variation = True
            break
    if not has_variation:
        raise DataError("no query has grade variation; nothing to learn")

    model = GBDTModel(columns=dataset.columns, hyper=hyper, base_score=0.0, trees=[])
    predictions = np.zeros(len(dataset.query_ids), dtype=np.float64)
    for it in range(hyper.num_iterations):
        grad, hess = lambdarank_gradients(predictions, dataset.grades, dataset.query_ids, k)
        tree = _build_tree(dataset.matrix, grad, hess, hyper)
        model.trees.append(tree)
        predictions += hyper.learning_rate * tree.predict_rows(dataset.matrix)
        if it == 0 or (it + 1) % 25 == 0:
            logger.debug("boosting round %d mean |grad| %.6f", it + 1, float(np.abs(grad).mean()))
    return model


def mean_ndcg(
    dataset: EnsembleDataset, predictions: np.ndarray, k: int = DCG_CUTOFF
) -> float:
    """Macro-averaged NDCG@k of predictions over the dataset's queries."""
    total = 0.0
    per_query = dataset.query_row_indices()
    for q in sorted(per_query):
        rows = per_query[q]
        order = rows[np.argsort(-predictions[rows], kind="stable")]
        total += ndcg_at_k(dataset.grades[order].tolist(), k)
    return total / len(per_query)


def _subset(dataset: EnsembleDataset, queries: set[str]) -> EnsembleDataset:
    keep = [i for i, q in enumerate(dataset.query_ids) if q in queries]
    idx = np.array(keep)
    return EnsembleDataset(
        query_ids=tuple(dataset.query_ids[i] for i in keep),
        doc_ids=tuple(dataset.doc_ids[i] for i in keep),
        grades=dataset.grades[idx],
        matrix=dataset.matrix[idx],
        columns=dataset.columns,
    )


DEFAULT_TUNING_GRID: tuple[GBDTHyperparams, ...] = tuple(
    GBDTHyperparams(num_leaves=nl, learning_rate=lr, num_iterations=ni)
    for nl in (7, 15)
    for lr in (0.05, 0.1)
    for ni in (50, 100)
)


def tune_gbdt(
    dataset: EnsembleDataset,
    grid: Sequence[GBDTHyperparams] = DEFAULT_TUNING_GRID,
    k: int = DCG_CUTOFF,
    seed: int = 0,
    holdout_ratio: float = 0.2,
) -> tuple[GBDTModel, GBDTHyperparams, dict[int, float]]:
    """Pick hyperparameters on an inner query-level holdout, then refit.

    The holdout takes ``int(n_queries * holdout_ratio)`` shuffled queries.
    Grid entries are scored by validation NDCG@k; ties keep the earliest
    entry.  The winning entry is retrained on the full dataset.
    """
    if not grid:
        raise DataError("empty tuning grid")
    if not 0.0 < holdout_ratio < 1.0:
        raise DataError("holdout_ratio must be strictly between 0 and 1")
    queries = sorted(set(dataset.query_ids))
    if len(queries) < 2:
        raise DataError("need at least two queries to tune")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x6B))))
    order = rng.permutation(len(queries))
    n_holdout = max(1, int(len(queries) * holdout_ratio))
    if n_holdout >= len(queries):
        raise DataError("holdout would swallow every query")
    holdout = {queries[int(i)] for i in order[:n_holdout]}
    inner_train = _subset(dataset, set(queries) - holdout)
    inner_val = _subset(dataset, holdout)

    results: dict[int, float] = {}
    best_i = -1
    for i, hyper in enumerate(grid):
        model = train_gbdt(inner_train, hyper, k)
        score = mean_ndcg(inner_val, model.predict(inner_val), k)
        results[i] = score
        logger.info("grid entry %d: val NDCG@%d %.6f (%s)", i, k, score, hyper)
        if best_i < 0 or score > results[best_i]:
            best_i = i
    best = grid[best_i]
    final = train_gbdt(dataset, best, k)
    return final, best, results


# ---------------------------------------------------------------------------
# Textual model dump
# ---------------------------------------------------------------------------

_DUMP_HEADER = "gbdt-ranker v1"


def save_gbdt(path, model: GBDTModel) -> None:
    """Plain-text dump; floats use repr() so loading round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_DUMP_HEADER + "\n")
        fh.write("columns\t" + "\t".join(model.columns) + "\n")
        fh.write(f"base_score\t{model.base_score!r}\n")
        fh.write(
            "hyper\t{}\t{}\t{}\t{}\t{}\n".format(
                model.hyper.num_leaves,
                model.hyper.max_depth,
                repr(model.hyper.learning_rate),
                model.hyper.num_iterations,
                model.hyper.min_samples_leaf,
            )
        )
        fh.write(f"num_trees\t{len(model.trees)}\n")
        for t, tree in enumerate(model.trees):
            fh.write(f"tree\t{t}\t{len(tree.nodes)}\n")
            for node in tree.nodes:
                if node.is_leaf:
                    fh.write(f"leaf\t{node.value!r}\n")
                else:
                    fh.write(f"split\t{node.feature}\t{node.threshold!r}\t{node.left}\t{node.right}\n")


def load_gbdt(path) -> GBDTModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != _DUMP_HEADER:
        raise DataError(f"{path}: not a gbdt-ranker dump")
    try:
        columns = tuple(lines[1].split("\t")[1:])
        base_score = float(lines[2].split("\t")[1])
        h = lines[3].split("\t")
        hyper = GBDTHyperparams(
            num_leaves=int(h[1]),
            max_depth=int(h[2]),
            learning_rate=float(h[3]),
            num_iterations=int(h[4]),
            min_samples_leaf=int(h[5]),
        )
        num_trees = int(lines[4].split("\t")[1])
        trees: list[Tree] = []
        pos = 5
        for _ in range(num_trees):
            head = lines[pos].split("\t")
            if head[0] != "tree":
                raise DataError(f"{path}: expected tree header at line {pos + 1}")
            n_nodes = int(head[2])
            pos += 1
            nodes = []
            for _ in range(n_nodes):
                parts = lines[pos].split("\t")
                if parts[0] == "leaf":
                    nodes.append(TreeNode(value=float(parts[1])))
                elif parts[0] == "split":
                    nodes.append(
                        TreeNode(
                            feature=int(parts[1]),
                            threshold=float(parts[2]),
                            left=int(parts[3]),
                            right=int(parts[4]),
                        )
                    )
                else:
                    raise DataError(f"{path}: bad node line {pos + 1}")
                pos += 1
            trees.append(Tree(nodes=nodes))
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: truncated or malformed dump: {exc}") from None
    return GBDTModel(columns=columns, hyper=hyper, base_score=base_score, trees=trees)
