"""Wide-and-deep relevance scorer with exact hand-rolled gradients.

The deep branch is a small pre-norm residual transformer encoder over the
token stream ``[CLS] query [SEP] document``; its [CLS] output vector is the
text representation.  The wide branch projects the dense lexical feature
vector through one ReLU layer.  Both are concatenated and fed to a final MLP
that ends in a single score.

Everything runs in float64 on the autodiff module in this package, so
training is bit-reproducible for a fixed seed and gradients are exact
reverse-mode derivatives (verified against central differences in the test
suite).

Attention masks padding by writing a large negative constant into every
masked key column before the softmax.  The constant is extreme enough that
``exp`` underflows to exactly zero, so scores are bit-for-bit invariant to
the content of padded positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import DataError, NumericError
from ..features import NUM_FEATURES
from . import autodiff as ad

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
UNK_ID = 3
NUM_RESERVED_IDS = 4

_MASK_FILL = -1e9


@dataclass(frozen=True)
class ScorerConfig:
    vocab_size: int
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ff_dim: int = 64
    max_seq_len: int = 64
    feature_proj_dim: int = 16
    mlp_dims: tuple[int, ...] = (32, 1)
    num_features: int = NUM_FEATURES
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.vocab_size < NUM_RESERVED_IDS:
            raise DataError(f"vocab_size must cover the {NUM_RESERVED_IDS} reserved ids")
        if self.embed_dim < 1 or self.num_layers < 0 or self.ff_dim < 1:
            raise DataError("embed_dim and ff_dim must be positive, num_layers non-negative")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise DataError("num_heads must divide embed_dim")
        if self.max_seq_len < 3:
            raise DataError("max_seq_len must fit [CLS] q [SEP]")
        if not self.mlp_dims or self.mlp_dims[-1] != 1:
            raise DataError("mlp_dims must end in an output width of 1")
        if self.feature_proj_dim < 1 or self.num_features < 1:
            raise DataError("feature dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError("dropout_rate must lie in [0, 1)")


def build_vocab(terms: Sequence[str]) -> dict[str, int]:
    """Map sorted distinct terms to ids after the reserved block."""
    return {term: NUM_RESERVED_IDS + i for i, term in enumerate(sorted(set(terms)))}


def encode_pair(
    query_tokens: Sequence[str],
    doc_tokens: Sequence[str],
    vocab: Mapping[str, int],
    cfg: ScorerConfig,
) -> np.ndarray:
    """Token ids for ``[CLS] query [SEP] document`` padded to max_seq_len.

    When the pair is too long the document is truncated first; only if the
    query alone overflows is the query itself cut.  Out-of-vocabulary terms
    map to UNK.
    """
    budget = cfg.max_seq_len
    q = [vocab.get(t, UNK_ID) for t in query_tokens]
    d = [vocab.get(t, UNK_ID) for t in doc_tokens]
    if len(q) > budget - 2:
        q = q[: budget - 2]
    keep = budget - 2 - len(q)
    d = d[:keep]
    ids = [CLS_ID] + q + [SEP_ID] + d
    ids.extend([PAD_ID] * (budget - len(ids)))
    out = np.array(ids, dtype=np.int64)
    if out.max(initial=0) >= cfg.vocab_size:
        raise DataError("token id exceeds configured vocab_size")
    return out


def expected_param_count(cfg: ScorerConfig) -> int:
    """Closed-form parameter count for a config; asserted in the tests."""
    d, ff = cfg.embed_dim, cfg.ff_dim
    per_layer = (
        4 * (d * d + d)  # q, k, v, and output projections with biases
        + 2 * (2 * d)  # two layer norms
        + (d * ff + ff)
        + (ff * d + d)
    )
    total = cfg.vocab_size * d + cfg.max_seq_len * d
    total += cfg.num_layers * per_layer
    total += 2 * d  # final layer norm
    total += cfg.num_features * cfg.feature_proj_dim + cfg.feature_proj_dim
    width = d + cfg.feature_proj_dim
    for out_width in cfg.mlp_dims:
        total += width * out_width + out_width
        width = out_width
    return total


class WideDeepScorer:
    """Parameter container plus the forward graph builder."""

    def __init__(self, cfg: ScorerConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: ScorerConfig, seed: int = 0) -> "WideDeepScorer":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5C0))))
        params: dict[str, np.ndarray] = {}

        def gauss(name: str, *shape: int) -> None:
            params[name] = rng.normal(0.0, 0.02, size=shape)

        def ones(name: str, *shape: int) -> None:
            params[name] = np.ones(shape)

        def zeros(name: str, *shape: int) -> None:
            params[name] = np.zeros(shape)

        d, ff = cfg.embed_dim, cfg.ff_dim
        gauss("embed/token", cfg.vocab_size, d)
        gauss("embed/pos", cfg.max_seq_len, d)
        for i in range(cfg.num_layers):
            p = f"layer{i}"
            ones(f"{p}/ln1/gamma", d)
            zeros(f"{p}/ln1/beta", d)
            for m in ("q", "k", "v", "o"):
                gauss(f"{p}/attn/w{m}", d, d)
                zeros(f"{p}/attn/b{m}", d)
            ones(f"{p}/ln2/gamma", d)
            zeros(f"{p}/ln2/beta", d)
            gauss(f"{p}/ff/w1", d, ff)
            zeros(f"{p}/ff/b1", ff)
            gauss(f"{p}/ff/w2", ff, d)
            zeros(f"{p}/ff/b2", d)
        ones("final_ln/gamma", d)
        zeros("final_ln/beta", d)
        gauss("feat/w", cfg.num_features, cfg.feature_proj_dim)
        zeros("feat/b", cfg.feature_proj_dim)
        width = d + cfg.feature_proj_dim
        for i, out_width in enumerate(cfg.mlp_dims):
            gauss(f"mlp{i}/w", width, out_width)
            zeros(f"mlp{i}/b", out_width)
            width = out_width
        return cls(cfg, params)

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def clone(self) -> "WideDeepScorer":
        return WideDeepScorer(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.isfinite(value).all():
                raise NumericError(f"non-finite parameters in {name}")

    # ------------------------------------------------------------------

    def forward(
        self,
        ids: np.ndarray,
        features: np.ndarray,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
        """Build the scoring graph for a batch.

        ``ids`` is (batch, seq_len) int64, ``features`` is (batch,
        num_features).  Returns the (batch,) score tensor and the leaf
        tensors keyed by parameter name for gradient collection.
        """
        ids = np.asarray(ids, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if ids.ndim != 2 or features.ndim != 2:
            raise DataError("forward expects batched ids and features")
        if ids.shape[0] != features.shape[0]:
            raise DataError("ids and features disagree on batch size")
        if ids.shape[1] > self.cfg.max_seq_len:
            raise DataError("sequence longer than max_seq_len")
        if features.shape[1] != self.cfg.num_features:
            raise DataError(
                f"expected {self.cfg.num_features} features, got {features.shape[1]}"
            )

        cfg = self.cfg
        leaves = {name: ad.Tensor(value) for name, value in self.params.items()}
        batch, seq_len = ids.shape
        heads, head_dim = cfg.num_heads, cfg.embed_dim // cfg.num_heads

        key_mask = (ids != PAD_ID).astype(np.float64)  # (B, L)
        attn_keep = key_mask[:, None, None, :]  # broadcast over heads and query rows
        attn_fill = (1.0 - attn_keep) * _MASK_FILL

        x = ad.add(
            ad.take(leaves["embed/token"], ids),
            ad.slice_(leaves["embed/pos"], slice(0, seq_len)).reshape(1, seq_len, cfg.embed_dim),
        )
        x = self._dropout(x, dropout_rng)

        for i in range(cfg.num_layers):
            p = f"layer{i}"
            h = ad.layer_norm(x, leaves[f"{p}/ln1/gamma"], leaves[f"{p}/ln1/beta"])

            def heads_view(t: ad.Tensor) -> ad.Tensor:
                return t.reshape(batch, seq_len, heads, head_dim).transpose((0, 2, 1, 3))

            q = heads_view(ad.add(ad.matmul(h, leaves[f"{p}/attn/wq"]), leaves[f"{p}/attn/bq"]))
            k = heads_view(ad.add(ad.matmul(h, leaves[f"{p}/attn/wk"]), leaves[f"{p}/attn/bk"]))
            v = heads_view(ad.add(ad.matmul(h, leaves[f"{p}/attn/wv"]), leaves[f"{p}/attn/bv"]))

            scores = ad.mul(ad.matmul(q, k.transpose((0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
            scores = ad.add(ad.mul(scores, attn_keep), attn_fill)
            attn = ad.softmax(scores, axis=-1)
            attn = self._dropout(attn, dropout_rng)
            ctx = ad.matmul(attn, v).transpose((0, 2, 1, 3)).reshape(batch, seq_len, cfg.embed_dim)
            ctx = ad.add(ad.matmul(ctx, leaves[f"{p}/attn/wo"]), leaves[f"{p}/attn/bo"])
            x = ad.add(x, self._dropout(ctx, dropout_rng))

            h2 = ad.layer_norm(x, leaves[f"{p}/ln2/gamma"], leaves[f"{p}/ln2/beta"])
            ffn = ad.relu(ad.add(ad.matmul(h2, leaves[f"{p}/ff/w1"]), leaves[f"{p}/ff/b1"]))
            ffn = ad.add(ad.matmul(ffn, leaves[f"{p}/ff/w2"]), leaves[f"{p}/ff/b2"])
            x = ad.add(x, self._dropout(ffn, dropout_rng))

        x = ad.layer_norm(x, leaves["final_ln/gamma"], leaves["final_ln/beta"])
        cls_vec = ad.slice_(x, (slice(None), 0, slice(None)))  # (B, D)

        feat = ad.relu(ad.add(ad.matmul(ad.constant(features), leaves["feat/w"]), leaves["feat/b"]))
        z = ad.concat([cls_vec, feat], axis=1)
        for i in range(len(cfg.mlp_dims)):
            z = ad.add(ad.matmul(z, leaves[f"mlp{i}/w"]), leaves[f"mlp{i}/b"])
            if i < len(cfg.mlp_dims) - 1:
                z = ad.relu(z)
        score = z.reshape(batch)
        return score, leaves

    def _dropout(self, x: ad.Tensor, rng: np.random.Generator | None) -> ad.Tensor:
        rate = self.cfg.dropout_rate
        if rate == 0.0 or rng is None:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return ad.mul(x, keep)

    def score(self, ids: np.ndarray, features: np.ndarray) -> np.ndarray:
        """Inference-only scores; validates that parameters are finite."""
        self.check_finite()
        out, _ = self.forward(ids, features)
        return out.value


def forward_backward(
    scorer: WideDeepScorer,
    ids: np.ndarray,
    features: np.ndarray,
    loss_fn: Callable[[ad.Tensor], ad.Tensor],
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """One exact gradient evaluation of ``loss_fn`` over a batch.

    ``loss_fn`` maps the (batch,) score tensor to a scalar tensor.  Returns
    the loss value and a gradient per parameter (zeros where a parameter is
    unused by the graph).
    """
    scores, leaves = scorer.forward(ids, features, dropout_rng)
    loss = loss_fn(scores)
    if loss.value.size != 1:
        raise DataError("loss_fn must return a scalar")
    if not np.isfinite(loss.value):
        raise NumericError("non-finite training loss")
    loss.backward()
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    return float(loss.value), grads


def grad_check(
    scorer: WideDeepScorer,
    ids: np.ndarray,
    features: np.ndarray,
    loss_fn: Callable[[ad.Tensor], ad.Tensor],
    eps: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``num_coords`` coordinates across all parameters.  The relative
    error of a coordinate uses a 1e-4 floor in the denominator so that
    near-zero gradient pairs compare on an absolute scale.
    """
    if eps <= 0:
        raise DataError("eps must be positive")
    _, grads = forward_backward(scorer, ids, features, loss_fn)
    names = sorted(scorer.params)
    sizes = np.array([scorer.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x6C))))
    flat_coords = rng.choice(total, size=min(num_coords, total), replace=False)

    def loss_at() -> float:
        out, _ = scorer.forward(ids, features)
        return float(loss_fn(out).value)

    worst = 0.0
    for flat in flat_coords:
        which = int(np.searchsorted(offsets, flat, side="right")) - 1
        name = names[which]
        index = np.unravel_index(int(flat - offsets[which]), scorer.params[name].shape)
        original = scorer.params[name][index]
        scorer.params[name][index] = original + eps
        hi = loss_at()
        scorer.params[name][index] = original - eps
        lo = loss_at()
        scorer.params[name][index] = original
        numeric = (hi - lo) / (2.0 * eps)
        analytic = grads[name][index]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, err)
    return worst
