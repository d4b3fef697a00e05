"""Click sessions, log filtering, a position-bias click simulator, and
propensity estimation.

The simulator follows the position-based examination model: a shown document
is clicked with probability ``examination(position) * attractiveness(grade)``
where examination decays as ``(1/position)**eta``.  Propensity weights for
debiased training come either from observed per-position click ratios raised
to a damping power, or from a jointly trained position model (see the
pretraining module for the latter's updates).
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

MAX_LOGGED_POSITIONS = 10


@dataclass(frozen=True)
class ClickSession:
    """One logged impression: a ranked list and its click flags.

    ``impression_count`` lets aggregated logs count one line as many
    identical sessions.
    """

    query_id: str
    ranked_doc_ids: tuple[str, ...]
    clicks: tuple[bool, ...]
    impression_count: int = 1

    def __post_init__(self) -> None:
        if len(self.ranked_doc_ids) != len(self.clicks):
            raise DataError("ranked_doc_ids and clicks must have equal length")
        if not self.ranked_doc_ids:
            raise DataError("a session must show at least one document")
        if len(self.ranked_doc_ids) > MAX_LOGGED_POSITIONS:
            raise DataError(f"sessions log at most {MAX_LOGGED_POSITIONS} positions")
        if len(set(self.ranked_doc_ids)) != len(self.ranked_doc_ids):
            raise DataError("a session may not show the same document twice")
        if self.impression_count < 1:
            raise DataError("impression_count must be at least 1")

    def num_clicks(self) -> int:
        return sum(self.clicks)


def filter_sessions(sessions: Iterable[ClickSession]) -> list[ClickSession]:
    """Apply the training-log hygiene rules.

    Queries whose candidate pool (union of shown documents over the whole
    input) has fewer than 10 documents are dropped entirely; among the rest,
    sessions without any click are dropped.  Input order is preserved.
    """
    sessions = list(sessions)
    pools: dict[str, set[str]] = defaultdict(set)
    for session in sessions:
        pools[session.query_id].update(session.ranked_doc_ids)
    return [
        s
        for s in sessions
        if len(pools[s.query_id]) >= MAX_LOGGED_POSITIONS and s.num_clicks() > 0
    ]


@dataclass(frozen=True)
class ClickSimConfig:
    eta: float = 1.0
    epsilon_noise: float = 0.0
    shuffle_top10: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise DataError("eta must be non-negative")
        if not 0.0 <= self.epsilon_noise < 1.0:
            raise DataError("epsilon_noise must lie in [0, 1)")


def examination_probability(position: int, eta: float) -> float:
    """Chance that a user examines the 1-based ``position``."""
    if position < 1:
        raise DataError("positions are 1-based")
    return (1.0 / position) ** eta


def attractiveness(grade: int, epsilon_noise: float) -> float:
    """Click probability given examination, from the 0..4 grade."""
    if not 0 <= grade <= 4:
        raise DataError("grades lie in 0..4")
    return epsilon_noise + (1.0 - epsilon_noise) * (2.0**grade - 1.0) / 15.0


def _session_rng(seed: int, index: int) -> np.random.Generator:
    # Children of the root seed, one stream per session, so simulation is
    # order-independent and reproducible.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def simulate_clicks(
    true_relevance: Mapping[tuple[str, str], int],
    query_id: str,
    ranked_doc_ids: Sequence[str],
    cfg: ClickSimConfig,
    session_index: int = 0,
) -> ClickSession:
    """Simulate one session over ``ranked_doc_ids`` shown for ``query_id``.

    Unknown (query, doc) pairs count as grade 0.  With ``shuffle_top10`` the
    shown order is a uniform random permutation of the given list, which
    breaks any correlation between position and relevance.
    """
    rng = _session_rng(cfg.seed, session_index)
    shown = list(ranked_doc_ids[:MAX_LOGGED_POSITIONS])
    if cfg.shuffle_top10:
        shown = [shown[i] for i in rng.permutation(len(shown))]
    draws = rng.random(len(shown))
    clicks = []
    for i, doc_id in enumerate(shown, start=1):
        grade = true_relevance.get((query_id, doc_id), 0)
        p = examination_probability(i, cfg.eta) * attractiveness(grade, cfg.epsilon_noise)
        clicks.append(bool(draws[i - 1] < p))
    return ClickSession(query_id, tuple(shown), tuple(clicks))


def simulate_log(
    true_relevance: Mapping[tuple[str, str], int],
    rankings: Sequence[tuple[str, Sequence[str]]],
    cfg: ClickSimConfig,
) -> list[ClickSession]:
    """One session per (query_id, ranking) entry, independently seeded."""
    return [
        simulate_clicks(true_relevance, query_id, docs, cfg, session_index=i)
        for i, (query_id, docs) in enumerate(rankings)
    ]


def estimate_click_ratios(sessions: Iterable[ClickSession]) -> tuple[float, ...]:
    """Observed click rate per position 1..10, impression-weighted."""
    shown = np.zeros(MAX_LOGGED_POSITIONS)
    clicked = np.zeros(MAX_LOGGED_POSITIONS)
    for session in sessions:
        w = session.impression_count
        for i, click in enumerate(session.clicks):
            shown[i] += w
            if click:
                clicked[i] += w
    if (shown == 0).any():
        missing = int(np.argmax(shown == 0)) + 1
        raise DataError(f"position {missing} was never observed; cannot estimate click ratios")
    ratios = clicked / shown
    if ratios[0] == 0:
        raise DataError("degenerate log: no clicks at position 1")
    return tuple(float(r) for r in ratios)


@dataclass
class PropensityModel:
    """Per-position inverse propensity weights for debiased training.

    ``click_ratio`` models hold a fixed weight per position; ``dla`` models
    hold trainable examination logits and derive weights from their sigmoid,
    normalized so position 1 always has weight 1.
    """

    kind: str
    weights: tuple[float, ...] | None = None
    position_logits: np.ndarray | None = None
    alpha: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in ("click_ratio", "dla"):
            raise DataError(f"unknown propensity model kind {self.kind!r}")
        if self.kind == "click_ratio":
            if self.weights is None or len(self.weights) != MAX_LOGGED_POSITIONS:
                raise DataError("click_ratio models need one weight per logged position")
            if not np.isfinite(self.weights).all():
                raise DataError("propensity weights must be finite")
            if abs(self.weights[0] - 1.0) > 1e-12:
                raise DataError("position 1 weight must be 1")
        else:
            if self.position_logits is None or len(self.position_logits) != MAX_LOGGED_POSITIONS:
                raise DataError("dla models need one logit per logged position")
            self.position_logits = np.asarray(self.position_logits, dtype=np.float64)

    def position_weights(self) -> np.ndarray:
        if self.kind == "click_ratio":
            return np.asarray(self.weights, dtype=np.float64)
        sig = 1.0 / (1.0 + np.exp(-self.position_logits))
        return sig[0] / sig


def click_ratio_propensity(click_ratios: Sequence[float], alpha: float = 0.25) -> PropensityModel:
    """Power-damped inverse click-ratio weights: ``(cr_1 / cr_i) ** alpha``."""
    if len(click_ratios) != MAX_LOGGED_POSITIONS:
        raise DataError("need exactly one click ratio per logged position")
    if alpha < 0:
        raise DataError("alpha must be non-negative")
    cr = np.asarray(click_ratios, dtype=np.float64)
    if (cr <= 0).any() or not np.isfinite(cr).all():
        raise DataError("click ratios must be positive and finite")
    weights = (cr[0] / cr) ** alpha
    if (weights < 1.0).any():
        logger.warning(
            "click ratio above position 1 detected; weights below 1 suggest a noisy log"
        )
    return PropensityModel(kind="click_ratio", weights=tuple(float(w) for w in weights), alpha=alpha)


def uniform_propensity() -> PropensityModel:
    """Weight 1 everywhere; training with it applies no debiasing."""
    return PropensityModel(kind="click_ratio", weights=(1.0,) * MAX_LOGGED_POSITIONS, alpha=0.0)


def dla_propensity() -> PropensityModel:
    """Fresh position model for joint training: all logits zero."""
    return PropensityModel(kind="dla", position_logits=np.zeros(MAX_LOGGED_POSITIONS))


# ---------------------------------------------------------------------------
# Log file: query_id TAB comma-joined doc_ids TAB comma-joined 0/1 flags.
# ---------------------------------------------------------------------------


def write_click_log(path: str | Path, sessions: Iterable[ClickSession]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for session in sessions:
            docs = ",".join(session.ranked_doc_ids)
            flags = ",".join("1" if c else "0" for c in session.clicks)
            for _ in range(session.impression_count):
                fh.write(f"{session.query_id}\t{docs}\t{flags}\n")


def read_click_log(path: str | Path) -> list[ClickSession]:
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            docs = tuple(parts[1].split(","))
            flags = parts[2].split(",")
            if any(f not in ("0", "1") for f in flags):
                raise DataError(f"{path}:{lineno}: click flags must be 0 or 1")
            sessions.append(ClickSession(parts[0], docs, tuple(f == "1" for f in flags)))
    if not sessions:
        raise DataError(f"{path}: click log is empty")
    return sessions
