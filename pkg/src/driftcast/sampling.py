"""Candidate weighting for mini-batch selection during online updates.

A scheme pairs one temporal rule (uniform, fixed window, linear decay, or
segmentation-driven) with one non-temporal rule (uniform, similarity to the
current input window, or rankings from cached errors / error dynamics).  The
two weight vectors are combined by elementwise product and renormalized, and
batches are drawn with replacement from the resulting categorical
distribution.

Error-based rules operate on a persistent evaluation subsample whose
per-candidate losses are refreshed once per simulated day; a short ring
buffer of those snapshots yields confidence (negated mean error) and
variability (population std of errors).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .profiles import mass

logger = logging.getLogger(__name__)

TEMPORAL_SCHEMES = ("uniform", "fixed", "decay", "segment")
NONTEMPORAL_SCHEMES = (
    "uniform",
    "similar",
    "high_error",
    "low_error",
    "high_confidence",
    "low_confidence",
    "high_variability",
    "low_variability",
)
DECAY_EPS = 1e-6
SIMILAR_EPS = 1e-6
_KEY_BASE = np.int64(1) << np.int64(40)


@dataclass(frozen=True)
class SchemeSpec:
    temporal: str
    nontemporal: str
    fixed_days: int | None = None

    def __post_init__(self) -> None:
        if self.temporal not in TEMPORAL_SCHEMES:
            raise ValueError(
                f"unknown temporal scheme {self.temporal!r}; valid: {TEMPORAL_SCHEMES}"
            )
        if self.nontemporal not in NONTEMPORAL_SCHEMES:
            raise ValueError(
                f"unknown non-temporal scheme {self.nontemporal!r}; "
                f"valid: {NONTEMPORAL_SCHEMES}"
            )
        if self.temporal == "fixed" and (self.fixed_days is None or self.fixed_days <= 0):
            raise ValueError("fixed temporal scheme needs fixed_days > 0")

    @property
    def label(self) -> str:
        t = f"fixed{self.fixed_days}" if self.temporal == "fixed" else self.temporal
        return f"{t}:{self.nontemporal}"


def parse_scheme(text: str) -> SchemeSpec:
    """Parse ``temporal:nontemporal`` strings such as ``segment:similar``."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ValueError(
            f"scheme must look like 'temporal:nontemporal', got {text!r}; "
            f"temporal one of {TEMPORAL_SCHEMES} (fixed as fixedN), "
            f"non-temporal one of {NONTEMPORAL_SCHEMES}"
        )
    t, nt = parts
    match = re.fullmatch(r"fixed(\d+)", t)
    if match:
        return SchemeSpec(temporal="fixed", nontemporal=nt, fixed_days=int(match.group(1)))
    return SchemeSpec(temporal=t, nontemporal=nt)


@dataclass(frozen=True)
class CandidateArray:
    """Vectorized (entity, anchor) pairs, sorted by (entity index, anchor)."""

    entity_idx: np.ndarray
    anchors: np.ndarray

    def __post_init__(self) -> None:
        assert len(self.entity_idx) == len(self.anchors)

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def keys(self) -> np.ndarray:
        return self.entity_idx.astype(np.int64) * _KEY_BASE + self.anchors

    def take(self, idx: np.ndarray) -> "CandidateArray":
        return CandidateArray(self.entity_idx[idx], self.anchors[idx])


@dataclass(frozen=True)
class CandidateWeights:
    candidates: CandidateArray
    weights: np.ndarray

    def __post_init__(self) -> None:
        assert len(self.weights) == len(self.candidates)
        assert np.all(self.weights >= 0)
        assert abs(self.weights.sum() - 1.0) <= 1e-9


def uniform_weights(candidates: CandidateArray) -> CandidateWeights:
    n = len(candidates)
    return CandidateWeights(candidates, np.full(n, 1.0 / n))


def _normalized(candidates: CandidateArray, raw: np.ndarray) -> CandidateWeights:
    total = raw.sum()
    if total <= 0:
        logger.warning("all-zero weights, falling back to uniform")
        return uniform_weights(candidates)
    return CandidateWeights(candidates, raw / total)


# --------------------------------------------------------------------------
# Temporal rules
# --------------------------------------------------------------------------


def temporal_weights(
    spec: SchemeSpec,
    candidates: CandidateArray,
    now_hour: int,
    curves: dict[int, np.ndarray] | None = None,
    lookback: int | None = None,
) -> CandidateWeights:
    """Weight candidates by their temporal location.

    ``curves`` maps entity index to a segmentation probability curve indexed
    by subsequence start (anchor minus lookback); it is required for the
    ``segment`` rule.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to weight")
    n = len(candidates)
    if spec.temporal == "uniform":
        return uniform_weights(candidates)
    age_days = (now_hour - candidates.anchors) / 24.0
    if spec.temporal == "fixed":
        inside = age_days <= spec.fixed_days
        if not inside.any():
            logger.warning(
                "fixed window of %d days holds no candidates, using uniform",
                spec.fixed_days,
            )
            return uniform_weights(candidates)
        return _normalized(candidates, inside.astype(np.float64))
    if spec.temporal == "decay":
        oldest = age_days.max()
        raw = np.maximum(DECAY_EPS, 1.0 - age_days / (oldest + 1.0))
        return _normalized(candidates, raw)
    # segment
    if curves is None or lookback is None:
        raise ValueError("segment weighting needs per-entity curves and the lookback")
    raw = np.empty(n)
    for e in np.unique(candidates.entity_idx):
        sel = candidates.entity_idx == e
        positions = candidates.anchors[sel] - lookback
        raw[sel] = curves[int(e)][positions]
    return _normalized(candidates, raw)


# --------------------------------------------------------------------------
# Error cache and dynamics history
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorCache:
    """Most recent per-candidate loss over a persistent tracked subsample."""

    candidates: CandidateArray
    errors: np.ndarray
    anchor_cutoff: int
    day: int

    def __post_init__(self) -> None:
        assert np.all(self.errors >= 0)


@dataclass(frozen=True)
class DynamicsHistory:
    """Ring buffer of the last ``capacity`` daily error snapshots per candidate."""

    capacity: int
    snapshots: np.ndarray  # (n_tracked, capacity); column 0 is the newest
    counts: np.ndarray     # valid snapshots per candidate

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        """(confidence, variability); candidates with <2 snapshots get the median."""
        n, k = self.snapshots.shape
        cols = np.arange(k)
        valid = cols[None, :] < self.counts[:, None]
        denom = np.maximum(self.counts, 1)
        mean = (self.snapshots * valid).sum(axis=1) / denom
        sq = (self.snapshots**2 * valid).sum(axis=1) / denom
        confidence = -mean
        variability = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        seasoned = self.counts >= 2
        if seasoned.any() and not seasoned.all():
            confidence[~seasoned] = np.median(confidence[seasoned])
            variability[~seasoned] = np.median(variability[seasoned])
        return confidence, variability


def refresh_error_cache(
    loss_fn,
    candidates: CandidateArray,
    cache: ErrorCache | None,
    dynamics: DynamicsHistory | None,
    subsample_size: int,
    rng: np.random.Generator,
    day: int,
    capacity: int = 10,
) -> tuple[ErrorCache, DynamicsHistory]:
    """Re-evaluate the tracked subsample under the current model.

    The tracked set persists across refreshes; newly labeled candidates join
    it, and if the union exceeds ``subsample_size`` a uniform subsample is
    kept.  ``loss_fn`` maps a CandidateArray to per-candidate losses.
    """
    if cache is None:
        n = len(candidates)
        if n <= subsample_size:
            tracked = candidates
        else:
            keep = np.sort(rng.choice(n, size=subsample_size, replace=False))
            tracked = candidates.take(keep)
        old_keys = np.empty(0, dtype=np.int64)
    else:
        fresh = candidates.anchors > cache.anchor_cutoff
        merged_entity = np.concatenate(
            [cache.candidates.entity_idx, candidates.entity_idx[fresh]]
        )
        merged_anchor = np.concatenate([cache.candidates.anchors, candidates.anchors[fresh]])
        order = np.lexsort((merged_anchor, merged_entity))
        tracked = CandidateArray(merged_entity[order], merged_anchor[order])
        if len(tracked) > subsample_size:
            keep = np.sort(rng.choice(len(tracked), size=subsample_size, replace=False))
            tracked = tracked.take(keep)
        old_keys = cache.candidates.keys

    errors = np.asarray(loss_fn(tracked), dtype=np.float64)
    assert errors.shape == (len(tracked),)

    n = len(tracked)
    snapshots = np.zeros((n, capacity))
    counts = np.zeros(n, dtype=np.int64)
    if dynamics is not None and len(old_keys):
        pos = np.searchsorted(old_keys, tracked.keys)
        pos = np.clip(pos, 0, len(old_keys) - 1)
        hit = old_keys[pos] == tracked.keys
        snapshots[hit] = dynamics.snapshots[pos[hit]]
        counts[hit] = dynamics.counts[pos[hit]]
    snapshots[:, 1:] = snapshots[:, :-1]
    snapshots[:, 0] = errors
    counts = np.minimum(counts + 1, capacity)

    new_cache = ErrorCache(
        candidates=tracked,
        errors=errors,
        anchor_cutoff=int(candidates.anchors.max()),
        day=day,
    )
    return new_cache, DynamicsHistory(capacity=capacity, snapshots=snapshots, counts=counts)


# --------------------------------------------------------------------------
# Non-temporal rules
# --------------------------------------------------------------------------


def _rank_weights_over(
    candidates: CandidateArray,
    tracked: CandidateArray,
    stat: np.ndarray,
) -> CandidateWeights:
    """Linear-rank weights by ascending ``stat`` over the tracked subset.

    The most favored tracked candidate (largest stat) gets rank n; candidates
    outside the tracked set get zero weight.  Ties break by ascending
    (entity index, anchor).
    """
    cand_keys = candidates.keys
    pos = np.searchsorted(cand_keys, tracked.keys)
    pos = np.clip(pos, 0, len(cand_keys) - 1)
    hit = cand_keys[pos] == tracked.keys
    order = np.lexsort((tracked.anchors[hit], tracked.entity_idx[hit], stat[hit]))
    ranks = np.empty(hit.sum())
    ranks[order] = np.arange(1, hit.sum() + 1)
    raw = np.zeros(len(candidates))
    raw[pos[hit]] = ranks
    return _normalized(candidates, raw)


def nontemporal_weights(
    spec: SchemeSpec,
    candidates: CandidateArray,
    cache: ErrorCache | None = None,
    dynamics: DynamicsHistory | None = None,
    features: dict[int, np.ndarray] | None = None,
    queries: dict[int, np.ndarray] | None = None,
    lookback: int | None = None,
) -> CandidateWeights:
    """Weight candidates by similarity, cached error, or error dynamics."""
    if len(candidates) == 0:
        raise ValueError("no candidates to weight")
    kind = spec.nontemporal
    if kind == "uniform":
        return uniform_weights(candidates)

    if kind == "similar":
        if features is None or queries is None or lookback is None:
            raise ValueError("similar weighting needs features, queries and lookback")
        raw = np.empty(len(candidates))
        for e in np.unique(candidates.entity_idx):
            sel = candidates.entity_idx == e
            feats = features[int(e)]
            query = queries[int(e)]
            dims_used = 0
            dist = np.zeros(feats.shape[0] - lookback + 1)
            for j in range(feats.shape[1]):
                q = query[:, j]
                if q.std() == 0.0:
                    logger.warning("similar: query channel %d is constant, skipped", j)
                    continue
                dist += mass(q, feats[:, j]).distances
                dims_used += 1
            if dims_used:
                dist /= dims_used
            positions = candidates.anchors[sel] - lookback
            d_c = dist[positions]
            raw[sel] = d_c.max() - d_c + SIMILAR_EPS
        return _normalized(candidates, raw)

    if cache is None or len(cache.candidates) == 0:
        logger.warning("%s weighting has no error cache yet, using uniform", kind)
        return uniform_weights(candidates)
    if kind == "high_error":
        return _rank_weights_over(candidates, cache.candidates, cache.errors)
    if kind == "low_error":
        return _rank_weights_over(candidates, cache.candidates, -cache.errors)

    if dynamics is None or not dynamics.counts.any():
        logger.warning("%s weighting has no dynamics history yet, using uniform", kind)
        return uniform_weights(candidates)
    confidence, variability = dynamics.stats()
    stat = {
        "high_confidence": confidence,
        "low_confidence": -confidence,
        "high_variability": variability,
        "low_variability": -variability,
    }[kind]
    return _rank_weights_over(candidates, cache.candidates, stat)


# --------------------------------------------------------------------------
# Combination and batch drawing
# --------------------------------------------------------------------------


def combine(w1: CandidateWeights, w2: CandidateWeights) -> CandidateWeights:
    """Elementwise product of two weightings over the same candidate list."""
    if not (
        np.array_equal(w1.candidates.entity_idx, w2.candidates.entity_idx)
        and np.array_equal(w1.candidates.anchors, w2.candidates.anchors)
    ):
        raise ValueError("cannot combine weightings over different candidate lists")
    product = w1.weights * w2.weights
    total = product.sum()
    if total <= 0:
        logger.warning("combined weights have empty support, falling back to uniform")
        return uniform_weights(w1.candidates)
    return CandidateWeights(w1.candidates, product / total)


def sample_batch(
    w: CandidateWeights, batch_size: int, rng: np.random.Generator
) -> CandidateArray:
    """``batch_size`` independent draws with replacement."""
    idx = rng.choice(len(w.candidates), size=batch_size, replace=True, p=w.weights)
    return w.candidates.take(idx)
