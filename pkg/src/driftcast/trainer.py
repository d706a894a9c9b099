"""Offline training, the daily online update loop, and checkpointing.

The simulation walks one day at a time.  Each day the labeled horizon
advances (metric values become observable only after the configured delay),
scheme-specific weighting state is refreshed, the model takes a fixed number
of weighted mini-batch steps, and a multi-horizon prediction anchored at the
day's midnight is emitted for every entity.  Predictions are a pure function
of features dated up to the anchor and labels dated before the delay cutoff.

Checkpoints serialize parameters, optimizer moments, RNG states, sampling
caches and the prediction log; resuming from a checkpoint reproduces an
uninterrupted run bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import sampling
from .data import HOURS_PER_DAY, Dataset, HorizonConfig, anchor_bounds
from .nnkernel import AdamState, adam_step
from .profiles import fluss_probability
from .sampling import CandidateArray, SchemeSpec, parse_scheme

logger = logging.getLogger(__name__)

LOSS_EVAL_CHUNK = 2048

CKPT_MAGIC = b"DRIFTCAST_CKPT\n"
CKPT_VERSION = 1


class CheckpointVersionError(Exception):
    """File is not a checkpoint or was written by an incompatible version."""


class CheckpointIntegrityError(Exception):
    """Checkpoint bytes are truncated or corrupted."""


@dataclass(frozen=True)
class TrainConfig:
    offline_epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 1024
    n_iter: int = 100
    seed: int = 0
    scheme: str = "uniform:uniform"
    offline_days: int = 365
    error_subsample: int = 10000
    dynamics_window: int = 10
    horizon: HorizonConfig = HorizonConfig()

    def __post_init__(self) -> None:
        for name in ("offline_epochs", "batch_size", "n_iter", "offline_days",
                     "error_subsample", "dynamics_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.scheme != "frozen":
            parse_scheme(self.scheme)

    @property
    def label_delay_days(self) -> int:
        return self.horizon.label_delay_days

    def to_dict(self) -> dict:
        return {
            "offline_epochs": self.offline_epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "n_iter": self.n_iter,
            "seed": self.seed,
            "scheme": self.scheme,
            "offline_days": self.offline_days,
            "error_subsample": self.error_subsample,
            "dynamics_window": self.dynamics_window,
            "horizon": {
                "lookback": self.horizon.lookback,
                "backward": self.horizon.backward,
                "forward": self.horizon.forward,
                "label_delay_days": self.horizon.label_delay_days,
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        payload["horizon"] = HorizonConfig(**payload["horizon"])
        return cls(**payload)


class PredictionLog:
    """Per-day, per-entity multi-horizon predictions in emission order."""

    def __init__(self) -> None:
        self.days: list[int] = []
        self.entity_idx: list[int] = []
        self.preds: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.days)

    def append_day(self, day: int, entity_indices, m_hat: np.ndarray) -> None:
        for row, eidx in enumerate(entity_indices):
            self.days.append(day)
            self.entity_idx.append(int(eidx))
            self.preds.append(m_hat[row].copy())

    def write_csv(
        self,
        path: str | Path,
        dataset: Dataset,
        horizon: HorizonConfig,
        labeled_end: int,
    ) -> None:
        """Write rows day,entity_id,offset,predicted,actual_when_available.

        Actual values are filled only for hours at or before ``labeled_end``,
        i.e. only labels that were observable by the end of the simulation.
        """
        lines = ["day,entity_id,offset,predicted,actual_when_available"]
        for day, eidx, pred in zip(self.days, self.entity_idx, self.preds):
            record = dataset.records[eidx]
            anchor = day * HOURS_PER_DAY
            for pos, offset in enumerate(range(-horizon.backward, horizon.forward)):
                hour = anchor + offset
                actual = ""
                if hour < labeled_end:
                    actual = repr(float(record.metric[hour]))
                lines.append(
                    f"{day},{record.entity_id},{offset},{float(pred[pos])!r},{actual}"
                )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class DayPrediction:
    day: int
    entity_ids: list[str]
    m_hat: np.ndarray  # (n_entities_emitted, horizon)


@dataclass
class SimulationState:
    current_day: int
    params: dict[str, np.ndarray]
    adam: dict[str, AdamState]
    gamma: float
    rng_batches: np.random.Generator
    rng_subsample: np.random.Generator
    cache: sampling.ErrorCache | None = None
    dynamics: sampling.DynamicsHistory | None = None
    curves: dict[int, np.ndarray] = field(default_factory=dict)
    log: PredictionLog = field(default_factory=PredictionLog)
    examples_consumed: int = 0
    final_train_loss: float | None = None


# --------------------------------------------------------------------------
# Dataset indexing and batch assembly
# --------------------------------------------------------------------------


class DatasetIndex:
    """Strided views over every record for fast window gathering."""

    def __init__(self, dataset: Dataset, horizon: HorizonConfig):
        self.dataset = dataset
        self.horizon = horizon
        swv = np.lib.stride_tricks.sliding_window_view
        self.feat_views = [
            swv(r.features, horizon.lookback, axis=0) for r in dataset.records
        ]
        self.target_views = [swv(r.metric, horizon.horizon) for r in dataset.records]

    def gather(self, cands: CandidateArray, with_targets: bool = True):
        n = len(cands)
        h = self.horizon
        X = np.empty((n, h.lookback, self.dataset.n_features))
        I = np.empty((n, self.dataset.interaction_dim))
        Y = np.empty((n, h.horizon)) if with_targets else None
        for e in np.unique(cands.entity_idx):
            sel = cands.entity_idx == e
            anchors = cands.anchors[sel]
            X[sel] = self.feat_views[e][anchors - h.lookback].transpose(0, 2, 1)
            I[sel] = self.dataset.records[e].interactions[anchors // HOURS_PER_DAY]
            if with_targets:
                Y[sel] = self.target_views[e][anchors - h.backward]
        return X, I, Y


def build_candidates(dataset: Dataset, labeled_end: int, horizon: HorizonConfig) -> CandidateArray:
    """All feasible (entity, anchor) pairs for the labeled span, in order."""
    lo, hi = anchor_bounds(labeled_end, horizon)
    entity_parts, anchor_parts = [], []
    for idx in range(len(dataset.records)):
        if hi < lo:
            continue
        anchors = np.arange(lo, hi + 1, dtype=np.int64)
        entity_parts.append(np.full(len(anchors), idx, dtype=np.int32))
        anchor_parts.append(anchors)
    if not entity_parts:
        return CandidateArray(np.empty(0, dtype=np.int32), np.empty(0, dtype=np.int64))
    return CandidateArray(np.concatenate(entity_parts), np.concatenate(anchor_parts))


def _rng_streams(seed: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.default_rng(c) for c in children]


def _auto_gamma(dataset: Dataset, cands: CandidateArray, horizon: HorizonConfig) -> float:
    """Mean per-window population variance of the training targets."""
    h = horizon.horizon
    total, count = 0.0, 0
    for e in np.unique(cands.entity_idx):
        metric = dataset.records[e].metric
        csum = np.concatenate(([0.0], np.cumsum(metric)))
        csq = np.concatenate(([0.0], np.cumsum(metric * metric)))
        starts = cands.anchors[cands.entity_idx == e] - horizon.backward
        mean = (csum[starts + h] - csum[starts]) / h
        var = (csq[starts + h] - csq[starts]) / h - mean * mean
        total += float(np.maximum(var, 0.0).sum())
        count += len(starts)
    return total / count if count else 1.0


def _apply_updates(state: SimulationState, grads: dict[str, np.ndarray]) -> None:
    for name in state.params:
        state.params[name], state.adam[name] = adam_step(
            state.params[name], grads[name], state.adam[name]
        )


def _candidate_losses(
    state: SimulationState,
    index: DatasetIndex,
    model_cfg: model_mod.ModelConfig,
    cands: CandidateArray,
) -> np.ndarray:
    out = np.empty(len(cands))
    for lo in range(0, len(cands), LOSS_EVAL_CHUNK):
        chunk = cands.take(np.arange(lo, min(lo + LOSS_EVAL_CHUNK, len(cands))))
        X, I, Y = index.gather(chunk)
        out[lo : lo + len(chunk.anchors)] = model_mod.batch_losses(
            state.params, model_cfg, X, I, Y, state.gamma
        )
    return out


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def train_offline(
    dataset: Dataset,
    model_cfg: model_mod.ModelConfig,
    train_cfg: TrainConfig,
) -> SimulationState:
    """Shuffled mini-batch training over the labeled part of the offline span."""
    horizon = train_cfg.horizon
    labeled_end = (train_cfg.offline_days - train_cfg.label_delay_days) * HOURS_PER_DAY
    cands = build_candidates(dataset, labeled_end, horizon)
    if len(cands) == 0:
        raise ValueError(
            f"no feasible training candidates in the offline span "
            f"(labeled through hour {labeled_end})"
        )
    rng_init, rng_shuffle, rng_batches, rng_subsample = _rng_streams(train_cfg.seed)

    if model_cfg.variant == "proposed" and model_cfg.shape_loss_weight == "auto":
        gamma = _auto_gamma(dataset, cands, horizon)
    elif model_cfg.variant == "proposed":
        gamma = float(model_cfg.shape_loss_weight)
    else:
        gamma = 0.0

    params = model_mod.init_params(model_cfg, rng_init)
    adam = {
        name: AdamState.zeros_like(p, train_cfg.learning_rate)
        for name, p in params.items()
    }
    state = SimulationState(
        current_day=train_cfg.offline_days,
        params=params,
        adam=adam,
        gamma=gamma,
        rng_batches=rng_batches,
        rng_subsample=rng_subsample,
    )
    index = DatasetIndex(dataset, horizon)
    n = len(cands)
    for epoch in range(train_cfg.offline_epochs):
        perm = rng_shuffle.permutation(n)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, n, train_cfg.batch_size):
            batch = cands.take(perm[lo : lo + train_cfg.batch_size])
            X, I, Y = index.gather(batch)
            loss, grads = model_mod.batch_loss_and_grads(
                state.params, model_cfg, X, I, Y, state.gamma
            )
            _apply_updates(state, grads)
            epoch_loss += loss
            batches += 1
        state.final_train_loss = epoch_loss / batches
        logger.info("offline epoch %d/%d loss %.6f",
                    epoch + 1, train_cfg.offline_epochs, state.final_train_loss)
    return state


def _scheme_needs(spec: SchemeSpec) -> tuple[bool, bool, bool]:
    needs_curves = spec.temporal == "segment"
    needs_error = spec.nontemporal in (
        "high_error", "low_error",
        "high_confidence", "low_confidence",
        "high_variability", "low_variability",
    )
    needs_similar = spec.nontemporal == "similar"
    return needs_curves, needs_error, needs_similar


def online_step(
    state: SimulationState,
    dataset: Dataset,
    model_cfg: model_mod.ModelConfig,
    train_cfg: TrainConfig,
    index: DatasetIndex | None = None,
    curve_cache: dict | None = None,
) -> DayPrediction:
    """Advance the simulation by one day and emit the day's predictions."""
    if index is None:
        index = DatasetIndex(dataset, train_cfg.horizon)
    horizon = train_cfg.horizon
    day = state.current_day
    labeled_end = max(0, (day - train_cfg.label_delay_days) * HOURS_PER_DAY)
    frozen = train_cfg.scheme == "frozen"

    if not frozen:
        cands = build_candidates(dataset, labeled_end, horizon)
        if len(cands) == 0:
            logger.warning("day %d: no labeled candidates, skipping update", day)
        else:
            spec = parse_scheme(train_cfg.scheme)
            needs_curves, needs_error, needs_similar = _scheme_needs(spec)
            if needs_curves:
                for eidx, record in enumerate(dataset.records):
                    key = (record.entity_id, labeled_end, horizon.lookback)
                    if curve_cache is not None and key in curve_cache:
                        state.curves[eidx] = curve_cache[key]
                        continue
                    curve = fluss_probability(
                        record.features[:labeled_end], horizon.lookback
                    ).p
                    state.curves[eidx] = curve
                    if curve_cache is not None:
                        curve_cache[key] = curve
            if needs_error:
                state.cache, state.dynamics = sampling.refresh_error_cache(
                    lambda cc: _candidate_losses(state, index, model_cfg, cc),
                    cands,
                    state.cache,
                    state.dynamics,
                    train_cfg.error_subsample,
                    state.rng_subsample,
                    day,
                    train_cfg.dynamics_window,
                )
            features = queries = None
            if needs_similar:
                now = day * HOURS_PER_DAY
                features = {
                    e: r.features[:labeled_end] for e, r in enumerate(dataset.records)
                }
                queries = {
                    e: r.features[now - horizon.lookback : now]
                    for e, r in enumerate(dataset.records)
                }
            w_t = sampling.temporal_weights(
                spec, cands, day * HOURS_PER_DAY, state.curves, horizon.lookback
            )
            w_nt = sampling.nontemporal_weights(
                spec, cands, state.cache, state.dynamics,
                features, queries, horizon.lookback,
            )
            weights = sampling.combine(w_t, w_nt)
            for _ in range(train_cfg.n_iter):
                batch = sampling.sample_batch(
                    weights, train_cfg.batch_size, state.rng_batches
                )
                X, I, Y = index.gather(batch)
                _, grads = model_mod.batch_loss_and_grads(
                    state.params, model_cfg, X, I, Y, state.gamma
                )
                _apply_updates(state, grads)
                state.examples_consumed += train_cfg.batch_size

    anchor = day * HOURS_PER_DAY
    emitted_idx = []
    for eidx in range(len(dataset.records)):
        if anchor - horizon.lookback < 0 or anchor > dataset.hours or day >= dataset.days:
            logger.warning(
                "day %d: entity %s lacks feature history, skipped",
                day, dataset.records[eidx].entity_id,
            )
            continue
        emitted_idx.append(eidx)
    cand = CandidateArray(
        np.array(emitted_idx, dtype=np.int32),
        np.full(len(emitted_idx), anchor, dtype=np.int64),
    )
    X, I, _ = index.gather(cand, with_targets=False)
    m_hat = model_mod.batch_predict(state.params, model_cfg, X, I)
    state.log.append_day(day, emitted_idx, m_hat)
    state.current_day = day + 1
    return DayPrediction(
        day=day,
        entity_ids=[dataset.records[e].entity_id for e in emitted_idx],
        m_hat=m_hat,
    )


def clone_for_online(state: SimulationState, seed: int) -> SimulationState:
    """Fresh online state from trained parameters, as if just trained offline."""
    _, _, rng_batches, rng_subsample = _rng_streams(seed)
    return SimulationState(
        current_day=state.current_day,
        params={k: v.copy() for k, v in state.params.items()},
        adam={
            k: replace(s, first_moment=s.first_moment.copy(),
                       second_moment=s.second_moment.copy())
            for k, s in state.adam.items()
        },
        gamma=state.gamma,
        rng_batches=rng_batches,
        rng_subsample=rng_subsample,
        final_train_loss=state.final_train_loss,
    )


def run_simulation(
    dataset: Dataset,
    model_cfg: model_mod.ModelConfig,
    train_cfg: TrainConfig,
    n_days: int,
    offline_state: SimulationState | None = None,
    curve_cache: dict | None = None,
) -> tuple[PredictionLog, SimulationState]:
    """Offline training followed by ``n_days`` of daily online steps."""
    if train_cfg.offline_days + n_days > dataset.days:
        raise ValueError(
            f"simulation needs {train_cfg.offline_days}+{n_days} days, "
            f"dataset spans {dataset.days}"
        )
    if offline_state is None:
        state = train_offline(dataset, model_cfg, train_cfg)
    else:
        if offline_state.current_day != train_cfg.offline_days:
            raise ValueError("offline state does not match train_cfg.offline_days")
        state = clone_for_online(offline_state, train_cfg.seed)
    index = DatasetIndex(dataset, train_cfg.horizon)
    for _ in range(n_days):
        online_step(state, dataset, model_cfg, train_cfg, index, curve_cache)
    return state.log, state


# --------------------------------------------------------------------------
# Checkpointing
# --------------------------------------------------------------------------


def _pack_array(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def save_checkpoint(
    state: SimulationState,
    path: str | Path,
    model_cfg: model_mod.ModelConfig,
    train_cfg: TrainConfig,
) -> None:
    """Serialize the full simulation state; the round trip is bitwise exact."""
    params = state.params
    header = {
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "current_day": state.current_day,
        "gamma": state.gamma,
        "examples_consumed": state.examples_consumed,
        "final_train_loss": state.final_train_loss,
        "params": [[name, list(p.shape)] for name, p in params.items()],
        "adam_steps": {name: s.step_count for name, s in state.adam.items()},
        "rng_batches": state.rng_batches.bit_generator.state,
        "rng_subsample": state.rng_subsample.bit_generator.state,
        "cache": None
        if state.cache is None
        else {
            "n": len(state.cache.candidates),
            "anchor_cutoff": state.cache.anchor_cutoff,
            "day": state.cache.day,
        },
        "dynamics": None
        if state.dynamics is None
        else {"capacity": state.dynamics.capacity, "n": len(state.dynamics.counts)},
        "curves": sorted((int(e), len(c)) for e, c in state.curves.items()),
        "log_rows": len(state.log),
        "horizon_len": train_cfg.horizon.horizon,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += int(CKPT_VERSION).to_bytes(4, "little")
    blob += len(header_bytes).to_bytes(8, "little")
    blob += header_bytes
    for name in params:
        blob += _pack_array(params[name], "<f8")
    for name in params:
        blob += _pack_array(state.adam[name].first_moment, "<f8")
    for name in params:
        blob += _pack_array(state.adam[name].second_moment, "<f8")
    if state.cache is not None:
        blob += _pack_array(state.cache.candidates.entity_idx, "<i8")
        blob += _pack_array(state.cache.candidates.anchors, "<i8")
        blob += _pack_array(state.cache.errors, "<f8")
    if state.dynamics is not None:
        blob += _pack_array(state.dynamics.snapshots, "<f8")
        blob += _pack_array(state.dynamics.counts, "<i8")
    for eidx, _ in header["curves"]:
        blob += _pack_array(state.curves[eidx], "<f8")
    if len(state.log):
        blob += _pack_array(np.array(state.log.days), "<i8")
        blob += _pack_array(np.array(state.log.entity_idx), "<i8")
        blob += _pack_array(np.stack(state.log.preds), "<f8")
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.buf):
            raise CheckpointIntegrityError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def read_array(self, count: int, dtype: str) -> np.ndarray:
        raw = self.read(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()


def load_checkpoint(path: str | Path):
    """Load a checkpoint; returns (state, model_config, train_config)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 12 + 32:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    cur = _Cursor(body)
    cur.read(len(CKPT_MAGIC))
    version = int.from_bytes(cur.read(4), "little")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CKPT_VERSION}"
        )
    header_len = int.from_bytes(cur.read(8), "little")
    try:
        header = json.loads(cur.read(header_len).decode("utf-8"))
    except json.JSONDecodeError as err:
        raise CheckpointIntegrityError(f"{path}: bad header: {err}") from err

    model_cfg = model_mod.ModelConfig.from_dict(header["model_config"])
    train_cfg = TrainConfig.from_dict(header["train_config"])
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        params[name] = cur.read_array(count, "<f8").reshape(shape)
    adam = {}
    moments_m = {
        name: cur.read_array(int(np.prod(shape)) if shape else 1, "<f8").reshape(shape)
        for name, shape in header["params"]
    }
    moments_v = {
        name: cur.read_array(int(np.prod(shape)) if shape else 1, "<f8").reshape(shape)
        for name, shape in header["params"]
    }
    for name, shape in header["params"]:
        adam[name] = AdamState(
            first_moment=moments_m[name],
            second_moment=moments_v[name],
            step_count=int(header["adam_steps"][name]),
            learning_rate=train_cfg.learning_rate,
        )
    cache = None
    if header["cache"] is not None:
        n = header["cache"]["n"]
        cache = sampling.ErrorCache(
            candidates=CandidateArray(
                cur.read_array(n, "<i8").astype(np.int32), cur.read_array(n, "<i8")
            ),
            errors=cur.read_array(n, "<f8"),
            anchor_cutoff=int(header["cache"]["anchor_cutoff"]),
            day=int(header["cache"]["day"]),
        )
    dynamics = None
    if header["dynamics"] is not None:
        n, cap = header["dynamics"]["n"], header["dynamics"]["capacity"]
        dynamics = sampling.DynamicsHistory(
            capacity=cap,
            snapshots=cur.read_array(n * cap, "<f8").reshape(n, cap),
            counts=cur.read_array(n, "<i8"),
        )
    curves = {}
    for eidx, length in header["curves"]:
        curves[int(eidx)] = cur.read_array(int(length), "<f8")
    log = PredictionLog()
    if header["log_rows"]:
        rows, h = header["log_rows"], header["horizon_len"]
        log.days = [int(v) for v in cur.read_array(rows, "<i8")]
        log.entity_idx = [int(v) for v in cur.read_array(rows, "<i8")]
        preds = cur.read_array(rows * h, "<f8").reshape(rows, h)
        log.preds = [preds[i] for i in range(rows)]
    if cur.pos != len(body):
        raise CheckpointIntegrityError(f"{path}: trailing bytes in checkpoint")

    rng_batches = np.random.default_rng(0)
    rng_batches.bit_generator.state = header["rng_batches"]
    rng_subsample = np.random.default_rng(0)
    rng_subsample.bit_generator.state = header["rng_subsample"]
    state = SimulationState(
        current_day=int(header["current_day"]),
        params=params,
        adam=adam,
        gamma=float(header["gamma"]),
        rng_batches=rng_batches,
        rng_subsample=rng_subsample,
        cache=cache,
        dynamics=dynamics,
        curves=curves,
        log=log,
        examples_consumed=int(header["examples_consumed"]),
        final_train_loss=header["final_train_loss"],
    )
    return state, model_cfg, train_cfg
