"""Prequential (evaluate, then train) streaming protocol and its logs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as dlrs
from .bilevel import BilevelOptimizer, OptimizerConfig
from .config import ExperimentConfig
from .data import Stream
from .errors import ConfigError, IngestionError
from .framework import AutoEmbModel, Batch

logger = logging.getLogger(__name__)


class PopularityTracker:
    """Interaction counts per user and per item, seen so far."""

    def __init__(self, n_users: int, n_items: int):
        self.users = np.zeros(n_users, dtype=np.int64)
        self.items = np.zeros(n_items, dtype=np.int64)

    def update(self, users, items) -> None:
        np.add.at(self.users, np.asarray(users, dtype=np.int64), 1)
        np.add.at(self.items, np.asarray(items, dtype=np.int64), 1)


class ValidationBuffer:
    """Reservoir (algorithm R) over interactions already used for training.

    Stores stream positions, not copies.  Sampling is uniform with replacement.
    """

    def __init__(self, capacity: int = 50000, seed: int = 0):
        if capacity < 1:
            raise ConfigError("validation buffer capacity must be >= 1")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self.slots = np.empty(self.capacity, dtype=np.int64)
        self.size = 0
        self.seen = 0

    def add(self, positions) -> None:
        for pos in np.asarray(positions, dtype=np.int64):
            if self.size < self.capacity:
                self.slots[self.size] = pos
                self.size += 1
            else:
                j = int(self.rng.integers(0, self.seen + 1))
                if j < self.capacity:
                    self.slots[j] = pos
            self.seen += 1

    @property
    def contents(self) -> np.ndarray:
        return self.slots[:self.size]

    def __len__(self) -> int:
        return self.size


def sample_validation(buffer: ValidationBuffer, batch_size: int):
    """Stream positions of a validation batch, or ``None`` when the buffer is empty."""
    if buffer.size == 0:
        return None
    return buffer.contents[buffer.rng.integers(0, buffer.size, size=batch_size)]


METRIC_FIELDS = ("batch_idx", "stage", "mode", "loss", "accuracy", "mean_user_popularity", "mean_item_popularity")


@dataclass
class BatchRecord:
    batch_idx: int
    stage: str
    mode: str
    loss: float
    accuracy: float
    mean_user_popularity: float
    mean_item_popularity: float
    alpha_mean: list
    beta_mean: list


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _parse(s: str) -> float:
    return float("nan") if s == "" else float(s)


@dataclass
class MetricLog:
    """One record per processed batch, append-only."""

    n_spaces: int
    records: list = field(default_factory=list)

    def append(self, rec: BatchRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def header(self) -> list:
        n = self.n_spaces
        return [*METRIC_FIELDS, *(f"alpha_mean_{k}" for k in range(1, n + 1)),
                *(f"beta_mean_{k}" for k in range(1, n + 1))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.records:
                w.writerow([r.batch_idx, r.stage, r.mode, _fmt(r.loss), _fmt(r.accuracy),
                            _fmt(r.mean_user_popularity), _fmt(r.mean_item_popularity),
                            *map(_fmt, r.alpha_mean), *map(_fmt, r.beta_mean)])

    @classmethod
    def from_csv(cls, path) -> "MetricLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        n = sum(1 for h in head if h.startswith("alpha_mean_"))
        log = cls(n)
        for row in body:
            vals = [_parse(x) for x in row[7:]]
            log.append(BatchRecord(int(row[0]), row[1], row[2], *(_parse(x) for x in row[3:7]),
                                   vals[:n], vals[n:]))
        return log

    def stage_records(self, stage: str) -> list:
        return [r for r in self.records if r.stage == stage]


PREDICTION_FIELDS = ("batch_idx", "stage", "user", "item", "user_popularity", "item_popularity", "label", "loss",
                     "correct")


@dataclass
class PredictionLog:
    """Per-example prequential outcomes (what the figure reports are built from)."""

    batch_idx: np.ndarray
    stage: np.ndarray
    user: np.ndarray
    item: np.ndarray
    user_pop: np.ndarray
    item_pop: np.ndarray
    label: np.ndarray
    loss: np.ndarray
    correct: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    def to_csv(self, path) -> None:
        n = self.alpha.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*PREDICTION_FIELDS, *(f"alpha_{k}" for k in range(1, n + 1)),
                        *(f"beta_{k}" for k in range(1, n + 1))])
            for k in range(len(self)):
                w.writerow([int(self.batch_idx[k]), self.stage[k], int(self.user[k]), int(self.item[k]),
                            int(self.user_pop[k]), int(self.item_pop[k]), int(self.label[k]), repr(float(self.loss[k])),
                            int(self.correct[k]), *map(_fmt, self.alpha[k]), *map(_fmt, self.beta[k])])

    @classmethod
    def from_csv(cls, path) -> "PredictionLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        n = sum(1 for h in head if h.startswith("alpha_"))
        cols = list(zip(*body)) if body else [()] * len(head)
        ints = lambda c: np.array(c, dtype=np.int64)
        weights = np.array([[_parse(x) for x in row[9:]] for row in body]).reshape(len(body), 2 * n)
        return cls(ints(cols[0]), np.array(cols[1], dtype=object), ints(cols[2]), ints(cols[3]), ints(cols[4]),
                   ints(cols[5]), ints(cols[6]), np.array(cols[7], dtype=np.float64), ints(cols[8]),
                   weights[:, :n], weights[:, n:])


@dataclass
class RunResult:
    log: MetricLog
    predictions: PredictionLog
    model: AutoEmbModel
    popularity: PopularityTracker
    train_losses: list


def make_batch(stream: Stream, positions, tracker: PopularityTracker, task: str) -> Batch:
    users = stream.users[positions]
    items = stream.items[positions]
    return Batch(users, items, stream.labels(task)[positions],
                 tracker.users[users].astype(np.float64), tracker.items[items].astype(np.float64))


def build_model(stream: Stream, config: ExperimentConfig, seed: int) -> tuple:
    model = AutoEmbModel(
        stream.n_users, stream.n_items, mode=config.mode, task=config.task, dims=config.dims,
        hidden=config.hidden, controller_hidden=config.controller_hidden, feature_size=config.feature_size,
        bn_eps=config.bn_eps, bn_momentum=config.bn_momentum, seed=seed,
    )
    opt = BilevelOptimizer(model, OptimizerConfig(config.mode, config.lr_w, config.lr_theta, config.xi,
                                                  config.second_order))
    return model, opt


def run(stream: Stream, config: ExperimentConfig, seed: int | None = None) -> RunResult:
    """Process ``stream`` batch by batch: predict and score, controller step, train step.

    The controller step is skipped until the validation buffer holds one full
    batch.  A batch's stage is that of its first interaction under the
    temporal ``offline_fraction`` split; the last batch may be partial.
    """
    if len(stream) == 0:
        raise ConfigError("stream: empty stream")
    if not stream.is_sorted():
        raise IngestionError("stream is not sorted by timestamp")
    seed = config.seeds[0] if seed is None else seed
    model, opt = build_model(stream, config, seed)
    tracker = PopularityTracker(stream.n_users, stream.n_items)
    buffer = ValidationBuffer(config.val_capacity, seed=seed + 7919)
    labels = stream.labels(config.task)
    n, bs, nsp = len(stream), config.batch_size, len(config.dims)
    split = int(math.floor(config.offline_fraction * n))
    log = MetricLog(nsp)
    pred_cols = {k: [] for k in ("batch_idx", "stage", "user_pop", "item_pop", "loss", "correct", "alpha", "beta")}
    train_losses = []

    for b, start in enumerate(range(0, n, bs)):
        pos = np.arange(start, min(start + bs, n))
        stage = "offline" if start < split else "online"
        batch = make_batch(stream, pos, tracker, config.task)

        with ad.no_grad():
            out = model.forward(batch, "train" if len(pos) > 1 else "infer", update_stats=False)
        losses = dlrs.per_example_loss(out.pred, batch.labels)
        hits = dlrs.correct(out.pred, batch.labels)
        alpha = out.alpha.data if out.alpha is not None else np.full((len(pos), nsp), np.nan)
        beta = out.beta.data if out.beta is not None else np.full((len(pos), nsp), np.nan)
        log.append(BatchRecord(b, stage, config.mode, float(losses.mean()), float(hits.mean()),
                               float(batch.user_pop.mean()), float(batch.item_pop.mean()),
                               list(alpha.mean(axis=0)), list(beta.mean(axis=0))))
        for key, val in (("batch_idx", np.full(len(pos), b)), ("stage", [stage] * len(pos)),
                         ("user_pop", batch.user_pop), ("item_pop", batch.item_pop), ("loss", losses),
                         ("correct", hits), ("alpha", alpha), ("beta", beta)):
            pred_cols[key].append(val)

        val_batch = None
        if buffer.size >= bs:
            val_batch = make_batch(stream, sample_validation(buffer, bs), tracker, config.task)
        train_losses.append(opt.step(val_batch, batch))

        tracker.update(batch.users, batch.items)
        buffer.add(pos)

    cat = {k: np.concatenate(v) for k, v in pred_cols.items()}
    preds = PredictionLog(cat["batch_idx"].astype(np.int64), np.asarray(cat["stage"], dtype=object),
                          stream.users.copy(), stream.items.copy(), cat["user_pop"].astype(np.int64),
                          cat["item_pop"].astype(np.int64), labels.astype(np.int64), cat["loss"],
                          cat["correct"].astype(np.int64), cat["alpha"], cat["beta"])
    return RunResult(log, preds, model, tracker, train_losses)


@dataclass
class BucketStats:
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    mean_loss: np.ndarray
    accuracy: np.ndarray
    mean_weights: np.ndarray  # buckets x N (nan where empty or no weights)


def bucket_index(popularity, edges) -> np.ndarray:
    """Bucket k covers ``[edges[k], edges[k+1])``; the last bucket is open-ended."""
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, np.asarray(popularity, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(edges) - 1)


def bucket_metrics(preds: PredictionLog, popularity_edges, entity: str = "user", stage: str | None = None) -> BucketStats:
    """Aggregate predictions by the entity's popularity at prediction time.

    ``mean_weights`` averages alpha (``entity="user"``) or beta (``"item"``).
    """
    edges = np.asarray(popularity_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ConfigError("popularity_edges must be strictly increasing")
    mask = np.ones(len(preds), dtype=bool) if stage is None else preds.stage == stage
    pop = (preds.user_pop if entity == "user" else preds.item_pop)[mask]
    w = (preds.alpha if entity == "user" else preds.beta)[mask]
    idx = bucket_index(pop, edges)
    k = len(edges)
    count = np.bincount(idx, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_loss = np.bincount(idx, preds.loss[mask], minlength=k) / count
        acc = np.bincount(idx, preds.correct[mask].astype(np.float64), minlength=k) / count
        mw = np.stack([np.bincount(idx, w[:, j], minlength=k) for j in range(w.shape[1])], axis=1) / count[:, None]
    upper = np.append(edges[1:], np.inf)
    return BucketStats(edges, upper, count, mean_loss, acc, mw)


def learning_curve(log: MetricLog, batch_size: int, stream_length: int) -> list:
    """Rows of (examples_seen, batch loss/acc, running mean loss/acc, stage)."""
    rows = []
    seen = 0
    tot_loss = tot_acc = 0.0
    for r in log:
        n = min(batch_size, stream_length - seen)
        seen += n
        tot_loss += r.loss * n
        tot_acc += r.accuracy * n
        rows.append((seen, r.loss, r.accuracy, tot_loss / seen, tot_acc / seen, r.stage))
    return rows


def online_summary(log: MetricLog) -> dict:
    """Per-stage batch counts and unweighted means of the batch metrics."""
    out = {}
    for stage in ("offline", "online"):
        recs = log.stage_records(stage)
        out[stage] = {
            "batches": len(recs),
            "mean_loss": float(np.mean([r.loss for r in recs])) if recs else None,
            "mean_accuracy": float(np.mean([r.accuracy for r in recs])) if recs else None,
        }
    return out


def write_run(result: RunResult, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    result.log.to_csv(path / "metrics.csv")
    result.predictions.to_csv(path / "predictions.csv")
