"""Mini-batch Adam training with focal loss and early stopping on validation loss."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .datamodel import FeatureSequence, SegmentRecord, Split, read_feature_map
from .evaluator import classification_f1
from .model import ModelConfig, ModelParams, batch_loss, focal_loss, forward, init_params

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    wall_time_s: float = 0.0
    class_weights: tuple[float, float] = (1.0, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    def losses(self) -> list[tuple[float, float]]:
        return [(e.train_loss, e.val_loss) for e in self.epochs]


class FeatureStore:
    """Read-through cache of feature files keyed by path."""

    def __init__(self, preloaded: Mapping[str, Mapping[str, FeatureSequence]] | None = None):
        self._cache: dict[str, Mapping[str, FeatureSequence]] = dict(preloaded or {})

    def get(self, record: SegmentRecord) -> Mapping[str, FeatureSequence]:
        key = str(record.feature_path)
        if key not in self._cache:
            try:
                self._cache[key] = read_feature_map(record.feature_path)
            except FileNotFoundError:
                raise TrainingError(f"segment {record.id}: feature file {key} not found") from None
        return self._cache[key]

    def put(self, record: SegmentRecord, streams: Mapping[str, FeatureSequence]) -> None:
        self._cache[str(record.feature_path)] = streams


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k}")
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


def compute_class_weights(records: Sequence[SegmentRecord]) -> tuple[float, float]:
    """Inverse-frequency weights ``N / (2 N_c)``; a balanced set gives (1, 1)."""
    n = len(records)
    n_pos = sum(r.label for r in records)
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("compute_class_weights: both classes must be present in the training split "
                         "(set class_weights explicitly to override)")
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when it is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        f = max_norm / total
        for k in grads:
            grads[k] = grads[k] * np.float32(f)


def evaluate_loss(params: ModelParams, records: Sequence[SegmentRecord], store: FeatureStore,
                  class_weights: Sequence[float]) -> tuple[float, list[int]]:
    """Mean eval-mode focal loss and argmax predictions."""
    total = 0.0
    preds = []
    gamma = params.config.focal_gamma
    for r in records:
        out = forward(store.get(r), params, train=False)
        total += focal_loss(out.logits_tensor, r.label, gamma, class_weights).item()
        preds.append(out.label)
    return total / len(records), preds


def train(records: Sequence[SegmentRecord], store: FeatureStore, model_config: ModelConfig,
          train_config: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Train on the ``train`` split, early-stopping on ``val`` loss.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    train_recs = [r for r in records if r.split is Split.TRAIN]
    val_recs = [r for r in records if r.split is Split.VAL]
    if not train_recs or not val_recs:
        raise ValueError(f"need non-empty train and val splits (got {len(train_recs)} / {len(val_recs)})")
    weights = model_config.class_weights or compute_class_weights(train_recs)
    config = model_config.replace(class_weights=weights)

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(train_config.seed).spawn(3)
    params = init_params(config, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    betas = (train_config.beta1, train_config.beta2)

    for r in train_recs + val_recs:
        store.get(r)

    report = TrainReport(class_weights=tuple(weights))
    stopper = EarlyStopping(train_config.early_stop_patience)
    best = params.copy()
    t0 = time.perf_counter()
    bs = train_config.batch_size
    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_recs))
        running, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [(store.get(train_recs[i]), train_recs[i].label) for i in order[start:start + bs]]
            try:
                with nx.Tape() as tape:
                    loss = batch_loss(params, batch, weights, train=True, rng=dropout_rng)
                    grads = nx.backward(tape, loss, params.tensors)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}; parameter norm {params.norm():.4g}") from None
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingError(f"epoch {epoch} batch {b}: non-finite loss; parameter norm {params.norm():.4g}")
            if train_config.clip_norm is not None:
                _clip(grads, train_config.clip_norm)
            adam_step(arrays, grads, state, train_config.learning_rate, betas, train_config.adam_eps)
            running += lv * len(batch)
            seen += len(batch)

        val_loss, preds = evaluate_loss(params, val_recs, store, weights)
        val_f1 = classification_f1(preds, [r.label for r in val_recs])[0]
        rec = EpochRecord(epoch, running / seen, val_loss, val_f1)
        report.epochs.append(rec)
        logger.info("epoch %d train_loss=%.5f val_loss=%.5f val_f1=%.4f", epoch, rec.train_loss, val_loss, val_f1)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.update(epoch, val_loss):
            best = params.copy()
        if stopper.should_stop:
            report.stop_reason = f"early_stop (no improvement for {stopper.patience} epochs)"
            break
    else:
        report.stop_reason = "max_epochs"
    report.best_epoch = stopper.best_epoch
    report.wall_time_s = time.perf_counter() - t0
    return best, report
