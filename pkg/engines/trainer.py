"""
Losses, macro-F evaluation and the mini-batch training loop with
validation-based model selection.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from core.errors import DimensionError, MetricError, NonFiniteLossError
from core.types import EpochRecord, HeadKind, TrainConfig, WindowSample
from engines import gradcore as gc
from engines.adam import AdamState, adam_step
from engines.model import Network, discretize

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


# ──────────────────────────────────────────────
# Losses
# ──────────────────────────────────────────────

def loss_binary(probs, labels: np.ndarray) -> gc.Tensor:
    """Mean binary cross-entropy over every (sample, index) pair, logs clamped at 1e-12."""
    probs = gc.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise DimensionError(f"labels {y.shape} do not match head outputs {probs.shape}")
    log_p = gc.clamped_log(probs, LOG_EPS)
    log_q = gc.clamped_log(gc.sub(1.0, probs), LOG_EPS)
    ll = gc.add(gc.mul(y, log_p), gc.mul(1.0 - y, log_q))
    return gc.mul(gc.reduce_mean(ll), -1.0)


def loss_ternary(probs, labels: np.ndarray) -> gc.Tensor:
    """Mean over groups of -log(score of the true class), logs clamped at 1e-12."""
    probs = gc.as_tensor(probs)
    y = np.asarray(labels, dtype=np.int64)
    if probs.shape[-1] != 3 or y.shape != probs.shape[:-1]:
        raise DimensionError(f"labels {y.shape} do not match grouped head outputs {probs.shape}")
    one_hot = np.eye(3)[y]
    picked = gc.reduce_sum(gc.mul(one_hot, gc.clamped_log(probs, LOG_EPS)), axis=-1)
    return gc.mul(gc.reduce_mean(picked), -1.0)


def head_loss(head: HeadKind, probs, labels: np.ndarray) -> gc.Tensor:
    return loss_binary(probs, labels) if HeadKind(head) is HeadKind.BINARY5 else loss_ternary(probs, labels)


# ──────────────────────────────────────────────
# Metrics
# ──────────────────────────────────────────────

def macro_f(preds: np.ndarray, labels: np.ndarray, classes: Sequence[int] = (0, 1)) -> float:
    """
    Unweighted mean of per-class F1. A class with precision + recall = 0
    (never predicted correctly) contributes 0.
    """
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.size == 0:
        raise MetricError("macro-F of an empty prediction set")
    if preds.size != labels.size:
        raise MetricError(f"{preds.size} predictions for {labels.size} labels")
    scores = []
    for c in classes:
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


def per_index_f(classes: np.ndarray, labels: np.ndarray, head: HeadKind) -> np.ndarray:
    span = tuple(range(HeadKind(head).n_classes))
    return np.array([macro_f(classes[:, j], labels[:, j], span) for j in range(labels.shape[1])])


def stack_samples(samples: Sequence[WindowSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise MetricError("no samples to stack")
    return np.stack([s.inputs for s in samples]), np.stack([s.labels for s in samples])


@dataclass
class Evaluation:
    loss: float
    f_measures: np.ndarray   # (5,)
    accuracy: float

    @property
    def macro_f(self) -> float:
        return float(np.mean(self.f_measures))


def evaluate(network: Network, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> Evaluation:
    head = network.config.head
    outputs = []
    for start in range(0, len(inputs), batch_size):
        outputs.append(network.forward(inputs[start:start + batch_size]).data)
    outputs = np.concatenate(outputs, axis=0)
    loss = float(head_loss(head, outputs, labels).data)
    classes = discretize(outputs, head)
    return Evaluation(loss=loss, f_measures=per_index_f(classes, labels, head),
                      accuracy=float(np.mean(classes == labels)))


# ──────────────────────────────────────────────
# Training loop
# ──────────────────────────────────────────────

@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    best_state: Dict[str, np.ndarray] = field(default_factory=dict)


def batch_gradients(network: Network, inputs: np.ndarray, labels: np.ndarray,
                    micro_batch: int) -> Tuple[float, List[np.ndarray]]:
    """
    Loss and parameter gradients of the batch mean loss. The batch is
    evaluated in micro-batches, each on its own tape, weighted by size.
    """
    params = network.parameters()
    total = len(inputs)
    loss_value = 0.0
    grads = [np.zeros(p.shape) for p in params]
    for start in range(0, total, micro_batch):
        x = inputs[start:start + micro_batch]
        y = labels[start:start + micro_batch]
        weight = len(x) / total
        with gc.Tape() as tape:
            loss = head_loss(network.config.head, network.forward(x), y)
        for acc, grad in zip(grads, tape.gradient(loss, params)):
            acc += weight * grad
        loss_value += weight * float(loss.data)
    return loss_value, grads


def train(network: Network, train_set: Sequence[WindowSample], val_set: Sequence[WindowSample],
          cfg: TrainConfig, seed: int) -> TrainResult:
    """
    Seeded shuffled mini-batches with Adam. After every epoch the validation
    set is scored (mean per-index macro-F for binary heads, negative loss for
    ternary heads); the best-scoring weights are kept and restored at the
    end. Training stops once `patience` consecutive epochs fail to improve.
    """
    x_train, y_train = stack_samples(train_set)
    x_val, y_val = stack_samples(val_set)
    rng = np.random.default_rng([seed, 1])
    state = AdamState(learning_rate=cfg.learning_rate)
    params = network.parameters()
    binary = network.config.head is HeadKind.BINARY5
    # epoch 0 is the initial state, kept when no epoch ever scores higher
    result = TrainResult(best_state={k: v.copy() for k, v in network.state_dict().items()})
    stale = 0

    logger.info(f"Training {network.config.name} (seed {seed}): {len(x_train)} train / {len(x_val)} validation samples, "
                f"{len(params)} parameter tensors")
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_train))
        running = 0.0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss_value, grads = batch_gradients(network, x_train[idx], y_train[idx], cfg.micro_batch)
            if not math.isfinite(loss_value):
                logger.error(f"Non-finite loss at epoch {epoch}, batch {batch}")
                raise NonFiniteLossError(epoch, batch, loss_value)
            adam_step(params, grads, state)
            running += loss_value * len(idx)
            logger.debug(f"epoch {epoch} batch {batch}: loss {loss_value:.6f}")

        val = evaluate(network, x_val, y_val)
        score = val.macro_f if binary else -val.loss
        improved = score > result.best_score
        if improved:
            result.best_score = score
            result.best_epoch = epoch
            result.best_state = {k: v.copy() for k, v in network.state_dict().items()}
            stale = 0
        else:
            stale += 1
        record = EpochRecord(epoch=epoch, train_loss=running / len(x_train), val_loss=val.loss,
                             val_metric=val.macro_f, improved=improved)
        result.history.append(record)
        logger.info(f"epoch {epoch}: train loss {record.train_loss:.5f}, val loss {val.loss:.5f}, "
                    f"val macro-F {val.macro_f:.4f}{' *' if improved else ''}")
        if stale > cfg.patience:
            logger.info(f"Early stop after {epoch} epochs (best epoch {result.best_epoch})")
            break

    network.load_state_dict(result.best_state)
    return result
