"""Mini-batch SGD fine-tuning loop with layer freezing and per-group accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import FreezeMask, NetworkSpec, Parameters, UNLABELED, backward, forward, multihead_loss, sgd_step
from .tensor import rng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_loss: float
    train_accuracy: float
    test_accuracy: float


@dataclass
class TrainResult:
    params: Parameters
    history: list[EpochStats] = field(default_factory=list)
    train_group_accuracy: list[float] = field(default_factory=list)
    test_group_accuracy: list[float] = field(default_factory=list)


def predict(spec: NetworkSpec, params: Parameters, images, batch_size: int = 256) -> tuple[list[np.ndarray], np.ndarray]:
    """Eval-mode head probabilities and argmax classes, shape (N, G)."""
    probs = [[] for _ in spec.heads]
    for start in range(0, len(images), batch_size):
        tr = forward(spec, params, images[start:start + batch_size], mode="eval")
        for g, p in enumerate(tr.probs):
            probs[g].append(p)
    probs = [np.concatenate(p) for p in probs]
    return probs, np.stack([p.argmax(axis=1) for p in probs], axis=1)


def group_accuracy(pred: np.ndarray, labels: np.ndarray) -> list[float]:
    """Accuracy per group over labeled examples (NaN when a group has none)."""
    out = []
    for g in range(labels.shape[1]):
        mask = labels[:, g] != UNLABELED
        out.append(float(np.mean(pred[mask, g] == labels[mask, g])) if mask.any() else float("nan"))
    return out


def evaluate(spec, params, dataset, batch_size=256) -> tuple[float, list[float]]:
    loss_sum, pairs = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        labels = dataset.labels[start:start + batch_size]
        tr = forward(spec, params, dataset.images[start:start + batch_size], mode="eval")
        count = int((labels != UNLABELED).sum())
        loss_sum += multihead_loss(tr, labels).total * count
        pairs += count
    _, pred = predict(spec, params, dataset.images, batch_size)
    return loss_sum / max(pairs, 1), group_accuracy(pred, dataset.labels)


def train(
    spec: NetworkSpec,
    params: Parameters,
    train_set,
    test_set=None,
    epochs: int = 20,
    lr: float = 0.05,
    batch_size: int = 32,
    weight_decay: float = 1e-4,
    freeze: FreezeMask | None = None,
    seed: int = 0,
    target_accuracy: float | None = None,
    callback=None,
) -> TrainResult:
    """Shuffle each epoch, take one SGD step per mini-batch.

    Stops early once the mean per-group test accuracy reaches
    ``target_accuracy``.  Raises :class:`DivergenceError` when the epoch loss
    turns non-finite or grows past ten times its first value.
    """
    freeze = freeze or FreezeMask.none(spec)
    freeze.check(spec)
    gen = rng(seed)
    result = TrainResult(params)
    first_loss = None
    n = len(train_set)
    for epoch in range(1, epochs + 1):
        order = gen.permutation(n)
        loss_sum, pairs = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            labels = train_set.labels[idx]
            tr = forward(spec, params, train_set.images[idx], mode="train", seed=int(gen.integers(2**63)))
            loss = multihead_loss(tr, labels)
            if not np.isfinite(loss.total):
                raise DivergenceError(f"epoch {epoch}, batch {b}: loss is not finite")
            grads = backward(spec, params, tr, loss.logit_grads, freeze, need_input_grad=False)
            params = sgd_step(params, grads.params, lr, weight_decay, freeze)
            count = int((labels != UNLABELED).sum())
            loss_sum += loss.total * count
            pairs += count
        train_loss = loss_sum / max(pairs, 1)
        first_loss = first_loss if first_loss is not None else train_loss
        if not np.isfinite(train_loss) or train_loss > 10 * first_loss:
            raise DivergenceError(f"epoch {epoch}: training loss {train_loss:.4g} diverged (first epoch {first_loss:.4g})")
        _, train_pred = predict(spec, params, train_set.images)
        train_acc = group_accuracy(train_pred, train_set.labels)
        test_loss, test_acc = (float("nan"), [float("nan")] * len(spec.heads))
        if test_set is not None:
            test_loss, test_acc = evaluate(spec, params, test_set)
        stats = EpochStats(epoch, train_loss, test_loss, _nanmean(train_acc), _nanmean(test_acc))
        result.history.append(stats)
        result.train_group_accuracy, result.test_group_accuracy = train_acc, test_acc
        log.info("epoch %d loss %.4f test %.4f acc %.3f/%.3f", epoch, train_loss, test_loss, stats.train_accuracy, stats.test_accuracy)
        if callback:
            callback(stats)
        if target_accuracy is not None and test_set is not None and stats.test_accuracy >= target_accuracy:
            break
    result.params = params
    return result


def _nanmean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")
