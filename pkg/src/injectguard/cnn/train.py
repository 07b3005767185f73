"""Mini-batch Adam training loop and confusion-matrix evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from ..metrics import ConfusionMatrix
from .model import ModelSpec, ModelWeights, _check_shapes, _forward_cached, _loss_grads_logits


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and batching knobs (lr 0.001 / batch 32 defaults)."""

    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidInputError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be >= 1")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be nonnegative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidInputError("moment decay rates must be in [0, 1)")


@dataclass
class OptimizerState:
    """Adam first/second moment accumulators plus the step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_weights(cls, weights: ModelWeights) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(t) for t in weights.tensors],
            v=[np.zeros_like(t) for t in weights.tensors],
            step=0,
        )


@dataclass(frozen=True)
class EpochStats:
    """Running training loss/accuracy over one pass of the data."""

    loss: float
    accuracy: float


def adam_step(
    weights: ModelWeights,
    state: OptimizerState,
    grads: list,
    cfg: TrainConfig,
) -> ModelWeights:
    """One Adam update; mutates state, returns the new weights."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    new_tensors = []
    for i, (w, g) in enumerate(zip(weights.tensors, grads)):
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        new_tensors.append(w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
    return ModelWeights(new_tensors)


def train(
    spec: ModelSpec,
    weights: ModelWeights,
    state: OptimizerState,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    epoch_base: int = 0,
) -> tuple[ModelWeights, OptimizerState, list[EpochStats]]:
    """Shuffled mini-batch Adam over the dataset, epochs times.

    Deterministic: epoch e shuffles with a Philox stream keyed by
    (shuffle_seed, epoch_base + e).  The final partial batch is
    included.  ``epoch_base`` lets successive federated rounds continue
    the shuffle sequence instead of repeating epoch 0's order.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise InvalidInputError("training set is empty")
    n = x.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.Generator(
            np.random.Philox(
                key=np.array([cfg.shuffle_seed, epoch_base + epoch], dtype=np.uint64)
            )
        )
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            xb, yb = x[batch], y[batch]
            loss, grads, logits = _loss_grads_logits(spec, weights, xb, yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
            total_loss += loss * len(batch)
            weights = adam_step(weights, state, grads, cfg)
        history.append(EpochStats(loss=total_loss / n, accuracy=correct / n))
    return weights, state, history


def _batch_predictions(spec, weights, xb):
    logits, _, _, _ = _forward_cached(spec, weights, np.ascontiguousarray(xb))
    return logits.argmax(axis=1)


def evaluate(
    spec: ModelSpec,
    weights: ModelWeights,
    images: np.ndarray,
    labels: np.ndarray,
) -> ConfusionMatrix:
    """Argmax predictions vs labels; adversary (1) is the positive class.

    Ties in the logits break toward class 0.  Order-invariant.
    """
    _check_shapes(spec, weights)
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise InvalidInputError("evaluation set is empty")
    preds = np.empty(x.shape[0], dtype=np.int64)
    chunk = 256
    for lo in range(0, x.shape[0], chunk):
        preds[lo : lo + chunk] = _batch_predictions(spec, weights, x[lo : lo + chunk])
    tp = int(((preds == 1) & (y == 1)).sum())
    tn = int(((preds == 0) & (y == 0)).sum())
    fp = int(((preds == 1) & (y == 0)).sum())
    fn = int(((preds == 0) & (y == 1)).sum())
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)
