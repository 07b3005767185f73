"""Small convolutional classifier with exact analytic gradients.

Architecture: repeated [3x3 same-pad conv -> ReLU -> 2x2 max pool]
stages followed by flatten and a dense layer to 2 logits with softmax.
Weight order is fixed (kernel, bias per stage, then dense matrix, dense
bias) and shared with the wire/weight-file serialization.

Two presets exist: ``desk`` (8/16/32 filters, 6,914 parameters on a
32x32 grid, trainable in minutes on a laptop CPU) and ``literal``
(256/128/64 filters, orders of magnitude larger; kept for study).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, InvalidInputError, InvalidSpecError
from . import kernels


@dataclass(frozen=True)
class ModelSpec:
    """Input grid plus filter counts of the conv stages."""

    height: int = 32
    width: int = 32
    filters: tuple = (8, 16, 32)
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if len(self.filters) < 1:
            raise InvalidSpecError("need at least one conv stage")
        if any(f < 1 for f in self.filters):
            raise InvalidSpecError("filter counts must be positive")
        if self.n_classes != 2:
            raise InvalidSpecError("classifier head is binary")
        h, w = self.height, self.width
        for _ in self.filters:
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise InvalidSpecError(
                    f"pooling chain does not fit: {self.height}x{self.width} "
                    f"with {len(self.filters)} stages"
                )
            h //= 2
            w //= 2

    @property
    def final_hw(self) -> tuple[int, int]:
        k = len(self.filters)
        return self.height >> k, self.width >> k

    @property
    def flat_features(self) -> int:
        h, w = self.final_hw
        return h * w * self.filters[-1]

    def tensor_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        c_in = 1
        for f in self.filters:
            shapes.append((3, 3, c_in, f))
            shapes.append((f,))
            c_in = f
        shapes.append((self.flat_features, self.n_classes))
        shapes.append((self.n_classes,))
        return shapes


PRESETS = {
    "desk": ModelSpec(filters=(8, 16, 32)),
    "literal": ModelSpec(filters=(256, 128, 64)),
}


class ModelWeights:
    """Ordered, finite parameter tensors (float64 in memory)."""

    def __init__(self, tensors):
        self.tensors = tuple(np.asarray(t, dtype=np.float64) for t in tensors)
        if not self.tensors:
            raise InvalidInputError("weight set needs at least one tensor")
        for t in self.tensors:
            if not np.all(np.isfinite(t)):
                raise InvalidInputError("weights contain non-finite values")

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors)

    def copy(self) -> "ModelWeights":
        return ModelWeights([t.copy() for t in self.tensors])

    def allclose(self, other: "ModelWeights", atol: float = 0.0) -> bool:
        return len(self.tensors) == len(other.tensors) and all(
            a.shape == b.shape and np.allclose(a, b, atol=atol, rtol=0.0)
            for a, b in zip(self.tensors, other.tensors)
        )


def param_count(spec: ModelSpec) -> int:
    """Total trainable parameters of a spec."""
    return sum(int(np.prod(s)) for s in spec.tensor_shapes())


def build_model(spec: ModelSpec, seed: int = 0) -> ModelWeights:
    """Fan-in-scaled uniform kernels (limit sqrt(6/fan_in)), zero biases."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    tensors = []
    for shape in spec.tensor_shapes():
        if len(shape) == 1:
            tensors.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            tensors.append(rng.uniform(-limit, limit, size=shape))
    return ModelWeights(tensors)


def _check_shapes(spec: ModelSpec, weights: ModelWeights):
    expected = spec.tensor_shapes()
    got = [t.shape for t in weights.tensors]
    if got != expected:
        raise DimensionError(f"weights {got} do not match spec {expected}")


def spec_from_weights(weights: ModelWeights, height: int, width: int) -> ModelSpec:
    """Recover the stage layout from tensor shapes (for loaded weight files)."""
    filters = [t.shape[3] for t in weights.tensors if t.ndim == 4]
    if not filters:
        raise InvalidSpecError("weights contain no conv kernels")
    spec = ModelSpec(height=height, width=width, filters=tuple(filters))
    _check_shapes(spec, weights)
    return spec


def _forward_cached(spec, weights, x):
    """Run all stages, keeping the caches backprop needs."""
    caches = []
    act = x
    for stage in range(len(spec.filters)):
        k, b = weights.tensors[2 * stage], weights.tensors[2 * stage + 1]
        pre = kernels.conv3x3_forward(act, k, b)
        relu = np.maximum(pre, 0.0)
        pooled, idx = kernels.maxpool2_forward(relu)
        caches.append((act, pre, idx))
        act = pooled
    flat = act.reshape(act.shape[0], -1)
    dense_w, dense_b = weights.tensors[-2], weights.tensors[-1]
    logits = flat @ dense_w + dense_b
    return logits, flat, act.shape, caches


def _softmax_logprobs(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - log_norm


def forward(spec: ModelSpec, weights: ModelWeights, images: np.ndarray) -> np.ndarray:
    """Class probabilities, shape (batch, 2); rows sum to 1.

    ``images`` is (batch, H, W, 1) or a single (H, W) grid.
    """
    _check_shapes(spec, weights)
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[np.newaxis, :, :, np.newaxis]
    if x.shape[1:] != (spec.height, spec.width, 1):
        raise DimensionError(f"image shape {x.shape[1:]} does not match spec")
    logits, _, _, _ = _forward_cached(spec, weights, np.ascontiguousarray(x))
    probs = np.exp(_softmax_logprobs(logits))
    return probs[0] if single else probs


def loss_and_gradients(
    spec: ModelSpec,
    weights: ModelWeights,
    images: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and exact gradients.

    Returns (loss, grads) with grads shaped exactly like the weight
    tensors.  Per-sample contributions are reduced in fixed array order,
    so repeated calls agree bit-for-bit.
    """
    loss, grads, _ = _loss_grads_logits(spec, weights, images, labels)
    return loss, grads


def _loss_grads_logits(spec, weights, images, labels):
    """Backprop pass that also hands back the logits (for running accuracy)."""
    _check_shapes(spec, weights)
    x = np.ascontiguousarray(np.asarray(images, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise InvalidInputError("batch must be a non-empty (n, H, W, 1) array")
    if x.shape[0] != y.shape[0]:
        raise DimensionError("images and labels disagree on batch size")

    n = x.shape[0]
    logits, flat, pooled_shape, caches = _forward_cached(spec, weights, x)
    logprobs = _softmax_logprobs(logits)
    loss = float(-logprobs[np.arange(n), y].mean())

    dlogits = np.exp(logprobs)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    dense_w = weights.tensors[-2]
    grads = [None] * len(weights.tensors)
    grads[-2] = flat.T @ dlogits
    grads[-1] = dlogits.sum(axis=0)

    dact = np.ascontiguousarray((dlogits @ dense_w.T).reshape(pooled_shape))
    for stage in range(len(spec.filters) - 1, -1, -1):
        act_in, pre, idx = caches[stage]
        drelu = kernels.maxpool2_backward(dact, idx)
        dpre = np.where(pre > 0.0, drelu, 0.0)
        k = weights.tensors[2 * stage]
        dact, dk, db = kernels.conv3x3_backward(act_in, k, dpre)
        grads[2 * stage] = dk
        grads[2 * stage + 1] = db
    return loss, grads, logits
