"""Model construction, forward/backward correctness, training, weight files."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from injectguard.cnn.model import (
    PRESETS,
    ModelSpec,
    ModelWeights,
    build_model,
    forward,
    loss_and_gradients,
    param_count,
    spec_from_weights,
)
from injectguard.cnn.train import (
    EpochStats,
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate,
    train,
)
from injectguard.cnn.weights_io import (
    deserialize_weights,
    load_weights,
    save_weights,
    serialize_weights,
)
from injectguard.errors import (
    CorruptWeightsError,
    DimensionError,
    InvalidInputError,
    InvalidSpecError,
)

TINY = ModelSpec(filters=(2, 3, 4))  # 319 params, cheap enough to gradcheck


def _toy_data(n=24, seed=0):
    # separable blobs: class 0 lights up the top-left, class 1 bottom-right
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 0.1, size=(n, 32, 32, 1))
    y = np.arange(n) % 2
    for i in range(n):
        if y[i] == 0:
            x[i, 4:10, 4:10, 0] += 1.0
        else:
            x[i, 22:28, 22:28, 0] += 1.0
    return x, y.astype(np.int64)


# ------------------------------------------------------------- construction

def test_parameter_counts():
    assert param_count(PRESETS["desk"]) == 6914
    assert param_count(PRESETS["literal"]) == 373442
    assert param_count(TINY) == 319
    assert build_model(TINY, seed=0).param_count == 319


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        ModelSpec(height=31)  # not divisible by the three pool stages
    with pytest.raises(InvalidSpecError):
        ModelSpec(filters=())
    with pytest.raises(InvalidSpecError):
        ModelSpec(filters=(0, 2, 2))


def test_build_model_deterministic_and_bounded():
    a = build_model(PRESETS["desk"], seed=7)
    b = build_model(PRESETS["desk"], seed=7)
    c = build_model(PRESETS["desk"], seed=8)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors, b.tensors))
    assert any(not np.array_equal(x, y) for x, y in zip(a.tensors, c.tensors))
    # kernels bounded by sqrt(6/fan_in); biases start at zero
    shapes = PRESETS["desk"].tensor_shapes()
    for t, shape in zip(a.tensors, shapes):
        if len(shape) == 1:
            assert not t.any()
        else:
            fan_in = int(np.prod(shape[:-1]))
            assert np.abs(t).max() <= math.sqrt(6.0 / fan_in)
            assert t.std() > 0


def test_model_weights_validation():
    with pytest.raises(InvalidInputError):
        ModelWeights([np.array([1.0, np.nan])])
    with pytest.raises(InvalidInputError):
        ModelWeights([])
    w = build_model(TINY, seed=0)
    cp = w.copy()
    assert w.allclose(cp)
    cp.tensors[0][0, 0, 0, 0] += 1.0
    assert not w.allclose(cp)  # copies are independent


def test_spec_from_weights_roundtrip():
    w = build_model(PRESETS["desk"], seed=1)
    assert spec_from_weights(w, 32, 32) == PRESETS["desk"]
    with pytest.raises(InvalidSpecError):
        spec_from_weights(ModelWeights([np.ones((4, 4))]), 32, 32)


# ------------------------------------------------------------------ forward

def test_forward_is_a_distribution():
    w = build_model(TINY, seed=3)
    x, _ = _toy_data(8)
    p = forward(TINY, w, x)
    assert p.shape == (8, 2)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p >= 0).all()
    # single-image call agrees with the batch row
    assert np.allclose(forward(TINY, w, x[0, :, :, 0]), p[0], atol=1e-12)


def test_zero_weights_give_chance_and_ln2_loss():
    w = ModelWeights([np.zeros(s) for s in TINY.tensor_shapes()])
    x, y = _toy_data(10)
    p = forward(TINY, w, x)
    assert np.allclose(p, 0.5, atol=1e-15)
    loss, grads = loss_and_gradients(TINY, w, x, y)
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)
    assert len(grads) == len(w.tensors)


def test_forward_shape_guard():
    w = build_model(TINY, seed=0)
    with pytest.raises(DimensionError):
        forward(TINY, w, np.zeros((2, 16, 16, 1)))


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    # full-coordinate central-difference check on the tiny spec
    rng = np.random.default_rng(seed)
    w = build_model(TINY, seed=seed)
    x = rng.uniform(0, 1, size=(4, 32, 32, 1))
    y = np.array([0, 1, 1, 0])
    _, grads = loss_and_gradients(TINY, w, x, y)
    h = 1e-6
    worst = 0.0
    for ti, tensor in enumerate(w.tensors):
        flat = tensor.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up, _ = loss_and_gradients(TINY, w, x, y)
            flat[k] = orig - h
            down, _ = loss_and_gradients(TINY, w, x, y)
            flat[k] = orig
            num = (up - down) / (2 * h)
            ana = grads[ti].ravel()[k]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, rel)
    assert worst < 1e-3, f"worst relative gradient error {worst:.2e}"


def test_loss_guards():
    w = build_model(TINY, seed=0)
    with pytest.raises(InvalidInputError):
        loss_and_gradients(TINY, w, np.zeros((0, 32, 32, 1)), np.zeros(0, dtype=int))
    with pytest.raises(DimensionError):
        loss_and_gradients(TINY, w, np.zeros((2, 32, 32, 1)), np.zeros(3, dtype=int))


# ----------------------------------------------------------------- training

def test_adam_single_step_analytic():
    # first step moves each coordinate by lr*g/(|g|+eps) regardless of scale
    w = ModelWeights([np.array([1.0, -2.0])])
    g = [np.array([0.5, -4.0])]
    cfg = TrainConfig(learning_rate=0.01)
    st_ = OptimizerState.for_weights(w)
    out = adam_step(w, st_, g, cfg)
    expected = w.tensors[0] - 0.01 * g[0] / (np.abs(g[0]) + cfg.epsilon)
    assert np.allclose(out.tensors[0], expected, atol=1e-12)
    assert st_.step == 1


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=-1)
    TrainConfig(learning_rate=0.0, epochs=0)  # both no-op forms are legal


def test_zero_lr_leaves_weights_unchanged():
    w = build_model(TINY, seed=2)
    x, y = _toy_data(16)
    cfg = TrainConfig(learning_rate=0.0, epochs=2)
    out, _, hist = train(TINY, w, OptimizerState.for_weights(w), x, y, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(out.tensors, w.tensors))
    assert len(hist) == 2


def test_zero_epochs_is_identity():
    w = build_model(TINY, seed=2)
    x, y = _toy_data(8)
    out, state, hist = train(
        TINY, w, OptimizerState.for_weights(w), x, y, TrainConfig(epochs=0)
    )
    assert out is w or all(np.array_equal(a, b) for a, b in zip(out.tensors, w.tensors))
    assert hist == []
    assert state.step == 0


def test_training_learns_separable_toy_data():
    w = build_model(TINY, seed=5)
    x, y = _toy_data(32, seed=1)
    cfg = TrainConfig(epochs=8, batch_size=8, shuffle_seed=1)
    out, _, hist = train(TINY, w, OptimizerState.for_weights(w), x, y, cfg)
    assert hist[-1].loss < hist[0].loss
    assert hist[-1].accuracy == 1.0
    cm = evaluate(TINY, out, x, y)
    assert cm.tp + cm.tn == 32 and cm.fp + cm.fn == 0


def test_train_deterministic():
    x, y = _toy_data(20, seed=3)
    runs = []
    for _ in range(2):
        w = build_model(TINY, seed=4)
        out, _, hist = train(
            TINY, w, OptimizerState.for_weights(w), x, y, TrainConfig(epochs=2, shuffle_seed=9)
        )
        runs.append((out, hist))
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][0].tensors, runs[1][0].tensors))
    assert runs[0][1] == runs[1][1]


def test_epoch_base_continues_shuffle_stream():
    # two 1-epoch rounds with epoch_base 0,1 == one 2-epoch run
    x, y = _toy_data(20, seed=6)
    cfg1 = TrainConfig(epochs=1, shuffle_seed=11)
    w = build_model(TINY, seed=6)
    st_ = OptimizerState.for_weights(w)
    w1, st_, _ = train(TINY, w, st_, x, y, cfg1, epoch_base=0)
    w2, _, _ = train(TINY, w1, st_, x, y, cfg1, epoch_base=1)

    cfg2 = TrainConfig(epochs=2, shuffle_seed=11)
    wb = build_model(TINY, seed=6)
    w2b, _, _ = train(TINY, wb, OptimizerState.for_weights(wb), x, y, cfg2)
    assert all(np.array_equal(a, b) for a, b in zip(w2.tensors, w2b.tensors))


def test_evaluate_matches_manual_argmax():
    w = build_model(TINY, seed=8)
    x, y = _toy_data(300, seed=2)  # crosses the internal chunk boundary
    cm = evaluate(TINY, w, x, y)
    pred = forward(TINY, w, x).argmax(axis=1)
    assert cm.tp == int(((pred == 1) & (y == 1)).sum())
    assert cm.tn == int(((pred == 0) & (y == 0)).sum())
    assert cm.total == 300


# ------------------------------------------------------------- weight files

def test_weights_roundtrip_bit_exact(tmp_path):
    w = build_model(PRESETS["desk"], seed=1)
    blob = serialize_weights(w)
    again = serialize_weights(deserialize_weights(blob))
    assert again == blob
    # desk preset: 6,914 params -> 27,656 payload bytes
    header = 8 + sum(1 + 4 * t.ndim for t in w.tensors)
    assert len(blob) == header + 4 * 6914

    path = str(tmp_path / "w.flwt")
    n = save_weights(w, path)
    assert n == len(blob)
    loaded = load_weights(path)
    # storage is float32: loading equals the f32 quantization of w
    assert all(
        np.array_equal(lt, t.astype(np.float32).astype(np.float64))
        for lt, t in zip(loaded.tensors, w.tensors)
    )
    # and a second trip is the identity
    assert serialize_weights(loaded) == blob


@given(seed=st.integers(0, 2**31 - 1), count=st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_weights_roundtrip_randomized(seed, count):
    rng = np.random.default_rng(seed)
    tensors = []
    for _ in range(count):
        rank = int(rng.integers(1, 5))
        shape = tuple(int(d) for d in rng.integers(1, 5, rank))
        tensors.append(rng.normal(size=shape).astype(np.float32).astype(np.float64))
    w = ModelWeights(tensors)
    blob = serialize_weights(w)
    back = deserialize_weights(blob)
    assert all(np.array_equal(a, b) for a, b in zip(back.tensors, w.tensors))
    assert serialize_weights(back) == blob


def test_serialize_rejects_f32_overflow():
    with pytest.raises(InvalidInputError):
        serialize_weights(ModelWeights([np.array([1e39])]))


def test_deserialize_rejects_structural_damage():
    w = ModelWeights([np.ones((2, 3)), np.zeros(4)])
    blob = bytearray(serialize_weights(w))

    cases = {
        "bad magic": b"XXXX" + bytes(blob[4:]),
        "bad version": blob[:4] + struct.pack("<H", 99) + bytes(blob[6:]),
        "zero tensors": blob[:6] + struct.pack("<H", 0) + bytes(blob[8:]),
        "truncated header": bytes(blob[:9]),
        "truncated payload": bytes(blob[:-3]),
        "trailing garbage": bytes(blob) + b"\x00",
        "empty": b"",
    }
    for name, bad in cases.items():
        with pytest.raises(CorruptWeightsError):
            deserialize_weights(bad)

    # rank out of range
    bad = bytearray(blob)
    bad[8] = 9
    with pytest.raises(CorruptWeightsError):
        deserialize_weights(bytes(bad))
    # zero-sized dimension
    bad = bytearray(blob)
    bad[9:13] = struct.pack("<I", 0)
    with pytest.raises(CorruptWeightsError):
        deserialize_weights(bytes(bad))


def test_deserialize_rejects_nan_payload():
    w = ModelWeights([np.zeros(3)])
    blob = bytearray(serialize_weights(w))
    blob[-4:] = struct.pack("<f", np.nan)
    with pytest.raises(CorruptWeightsError):
        deserialize_weights(bytes(blob))


def test_load_weights_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_weights(str(tmp_path / "absent.flwt"))
