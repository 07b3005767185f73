"""Wire framing, aggregation algebra, throttling, and loopback federations."""

import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from injectguard.cnn.model import ModelSpec, ModelWeights, build_model
from injectguard.cnn.train import OptimizerState, TrainConfig, train
from injectguard.cnn.weights_io import deserialize_weights, serialize_weights
from injectguard.errors import (
    AggregationError,
    InjectGuardError,
    InvalidInputError,
    ProtocolError,
    TransportError,
)
from injectguard.federation import (
    ClientDataset,
    FederationConfig,
    MessageType,
    ThrottleConfig,
    WireMessage,
    decode_message,
    default_rounds,
    encode_message,
    fedavg,
    open_listener,
    pack_metrics,
    pack_upload,
    run_client,
    run_coordinator,
    throttled_transfer,
    unpack_metrics,
    unpack_upload,
)
from injectguard.metrics import ConfusionMatrix

SPEC = ModelSpec(filters=(2, 2, 2))


# ------------------------------------------------------------------ framing

def test_message_roundtrip_all_types():
    for mt in MessageType:
        msg = WireMessage(mt, round_no=7, client_id=3, payload=b"\x00\x01\xff")
        back = decode_message(encode_message(msg))
        assert back == msg


def test_message_field_validation():
    with pytest.raises(ProtocolError):
        WireMessage(99)
    with pytest.raises(ProtocolError):
        WireMessage(MessageType.HELLO, round_no=1 << 32)
    with pytest.raises(ProtocolError):
        WireMessage(MessageType.HELLO, client_id=1 << 16)


@given(
    payload=st.binary(max_size=4096),
    round_no=st.integers(0, 2**32 - 1),
    client_id=st.integers(0, 2**16 - 1),
)
@settings(max_examples=50, deadline=None)
def test_message_roundtrip_property(payload, round_no, client_id):
    msg = WireMessage(MessageType.WEIGHTS_UPLOAD, round_no, client_id, payload)
    assert decode_message(encode_message(msg)) == msg


def test_large_payload_roundtrip():
    payload = np.random.default_rng(0).bytes(1 << 20)  # 1 MiB
    msg = WireMessage(MessageType.GLOBAL_UPDATE, 1, 0, payload)
    assert decode_message(encode_message(msg)).payload == payload


def test_every_single_byte_flip_is_detected():
    msg = WireMessage(MessageType.ROUND_START, 5, 2, b"payload-bytes" * 3)
    frame = encode_message(msg)
    # length-field flips can claim more bytes than exist (short read);
    # every other flip must fail the CRC or a structural check.
    length_field = set(range(12, 16))
    for pos in range(len(frame)):
        bad = bytearray(frame)
        bad[pos] ^= 0x10
        with pytest.raises((ProtocolError, TransportError)):
            decode_message(bytes(bad))
        if pos not in length_field:
            with pytest.raises(ProtocolError):
                decode_message(bytes(bad))


def test_truncated_frame_is_transport_error():
    frame = encode_message(WireMessage(MessageType.HELLO_ACK, payload=b"12"))
    for cut in (0, 5, len(frame) - 1):
        with pytest.raises(TransportError):
            decode_message(frame[:cut])


def test_back_to_back_frames_decode_in_order():
    import io

    frames = [WireMessage(MessageType.HELLO, client_id=i, payload=bytes([i])) for i in range(5)]
    stream = io.BytesIO(b"".join(encode_message(m) for m in frames))
    for expected in frames:
        assert decode_message(stream) == expected
    with pytest.raises(TransportError):
        decode_message(stream)  # stream exhausted


def test_upload_payload_roundtrip():
    w = build_model(SPEC, seed=0)
    n, back = unpack_upload(pack_upload(1234, w))
    assert n == 1234
    quantized = [t.astype(np.float32).astype(np.float64) for t in w.tensors]
    assert all(np.array_equal(a, b) for a, b in zip(back.tensors, quantized))
    with pytest.raises(InvalidInputError):
        pack_upload(0, w)
    with pytest.raises(InjectGuardError):
        unpack_upload(b"\x01")


def test_metrics_payload_roundtrip():
    records = [
        (0, ConfusionMatrix(5, 6, 7, 8)),
        (3, ConfusionMatrix(100, 200, 0, 1)),
    ]
    assert unpack_metrics(pack_metrics(records)) == records
    with pytest.raises(InjectGuardError):
        unpack_metrics(b"\xff")


# ------------------------------------------------------------------- fedavg

def _w(*values):
    return ModelWeights([np.array(values, dtype=np.float64)])


def test_fedavg_weighted_mean_examples():
    out = fedavg([(1, _w(0.0, 2.0)), (1, _w(2.0, 4.0))])
    assert np.allclose(out.tensors[0], [1.0, 3.0], atol=1e-6)
    out = fedavg([(1, _w(0.0)), (3, _w(4.0))])
    assert np.allclose(out.tensors[0], [3.0], atol=1e-6)
    # these particular literals are exact in binary floating point
    assert out.tensors[0][0] == 3.0


def test_fedavg_idempotent_bit_exact():
    w = build_model(ModelSpec(), seed=9)
    out = fedavg([(17, w), (3, w.copy()), (40, w.copy())])
    assert all(np.array_equal(a, b) for a, b in zip(out.tensors, w.tensors))


def test_fedavg_permutation_invariant():
    updates = [(i + 1, build_model(SPEC, seed=i)) for i in range(4)]
    a = fedavg(updates)
    b = fedavg(list(reversed(updates)))
    for ta, tb in zip(a.tensors, b.tensors):
        assert np.allclose(ta, tb, rtol=0, atol=1e-12)


def test_fedavg_single_update_identity():
    w = build_model(SPEC, seed=1)
    out = fedavg([(5, w)])
    assert all(np.array_equal(a, b) for a, b in zip(out.tensors, w.tensors))


def test_fedavg_validation():
    with pytest.raises(InvalidInputError):
        fedavg([])
    with pytest.raises(AggregationError):
        fedavg([(1, _w(1.0)), (1, _w(1.0, 2.0))])
    with pytest.raises(AggregationError):
        fedavg([(0, _w(1.0))])


@given(
    vals=st.lists(
        st.tuples(st.integers(1, 50), st.floats(-100, 100, allow_nan=False)),
        min_size=1,
        max_size=6,
    )
)
@settings(max_examples=60, deadline=None)
def test_fedavg_stays_in_convex_hull(vals):
    updates = [(n, _w(v)) for n, v in vals]
    out = float(fedavg(updates).tensors[0][0])
    lo = min(v for _, v in vals)
    hi = max(v for _, v in vals)
    assert lo - 1e-9 <= out <= hi + 1e-9


# ----------------------------------------------------------------- throttle

def test_throttle_config():
    assert ThrottleConfig().rate_bps == 250_000
    with pytest.raises(InvalidInputError):
        ThrottleConfig(rate_bps=-1)


def test_unthrottled_transfer_is_immediate():
    got = []
    dt = throttled_transfer(b"x" * (1 << 20), ThrottleConfig(rate_bps=0), got.append)
    assert b"".join(got) == b"x" * (1 << 20)
    assert dt < 0.25


def test_throttle_paces_to_rate():
    # 20,000 bytes at 1.6 Mbps -> 0.1 s nominal
    data = b"y" * 20_000
    got = []
    dt = throttled_transfer(data, ThrottleConfig(rate_bps=1_600_000), lambda c: got.append(bytes(c)))
    assert b"".join(got) == data
    assert 0.095 <= dt <= 0.30  # generous upper slack for busy machines


def test_throttle_empty_payload():
    assert throttled_transfer(b"", ThrottleConfig()) < 0.01


# ---------------------------------------------------------- loopback helper

def _toy_client_data(seed, n_train=16, n_test=8):
    rng = np.random.default_rng(seed)
    def blobs(n):
        x = rng.uniform(0, 0.1, size=(n, 32, 32, 1))
        y = (np.arange(n) % 2).astype(np.int64)
        for i in range(n):
            if y[i] == 0:
                x[i, 2:8, 2:8, 0] += 1.0
            else:
                x[i, 20:26, 20:26, 0] += 1.0
        return x, y
    tx, ty = blobs(n_train)
    vx, vy = blobs(n_test)
    return ClientDataset(tx, ty, vx, vy)


def _run_federation(cfg, w0, datasets):
    listener = open_listener(cfg)
    port = listener.getsockname()[1]
    out = {}
    errors = []

    def serve():
        try:
            out["server"] = run_coordinator(cfg, w0, listener=listener)
        except Exception as exc:  # surfaced by the caller
            errors.append(("server", exc))

    def join(cid):
        try:
            out[cid] = run_client(cfg, cid, datasets[cid], address=("127.0.0.1", port))
        except Exception as exc:
            errors.append((cid, exc))

    threads = [threading.Thread(target=serve)] + [
        threading.Thread(target=join, args=(c,)) for c in range(cfg.n_clients)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return out, errors


def test_single_client_federation_equals_local_training():
    # one client, one round: the global model must be exactly the
    # client's locally trained model (after the float32 wire trip)
    data = _toy_client_data(0)
    cfg = FederationConfig(n_clients=1, rounds=1, train=TrainConfig(epochs=1, shuffle_seed=5))
    w0 = build_model(SPEC, seed=3)
    out, errors = _run_federation(cfg, w0, {0: data})
    assert errors == []
    global_w, history = out["server"]

    w0q = deserialize_weights(serialize_weights(w0))
    local, _, _ = train(
        SPEC, w0q, OptimizerState.for_weights(w0q),
        data.train_x, data.train_y,
        TrainConfig(epochs=1, shuffle_seed=5), epoch_base=0,
    )
    localq = deserialize_weights(serialize_weights(local))
    assert all(np.array_equal(a, b) for a, b in zip(global_w.tensors, localq.tensors))
    # round-0 standalone row equals the round-1 row (single client: the
    # aggregate of one upload is the upload)
    assert [r.round for r in history] == [0, 1]
    assert history[0].accuracy == history[1].accuracy
    assert out[0].status == "ok"
    assert out[0].rounds_completed == 1


def test_zero_lr_federation_keeps_initial_weights():
    datasets = {c: _toy_client_data(c) for c in range(2)}
    cfg = FederationConfig(n_clients=2, rounds=2, train=TrainConfig(epochs=1, learning_rate=0.0))
    w0 = build_model(SPEC, seed=11)
    out, errors = _run_federation(cfg, w0, datasets)
    assert errors == []
    global_w, history = out["server"]
    w0q = deserialize_weights(serialize_weights(w0))
    assert all(np.array_equal(a, b) for a, b in zip(global_w.tensors, w0q.tensors))
    # rounds 0..2 for both clients, sorted by (round, client)
    assert [(r.round, r.client_id) for r in history] == [
        (0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1),
    ]


def test_federation_history_improves_on_learnable_data():
    datasets = {c: _toy_client_data(10 + c, n_train=48, n_test=16) for c in range(2)}
    cfg = FederationConfig(
        n_clients=2,
        rounds=4,
        train=TrainConfig(epochs=2, batch_size=6, shuffle_seed=2),
    )
    w0 = build_model(SPEC, seed=1)
    out, errors = _run_federation(cfg, w0, datasets)
    assert errors == []
    _, history = out["server"]
    final = [r.accuracy for r in history if r.round == 4]
    assert np.mean(final) > 0.7, f"final per-client accuracy {final}"


def test_federation_deterministic():
    results = []
    for _ in range(2):
        datasets = {c: _toy_client_data(20 + c) for c in range(2)}
        cfg = FederationConfig(n_clients=2, rounds=2, train=TrainConfig(epochs=1, shuffle_seed=7))
        w0 = build_model(SPEC, seed=4)
        out, errors = _run_federation(cfg, w0, datasets)
        assert errors == []
        global_w, history = out["server"]
        results.append((serialize_weights(global_w), tuple(history)))
    assert results[0][0] == results[1][0]
    assert results[0][1] == results[1][1]


def test_handshake_timeout_names_missing_clients():
    cfg = FederationConfig(n_clients=2, rounds=1, handshake_timeout=0.5)
    w0 = build_model(SPEC, seed=0)
    listener = open_listener(cfg)
    with pytest.raises(TransportError, match=r"clients \[0, 1\] never connected"):
        run_coordinator(cfg, w0, listener=listener)


def test_mid_round_client_death_names_round_and_client():
    cfg = FederationConfig(n_clients=1, rounds=3, handshake_timeout=5.0, round_timeout=5.0)
    w0 = build_model(SPEC, seed=0)
    listener = open_listener(cfg)
    port = listener.getsockname()[1]
    failure = {}

    def serve():
        try:
            run_coordinator(cfg, w0, listener=listener)
        except InjectGuardError as exc:
            failure["exc"] = exc

    t = threading.Thread(target=serve)
    t.start()
    # handshake, receive the first ROUND_START, then vanish mid-round
    sock = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    reader = sock.makefile("rb")
    sock.sendall(encode_message(WireMessage(MessageType.HELLO, client_id=0)))
    assert decode_message(reader).msg_type is MessageType.HELLO_ACK
    assert decode_message(reader).msg_type is MessageType.ROUND_START
    reader.close()
    sock.close()
    t.join(timeout=10.0)
    assert not t.is_alive()
    msg = str(failure["exc"])
    assert "round 1" in msg and "client 0" in msg


def test_default_rounds_tiers():
    assert default_rounds(1) == 10
    assert default_rounds(2) == 10
    assert default_rounds(4) == 15
    cfg = FederationConfig(n_clients=4)
    assert cfg.rounds == 15
    with pytest.raises(InvalidInputError):
        FederationConfig(n_clients=0)
    with pytest.raises(InvalidInputError):
        FederationConfig(n_clients=2, rounds=0)
