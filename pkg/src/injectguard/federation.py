"""Federated averaging over a framed, CRC-checked byte-stream transport.

One server-station process aggregates per-base-station CNN weights each
round and redistributes the global model.  Frames are little-endian:

    magic    4s   b"FLX1"
    version  u8
    type     u8   MessageType
    round    u32
    client   u16
    length   u32  payload byte count
    payload  bytes
    crc32    u32  over header+payload

Weight payloads reuse the weight-file byte format verbatim, so there is
exactly one serialization to trust.  An optional token-bucket throttle
paces sends to emulate a low-rate radio backhaul (250 kbps preset).

Round shape (full participation, synchronous): the coordinator
broadcasts ROUND_START carrying the current global weights, services
each client's WEIGHTS_UPLOAD strictly one at a time in ascending
client-id order (TDMA emulation), aggregates with fedavg, broadcasts
GLOBAL_UPDATE, then collects one METRICS_REPORT per client.  Any client
timeout or dead connection aborts the round — there is no partial
aggregation.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import socket
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cnn.model import ModelWeights, spec_from_weights
from .cnn.train import OptimizerState, TrainConfig, evaluate, train
from .cnn.weights_io import deserialize_weights, serialize_weights
from .errors import (
    AggregationError,
    InvalidInputError,
    ProtocolError,
    TransportError,
)
from .metrics import ConfusionMatrix, RoundMetrics

MAGIC = b"FLX1"
PROTOCOL_VERSION = 1

DEFAULT_RATE_BPS = 250_000

_HEADER = struct.Struct("<4sBBIHI")
_CRC = struct.Struct("<I")
_MAX_PAYLOAD = 1 << 30
_SEND_CHUNK = 2048
_CONNECT_RETRIES = 5
_CONNECT_RETRY_DELAY = 0.2


class MessageType(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    ROUND_START = 3
    WEIGHTS_UPLOAD = 4
    GLOBAL_UPDATE = 5
    METRICS_REPORT = 6
    SHUTDOWN = 7


@dataclass(frozen=True)
class WireMessage:
    """One protocol frame.  round/client are u32/u16 header fields."""

    msg_type: MessageType
    round_no: int = 0
    client_id: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if self.msg_type not in MessageType.__members__.values():
            raise ProtocolError(f"unknown message type {self.msg_type!r}")
        if not 0 <= self.round_no < 1 << 32:
            raise ProtocolError(f"round {self.round_no} out of u32 range")
        if not 0 <= self.client_id < 1 << 16:
            raise ProtocolError(f"client id {self.client_id} out of u16 range")
        if len(self.payload) >= _MAX_PAYLOAD:
            raise ProtocolError("payload too large")


def encode_message(msg: WireMessage) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        PROTOCOL_VERSION,
        int(msg.msg_type),
        msg.round_no,
        msg.client_id,
        len(msg.payload),
    )
    crc = zlib.crc32(header + msg.payload) & 0xFFFFFFFF
    return header + msg.payload + _CRC.pack(crc)


def _read_exact(stream, n: int) -> bytes:
    """Read exactly n bytes or raise TransportError (EOF mid-frame)."""
    chunks = []
    remaining = n
    while remaining:
        try:
            piece = stream.read(remaining)
        except (TimeoutError, socket.timeout) as exc:
            raise TransportError(f"timed out waiting for {remaining} bytes") from exc
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if not piece:
            raise TransportError(f"stream ended {remaining} bytes short of a frame")
        chunks.append(piece)
        remaining -= len(piece)
    return b"".join(chunks)


def decode_message(source) -> WireMessage:
    """Read one frame from bytes or a binary stream.

    Consumes exactly one frame, leaving a stream positioned at the
    next.  Bad magic or a failed CRC raises ProtocolError; a short read
    raises TransportError.
    """
    stream = io.BytesIO(source) if isinstance(source, (bytes, bytearray, memoryview)) else source
    header = _read_exact(stream, _HEADER.size)
    magic, version, mtype, round_no, client_id, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if length >= _MAX_PAYLOAD:
        raise ProtocolError(f"declared payload length {length} exceeds cap")
    payload = _read_exact(stream, length)
    (crc,) = _CRC.unpack(_read_exact(stream, _CRC.size))
    if crc != (zlib.crc32(header + payload) & 0xFFFFFFFF):
        raise ProtocolError("frame CRC mismatch")
    try:
        mt = MessageType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    return WireMessage(msg_type=mt, round_no=round_no, client_id=client_id, payload=payload)


# ---------------------------------------------------------------------------
# payload helpers


def pack_upload(n_samples: int, weights: ModelWeights) -> bytes:
    if n_samples < 1:
        raise InvalidInputError("upload must carry at least one sample")
    return struct.pack("<I", n_samples) + serialize_weights(weights)


def unpack_upload(payload: bytes) -> tuple[int, ModelWeights]:
    if len(payload) < 4:
        raise ProtocolError("upload payload shorter than its sample count")
    (n_samples,) = struct.unpack_from("<I", payload, 0)
    return n_samples, deserialize_weights(payload[4:])


_METRIC_REC = struct.Struct("<IIIII")


def pack_metrics(records: list[tuple[int, ConfusionMatrix]]) -> bytes:
    parts = [struct.pack("<H", len(records))]
    for round_no, cm in records:
        parts.append(_METRIC_REC.pack(round_no, cm.tp, cm.tn, cm.fp, cm.fn))
    return b"".join(parts)


def unpack_metrics(payload: bytes) -> list[tuple[int, ConfusionMatrix]]:
    if len(payload) < 2:
        raise ProtocolError("metrics payload missing record count")
    (count,) = struct.unpack_from("<H", payload, 0)
    if len(payload) != 2 + count * _METRIC_REC.size:
        raise ProtocolError("metrics payload length mismatch")
    out = []
    for i in range(count):
        round_no, tp, tn, fp, fn = _METRIC_REC.unpack_from(payload, 2 + i * _METRIC_REC.size)
        out.append((round_no, ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)))
    return out


# ---------------------------------------------------------------------------
# aggregation


def fedavg(updates: list[tuple[int, ModelWeights]]) -> ModelWeights:
    """Sample-count weighted mean of parameter tensors.

    Computed as w0 + sum_k (n_k/N)*(w_k - w0), which is algebraically
    the weighted mean but returns the common value bit-exactly when all
    updates agree.
    """
    if not updates:
        raise InvalidInputError("fedavg needs at least one update")
    shapes = [tuple(t.shape for t in w.tensors) for _, w in updates]
    if any(s != shapes[0] for s in shapes[1:]):
        raise AggregationError(f"mismatched update shapes: {shapes}")
    if any(n < 1 for n, _ in updates):
        raise AggregationError("sample counts must be >= 1")
    total = sum(n for n, _ in updates)
    anchor = updates[0][1]
    out = [t.copy() for t in anchor.tensors]
    for n, w in updates:
        lam = n / total
        for i, t in enumerate(w.tensors):
            out[i] += lam * (t - anchor.tensors[i])
    return ModelWeights(out)


# ---------------------------------------------------------------------------
# throttling


@dataclass(frozen=True)
class ThrottleConfig:
    """Bits-per-second cap on sends; 0 disables pacing."""

    rate_bps: int = DEFAULT_RATE_BPS

    def __post_init__(self):
        if self.rate_bps < 0:
            raise InvalidInputError("throttle rate must be >= 0")


def throttled_transfer(data: bytes, throttle: ThrottleConfig, write=None) -> float:
    """Push data through write() no faster than the configured rate.

    Token-bucket contract: after k bytes the elapsed time is at least
    8k/rate, so sustained throughput never exceeds the cap and
    sequential transfers take the sum of their individual times (no
    burst credit carries across calls).  Returns elapsed seconds.
    """
    start = time.monotonic()
    if throttle.rate_bps == 0 or not data:
        if write is not None and data:
            write(data)
        return time.monotonic() - start
    sent = 0
    view = memoryview(data)
    while sent < len(data):
        chunk = view[sent : sent + _SEND_CHUNK]
        if write is not None:
            write(chunk)
        sent += len(chunk)
        due = start + sent * 8.0 / throttle.rate_bps
        now = time.monotonic()
        if due > now:
            time.sleep(due - now)
    return time.monotonic() - start


# ---------------------------------------------------------------------------
# configuration


def default_rounds(n_clients: int) -> int:
    """10 rounds for the 2-client setup, 15 for larger federations."""
    return 10 if n_clients <= 2 else 15


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int
    rounds: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    host: str = "127.0.0.1"
    port: int = 0
    handshake_timeout: float = 30.0
    round_timeout: float = 300.0
    throttle: ThrottleConfig = ThrottleConfig(rate_bps=0)

    def __post_init__(self):
        if self.n_clients < 1:
            raise InvalidInputError("need at least one client")
        if self.rounds is None:
            object.__setattr__(self, "rounds", default_rounds(self.n_clients))
        if self.rounds < 1:
            raise InvalidInputError("need at least one round")
        if self.handshake_timeout <= 0 or self.round_timeout <= 0:
            raise InvalidInputError("timeouts must be positive")


@dataclass(frozen=True)
class ClientDataset:
    """One base-station's local train/test split (arrays as in to_arrays)."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass(frozen=True)
class ClientResult:
    client_id: int
    final_accuracy: float
    rounds_completed: int
    status: str
    history: tuple[RoundMetrics, ...] = ()


# ---------------------------------------------------------------------------
# transport plumbing


class _Peer:
    """A connected socket plus its buffered read side."""

    def __init__(self, sock: socket.socket, timeout: float):
        sock.settimeout(timeout)
        self.sock = sock
        self.reader = sock.makefile("rb")

    def send(self, msg: WireMessage, throttle: ThrottleConfig):
        data = encode_message(msg)
        try:
            throttled_transfer(data, throttle, write=self.sock.sendall)
        except (TimeoutError, socket.timeout) as exc:
            raise TransportError("send timed out") from exc
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def recv(self) -> WireMessage:
        return decode_message(self.reader)

    def close(self):
        for closer in (self.reader.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


def _expect(msg: WireMessage, allowed: tuple[MessageType, ...]) -> WireMessage:
    if msg.msg_type not in allowed:
        names = "/".join(t.name for t in allowed)
        raise ProtocolError(f"expected {names}, got {msg.msg_type.name}")
    return msg


def open_listener(cfg: FederationConfig) -> socket.socket:
    """Bind the coordinator's listening socket (port 0 = ephemeral)."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((cfg.host, cfg.port))
    listener.listen(cfg.n_clients)
    return listener


# ---------------------------------------------------------------------------
# coordinator


def run_coordinator(
    cfg: FederationConfig,
    initial_weights: ModelWeights,
    listener: socket.socket | None = None,
) -> tuple[ModelWeights, list[RoundMetrics]]:
    """Serve one full federation and return (global weights, history).

    History rows are (round, client) metric records; round 0 rows are
    the clients' standalone baselines (local training only, reported
    inside the first METRICS_REPORT).  Raises TransportError or
    ProtocolError naming the round and client on any mid-round failure.
    """
    if listener is None:
        listener = open_listener(cfg)
    peers: dict[int, _Peer] = {}
    try:
        listener.settimeout(cfg.handshake_timeout)
        while len(peers) < cfg.n_clients:
            try:
                conn, _addr = listener.accept()
            except (TimeoutError, socket.timeout) as exc:
                missing = sorted(set(range(cfg.n_clients)) - set(peers))
                raise TransportError(
                    f"handshake timeout; clients {missing} never connected"
                ) from exc
            peer = _Peer(conn, cfg.round_timeout)
            hello = _expect(peer.recv(), (MessageType.HELLO,))
            cid = hello.client_id
            if cid >= cfg.n_clients:
                peer.close()
                raise ProtocolError(f"client id {cid} outside expected set")
            if cid in peers:
                peer.close()
                raise ProtocolError(f"duplicate client id {cid}")
            peer.send(WireMessage(MessageType.HELLO_ACK, client_id=cid), cfg.throttle)
            peers[cid] = peer

        global_weights = initial_weights
        history: list[RoundMetrics] = []
        order = sorted(peers)
        for round_no in range(1, cfg.rounds + 1):
            blob = serialize_weights(global_weights)
            uploads: dict[int, tuple[int, ModelWeights]] = {}
            for cid in order:
                _guarded(
                    peers[cid].send,
                    round_no,
                    cid,
                    WireMessage(MessageType.ROUND_START, round_no, cid, blob),
                    cfg.throttle,
                )
            for cid in order:  # TDMA: strictly one client at a time
                msg = _guarded(peers[cid].recv, round_no, cid)
                _check_frame(msg, MessageType.WEIGHTS_UPLOAD, round_no, cid)
                uploads[cid] = unpack_upload(msg.payload)
            # full-participation barrier: every expected upload is present
            assert sorted(uploads) == order
            global_weights = fedavg([uploads[cid] for cid in order])
            blob = serialize_weights(global_weights)
            for cid in order:
                _guarded(
                    peers[cid].send,
                    round_no,
                    cid,
                    WireMessage(MessageType.GLOBAL_UPDATE, round_no, cid, blob),
                    cfg.throttle,
                )
            for cid in order:
                msg = _guarded(peers[cid].recv, round_no, cid)
                _check_frame(msg, MessageType.METRICS_REPORT, round_no, cid)
                for rec_round, cm in unpack_metrics(msg.payload):
                    history.append(RoundMetrics.from_confusion(rec_round, cid, cm))
        for cid in order:
            peers[cid].send(WireMessage(MessageType.SHUTDOWN, cfg.rounds, cid), cfg.throttle)
        history.sort(key=lambda r: (r.round, r.client_id))
        return global_weights, history
    finally:
        for peer in peers.values():
            peer.close()
        listener.close()


def _guarded(fn, round_no: int, cid: int, *args):
    """Run one per-client protocol step, tagging failures with context."""
    try:
        return fn(*args)
    except TransportError as exc:
        raise TransportError(f"round {round_no} aborted: client {cid}: {exc}") from exc
    except ProtocolError as exc:
        raise ProtocolError(f"round {round_no}: client {cid}: {exc}") from exc


def _check_frame(msg: WireMessage, expected: MessageType, round_no: int, cid: int):
    if msg.msg_type is not expected:
        raise ProtocolError(
            f"round {round_no}: client {cid}: expected {expected.name}, got {msg.msg_type.name}"
        )
    if msg.round_no != round_no:
        raise ProtocolError(
            f"round {round_no}: client {cid}: frame carries round {msg.round_no}"
        )
    if msg.client_id != cid:
        raise ProtocolError(
            f"round {round_no}: client {cid}: frame carries client {msg.client_id}"
        )


# ---------------------------------------------------------------------------
# client


def _connect_with_retries(address: tuple[str, int], timeout: float) -> socket.socket:
    last: Exception | None = None
    for attempt in range(_CONNECT_RETRIES):
        try:
            return socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            last = exc
            time.sleep(_CONNECT_RETRY_DELAY * (attempt + 1))
    raise TransportError(f"could not reach coordinator at {address}: {last}")


def run_client(
    cfg: FederationConfig,
    client_id: int,
    data: ClientDataset,
    address: tuple[str, int] | None = None,
) -> ClientResult:
    """Join a federation and run the per-round local loop.

    Each round: receive the global weights, train cfg.train.epochs
    locally (shuffle streams keep advancing across rounds), upload
    (sample count, weights), receive the aggregate, evaluate it on the
    local test split, and report metrics.  The first report also
    carries a round-0 record: the standalone baseline, i.e. this
    client's own model after local training but before any averaging.
    """
    if not 0 <= client_id < cfg.n_clients:
        raise InvalidInputError(f"client id {client_id} outside 0..{cfg.n_clients - 1}")
    if address is None:
        address = (cfg.host, cfg.port)
    # per-client shuffle stream so co-located clients do not mirror each other
    tcfg = dataclasses.replace(cfg.train, shuffle_seed=cfg.train.shuffle_seed + client_id)
    n_samples = int(data.train_x.shape[0])
    peer = _Peer(_connect_with_retries(address, cfg.handshake_timeout), cfg.round_timeout)
    try:
        peer.send(WireMessage(MessageType.HELLO, client_id=client_id), cfg.throttle)
        _expect(peer.recv(), (MessageType.HELLO_ACK,))
        spec = None
        state = None
        history: list[RoundMetrics] = []
        final_accuracy = 0.0
        rounds_done = 0
        while True:
            msg = _expect(peer.recv(), (MessageType.ROUND_START, MessageType.SHUTDOWN))
            if msg.msg_type is MessageType.SHUTDOWN:
                break
            round_no = msg.round_no
            weights = deserialize_weights(msg.payload)
            if spec is None:
                spec = spec_from_weights(
                    weights, int(data.train_x.shape[1]), int(data.train_x.shape[2])
                )
            # fresh moments each round: the incoming model is a new aggregate
            state = OptimizerState.for_weights(weights)
            weights, state, _stats = train(
                spec,
                weights,
                state,
                data.train_x,
                data.train_y,
                tcfg,
                epoch_base=(round_no - 1) * tcfg.epochs,
            )
            records = []
            if round_no == 1:
                cm0 = evaluate(spec, weights, data.test_x, data.test_y)
                records.append((0, cm0))
                history.append(RoundMetrics.from_confusion(0, client_id, cm0))
            peer.send(
                WireMessage(
                    MessageType.WEIGHTS_UPLOAD,
                    round_no,
                    client_id,
                    pack_upload(n_samples, weights),
                ),
                cfg.throttle,
            )
            update = _expect(peer.recv(), (MessageType.GLOBAL_UPDATE,))
            if update.round_no != round_no:
                raise ProtocolError(
                    f"global update for round {update.round_no} during round {round_no}"
                )
            global_weights = deserialize_weights(update.payload)
            cm = evaluate(spec, global_weights, data.test_x, data.test_y)
            records.append((round_no, cm))
            row = RoundMetrics.from_confusion(round_no, client_id, cm)
            history.append(row)
            final_accuracy = row.accuracy
            peer.send(
                WireMessage(
                    MessageType.METRICS_REPORT, round_no, client_id, pack_metrics(records)
                ),
                cfg.throttle,
            )
            rounds_done = round_no
        return ClientResult(
            client_id=client_id,
            final_accuracy=final_accuracy,
            rounds_completed=rounds_done,
            status="ok",
            history=tuple(history),
        )
    finally:
        peer.close()
