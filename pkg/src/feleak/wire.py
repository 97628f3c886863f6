"""Framed message protocol for the split-training link.

Every message is MAGIC, a one-byte type, a little-endian u32 payload length,
and one float32 tensor (u32 rank, u32 per-dim sizes, little-endian f32 data).
Both transports move the same encoded bytes; the in-process one additionally
records the full conversation so tests can scan it for leaked values.
"""

import math
import queue
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

MAGIC = b"MG2\x00"
HEADER = struct.Struct("<4sBI")

HELLO = 1
FWD_Z1 = 2
BWD_DZ1 = 3
EVAL_REQ = 4
EVAL_RESP = 5
DONE = 6
MESSAGE_TYPES = frozenset((HELLO, FWD_Z1, BWD_DZ1, EVAL_REQ, EVAL_RESP, DONE))

PROTOCOL_VERSION = 1

# codes carried by a DONE payload
DONE_OK = 0
DONE_BAD_VERSION = 1
DONE_BAD_TOPOLOGY = 2
DONE_ERROR = 3

_MAX_RANK = 8


class ProtocolError(Exception):
    """Bytes on the wire do not parse as a well-formed message."""


class TransportClosed(Exception):
    """The peer went away, or this endpoint was already closed."""


def _as_f32(values) -> np.ndarray:
    arr = np.asarray(values, dtype="<f4")
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class WireMessage:
    type: int
    payload: np.ndarray

    def __post_init__(self):
        if self.type not in MESSAGE_TYPES:
            raise ProtocolError("unknown message type %r" % (self.type,))
        object.__setattr__(self, "payload", _as_f32(self.payload))

    def __eq__(self, other):
        return (isinstance(other, WireMessage)
                and self.type == other.type
                and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes())


def encode_tensor(values) -> bytes:
    arr = _as_f32(values)
    if arr.ndim > _MAX_RANK:
        raise ProtocolError("rank %d exceeds limit %d" % (arr.ndim, _MAX_RANK))
    head = struct.pack("<I%dI" % arr.ndim, arr.ndim, *arr.shape)
    return head + arr.tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise ProtocolError("tensor shorter than its rank field")
    (rank,) = struct.unpack_from("<I", data)
    if rank > _MAX_RANK:
        raise ProtocolError("rank %d exceeds limit %d" % (rank, _MAX_RANK))
    if len(data) < 4 + 4 * rank:
        raise ProtocolError("tensor shorter than its dim fields")
    dims = struct.unpack_from("<%dI" % rank, data, 4)
    count = math.prod(dims)
    expected = 4 + 4 * rank + 4 * count
    if len(data) != expected:
        raise ProtocolError("tensor of shape %s needs %d bytes, got %d"
                            % (dims, expected, len(data)))
    flat = np.frombuffer(data, dtype="<f4", offset=4 + 4 * rank, count=count)
    return flat.reshape(dims).copy()


def encode_message(message: WireMessage) -> bytes:
    body = encode_tensor(message.payload)
    return HEADER.pack(MAGIC, message.type, len(body)) + body


def decode_message(data: bytes) -> WireMessage:
    if len(data) < HEADER.size:
        raise ProtocolError("message shorter than its header")
    magic, mtype, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError("bad magic %r" % (magic,))
    if len(data) != HEADER.size + length:
        raise ProtocolError("payload length says %d, got %d bytes"
                            % (length, len(data) - HEADER.size))
    return WireMessage(mtype, decode_tensor(data[HEADER.size:]))


def hello_message(n, h1, n_out, version=PROTOCOL_VERSION) -> WireMessage:
    return WireMessage(HELLO, [float(version), float(n), float(h1),
                               float(n_out)])


def parse_hello(message: WireMessage):
    """(version, n, h1, n_out) from a HELLO, all validated as integers."""
    if message.type != HELLO:
        raise ProtocolError("expected HELLO, got type %d" % message.type)
    vals = message.payload.ravel()
    if vals.size != 4:
        raise ProtocolError("HELLO carries 4 values, got %d" % vals.size)
    out = []
    for v in vals:
        if not float(v).is_integer() or v < 0:
            raise ProtocolError("HELLO field %r is not a whole number" % (v,))
        out.append(int(v))
    return tuple(out)


def done_message(code=DONE_OK) -> WireMessage:
    return WireMessage(DONE, [float(code)])


def done_code(message: WireMessage) -> int:
    if message.type != DONE:
        raise ProtocolError("expected DONE, got type %d" % message.type)
    return int(message.payload.ravel()[0])


class InProcessTransport:
    """One endpoint of an in-memory duplex channel.

    Messages still pass through encode/decode, and every byte either side
    sends lands in a transcript shared by the pair.
    """

    def __init__(self, inbox, outbox, transcript, lock):
        self._inbox = inbox
        self._outbox = outbox
        self._transcript = transcript
        self._lock = lock
        self._closed = False

    @classmethod
    def pair(cls):
        a_to_b, b_to_a = queue.Queue(), queue.Queue()
        transcript, lock = bytearray(), threading.Lock()
        return (cls(b_to_a, a_to_b, transcript, lock),
                cls(a_to_b, b_to_a, transcript, lock))

    def send(self, message: WireMessage):
        if self._closed:
            raise TransportClosed("endpoint is closed")
        data = encode_message(message)
        with self._lock:
            self._transcript += data
        self._outbox.put(data)

    def recv(self, timeout=60.0) -> WireMessage:
        # bounded wait so a dead peer thread cannot hang the test suite
        if self._closed:
            raise TransportClosed("endpoint is closed")
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportClosed("recv timed out") from None
        if data is None:
            raise TransportClosed("peer closed the channel")
        return decode_message(data)

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(None)

    def transcript(self) -> bytes:
        with self._lock:
            return bytes(self._transcript)


def recv_exact(sock, count: int) -> bytes:
    """Read exactly count bytes or raise TransportClosed."""
    chunks = []
    while count:
        try:
            chunk = sock.recv(count)
        except OSError as exc:  # timeouts and resets read as a gone peer
            raise TransportClosed(str(exc)) from exc
        if not chunk:
            raise TransportClosed("connection closed mid-message")
        chunks.append(chunk)
        count -= len(chunk)
    return b"".join(chunks)


class SocketTransport:
    """The same protocol over a connected TCP socket."""

    def __init__(self, sock):
        self._sock = sock

    @classmethod
    def connect(cls, host, port, timeout=10.0):
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, message: WireMessage):
        try:
            self._sock.sendall(encode_message(message))
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def recv(self) -> WireMessage:
        head = recv_exact(self._sock, HEADER.size)
        magic, mtype, length = HEADER.unpack(head)
        if magic != MAGIC:
            raise ProtocolError("bad magic %r" % (magic,))
        body = recv_exact(self._sock, length)
        return WireMessage(mtype, decode_tensor(body))

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def save_tensors(path, tensors):
    """Checkpoint: u32 count then each tensor in the payload encoding."""
    blobs = [encode_tensor(t) for t in tensors]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ProtocolError("checkpoint shorter than its count field")
    (count,) = struct.unpack_from("<I", data)
    offset, out = 4, []
    for _ in range(count):
        if len(data) < offset + 4:
            raise ProtocolError("checkpoint truncated at tensor header")
        (rank,) = struct.unpack_from("<I", data, offset)
        if rank > _MAX_RANK:
            raise ProtocolError("rank %d exceeds limit %d" % (rank, _MAX_RANK))
        dims = struct.unpack_from("<%dI" % rank, data, offset + 4)
        size = 4 + 4 * rank + 4 * math.prod(dims)
        out.append(decode_tensor(data[offset:offset + size]))
        offset += size
    if offset != len(data):
        raise ProtocolError("%d trailing bytes after last tensor"
                            % (len(data) - offset))
    return out


def contains_float_run(transcript: bytes, values, run=16) -> bool:
    """Whether any run of consecutive f32 values appears verbatim in the
    transcript at any byte offset. The privacy scanner for leaked arrays."""
    flat = _as_f32(values).ravel()
    if flat.size < run:
        return False
    raw = flat.tobytes()
    for start in range(flat.size - run + 1):
        if transcript.find(raw[4 * start:4 * (start + run)]) >= 0:
            return True
    return False
