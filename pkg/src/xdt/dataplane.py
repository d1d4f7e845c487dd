"""Producer-side ephemeral object store and the chunked pull protocol.

A producer buffers an immutable payload with a retrieval budget of N; each
consumer that completes a pull spends one credit and the object is dropped
when the budget hits zero or the owning instance shuts down. Credits are
reserved when a stream is admitted and spent when it completes, so any
interleaving of concurrent pulls yields exactly min(attempts, N) successes;
an aborted stream returns its credit.

Pull wire protocol over a byte stream, all integers big-endian:

    handshake:  server sends a 16-byte random challenge; the client answers
                with a 32-byte keyed MAC under the provider secret. User
                code cannot produce the MAC, so it cannot open raw pull
                connections.
    request:    magic "XDTP" (4) || object_key (8)
    response:   status (1 byte: 0=OK, 1=NotFound), then repeated frames:
                seq (4) || flags (1, bit0=last) || len (4) || data

Flow control is the transport's own windowing: the consumer reads from the
socket only while it has buffer space below ``buffer_depth``, which stalls
the producer's sends once the kernel windows fill. There is no
application-level ACK protocol.
"""

from __future__ import annotations

import enum
import logging
import os
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import AbortedTransfer, ObjectNotFound, ProducerUnreachable
from .refcrypto import PlainReference, ProviderSecret
from .wire import recv_exact

logger = logging.getLogger(__name__)

MAGIC = b"XDTP"
_CHALLENGE_SIZE = 16
_MAC_SIZE = 32
_HANDSHAKE_TAG = b"xdt-pull"
FRAME_HEADER = struct.Struct(">IBI")
_REQUEST = struct.Struct(">4sQ")

_STATUS_OK = b"\x00"
_STATUS_NOT_FOUND = b"\x01"

DEFAULT_CHUNK_SIZE = 64 * 1024
DEFAULT_BUFFER_DEPTH = 1024 * 1024
DEFAULT_IO_TIMEOUT = 60.0


class StreamingMode(enum.Enum):
    STORE_AND_FORWARD = "store-and-forward"
    CUT_THROUGH = "cut-through"


@dataclass
class TransferConfig:
    """Knobs for one transfer: chunking, consumer read-ahead, forwarding."""

    chunk_size: int = DEFAULT_CHUNK_SIZE
    buffer_depth: int = DEFAULT_BUFFER_DEPTH
    streaming_mode: StreamingMode = StreamingMode.CUT_THROUGH

    def __post_init__(self) -> None:
        if isinstance(self.streaming_mode, str):
            aliases = {"sf": "store-and-forward", "ct": "cut-through"}
            self.streaming_mode = StreamingMode(
                aliases.get(self.streaming_mode.lower(), self.streaming_mode)
            )
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        if self.buffer_depth < self.chunk_size:
            raise ValueError("buffer_depth must be >= chunk_size")


def chunk_spans(length: int, chunk_size: int):
    """Yield (seq, offset, size, last) covering ``length`` bytes.

    A zero-length payload still yields exactly one empty final chunk, so
    every stream has exactly one last=true frame.
    """
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    if length == 0:
        yield 0, 0, 0, True
        return
    nchunks = (length + chunk_size - 1) // chunk_size
    for seq in range(nchunks):
        off = seq * chunk_size
        size = min(chunk_size, length - off)
        yield seq, off, size, seq == nchunks - 1


class _StreamTicket:
    """One admitted retrieval: a reserved credit plus an abort flag."""

    def __init__(self, store: "ObjectStore", obj: "BufferedObject") -> None:
        self._store = store
        self._obj = obj
        self._done = False
        self.aborted = threading.Event()

    @property
    def payload(self) -> bytes:
        return self._obj.payload

    def complete(self) -> None:
        self._store._finish(self, self._obj, completed=True)

    def abort(self) -> None:
        self._store._finish(self, self._obj, completed=False)


@dataclass
class BufferedObject:
    """Immutable payload awaiting its remaining retrievals."""

    key: int
    payload: bytes
    remaining_retrievals: int
    created_at: float
    reserved: int = 0
    tickets: set = field(default_factory=set)
    last_retrieval_at: float | None = None


class ObjectStore:
    """Ephemeral keyed buffer for one producer instance.

    Thread-safe; keys are a monotonic counter that is never reused within
    the instance lifetime. ``bytes_resident`` tracks the summed payload
    length of live objects.
    """

    def __init__(self, clock=time.monotonic) -> None:
        self._lock = threading.Lock()
        self._objects: dict[int, BufferedObject] = {}
        self._next_key = 0
        self._bytes_resident = 0
        self._clock = clock
        self._records: list[dict] = []

    @property
    def bytes_resident(self) -> int:
        return self._bytes_resident

    def __len__(self) -> int:
        return len(self._objects)

    def issue_key(self) -> int:
        """Allocate a fresh key without buffering (through-storage path)."""
        with self._lock:
            key = self._next_key
            self._next_key += 1
            return key

    def buffer_object(self, payload: bytes, n: int) -> int:
        if n < 1:
            raise ValueError("retrieval count must be >= 1")
        payload = bytes(payload)
        with self._lock:
            key = self._next_key
            self._next_key += 1
            self._objects[key] = BufferedObject(
                key=key,
                payload=payload,
                remaining_retrievals=n,
                created_at=self._clock(),
            )
            self._bytes_resident += len(payload)
            return key

    def begin_retrieval(self, key: int) -> _StreamTicket:
        """Admit a stream: reserve one credit or raise ObjectNotFound."""
        with self._lock:
            obj = self._objects.get(key)
            if obj is None or obj.remaining_retrievals - obj.reserved <= 0:
                raise ObjectNotFound(f"object {key} not found or exhausted")
            obj.reserved += 1
            ticket = _StreamTicket(self, obj)
            obj.tickets.add(ticket)
            return ticket

    def _finish(self, ticket: _StreamTicket, obj: BufferedObject, completed: bool) -> None:
        with self._lock:
            if ticket._done:
                return
            ticket._done = True
            obj.tickets.discard(ticket)
            obj.reserved -= 1
            if completed:
                obj.remaining_retrievals -= 1
                obj.last_retrieval_at = self._clock()
                if obj.remaining_retrievals == 0:
                    self._drop_locked(obj)

    def _drop_locked(self, obj: BufferedObject) -> None:
        if self._objects.pop(obj.key, None) is not None:
            self._bytes_resident -= len(obj.payload)
            self._records.append(
                {
                    "key": obj.key,
                    "bytes": len(obj.payload),
                    "stored_at": obj.created_at,
                    "released_at": obj.last_retrieval_at or self._clock(),
                }
            )

    def release_all(self) -> int:
        """Drop every live object; in-progress pulls observe an abort."""
        with self._lock:
            dropped = list(self._objects.values())
            for obj in dropped:
                for ticket in list(obj.tickets):
                    ticket.aborted.set()
                self._drop_locked(obj)
            return len(dropped)

    def residency_records(self) -> list[dict]:
        with self._lock:
            return list(self._records)


def _stream_ticket(ticket: _StreamTicket, sink, chunk_size: int) -> int:
    payload = ticket.payload
    count = 0
    try:
        for seq, off, size, last in chunk_spans(len(payload), chunk_size):
            if ticket.aborted.is_set():
                raise AbortedTransfer("object released mid-stream")
            sink(seq, memoryview(payload)[off : off + size], last)
            count += 1
    except BaseException:
        ticket.abort()
        raise
    ticket.complete()
    return count


def serve_pull(store: ObjectStore, key: int, sink, chunk_size: int = DEFAULT_CHUNK_SIZE) -> int:
    """Stream one object into ``sink(seq, data, last)``; returns chunk count.

    Completing the stream spends a retrieval credit; any failure (including
    a release racing this stream) aborts without spending one.
    """
    return _stream_ticket(store.begin_retrieval(key), sink, chunk_size)


class PullServer:
    """Data-plane endpoint of one producer instance.

    ``throttle_bytes_per_sec`` shapes outbound bandwidth (used to make
    transfer times deterministic on loopback); ``on_chunk`` is invoked after
    every chunk dispatch and exists for fault injection in tests.
    """

    def __init__(
        self,
        store: ObjectStore,
        secret: ProviderSecret,
        host: str = "127.0.0.1",
        port: int = 0,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        throttle_bytes_per_sec: float | None = None,
        on_chunk=None,
    ) -> None:
        self._store = store
        self._secret = secret
        self._host = host
        self._port = port
        self.chunk_size = chunk_size
        self.throttle_bytes_per_sec = throttle_bytes_per_sec
        self.on_chunk = on_chunk
        self._listener: socket.socket | None = None
        self._conns: set[socket.socket] = set()
        self._conn_lock = threading.Lock()
        self._running = False
        self.addr = ""

    def start(self) -> str:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self._host, self._port))
        self._listener.listen(128)
        host, port = self._listener.getsockname()
        self.addr = f"{host}:{port}"
        self._running = True
        threading.Thread(target=self._accept_loop, name=f"pull-{port}", daemon=True).start()
        return self.addr

    def stop(self) -> None:
        from .wire import close_listener

        self._running = False
        close_listener(self._listener)
        with self._conn_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while self._running:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conns.add(conn)
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(DEFAULT_IO_TIMEOUT)
            challenge = os.urandom(_CHALLENGE_SIZE)
            conn.sendall(challenge)
            tag = recv_exact(conn, _MAC_SIZE)
            if not self._secret.verify_mac(_HANDSHAKE_TAG + challenge, tag):
                logger.warning("pull handshake rejected on %s", self.addr)
                return
            magic, key = _REQUEST.unpack(recv_exact(conn, _REQUEST.size))
            if magic != MAGIC:
                return
            self._serve(conn, key)
        except (OSError, ConnectionError):
            pass
        finally:
            with self._conn_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _serve(self, conn: socket.socket, key: int) -> None:
        throttle = self.throttle_bytes_per_sec
        start = time.monotonic()
        sent = 0

        def sink(seq: int, data, last: bool) -> None:
            nonlocal sent
            conn.sendall(FRAME_HEADER.pack(seq, 1 if last else 0, len(data)))
            if len(data):
                conn.sendall(data)
            sent += len(data)
            if throttle:
                lag = sent / throttle - (time.monotonic() - start)
                if lag > 0:
                    time.sleep(lag)
            if self.on_chunk is not None:
                self.on_chunk(key, seq)

        try:
            ticket = self._store.begin_retrieval(key)
        except ObjectNotFound:
            conn.sendall(_STATUS_NOT_FOUND)
            return
        try:
            conn.sendall(_STATUS_OK)
            _stream_ticket(ticket, sink, self.chunk_size)
        except (OSError, ConnectionError, AbortedTransfer):
            ticket.abort()


@dataclass
class TransferStats:
    """Consumer-side instrumentation for one pull."""

    peak_buffered: int = 0
    chunks: int = 0
    bytes: int = 0


class _ChunkBuffer:
    """Byte-budgeted staging area between the socket reader and consumer."""

    def __init__(self, depth: int, stats: TransferStats | None) -> None:
        self._depth = depth
        self._stats = stats
        self._chunks: deque = deque()
        self._buffered = 0
        self._finished = False
        self._error: Exception | None = None
        self._closed = False
        self._cond = threading.Condition()

    def wait_for_space(self) -> bool:
        """Block until buffered bytes drop below depth; False if consumer quit."""
        with self._cond:
            while self._buffered >= self._depth and not self._closed:
                self._cond.wait()
            return not self._closed

    def add(self, data: bytes) -> None:
        with self._cond:
            self._chunks.append(data)
            self._buffered += len(data)
            if self._stats is not None:
                self._stats.chunks += 1
                self._stats.bytes += len(data)
                if self._buffered > self._stats.peak_buffered:
                    self._stats.peak_buffered = self._buffered
            self._cond.notify_all()

    def finish(self) -> None:
        with self._cond:
            self._finished = True
            self._cond.notify_all()

    def fail(self, err: Exception) -> None:
        with self._cond:
            self._error = err
            self._finished = True
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def pop(self) -> bytes | None:
        with self._cond:
            while not self._chunks and not self._finished:
                self._cond.wait()
            if self._chunks:
                data = self._chunks.popleft()
                self._buffered -= len(data)
                self._cond.notify_all()
                return data
            if self._error is not None:
                raise self._error
            return None


class PullStream:
    """Iterator over the chunks of one remote object.

    Connects, authenticates, and reads the status eagerly, so NotFound and
    Unreachable surface at construction. A reader thread then prefetches
    frames, reading from the socket only while the staging buffer is below
    ``buffer_depth``; transport windowing paces the producer beyond that.
    """

    def __init__(
        self,
        plain: PlainReference,
        secret: ProviderSecret,
        cfg: TransferConfig | None = None,
        stats: TransferStats | None = None,
        connect_timeout: float = 5.0,
        io_timeout: float = DEFAULT_IO_TIMEOUT,
    ) -> None:
        cfg = cfg or TransferConfig()
        self._sock: socket.socket | None = None
        try:
            self._sock = socket.create_connection(
                (plain.host, plain.port), timeout=connect_timeout
            )
        except OSError as e:
            raise ProducerUnreachable(f"no producer at {plain.producer_addr}: {e}") from None
        try:
            self._sock.settimeout(io_timeout)
            challenge = recv_exact(self._sock, _CHALLENGE_SIZE)
            self._sock.sendall(secret.mac(_HANDSHAKE_TAG + challenge))
            self._sock.sendall(_REQUEST.pack(MAGIC, plain.object_key))
            status = recv_exact(self._sock, 1)
        except (OSError, ConnectionError) as e:
            self._sock.close()
            raise AbortedTransfer(f"pull setup failed: {e}") from None
        if status == _STATUS_NOT_FOUND:
            self._sock.close()
            raise ObjectNotFound(f"object {plain.object_key} not found or exhausted")
        self._buf = _ChunkBuffer(cfg.buffer_depth, stats)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        assert self._sock is not None
        expected = 0
        try:
            while True:
                if not self._buf.wait_for_space():
                    return
                header = recv_exact(self._sock, FRAME_HEADER.size)
                seq, flags, size = FRAME_HEADER.unpack(header)
                data = recv_exact(self._sock, size) if size else b""
                if seq != expected:
                    raise AbortedTransfer(f"chunk sequence gap at {expected}")
                expected += 1
                self._buf.add(data)
                if flags & 1:
                    self._buf.finish()
                    return
        except AbortedTransfer as e:
            self._buf.fail(e)
        except (OSError, ConnectionError) as e:
            self._buf.fail(AbortedTransfer(f"stream interrupted: {e}"))

    def __iter__(self) -> "PullStream":
        return self

    def __next__(self) -> bytes:
        data = self._buf.pop()
        if data is None:
            raise StopIteration
        return data

    def close(self) -> None:
        self._buf.close()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass

    def __enter__(self) -> "PullStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def pull_object(
    plain: PlainReference,
    secret: ProviderSecret,
    cfg: TransferConfig | None = None,
    stats: TransferStats | None = None,
) -> bytes:
    """Pull one object and reassemble it.

    Cut-through forwards every chunk into the assembly as it arrives,
    overlapping downstream work with the network; store-and-forward keeps
    the stream locally buffered and only assembles after the final chunk.
    Both produce identical bytes.
    """
    cfg = cfg or TransferConfig()
    out = bytearray()
    with PullStream(plain, secret, cfg, stats) as stream:
        if cfg.streaming_mode is StreamingMode.STORE_AND_FORWARD:
            staged = list(stream)
            for data in staged:
                out += data
        else:
            for data in stream:
                out += data
    return bytes(out)
