"""Emulated through-storage transfer service.

Stands in for the external object store / in-memory cache that functions
would otherwise relay payloads through: a networked key-value server with
injectable per-operation latency and an outbound/inbound bandwidth cap.
The server keeps a residency ledger (bytes x store-to-last-read window) so
runs can be priced afterwards.

Requests reuse the control-plane framing (u32 length || payload):

    put:  "P" || field(key) || u32 reads (0 = unlimited) || field(payload)
    get:  "G" || field(key)
    reply: status (0=OK, 1=KeyNotFound) || field(payload)  (payload empty
           for puts and misses)

When a put declares an expected read count, the object is dropped after
that many gets, mirroring ephemeral usage where transferred data is
de-allocated right after the last retrieval.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass

from . import wire
from .errors import KeyNotFound

logger = logging.getLogger(__name__)

_OP_PUT = b"P"
_OP_GET = b"G"
_U32 = struct.Struct(">I")

MIB = 1024 * 1024


@dataclass(frozen=True)
class StorageProfile:
    """Latency/bandwidth/pricing shape of one emulated backend."""

    name: str
    per_op_latency: float  # seconds added to every request
    bandwidth_cap: float  # bytes/sec for payload movement
    price_rate: float  # currency per GB per billing unit
    billing_unit: str  # "month" or "hour"

    def __post_init__(self) -> None:
        if self.per_op_latency < 0:
            raise ValueError("per_op_latency must be >= 0")
        if self.bandwidth_cap <= 0:
            raise ValueError("bandwidth_cap must be positive")


COLD_STORE = StorageProfile("cold-store", 0.015, 200 * MIB, 0.02, "month")
MEM_CACHE = StorageProfile("mem-cache", 0.001, 1024 * MIB, 0.02, "hour")

PROFILES = {p.name: p for p in (COLD_STORE, MEM_CACHE)}


@dataclass
class _Stored:
    payload: bytes
    reads_remaining: int | None
    stored_at: float
    last_read_at: float | None = None


class StorageServer:
    """Single-process emulation of an external storage/cache service."""

    def __init__(
        self,
        profile: StorageProfile,
        host: str = "127.0.0.1",
        port: int = 0,
        clock=time.monotonic,
    ) -> None:
        self.profile = profile
        self._host = host
        self._port = port
        self._clock = clock
        self._lock = threading.Lock()
        self._objects: dict[str, _Stored] = {}
        self._records: list[dict] = []
        self._listener: socket.socket | None = None
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
        threading.Thread(
            target=self._accept_loop, name=f"storaged-{self.profile.name}", daemon=True
        ).start()
        logger.info("storage daemon (%s) listening on %s", self.profile.name, self.addr)
        return self.addr

    def stop(self) -> None:
        self._running = False
        wire.close_listener(self._listener)

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while self._running:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(120.0)
            while True:
                try:
                    frame = wire.read_frame(conn)
                except (ConnectionError, OSError):
                    return
                reply = self._dispatch(frame)
                wire.write_frame(conn, reply)
        except (ConnectionError, OSError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _dispatch(self, frame: bytes) -> bytes:
        cur = wire._Cursor(frame[1:])
        op = frame[:1]
        if op == _OP_PUT:
            key = cur.field().decode()
            reads = cur.u32()
            payload = cur.field()
            self._put(key, payload, reads or None)
            return b"\x00" + _U32.pack(0)
        if op == _OP_GET:
            key = cur.field().decode()
            try:
                payload = self._get(key)
            except KeyNotFound:
                return b"\x01" + _U32.pack(0)
            return b"\x00" + _U32.pack(len(payload)) + payload
        raise wire.WireError(f"unknown storage op {op!r}")

    def _inject(self, nbytes: int) -> None:
        time.sleep(self.profile.per_op_latency + nbytes / self.profile.bandwidth_cap)

    def _put(self, key: str, payload: bytes, reads: int | None) -> None:
        if not key:
            raise wire.WireError("empty storage key")
        self._inject(len(payload))
        with self._lock:
            old = self._objects.pop(key, None)
            if old is not None:
                self._close_record(key, old)
            self._objects[key] = _Stored(bytes(payload), reads, self._clock())

    def _get(self, key: str) -> bytes:
        with self._lock:
            obj = self._objects.get(key)
            if obj is None:
                raise KeyNotFound(key)
            obj.last_read_at = self._clock()
            if obj.reads_remaining is not None:
                obj.reads_remaining -= 1
                if obj.reads_remaining <= 0:
                    del self._objects[key]
                    self._close_record(key, obj)
            payload = obj.payload
        self._inject(len(payload))
        return payload

    def _close_record(self, key: str, obj: _Stored) -> None:
        self._records.append(
            {
                "key": key,
                "bytes": len(obj.payload),
                "stored_at": obj.stored_at,
                "released_at": obj.last_read_at if obj.last_read_at is not None else self._clock(),
            }
        )

    def residency_records(self) -> list[dict]:
        """Closed residency windows plus a still-open entry per live object."""
        with self._lock:
            records = list(self._records)
            now = self._clock()
            for key, obj in self._objects.items():
                records.append(
                    {
                        "key": key,
                        "bytes": len(obj.payload),
                        "stored_at": obj.stored_at,
                        "released_at": obj.last_read_at if obj.last_read_at is not None else now,
                    }
                )
            return records

    def reset_ledger(self) -> None:
        with self._lock:
            self._records.clear()


class StorageClient:
    """Blocking put/get client; one connection per operation."""

    def __init__(self, addr: str, connect_timeout: float = 5.0) -> None:
        host, port = addr.rsplit(":", 1)
        self._target = (host, int(port))
        self._connect_timeout = connect_timeout

    def _roundtrip(self, request: bytes) -> bytes:
        with socket.create_connection(self._target, timeout=self._connect_timeout) as sock:
            sock.settimeout(120.0)
            wire.write_frame(sock, request)
            return wire.read_frame(sock)

    def put(self, key: str, payload: bytes, reads: int | None = None) -> None:
        if not key:
            raise ValueError("storage key must be nonempty")
        req = (
            _OP_PUT
            + wire._pack_field(key.encode())
            + _U32.pack(reads or 0)
            + wire._pack_field(payload)
        )
        reply = self._roundtrip(req)
        if reply[:1] != b"\x00":
            raise wire.WireError("storage put failed")

    def get(self, key: str) -> bytes:
        reply = self._roundtrip(_OP_GET + wire._pack_field(key.encode()))
        if reply[:1] == b"\x01":
            raise KeyNotFound(key)
        (n,) = _U32.unpack_from(reply, 1)
        return reply[5 : 5 + n]
