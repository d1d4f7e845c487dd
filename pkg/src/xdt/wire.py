"""Length-prefixed framing and the invocation envelope codec.

All control-plane hops (caller to activator, activator to queue proxy) and
the storage baseline share one framing: ``u32 length || payload``, integers
big-endian. An invocation envelope payload is a field sequence:

    field(request_id) || field(function_url) || u32 header_count ||
    (field(key) field(value))* || field(body)

where ``field`` is ``u32 length || bytes``.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

from .refcrypto import REF_HEADER  # single definition, re-exported for envelope users

# Upper bound on any single control/storage frame. The data plane streams in
# chunks and never approaches this; storage puts carry whole payloads.
DEFAULT_MAX_FRAME = 512 * 1024 * 1024

_U32 = struct.Struct(">I")


class WireError(ConnectionError):
    """Malformed frame or unexpected end of stream."""


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes or raise WireError on EOF."""
    if n == 0:
        return b""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            raise WireError("connection closed mid-message")
        got += r
    return bytes(buf)


def read_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    (length,) = _U32.unpack(recv_exact(sock, 4))
    if length > max_frame:
        raise WireError(f"frame of {length} bytes exceeds limit {max_frame}")
    return recv_exact(sock, length)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_U32.pack(len(payload)) + payload)


def close_listener(listener: socket.socket | None) -> None:
    """Release a listening socket even while a thread blocks in accept().

    A plain close() leaves the kernel socket alive for as long as a thread
    sits in accept() on it; shutdown() wakes that thread first.
    """
    if listener is None:
        return
    try:
        listener.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        listener.close()
    except OSError:
        pass


def _pack_field(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


class _Cursor:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.pos = 0

    def u32(self) -> int:
        if self.pos + 4 > len(self.raw):
            raise WireError("truncated envelope")
        (v,) = _U32.unpack_from(self.raw, self.pos)
        self.pos += 4
        return v

    def field(self) -> bytes:
        n = self.u32()
        if self.pos + n > len(self.raw):
            raise WireError("truncated envelope field")
        data = self.raw[self.pos : self.pos + n]
        self.pos += n
        return data

    def done(self) -> bool:
        return self.pos == len(self.raw)


# Header names fixed by the external interface contract.
STATUS_HEADER = "x-xdt-status"
ERROR_HEADER = "x-xdt-error"


@dataclass
class Envelope:
    """Control-plane message: routing metadata plus a small inline body.

    The same shape carries requests and responses; responses put their
    status in the reserved status header and leave function_url empty.
    """

    request_id: str
    function_url: str = ""
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def encode(self) -> bytes:
        parts = [
            _pack_field(self.request_id.encode()),
            _pack_field(self.function_url.encode()),
            _U32.pack(len(self.headers)),
        ]
        for k, v in self.headers.items():
            parts.append(_pack_field(k.encode()))
            parts.append(_pack_field(v.encode()))
        parts.append(_pack_field(self.body))
        return b"".join(parts)

    @staticmethod
    def decode(raw: bytes) -> "Envelope":
        cur = _Cursor(raw)
        request_id = cur.field().decode()
        function_url = cur.field().decode()
        nheaders = cur.u32()
        headers: dict[str, str] = {}
        for _ in range(nheaders):
            k = cur.field().decode()
            v = cur.field().decode()
            headers[k] = v
        body = cur.field()
        if not cur.done():
            raise WireError("trailing bytes after envelope")
        return Envelope(request_id, function_url, headers, body)


def send_envelope(sock: socket.socket, env: Envelope) -> None:
    write_frame(sock, env.encode())


def recv_envelope(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> Envelope:
    return Envelope.decode(read_frame(sock, max_frame))
