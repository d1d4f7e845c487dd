"""The user-facing API: invoke / put / get / serve.

The SDK is the trusted bridge between user handler code and the provider
components. It splits an invocation into a control message plus a buffered
object, seals references on the way out, and reassembles payloads on the
way in. User code only ever holds opaque reference tokens; the provider
secret and producer endpoints stay behind this module boundary.

The same API runs over three transports selected per cluster: ``xdt``
(direct pull from the producer's memory) or the two emulated baselines
(``cold-store``, ``mem-cache``) that relay every payload through the
storage service. A reference token is interpreted accordingly: under the
baselines the producer address and object key name a storage key instead
of a pull endpoint.
"""

from __future__ import annotations

import logging
import socket
import uuid

from . import wire
from .dataplane import ObjectStore, pull_object
from .errors import (
    ObjectNotFound,
    ProducerUnreachable,
    KeyNotFound,
    XdtError,
    raise_for_status,
)
from .refcrypto import PlainReference, decode_reference, encode_reference
from .runtime import TRANSPORT_XDT, RuntimeEnv
from .storage import StorageClient

logger = logging.getLogger(__name__)

INVOKE_TIMEOUT = 300.0


def _storage_key(plain: PlainReference) -> str:
    # Producer address + per-producer counter stays unique cluster-wide.
    return f"{plain.producer_addr}/{plain.object_key}"


class SdkContext:
    """Handle to the cluster for one function instance (or bench driver).

    Safe for concurrent invoke/put/get from a single handler: all mutable
    state lives in the thread-safe object store and counters.
    """

    def __init__(
        self,
        env: RuntimeEnv,
        store: ObjectStore,
        pull_addr: str,
        instance=None,
        request_id: str | None = None,
    ) -> None:
        self._env = env
        self._store = store
        self._pull_addr = pull_addr
        self._instance = instance
        self.request_id = request_id

    def fresh_view(self, request_id: str) -> "SdkContext":
        """Per-invocation context view; shares infrastructure, not state."""
        return SdkContext(self._env, self._store, self._pull_addr, self._instance, request_id)

    @property
    def transport(self) -> str:
        return self._env.transport

    # -- non-blocking object API ------------------------------------------

    def put(self, payload: bytes, n: int = 1) -> str:
        """Buffer a payload for n retrievals and return its opaque token."""
        if n < 1:
            raise ValueError("retrieval count must be >= 1")
        payload = bytes(payload)
        if self._env.transport == TRANSPORT_XDT:
            key = self._store.buffer_object(payload, n)
        else:
            key = self._store.issue_key()
            client = StorageClient(self._env.storage_addr())
            client.put(_storage_key(PlainReference(self._pull_addr, key)), payload, reads=n)
        self._env.counters.record_put(len(payload))
        plain = PlainReference(self._pull_addr, key)
        self._env.ledger.record_object(self.request_id or "", _storage_key(plain), len(payload))
        return encode_reference(plain, self._env.secret)

    def get(self, token: str) -> bytes:
        """Fetch the object behind a token, pulling straight from its producer."""
        plain = decode_reference(token, self._env.secret)
        if self._env.transport == TRANSPORT_XDT:
            data = pull_object(plain, self._env.secret, self._env.transfer_config)
        else:
            client = StorageClient(self._env.storage_addr())
            try:
                data = client.get(_storage_key(plain))
            except KeyNotFound:
                raise ObjectNotFound(f"storage object for key {plain.object_key} gone") from None
            except (ConnectionError, OSError) as e:
                raise ProducerUnreachable(f"storage backend unreachable: {e}") from None
        self._env.counters.record_get(len(data))
        return data

    # -- blocking invocation API ------------------------------------------

    def invoke(self, url: str, payload: bytes) -> bytes:
        """Invoke a function by URL, passing the payload by value.

        Payloads above the split threshold (or the inline limit) travel as
        a buffered object with only a reference in the control message; the
        response is reassembled the same way before returning.
        """
        payload = bytes(payload)
        request_id = uuid.uuid4().hex
        headers: dict[str, str] = {}
        body = b""
        if len(payload) > self._env.split_threshold or len(payload) > self._env.inline_limit:
            headers[wire.REF_HEADER] = self.put(payload, 1)
        else:
            body = payload
        env = wire.Envelope(request_id, url, headers, body)

        host, port = self._env.activator_addr.rsplit(":", 1)
        try:
            with socket.create_connection((host, int(port)), timeout=10.0) as sock:
                sock.settimeout(INVOKE_TIMEOUT)
                wire.send_envelope(sock, env)
                resp = wire.recv_envelope(sock)
        except (ConnectionError, OSError) as e:
            raise XdtError(f"activator unreachable: {e}") from None

        status = resp.headers.get(wire.STATUS_HEADER, "")
        raise_for_status(status, resp.headers.get(wire.ERROR_HEADER, ""))
        if wire.REF_HEADER in resp.headers:
            return self.get(resp.headers[wire.REF_HEADER])
        return resp.body


def serve(ctx: SdkContext, handler) -> None:
    """Function-server entry point: register the handler and run until
    the instance shuts down.

    The handler is ``fn(payload: bytes, ctx: SdkContext) -> bytes`` and
    receives a fresh context view per invocation.
    """
    instance = ctx._instance
    if instance is None:
        raise RuntimeError("serve() requires a context bound to a function instance")
    instance.register_handler(handler)
    instance.wait_shutdown()
