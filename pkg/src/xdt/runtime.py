"""Shared per-cluster runtime state handed to provider components.

One RuntimeEnv exists per cluster. It carries the provider secret, the
transport selection, transfer tuning, and the instrumentation ledgers that
tests and the cost model read after a run. User handler code never sees
this object directly; it lives behind the SDK context.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from .dataplane import TransferConfig
from .refcrypto import ProviderSecret

TRANSPORT_XDT = "xdt"
TRANSPORT_COLD_STORE = "cold-store"
TRANSPORT_MEM_CACHE = "mem-cache"
TRANSPORTS = (TRANSPORT_XDT, TRANSPORT_COLD_STORE, TRANSPORT_MEM_CACHE)

DEFAULT_INLINE_LIMIT = 6 * 1024 * 1024


class TransferCounters:
    """Cluster-wide byte accounting for the put/get API surface."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.bytes_put = 0
        self.bytes_got = 0
        self.puts = 0
        self.gets = 0

    def record_put(self, n: int) -> None:
        with self._lock:
            self.bytes_put += n
            self.puts += 1

    def record_get(self, n: int) -> None:
        with self._lock:
            self.bytes_got += n
            self.gets += 1

    def reset(self) -> None:
        with self._lock:
            self.bytes_put = self.bytes_got = self.puts = self.gets = 0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "bytes_put": self.bytes_put,
                "bytes_got": self.bytes_got,
                "puts": self.puts,
                "gets": self.gets,
            }


class ExecutionLedger:
    """Which instance executed which request, and for how long.

    Backs the at-most-once assertion in tests and the per-invocation
    compute records of the cost model.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._executions: dict[str, list[int]] = {}
        self._durations: list[dict] = []
        self._objects: list[dict] = []

    def record_execution(self, request_id: str, instance_id: int) -> None:
        with self._lock:
            self._executions.setdefault(request_id, []).append(instance_id)

    def record_object(self, request_id: str, key: str, nbytes: int) -> None:
        with self._lock:
            self._objects.append({"request_id": request_id, "key": key, "bytes": nbytes})

    def objects(self) -> list[dict]:
        with self._lock:
            return list(self._objects)

    def record_duration(self, function_url: str, request_id: str, duration_s: float) -> None:
        with self._lock:
            self._durations.append(
                {"function": function_url, "request_id": request_id, "duration_s": duration_s}
            )

    def executions(self) -> dict[str, list[int]]:
        with self._lock:
            return {k: list(v) for k, v in self._executions.items()}

    def execution_count(self, request_id: str) -> int:
        with self._lock:
            return len(self._executions.get(request_id, ()))

    def durations(self) -> list[dict]:
        with self._lock:
            return list(self._durations)

    def reset(self) -> None:
        with self._lock:
            self._executions.clear()
            self._durations.clear()
            self._objects.clear()


@dataclass
class RuntimeEnv:
    """Provider-side wiring shared by the SDK, queue proxies, and activator."""

    secret: ProviderSecret
    transfer_config: TransferConfig = field(default_factory=TransferConfig)
    transport: str = TRANSPORT_XDT
    storage_addrs: dict[str, str] = field(default_factory=dict)
    activator_addr: str = ""
    inline_limit: int = DEFAULT_INLINE_LIMIT
    split_threshold: int = 0
    pull_throttle: float | None = None
    counters: TransferCounters = field(default_factory=TransferCounters)
    ledger: ExecutionLedger = field(default_factory=ExecutionLedger)
    clock: object = time.monotonic

    def storage_addr(self) -> str:
        try:
            return self.storage_addrs[self.transport]
        except KeyError:
            raise RuntimeError(f"no storage backend configured for {self.transport!r}") from None
