"""Single-host cluster assembly.

Boots every component as an in-process task listening on its own loopback
port: activator, autoscaler, the two emulated storage daemons, and the
function instances (each with its queue proxy and pull server). The
returned handle drives deployment, transport switching, instrumentation
collection, fault injection, and shutdown for the CLI, the benchmark
harness, and the tests.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field as dc_field

from .controlplane import (
    Activator,
    Autoscaler,
    FunctionConfig,
    FunctionInstance,
    FunctionRegistry,
    FunctionState,
    InstanceState,
)
from .dataplane import ObjectStore, PullServer, TransferConfig
from .errors import BindError, ConfigError
from .refcrypto import ProviderSecret
from .runtime import DEFAULT_INLINE_LIMIT, TRANSPORTS, RuntimeEnv
from .sdk import SdkContext
from .storage import PROFILES, StorageProfile, StorageServer

logger = logging.getLogger(__name__)


@dataclass
class ClusterConfig:
    functions: list[FunctionConfig] = dc_field(default_factory=list)
    transfer: TransferConfig = dc_field(default_factory=TransferConfig)
    transport: str = "xdt"
    activator_port: int = 0
    storage_ports: dict[str, int] = dc_field(
        default_factory=lambda: {"cold-store": 0, "mem-cache": 0}
    )
    inline_limit: int = DEFAULT_INLINE_LIMIT
    split_threshold: int = 0
    boot_delay_s: float = 0.05
    keep_alive_s: float = 60.0
    metrics_interval_s: float = 0.1
    pull_throttle: float | None = None
    storage_overrides: dict[str, dict] = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}")
        urls = [f.url for f in self.functions]
        if len(urls) != len(set(urls)):
            raise ConfigError("duplicate function url in config")
        pinned = [p for p in [self.activator_port, *self.storage_ports.values()] if p]
        dupes = {p for p in pinned if pinned.count(p) > 1}
        if dupes:
            raise BindError(f"port {sorted(dupes)[0]} assigned to multiple components")

    @classmethod
    def from_dict(cls, raw: dict) -> "ClusterConfig":
        try:
            functions = [
                FunctionConfig(
                    url=f["url"],
                    handler_name=f.get("handler", f["url"]),
                    min_scale=int(f.get("min_scale", 1)),
                    max_scale=int(f.get("max_scale", 4)),
                    concurrency=int(f.get("concurrency", 1)),
                )
                for f in raw.get("functions", [])
            ]
            transfer = TransferConfig(
                chunk_size=int(raw.get("transfer", {}).get("chunk_size", 65536)),
                buffer_depth=int(raw.get("transfer", {}).get("buffer_depth", 1048576)),
                streaming_mode=raw.get("transfer", {}).get("streaming_mode", "cut-through"),
            )
            return cls(
                functions=functions,
                transfer=transfer,
                transport=raw.get("transport", "xdt"),
                activator_port=int(raw.get("activator_port", 0)),
                storage_ports={
                    "cold-store": int(raw.get("storage_ports", {}).get("cold-store", 0)),
                    "mem-cache": int(raw.get("storage_ports", {}).get("mem-cache", 0)),
                },
                inline_limit=int(raw.get("inline_limit", DEFAULT_INLINE_LIMIT)),
                split_threshold=int(raw.get("split_threshold", 0)),
                boot_delay_s=float(raw.get("boot_delay_ms", 50)) / 1000.0,
                keep_alive_s=float(raw.get("keep_alive_ms", 60000)) / 1000.0,
                metrics_interval_s=float(raw.get("metrics_interval_ms", 100)) / 1000.0,
                pull_throttle=raw.get("pull_throttle_bytes_per_sec"),
                storage_overrides=raw.get("storage_profiles", {}),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad cluster config: {e}") from None

    @classmethod
    def from_json_file(cls, path: str) -> "ClusterConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read cluster config {path!r}: {e}") from None
        return cls.from_dict(raw)


class _ClientNode:
    """Driver-side pseudo-instance: an object store plus a pull endpoint."""

    def __init__(self, env: RuntimeEnv) -> None:
        self.store = ObjectStore()
        self.pull_server = PullServer(
            self.store,
            env.secret,
            chunk_size=env.transfer_config.chunk_size,
            throttle_bytes_per_sec=env.pull_throttle,
        )
        addr = self.pull_server.start()
        self.ctx = SdkContext(env, self.store, addr)

    def stop(self) -> None:
        self.pull_server.stop()
        self.store.release_all()


class LocalCluster:
    """A running mini-cluster plus the knobs the harness and tests use."""

    def __init__(self, config: ClusterConfig | None = None, handlers: dict | None = None) -> None:
        self.config = config or ClusterConfig()
        if handlers is None:
            from .functions import HANDLERS

            handlers = HANDLERS
        self._handlers = handlers
        self.env = RuntimeEnv(
            secret=ProviderSecret.generate(),
            transfer_config=self.config.transfer,
            transport=self.config.transport,
            inline_limit=self.config.inline_limit,
            split_threshold=self.config.split_threshold,
            pull_throttle=self.config.pull_throttle,
        )
        self.registry = FunctionRegistry()
        self.storage_servers: dict[str, StorageServer] = {}
        self.activator: Activator | None = None
        self.autoscaler: Autoscaler | None = None
        self._clients: list[_ClientNode] = []
        self._booted = False
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def boot(self, ready_timeout: float = 10.0) -> "LocalCluster":
        for fn in self.config.functions:
            if fn.handler_name not in self._handlers:
                raise ConfigError(f"unknown handler {fn.handler_name!r} for function {fn.url!r}")

        for name, profile in PROFILES.items():
            profile = self._apply_overrides(name, profile)
            server = StorageServer(profile, port=self.config.storage_ports.get(name, 0))
            try:
                self.env.storage_addrs[name] = server.start()
            except OSError as e:
                raise BindError(f"cannot bind storage daemon on port "
                                f"{self.config.storage_ports.get(name, 0)}: {e}") from None
            self.storage_servers[name] = server

        self.autoscaler = Autoscaler(
            self.registry,
            self._spawn_for,
            interval=self.config.metrics_interval_s,
            keep_alive=self.config.keep_alive_s,
        )
        self.activator = Activator(
            self.registry,
            self.env,
            port=self.config.activator_port,
            scale_poke=self.autoscaler.poke,
        )
        try:
            self.env.activator_addr = self.activator.start()
        except OSError as e:
            raise BindError(str(e)) from None

        for fn in self.config.functions:
            self.deploy(fn, self._handlers[fn.handler_name], wait_ready=False)
        self.autoscaler.start()
        for fn in self.config.functions:
            if fn.min_scale > 0:
                self.wait_for_ready(fn.url, fn.min_scale, timeout=ready_timeout)
        self._booted = True
        return self

    def _apply_overrides(self, name: str, profile: StorageProfile) -> StorageProfile:
        raw = self.config.storage_overrides.get(name)
        if not raw:
            return profile
        return StorageProfile(
            name=profile.name,
            per_op_latency=float(raw.get("latency_ms", profile.per_op_latency * 1000)) / 1000.0,
            bandwidth_cap=float(raw.get("bandwidth_mbps", profile.bandwidth_cap / (1024 * 1024)))
            * 1024
            * 1024,
            price_rate=float(raw.get("price_rate", profile.price_rate)),
            billing_unit=raw.get("billing_unit", profile.billing_unit),
        )

    def deploy(self, config: FunctionConfig, handler, wait_ready: bool = True) -> FunctionState:
        """Register a function and spin up its minimum instances."""
        fstate = self.registry.register(config, handler)
        for _ in range(config.min_scale):
            self._spawn_for(fstate)
        if wait_ready and config.min_scale > 0:
            self.wait_for_ready(config.url, config.min_scale)
        return fstate

    def _spawn_for(self, fstate: FunctionState) -> FunctionInstance:
        assert self.autoscaler is not None
        instance = FunctionInstance(
            instance_id=self.registry.next_instance_id(),
            function_url=fstate.config.url,
            handler=fstate.handler,
            env=self.env,
            concurrency=fstate.config.concurrency,
            boot_delay=self.config.boot_delay_s,
            metrics_interval=self.config.metrics_interval_s,
            report_fn=self.autoscaler.report,
        )
        instance.start()
        fstate.on_spawn(instance)
        logger.info("spawned instance %d for %s", instance.instance_id, fstate.config.url)
        return instance

    def wait_for_ready(self, url: str, count: int, timeout: float = 10.0) -> None:
        fstate = self.registry.get(url)
        if fstate is None:
            raise ConfigError(f"function {url!r} not deployed")
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if fstate.instance_count(InstanceState.READY) >= count:
                return
            time.sleep(0.005)
        raise TimeoutError(f"{url}: {count} ready instances not reached in {timeout}s")

    def shutdown(self) -> None:
        if self.autoscaler is not None:
            self.autoscaler.stop()
        if self.activator is not None:
            self.activator.stop()
        for fstate in self.registry.all():
            with fstate.lock:
                instances = list(fstate.instances)
            for inst in instances:
                inst.kill()
        for client in self._clients:
            client.stop()
        for server in self.storage_servers.values():
            server.stop()

    def __enter__(self) -> "LocalCluster":
        return self.boot() if not self._booted else self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # -- driver-side access -------------------------------------------------

    def client_context(self) -> SdkContext:
        """A fresh SDK context for driver code outside any function."""
        node = _ClientNode(self.env)
        with self._lock:
            self._clients.append(node)
        return node.ctx

    def driver_context(self) -> SdkContext:
        """Shared memoized client context for repeated harness runs."""
        with self._lock:
            if not self._clients:
                self._clients.append(_ClientNode(self.env))
            return self._clients[0].ctx

    # -- run-time knobs ------------------------------------------------------

    def set_transport(self, transport: str) -> None:
        if transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {transport!r}")
        self.env.transport = transport

    def set_transfer_config(self, cfg: TransferConfig) -> None:
        self.env.transfer_config = cfg
        for server in self._pull_servers():
            server.chunk_size = cfg.chunk_size

    def _pull_servers(self) -> list[PullServer]:
        servers = [c.pull_server for c in self._clients]
        for fstate in self.registry.all():
            with fstate.lock:
                servers.extend(i.pull_server for i in fstate.instances)
        return servers

    def instances(self, url: str) -> list[FunctionInstance]:
        fstate = self.registry.get(url)
        if fstate is None:
            return []
        with fstate.lock:
            return list(fstate.instances)

    # -- instrumentation ----------------------------------------------------

    def reset_instrumentation(self) -> None:
        self.env.counters.reset()
        self.env.ledger.reset()
        for server in self.storage_servers.values():
            server.reset_ledger()

    def residency_records(self) -> list[dict]:
        """Object residency windows for the active transport.

        Keys are normalized to "pull_addr/object_key" so they join with the
        put ledger regardless of transport.
        """
        if self.env.transport == "xdt":
            records = []
            nodes = []
            for fstate in self.registry.all():
                with fstate.lock:
                    nodes.extend(fstate.instances)
            nodes.extend(self._clients)
            for node in nodes:
                addr = node.pull_server.addr
                for r in node.store.residency_records():
                    records.append({**r, "key": f"{addr}/{r['key']}"})
            return records
        return self.storage_servers[self.env.transport].residency_records()
