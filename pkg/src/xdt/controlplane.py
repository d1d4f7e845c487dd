"""Control-plane components: activator, autoscaler, and queue proxies.

The activator is the per-cluster load balancer: it routes each invocation
envelope to the least-loaded ready instance of the target function, or
buffers it FIFO and requests a scale-up when none is available. The
autoscaler turns reported queue metrics into instance counts, spawning on
demand and reclaiming instances that sit idle past the keep-alive window.
The queue proxy is the per-instance sidecar: it accepts envelopes, pulls
any referenced object on the consumer's behalf (starting while the
instance is still booting, so transfer and boot overlap), and only then
hands the reconstructed request to the function server.

Envelopes assigned while an instance boots are admitted to its queue in
assignment order via a sequence header, which keeps buffered-then-drained
traffic FIFO without an acknowledgement protocol.
"""

from __future__ import annotations

import enum
import logging
import math
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass

from . import wire
from .dataplane import (
    FRAME_HEADER,
    ObjectStore,
    PullServer,
    PullStream,
    StreamingMode,
)
from .errors import (
    STATUS_FUNCTION_ERROR,
    STATUS_OK,
    STATUS_TRANSFER_FAILED,
    STATUS_UNKNOWN_FUNCTION,
    AbortedTransfer,
    AuthError,
    TransferError,
)
from .refcrypto import decode_reference
from .runtime import TRANSPORT_XDT, RuntimeEnv
from .sdk import SdkContext, serve

logger = logging.getLogger(__name__)

SEQ_HEADER = "x-xdt-seq"

ROUTE_TIMEOUT = 60.0
WORK_TIMEOUT = 300.0
ADMIT_ORDER_TIMEOUT = 5.0
MISSED_REPORTS_LIMIT = 10

DEFAULT_BOOT_DELAY = 0.05
DEFAULT_KEEP_ALIVE = 60.0
DEFAULT_METRICS_INTERVAL = 0.1


class InstanceState(enum.Enum):
    BOOTING = "booting"
    READY = "ready"
    DRAINING = "draining"
    DEAD = "dead"


@dataclass
class InstanceMetrics:
    instance_id: int
    queue_depth: int
    in_flight: int
    last_active: float


@dataclass
class FunctionConfig:
    url: str
    handler_name: str = ""
    min_scale: int = 1
    max_scale: int = 4
    concurrency: int = 1

    def __post_init__(self) -> None:
        if self.min_scale < 0 or self.max_scale < 1:
            raise ValueError("scale bounds out of range")
        if self.max_scale < self.min_scale:
            raise ValueError("max_scale must be >= min_scale")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


def choose_instance(candidates) -> int:
    """Pick the least-loaded instance id; ties go to the lowest id.

    ``candidates`` is an iterable of (instance_id, load) pairs.
    """
    return min(candidates, key=lambda c: (c[1], c[0]))[0]


def scale_decision(outstanding: int, min_scale: int, max_scale: int, concurrency: int) -> int:
    """Desired instance count for the observed outstanding load."""
    desired = math.ceil(outstanding / max(1, concurrency))
    return max(min_scale, min(max_scale, desired))


def make_response(
    request_id: str,
    status: str,
    detail: str = "",
    headers: dict[str, str] | None = None,
    body: bytes = b"",
) -> wire.Envelope:
    h = dict(headers or {})
    h[wire.STATUS_HEADER] = status
    if detail:
        h[wire.ERROR_HEADER] = detail
    return wire.Envelope(request_id, "", h, body)


class _Work:
    __slots__ = ("envelope", "response", "done")

    def __init__(self, envelope: wire.Envelope) -> None:
        self.envelope = envelope
        self.response: wire.Envelope | None = None
        self.done = threading.Event()


class QueueProxy:
    """Per-instance request forwarder and metrics reporter."""

    def __init__(self, instance: "FunctionInstance", concurrency: int, report_fn=None) -> None:
        self._instance = instance
        self._concurrency = concurrency
        self._report_fn = report_fn
        self._cond = threading.Condition()
        self._queue: deque[_Work] = deque()
        self._next_admit = 0
        self._stopped = False
        self.queue_depth = 0
        self.in_flight = 0
        self.last_active = time.monotonic()
        self._listener: socket.socket | None = None
        self.addr = ""
        self._stop_event = threading.Event()

    def start(self, host: str = "127.0.0.1", port: int = 0) -> str:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        h, p = self._listener.getsockname()
        self.addr = f"{h}:{p}"
        threading.Thread(target=self._accept_loop, name=f"qp-{p}", daemon=True).start()
        for _ in range(self._concurrency):
            threading.Thread(target=self._worker, daemon=True).start()
        threading.Thread(target=self._report_loop, daemon=True).start()
        return self.addr

    def stop(self) -> None:
        self._stop_event.set()
        with self._cond:
            self._stopped = True
            abandoned = list(self._queue)
            self._queue.clear()
            self.queue_depth = 0
            self._cond.notify_all()
        for work in abandoned:
            work.response = make_response(
                work.envelope.request_id, STATUS_TRANSFER_FAILED, "instance shut down"
            )
            work.done.set()
        wire.close_listener(self._listener)

    def metrics(self) -> InstanceMetrics:
        with self._cond:
            return InstanceMetrics(
                self._instance.instance_id, self.queue_depth, self.in_flight, self.last_active
            )

    def report_metrics(self, autoscaler: "Autoscaler") -> None:
        autoscaler.report(self._instance.instance_id, self.metrics())

    def _report_loop(self) -> None:
        interval = self._instance.metrics_interval
        while not self._stop_event.wait(interval):
            fn = self._report_fn
            if fn is not None:
                fn(self._instance.instance_id, self.metrics())

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopped:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle_conn, args=(conn,), daemon=True).start()

    def _handle_conn(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(WORK_TIMEOUT)
            env = wire.recv_envelope(conn)
            seq = env.headers.pop(SEQ_HEADER, None)
            work = _Work(env)
            self._admit(work, int(seq) if seq is not None else None)
            if not work.done.wait(WORK_TIMEOUT):
                work.response = make_response(
                    env.request_id, STATUS_TRANSFER_FAILED, "invocation timed out"
                )
            wire.send_envelope(conn, work.response)
        except (ConnectionError, OSError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _admit(self, work: _Work, seq: int | None) -> None:
        with self._cond:
            if seq is not None:
                deadline = time.monotonic() + ADMIT_ORDER_TIMEOUT
                while seq > self._next_admit and not self._stopped:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        logger.warning("admission gap before seq %d on %s", seq, self.addr)
                        break
                    self._cond.wait(min(remaining, 0.05))
                self._next_admit = max(self._next_admit, seq + 1)
            self._queue.append(work)
            self.queue_depth += 1
            self._cond.notify_all()

    def _worker(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._stopped:
                    self._cond.wait()
                if not self._queue:
                    return
                work = self._queue.popleft()
                self.queue_depth -= 1
                self.in_flight += 1
            try:
                response = self.handle_invocation(work.envelope)
            except Exception as e:  # never lose the worker
                logger.exception("queue proxy failed handling %s", work.envelope.request_id)
                response = make_response(
                    work.envelope.request_id, STATUS_FUNCTION_ERROR, repr(e)
                )
            with self._cond:
                self.in_flight -= 1
                self.last_active = time.monotonic()
            work.response = response
            work.done.set()

    def _pull_on_behalf(self, runtime: RuntimeEnv, token: str) -> bytes:
        """Fetch the referenced object for the function server.

        Two real hops: the pull from the producer into this proxy, and the
        local forward from the proxy into the function server. Cut-through
        sends each chunk downstream as it arrives so the hops pipeline;
        store-and-forward buffers the whole object here first, so the hops
        serialize. Backpressure chains through both: the forward stalls when
        the server-side pipe fills, which stalls the pull buffer, which
        stops socket reads.
        """
        cfg = runtime.transfer_config
        throttle = runtime.pull_throttle  # emulated link bandwidth, both hops
        plain = decode_reference(token, runtime.secret)
        qp_end, server_end = socket.socketpair()
        failure: list[Exception] = []

        def forward() -> None:
            try:
                stream = PullStream(plain, runtime.secret, cfg)
                try:
                    if cfg.streaming_mode is StreamingMode.STORE_AND_FORWARD:
                        source = iter(list(stream))
                    else:
                        source = stream
                    seq = 0
                    sent = 0
                    started = time.monotonic()
                    for data in source:
                        qp_end.sendall(FRAME_HEADER.pack(seq, 0, len(data)))
                        if data:
                            qp_end.sendall(data)
                        seq += 1
                        sent += len(data)
                        if throttle:
                            lag = sent / throttle - (time.monotonic() - started)
                            if lag > 0:
                                time.sleep(lag)
                    qp_end.sendall(FRAME_HEADER.pack(seq, 1, 0))
                finally:
                    stream.close()
            except Exception as e:
                failure.append(e)
            finally:
                try:
                    qp_end.close()
                except OSError:
                    pass

        forwarder = threading.Thread(target=forward, daemon=True)
        forwarder.start()
        out = bytearray()
        try:
            while True:
                seq, flags, size = FRAME_HEADER.unpack(
                    wire.recv_exact(server_end, FRAME_HEADER.size)
                )
                if size:
                    out += wire.recv_exact(server_end, size)
                if flags & 1:
                    break
        except (ConnectionError, OSError):
            forwarder.join(timeout=WORK_TIMEOUT)
            raise failure[0] if failure else AbortedTransfer("local forward interrupted")
        finally:
            try:
                server_end.close()
            except OSError:
                pass
        forwarder.join(timeout=WORK_TIMEOUT)
        if failure:
            raise failure[0]
        runtime.counters.record_get(len(out))
        return bytes(out)

    def handle_invocation(self, env: wire.Envelope) -> wire.Envelope:
        """Reconstruct the request, run the handler, build the response.

        A referenced object is pulled before the readiness gate so the
        transfer overlaps instance boot; a failed pull returns the transfer
        error without ever executing the handler.
        """
        instance = self._instance
        ctx = instance.ctx.fresh_view(env.request_id)
        runtime = instance.env

        if wire.REF_HEADER in env.headers:
            try:
                if runtime.transport == TRANSPORT_XDT:
                    payload = self._pull_on_behalf(runtime, env.headers[wire.REF_HEADER])
                else:
                    payload = ctx.get(env.headers[wire.REF_HEADER])
            except (TransferError, AuthError) as e:
                return make_response(env.request_id, STATUS_TRANSFER_FAILED, str(e))
        else:
            payload = env.body

        if not instance.wait_ready(WORK_TIMEOUT):
            return make_response(
                env.request_id, STATUS_TRANSFER_FAILED, "instance died before execution"
            )

        runtime.ledger.record_execution(env.request_id, instance.instance_id)
        started = time.monotonic()
        try:
            result = instance.call_handler(payload, ctx)
        except TransferError as e:
            # Propagate with its own code so driver-level retry logic can fire.
            return make_response(env.request_id, STATUS_TRANSFER_FAILED, str(e))
        except Exception as e:
            return make_response(env.request_id, STATUS_FUNCTION_ERROR, repr(e))
        finally:
            runtime.ledger.record_duration(
                instance.function_url, env.request_id, time.monotonic() - started
            )

        if not isinstance(result, (bytes, bytearray, memoryview)):
            return make_response(
                env.request_id, STATUS_FUNCTION_ERROR, "handler must return bytes"
            )
        result = bytes(result)
        if len(result) > runtime.inline_limit:
            token = ctx.put(result, 1)
            return make_response(env.request_id, STATUS_OK, headers={wire.REF_HEADER: token})
        return make_response(env.request_id, STATUS_OK, body=result)


class FunctionInstance:
    """One simulated function pod: pull server, queue proxy, function server.

    The queue proxy and pull server listen from the moment of spawn; the
    function server (handler registration) comes up only after the
    configured boot delay, which is what cold-start overlap exploits.
    """

    def __init__(
        self,
        instance_id: int,
        function_url: str,
        handler,
        env: RuntimeEnv,
        concurrency: int = 1,
        boot_delay: float = DEFAULT_BOOT_DELAY,
        metrics_interval: float = DEFAULT_METRICS_INTERVAL,
        report_fn=None,
    ) -> None:
        self.instance_id = instance_id
        self.function_url = function_url
        self.env = env
        self.boot_delay = boot_delay
        self.metrics_interval = metrics_interval
        self.state = InstanceState.BOOTING
        self.spawned_at = time.monotonic()
        self.store = ObjectStore()
        self.pull_server = PullServer(
            self.store,
            env.secret,
            chunk_size=env.transfer_config.chunk_size,
            throttle_bytes_per_sec=env.pull_throttle,
        )
        self.qp = QueueProxy(self, concurrency, report_fn)
        self._handler = handler
        self._registered_handler = None
        self._ready = threading.Event()
        self._shutdown = threading.Event()
        self._lifecycle_lock = threading.Lock()
        self.ctx: SdkContext | None = None

    @property
    def qp_addr(self) -> str:
        return self.qp.addr

    def start(self) -> "FunctionInstance":
        pull_addr = self.pull_server.start()
        self.qp.start()
        self.ctx = SdkContext(self.env, self.store, pull_addr, instance=self)
        threading.Thread(
            target=self._function_server_main,
            name=f"fnserver-{self.function_url}-{self.instance_id}",
            daemon=True,
        ).start()
        return self

    def _function_server_main(self) -> None:
        # Simulated container boot, then the ordinary server entry point.
        if self.boot_delay > 0:
            time.sleep(self.boot_delay)
        if self.state is InstanceState.DEAD:
            return
        serve(self.ctx, self._handler)

    def register_handler(self, handler) -> None:
        self._registered_handler = handler
        if self.state is InstanceState.BOOTING:
            self.state = InstanceState.READY
        self._ready.set()

    def call_handler(self, payload: bytes, ctx: SdkContext) -> bytes:
        handler = self._registered_handler
        if handler is None:
            raise RuntimeError("no handler registered")
        return handler(payload, ctx)

    def wait_ready(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while not self._ready.wait(0.02):
            if self.state is InstanceState.DEAD or time.monotonic() > deadline:
                return False
        return self.state is InstanceState.READY

    def wait_shutdown(self) -> None:
        self._shutdown.wait()

    def kill(self) -> None:
        """Immediate death: abort streams, drop objects, stop listening."""
        self._teardown(InstanceState.DEAD)

    def drain_and_stop(self, timeout: float = 10.0) -> None:
        """Graceful reclaim: stop accepting, finish queued work, then die."""
        if self.state is InstanceState.DEAD:
            return
        self.state = InstanceState.DRAINING
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            m = self.qp.metrics()
            if m.queue_depth == 0 and m.in_flight == 0:
                break
            time.sleep(0.01)
        self._teardown(InstanceState.DEAD)

    def _teardown(self, final_state: InstanceState) -> None:
        with self._lifecycle_lock:
            if self.state is InstanceState.DEAD and self._shutdown.is_set():
                return
            self.state = final_state
            self.qp.stop()
            self.pull_server.stop()
            self.store.release_all()
            self._shutdown.set()
            self._ready.set()  # wake boot-gated workers; they re-check state
        logger.info("instance %d (%s) shut down", self.instance_id, self.function_url)


class _PendingRoute:
    __slots__ = ("event", "instance", "seq")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.instance: FunctionInstance | None = None
        self.seq: int | None = None


class FunctionState:
    """Routing and scaling state for one deployed function."""

    def __init__(self, config: FunctionConfig, handler) -> None:
        self.config = config
        self.handler = handler
        self.lock = threading.Lock()
        self.instances: list[FunctionInstance] = []
        self.outstanding: dict[int, int] = {}
        self.pending: deque[_PendingRoute] = deque()
        self._seq: dict[int, int] = {}

    def _routable(self) -> list[FunctionInstance]:
        ready = [i for i in self.instances if i.state is InstanceState.READY]
        if ready:
            return ready
        return [i for i in self.instances if i.state is InstanceState.BOOTING]

    def _assign_locked(self, candidates: list[FunctionInstance]):
        iid = choose_instance(
            [(i.instance_id, self.outstanding.get(i.instance_id, 0)) for i in candidates]
        )
        inst = next(i for i in candidates if i.instance_id == iid)
        self.outstanding[iid] = self.outstanding.get(iid, 0) + 1
        seq = self._seq.get(iid, 0)
        self._seq[iid] = seq + 1
        return inst, seq

    def assign(self, _env: wire.Envelope):
        """Returns (instance, seq, None) or (None, None, pending_entry)."""
        with self.lock:
            candidates = self._routable()
            if candidates:
                inst, seq = self._assign_locked(candidates)
                return inst, seq, None
            entry = _PendingRoute()
            self.pending.append(entry)
            return None, None, entry

    def on_spawn(self, instance: FunctionInstance) -> None:
        """Admit a new instance and drain buffered envelopes to it FIFO."""
        with self.lock:
            self.instances.append(instance)
            self.outstanding.setdefault(instance.instance_id, 0)
            self._seq.setdefault(instance.instance_id, 0)
            while self.pending:
                entry = self.pending.popleft()
                candidates = self._routable()
                entry.instance, entry.seq = self._assign_locked(candidates)
                entry.event.set()

    def release(self, instance: FunctionInstance) -> None:
        with self.lock:
            iid = instance.instance_id
            if iid in self.outstanding and self.outstanding[iid] > 0:
                self.outstanding[iid] -= 1

    def cancel_pending(self, entry: _PendingRoute) -> None:
        with self.lock:
            try:
                self.pending.remove(entry)
            except ValueError:
                pass

    def remove_instance(self, instance: FunctionInstance) -> None:
        with self.lock:
            if instance in self.instances:
                self.instances.remove(instance)

    def pending_count(self) -> int:
        with self.lock:
            return len(self.pending)

    def instance_count(self, *states: InstanceState) -> int:
        with self.lock:
            if not states:
                return len(self.instances)
            return sum(1 for i in self.instances if i.state in states)


class FunctionRegistry:
    """All deployed functions plus the instance id counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._functions: dict[str, FunctionState] = {}
        self._next_instance_id = 0

    def register(self, config: FunctionConfig, handler) -> FunctionState:
        with self._lock:
            if config.url in self._functions:
                raise ValueError(f"function {config.url!r} already deployed")
            state = FunctionState(config, handler)
            self._functions[config.url] = state
            return state

    def get(self, url: str) -> FunctionState | None:
        with self._lock:
            return self._functions.get(url)

    def all(self) -> list[FunctionState]:
        with self._lock:
            return list(self._functions.values())

    def next_instance_id(self) -> int:
        with self._lock:
            iid = self._next_instance_id
            self._next_instance_id += 1
            return iid


class Activator:
    """Cluster load balancer: one envelope in, one response envelope out."""

    def __init__(
        self,
        registry: FunctionRegistry,
        env: RuntimeEnv,
        host: str = "127.0.0.1",
        port: int = 0,
        scale_poke=None,
    ) -> None:
        self._registry = registry
        self._env = env
        self._host = host
        self._port = port
        self.scale_poke = scale_poke
        self._listener: socket.socket | None = None
        self._running = False
        self.addr = ""

    def start(self) -> str:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((self._host, self._port))
        except OSError as e:
            raise OSError(f"cannot bind activator to port {self._port}: {e}") from e
        self._listener.listen(256)
        h, p = self._listener.getsockname()
        self.addr = f"{h}:{p}"
        self._running = True
        threading.Thread(target=self._accept_loop, name="activator", daemon=True).start()
        logger.info("activator listening on %s", self.addr)
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
            threading.Thread(target=self._handle_conn, args=(conn,), daemon=True).start()

    def _handle_conn(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(WORK_TIMEOUT)
            env = wire.recv_envelope(conn)
            resp = self.route_invocation(env)
            wire.send_envelope(conn, resp)
        except (ConnectionError, OSError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def route_invocation(self, env: wire.Envelope) -> wire.Envelope:
        fstate = self._registry.get(env.function_url)
        if fstate is None:
            return make_response(
                env.request_id, STATUS_UNKNOWN_FUNCTION, f"{env.function_url!r} is not deployed"
            )
        if len(env.body) > self._env.inline_limit:
            return make_response(
                env.request_id,
                STATUS_FUNCTION_ERROR,
                f"inline body of {len(env.body)} bytes exceeds limit {self._env.inline_limit}",
            )
        instance, seq, pending = fstate.assign(env)
        if pending is not None:
            if self.scale_poke is not None:
                self.scale_poke(env.function_url)
            if not pending.event.wait(ROUTE_TIMEOUT):
                fstate.cancel_pending(pending)
                return make_response(
                    env.request_id, STATUS_TRANSFER_FAILED, "no instance became available"
                )
            instance, seq = pending.instance, pending.seq
        return self._forward(fstate, instance, env, seq)

    def _forward(
        self,
        fstate: FunctionState,
        instance: FunctionInstance,
        env: wire.Envelope,
        seq: int,
    ) -> wire.Envelope:
        env.headers[SEQ_HEADER] = str(seq)
        host, port = instance.qp_addr.rsplit(":", 1)
        try:
            with socket.create_connection((host, int(port)), timeout=10.0) as sock:
                sock.settimeout(WORK_TIMEOUT)
                wire.send_envelope(sock, env)
                return wire.recv_envelope(sock)
        except (ConnectionError, OSError, wire.WireError) as e:
            return make_response(
                env.request_id,
                STATUS_TRANSFER_FAILED,
                f"instance {instance.instance_id} failed mid-invocation: {e}",
            )
        finally:
            fstate.release(instance)


class Autoscaler:
    """Periodic scaling sweep driven by queue-proxy metric reports."""

    def __init__(
        self,
        registry: FunctionRegistry,
        spawn_fn,
        interval: float = DEFAULT_METRICS_INTERVAL,
        keep_alive: float = DEFAULT_KEEP_ALIVE,
    ) -> None:
        self._registry = registry
        self._spawn_fn = spawn_fn
        self.interval = interval
        self.keep_alive = keep_alive
        self._views: dict[int, InstanceMetrics] = {}
        self._last_report: dict[int, float] = {}
        self._lock = threading.Lock()
        self._poke = threading.Event()
        self._stop = threading.Event()

    def start(self) -> None:
        threading.Thread(target=self._loop, name="autoscaler", daemon=True).start()

    def stop(self) -> None:
        self._stop.set()
        self._poke.set()

    def poke(self, _url: str | None = None) -> None:
        self._poke.set()

    def report(self, instance_id: int, metrics: InstanceMetrics) -> None:
        with self._lock:
            self._views[instance_id] = metrics
            self._last_report[instance_id] = time.monotonic()

    def view(self, instance_id: int) -> InstanceMetrics | None:
        with self._lock:
            return self._views.get(instance_id)

    def _loop(self) -> None:
        while not self._stop.is_set():
            self._poke.wait(self.interval)
            self._poke.clear()
            if self._stop.is_set():
                return
            try:
                self.sweep()
            except Exception:
                logger.exception("autoscaler sweep failed")

    def sweep(self) -> None:
        now = time.monotonic()
        for fstate in self._registry.all():
            with fstate.lock:
                instances = list(fstate.instances)
            self._mark_dead(instances, now)
            for inst in instances:
                if inst.state is InstanceState.DEAD:
                    fstate.remove_instance(inst)
            live = [
                i
                for i in instances
                if i.state in (InstanceState.BOOTING, InstanceState.READY)
            ]
            outstanding = fstate.pending_count()
            with self._lock:
                for inst in live:
                    m = self._views.get(inst.instance_id)
                    if m is not None:
                        outstanding += m.queue_depth + m.in_flight
            cfg = fstate.config
            desired = scale_decision(outstanding, cfg.min_scale, cfg.max_scale, cfg.concurrency)
            if len(live) < desired:
                for _ in range(desired - len(live)):
                    self._spawn_fn(fstate)
            elif len(live) > desired:
                self._reclaim_idle(fstate, live, len(live) - desired, now)

    def _mark_dead(self, instances: list[FunctionInstance], now: float) -> None:
        limit = MISSED_REPORTS_LIMIT * self.interval
        for inst in instances:
            if inst.state not in (InstanceState.BOOTING, InstanceState.READY):
                continue
            with self._lock:
                last = self._last_report.get(inst.instance_id, inst.spawned_at)
            if now - last > limit:
                logger.warning(
                    "instance %d missed %d metric reports; marking dead",
                    inst.instance_id,
                    MISSED_REPORTS_LIMIT,
                )
                inst.kill()

    def _reclaim_idle(self, fstate, live, excess: int, now: float) -> None:
        idle = []
        for inst in live:
            if inst.state is not InstanceState.READY:
                continue
            with self._lock:
                m = self._views.get(inst.instance_id)
            if m is None or m.queue_depth or m.in_flight:
                continue
            with fstate.lock:
                if fstate.outstanding.get(inst.instance_id, 0):
                    continue
            if now - m.last_active > self.keep_alive:
                idle.append(inst)
        # Reclaim the newest first so long-lived low ids stay stable.
        for inst in sorted(idle, key=lambda i: -i.instance_id)[:excess]:
            fstate.remove_instance(inst)
            threading.Thread(target=inst.drain_and_stop, daemon=True).start()
