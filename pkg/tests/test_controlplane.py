import json
import socket
import threading
import time

import pytest

from xdt import wire
from xdt.controlplane import (
    FunctionConfig,
    InstanceState,
    choose_instance,
    scale_decision,
)
from xdt.errors import (
    STATUS_OK,
    STATUS_TRANSFER_FAILED,
    STATUS_UNKNOWN_FUNCTION,
    TransferError,
    UnknownFunction,
)

MIB = 1024 * 1024


# -- routing and scaling policy (pure) ----------------------------------------


def test_least_loaded_instance_wins():
    assert choose_instance([(1, 3), (2, 1)]) == 2


def test_ties_break_to_lowest_instance_id():
    assert choose_instance([(9, 2), (7, 2)]) == 7


def test_scale_formula():
    assert scale_decision(10, min_scale=0, max_scale=32, concurrency=1) == 10
    assert scale_decision(10, min_scale=0, max_scale=32, concurrency=4) == 3
    assert scale_decision(100, min_scale=0, max_scale=32, concurrency=1) == 32


def test_scale_floor_retains_min_instances():
    assert scale_decision(0, min_scale=1, max_scale=8, concurrency=1) == 1


def test_fixed_instance_mode_pins_count():
    for outstanding in (0, 1, 50):
        assert scale_decision(outstanding, min_scale=3, max_scale=3, concurrency=1) == 3


def test_function_config_validation():
    with pytest.raises(ValueError):
        FunctionConfig("f", max_scale=1, min_scale=2)
    with pytest.raises(ValueError):
        FunctionConfig("f", concurrency=0)


def test_default_dead_detection_window_is_one_second():
    from xdt.controlplane import DEFAULT_METRICS_INTERVAL, MISSED_REPORTS_LIMIT

    assert MISSED_REPORTS_LIMIT * DEFAULT_METRICS_INTERVAL == pytest.approx(1.0)


class _StubInstance:
    def __init__(self, instance_id, state):
        self.instance_id = instance_id
        self.state = state


def test_routing_prefers_ready_over_booting():
    from xdt.controlplane import FunctionState

    fstate = FunctionState(FunctionConfig("f"), handler=None)
    booting = _StubInstance(0, InstanceState.BOOTING)  # lower id would win a tie
    ready = _StubInstance(1, InstanceState.READY)
    fstate.instances.extend([booting, ready, _StubInstance(2, InstanceState.DRAINING)])
    for _ in range(5):
        inst, _seq, pending = fstate.assign(None)
        assert pending is None and inst is ready


def test_draining_and_dead_are_never_routable():
    from xdt.controlplane import FunctionState

    fstate = FunctionState(FunctionConfig("f"), handler=None)
    fstate.instances.extend(
        [_StubInstance(0, InstanceState.DRAINING), _StubInstance(1, InstanceState.DEAD)]
    )
    inst, _seq, pending = fstate.assign(None)
    assert inst is None and pending is not None
    fstate.cancel_pending(pending)


# -- wire-level control plane --------------------------------------------------


def _send_raw(activator_addr: str, env: wire.Envelope) -> wire.Envelope:
    host, port = activator_addr.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=30) as sock:
        sock.settimeout(60)
        wire.send_envelope(sock, env)
        return wire.recv_envelope(sock)


def test_envelope_passthrough_without_reference(make_cluster):
    cluster = make_cluster([FunctionConfig("echo", "echo")])
    resp = _send_raw(
        cluster.env.activator_addr, wire.Envelope("req-1", "echo", {}, b"ping")
    )
    assert resp.headers[wire.STATUS_HEADER] == STATUS_OK
    assert resp.body == b"ping"
    assert resp.request_id == "req-1"


def test_envelope_with_reference_is_reconstructed(make_cluster):
    def length_handler(payload, ctx):
        return str(len(payload)).encode()

    cluster = make_cluster(
        [FunctionConfig("length", "length")], handlers={"length": length_handler}
    )
    ctx = cluster.client_context()
    token = ctx.put(b"\x00" * MIB, 1)
    resp = _send_raw(
        cluster.env.activator_addr,
        wire.Envelope("req-2", "length", {wire.REF_HEADER: token}, b""),
    )
    assert resp.headers[wire.STATUS_HEADER] == STATUS_OK
    assert resp.body == b"1048576"


def test_consumed_reference_fails_without_executing_handler(make_cluster):
    calls = []

    def counting_handler(payload, ctx):
        calls.append(len(payload))
        return b"ran"

    cluster = make_cluster(
        [FunctionConfig("fn", "fn")], handlers={"fn": counting_handler}
    )
    ctx = cluster.client_context()
    token = ctx.put(b"gone", 1)
    ctx.get(token)  # exhaust the single credit
    resp = _send_raw(
        cluster.env.activator_addr,
        wire.Envelope("req-3", "fn", {wire.REF_HEADER: token}, b""),
    )
    assert resp.headers[wire.STATUS_HEADER] == STATUS_TRANSFER_FAILED
    assert calls == []
    assert cluster.env.ledger.execution_count("req-3") == 0


def test_unknown_function(make_cluster):
    cluster = make_cluster([FunctionConfig("echo", "echo")])
    resp = _send_raw(
        cluster.env.activator_addr, wire.Envelope("req-4", "missing", {}, b"")
    )
    assert resp.headers[wire.STATUS_HEADER] == STATUS_UNKNOWN_FUNCTION
    ctx = cluster.client_context()
    with pytest.raises(UnknownFunction):
        ctx.invoke("missing", b"")


def test_oversized_inline_body_rejected(make_cluster):
    cluster = make_cluster([FunctionConfig("echo", "echo")], inline_limit=1024)
    resp = _send_raw(
        cluster.env.activator_addr, wire.Envelope("req-5", "echo", {}, b"x" * 2048)
    )
    assert resp.headers[wire.STATUS_HEADER] != STATUS_OK


# -- buffering, scaling, lifecycle ---------------------------------------------


def test_buffered_envelopes_delivered_fifo_after_scale_up(make_cluster):
    order = []
    lock = threading.Lock()

    def recorder(payload, ctx):
        with lock:
            order.append(payload.decode())
        return b"ok"

    cluster = make_cluster(
        [FunctionConfig("rec", "rec", min_scale=0, max_scale=1)],
        handlers={"rec": recorder},
        boot_delay_s=0.15,
        metrics_interval_s=0.03,
    )
    assert cluster.instances("rec") == []
    ctx = cluster.client_context()
    threads = []
    for i in range(4):
        t = threading.Thread(target=ctx.invoke, args=("rec", f"msg-{i}".encode()))
        t.start()
        threads.append(t)
        time.sleep(0.02)  # fix arrival order while the function is at scale zero
    for t in threads:
        t.join(timeout=30)
    assert order == ["msg-0", "msg-1", "msg-2", "msg-3"]


def test_scale_from_zero_spawns_instance(make_cluster):
    cluster = make_cluster(
        [FunctionConfig("echo", "echo", min_scale=0, max_scale=2)],
        metrics_interval_s=0.03,
    )
    ctx = cluster.client_context()
    assert ctx.invoke("echo", b"wake") == b"wake"
    assert len(cluster.instances("echo")) >= 1


def test_idle_instance_reports_zero_counters(make_cluster):
    cluster = make_cluster([FunctionConfig("echo", "echo")])
    ctx = cluster.client_context()
    ctx.invoke("echo", b"x")
    time.sleep(0.2)  # a few report intervals
    inst = cluster.instances("echo")[0]
    view = cluster.autoscaler.view(inst.instance_id)
    assert view is not None
    assert view.queue_depth == 0
    assert view.in_flight == 0


def test_killed_instance_marked_dead_after_missed_reports(make_cluster):
    cluster = make_cluster(
        [FunctionConfig("echo", "echo", min_scale=1, max_scale=1)],
        metrics_interval_s=0.03,
    )
    inst = cluster.instances("echo")[0]
    # Simulate a crashed pod: stop reporting without going through teardown.
    inst.qp._stop_event.set()
    inst.qp._report_fn = None
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and inst.state is not InstanceState.DEAD:
        time.sleep(0.02)
    assert inst.state is InstanceState.DEAD


def test_dead_instance_objects_unreachable(make_cluster):
    cluster = make_cluster([FunctionConfig("producer", "producer", min_scale=1, max_scale=1)])
    ctx = cluster.client_context()
    reply = json.loads(
        ctx.invoke("producer", json.dumps({"seed": 3, "size": 1000, "retrievals": 1}).encode())
    )
    inst = cluster.instances("producer")[0]
    inst.kill()
    time.sleep(0.05)
    with pytest.raises(TransferError):
        ctx.get(reply["ref"])


def test_at_most_once_under_mixed_outcomes(make_cluster):
    cluster = make_cluster([FunctionConfig("echo", "echo", min_scale=2, max_scale=2)])
    ctx = cluster.client_context()

    def one(i):
        try:
            ctx.invoke("echo", f"p{i}".encode())
        except Exception:
            pass

    threads = [threading.Thread(target=one, args=(i,)) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    executions = cluster.env.ledger.executions()
    assert executions, "no executions recorded"
    assert all(len(v) <= 1 for v in executions.values())


def test_killed_instance_fails_queued_envelopes_promptly(make_cluster):
    def slow(payload, ctx):
        time.sleep(0.8)
        return b"late"

    cluster = make_cluster(
        [FunctionConfig("slow", "slow", min_scale=1, max_scale=1)],
        handlers={"slow": slow},
    )
    ctx = cluster.client_context()
    outcomes = {}

    def call(name):
        t0 = time.monotonic()
        try:
            ctx.invoke("slow", name.encode())
            outcomes[name] = ("ok", time.monotonic() - t0)
        except Exception as e:
            outcomes[name] = (type(e).__name__, time.monotonic() - t0)

    first = threading.Thread(target=call, args=("first",))
    second = threading.Thread(target=call, args=("second",))
    first.start()
    time.sleep(0.15)
    second.start()  # queued behind the in-flight slow call
    time.sleep(0.15)
    cluster.instances("slow")[0].kill()
    first.join(timeout=10)
    second.join(timeout=10)
    # the queued envelope must fail fast, not wait out the work timeout
    kind, elapsed = outcomes["second"]
    assert kind == "TransferError"
    assert elapsed < 5.0


def test_handler_error_is_distinguished(make_cluster):
    def failing(payload, ctx):
        raise RuntimeError("boom")

    cluster = make_cluster([FunctionConfig("bad", "bad")], handlers={"bad": failing})
    ctx = cluster.client_context()
    from xdt.errors import FunctionError

    with pytest.raises(FunctionError):
        ctx.invoke("bad", b"")


def test_keep_alive_reclaims_excess_instances(make_cluster):
    cluster = make_cluster(
        [FunctionConfig("echo", "echo", min_scale=2, max_scale=2)],
        keep_alive_s=0.15,
        metrics_interval_s=0.03,
    )
    # Fixed-instance mode: never reclaimed below min even when idle past keep-alive.
    time.sleep(0.6)
    states = [i.state for i in cluster.instances("echo")]
    assert states.count(InstanceState.READY) == 2
