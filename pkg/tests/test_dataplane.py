import hashlib
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdt.dataplane import (
    ObjectStore,
    PullServer,
    PullStream,
    StreamingMode,
    TransferConfig,
    TransferStats,
    chunk_spans,
    pull_object,
    serve_pull,
)
from xdt.errors import ObjectNotFound, ProducerUnreachable, TransferError
from xdt.refcrypto import PlainReference, ProviderSecret

KIB = 1024
MIB = 1024 * 1024


@pytest.fixture(scope="module")
def secret():
    return ProviderSecret.generate()


@pytest.fixture
def producer(secret):
    store = ObjectStore()
    server = PullServer(store, secret)
    addr = server.start()
    yield store, server, addr
    server.stop()


def _plain(addr, key):
    return PlainReference(addr, key)


# -- chunk algebra ------------------------------------------------------------


def test_chunk_count_for_one_mib():
    spans = list(chunk_spans(MIB, 64 * KIB))
    assert len(spans) == 16
    assert spans[-1] == (15, 15 * 64 * KIB, 64 * KIB, True)
    assert all(size == 64 * KIB for _, _, size, _ in spans)


def test_zero_length_yields_single_empty_final_chunk():
    assert list(chunk_spans(0, 64 * KIB)) == [(0, 0, 0, True)]


@settings(max_examples=120, deadline=None)
@given(length=st.integers(0, 5 * MIB), chunk=st.integers(1, MIB))
def test_chunk_algebra_property(length, chunk):
    spans = list(chunk_spans(length, chunk))
    assert len(spans) == max(1, -(-length // chunk))
    assert sum(size for _, _, size, _ in spans) == length
    assert [seq for seq, _, _, _ in spans] == list(range(len(spans)))
    assert [last for _, _, _, last in spans].count(True) == 1
    assert spans[-1][3] is True
    assert all(size == chunk for _, _, size, _ in spans[:-1])


# -- object store -------------------------------------------------------------


def test_keys_start_at_zero_and_are_monotonic():
    store = ObjectStore()
    assert store.buffer_object(b"0123456789", 1) == 0
    assert store.buffer_object(b"x", 1) == 1
    assert store.buffer_object(b"y", 1) == 2


def test_bytes_resident_accounting():
    store = ObjectStore()
    store.buffer_object(b"\x00" * MIB, 1)
    assert store.bytes_resident == MIB
    key = store.buffer_object(b"\x00" * 100, 1)
    assert store.bytes_resident == MIB + 100
    sink = lambda seq, data, last: None
    serve_pull(store, key, sink)
    assert store.bytes_resident == MIB


def test_retrieval_count_must_be_positive():
    store = ObjectStore()
    with pytest.raises(ValueError):
        store.buffer_object(b"x", 0)


def test_serve_pull_chunk_stream_shape():
    store = ObjectStore()
    key = store.buffer_object(b"\xab" * MIB, 1)
    chunks = []
    serve_pull(store, key, lambda seq, data, last: chunks.append((seq, len(data), last)))
    assert len(chunks) == 16
    assert chunks[-1] == (15, 64 * KIB, True)


def test_serve_pull_zero_length_object():
    store = ObjectStore()
    key = store.buffer_object(b"", 1)
    chunks = []
    serve_pull(store, key, lambda seq, data, last: chunks.append((seq, bytes(data), last)))
    assert chunks == [(0, b"", True)]


def test_count_exhaustion_gives_not_found():
    store = ObjectStore()
    key = store.buffer_object(b"data", 1)
    serve_pull(store, key, lambda *a: None)
    with pytest.raises(ObjectNotFound):
        serve_pull(store, key, lambda *a: None)
    with pytest.raises(ObjectNotFound):
        serve_pull(store, 999, lambda *a: None)


def test_release_all_counts_and_empties():
    store = ObjectStore()
    for i in range(3):
        store.buffer_object(b"x" * 10, 1)
    assert store.release_all() == 3
    assert store.bytes_resident == 0
    assert store.release_all() == 0


def test_failed_sink_does_not_consume_credit():
    store = ObjectStore()
    key = store.buffer_object(b"z" * 1000, 1)

    def bad_sink(seq, data, last):
        raise OSError("consumer vanished")

    with pytest.raises(OSError):
        serve_pull(store, key, bad_sink)
    out = []
    serve_pull(store, key, lambda seq, data, last: out.append(bytes(data)))
    assert b"".join(out) == b"z" * 1000


# -- pull protocol round trips ------------------------------------------------


@pytest.mark.parametrize("size", [0, 1, 64 * KIB, 64 * KIB + 1, MIB])
def test_pull_round_trip_across_chunk_boundaries(producer, secret, size):
    store, _, addr = producer
    payload = bytes(i % 251 for i in range(size))
    key = store.buffer_object(payload, 1)
    got = pull_object(_plain(addr, key), secret)
    assert got == payload


def test_pull_from_dead_endpoint_is_unreachable(secret):
    store = ObjectStore()
    server = PullServer(store, secret)
    addr = server.start()
    key = store.buffer_object(b"x", 1)
    server.stop()
    time.sleep(0.02)
    with pytest.raises(ProducerUnreachable):
        pull_object(_plain(addr, key), secret)


def test_concurrent_pulls_respect_credit_budget(producer, secret):
    store, _, addr = producer
    payload = b"q" * (256 * KIB)
    key = store.buffer_object(payload, 2)
    results = []
    lock = threading.Lock()

    def attempt():
        try:
            data = pull_object(_plain(addr, key), secret)
            with lock:
                results.append(("ok", hashlib.sha256(data).hexdigest()))
        except TransferError as e:
            with lock:
                results.append(("err", type(e).__name__))

    threads = [threading.Thread(target=attempt) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    oks = [r for r in results if r[0] == "ok"]
    errs = [r for r in results if r[0] == "err"]
    assert len(oks) == 2 and len(errs) == 1
    expected = hashlib.sha256(payload).hexdigest()
    assert all(h == expected for _, h in oks)
    assert errs[0][1] == "ObjectNotFound"


def test_release_during_active_pull_aborts_consumer(secret):
    store = ObjectStore()
    server = PullServer(store, secret, throttle_bytes_per_sec=2 * MIB)
    addr = server.start()
    key = store.buffer_object(b"r" * MIB, 1)  # ~500ms at 2 MiB/s

    err = []

    def consume():
        try:
            pull_object(_plain(addr, key), secret)
            err.append(None)
        except TransferError as e:
            err.append(e)

    t = threading.Thread(target=consume)
    t.start()
    time.sleep(0.1)
    store.release_all()
    t.join(timeout=10)
    server.stop()
    assert isinstance(err[0], TransferError)


def test_aborted_pull_returns_credit(secret):
    store = ObjectStore()
    # throttled so the stream is certainly still in flight when abandoned
    server = PullServer(store, secret, throttle_bytes_per_sec=2 * MIB)
    addr = server.start()
    payload = b"k" * MIB
    key = store.buffer_object(payload, 1)
    stream = PullStream(_plain(addr, key), secret, TransferConfig(buffer_depth=64 * KIB))
    next(stream)  # take one chunk, then walk away
    stream.close()
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline:
        # once the producer observes the broken stream, the credit returns
        try:
            server.throttle_bytes_per_sec = None
            got = pull_object(_plain(addr, key), secret)
            break
        except TransferError:
            time.sleep(0.05)
    else:
        pytest.fail("credit was never returned")
    server.stop()
    assert got == payload


def test_handshake_rejects_wrong_secret(producer):
    store, _, addr = producer
    key = store.buffer_object(b"secret-data", 1)
    intruder = ProviderSecret.generate()
    with pytest.raises(TransferError):
        pull_object(_plain(addr, key), intruder)
    # the genuine credit is untouched: the failed handshake never streamed
    assert len(store) == 1


def test_streaming_modes_produce_identical_bytes(producer, secret):
    store, _, addr = producer
    payload = bytes(i % 256 for i in range(3 * MIB + 17))
    key = store.buffer_object(payload, 2)
    ct = pull_object(_plain(addr, key), secret, TransferConfig(streaming_mode=StreamingMode.CUT_THROUGH))
    sf = pull_object(_plain(addr, key), secret, TransferConfig(streaming_mode=StreamingMode.STORE_AND_FORWARD))
    assert ct == sf == payload


def test_consumer_buffering_stays_bounded_with_slow_consumer(producer, secret):
    store, _, addr = producer
    depth = 256 * KIB
    chunk = 64 * KIB
    payload = b"b" * (8 * MIB)
    key = store.buffer_object(payload, 1)
    stats = TransferStats()
    cfg = TransferConfig(chunk_size=chunk, buffer_depth=depth)
    stream = PullStream(_plain(addr, key), secret, cfg, stats)
    out = bytearray()
    for i, piece in enumerate(stream):
        out += piece
        if i % 8 == 0:
            time.sleep(0.002)  # slow downstream to force read gating
    assert bytes(out) == payload
    assert stats.bytes == len(payload)
    assert stats.peak_buffered <= depth + chunk


def test_transfer_config_validation():
    with pytest.raises(ValueError):
        TransferConfig(chunk_size=0)
    with pytest.raises(ValueError):
        TransferConfig(chunk_size=1024, buffer_depth=512)
    cfg = TransferConfig(streaming_mode="store-and-forward")
    assert cfg.streaming_mode is StreamingMode.STORE_AND_FORWARD


def test_byte_integrity_random_payloads(producer, secret):
    import random

    store, _, addr = producer
    rng = random.Random(1234)
    for _ in range(5):
        size = rng.randrange(0, 4 * MIB)
        payload = rng.randbytes(size)
        key = store.buffer_object(payload, 1)
        got = pull_object(_plain(addr, key), secret)
        assert hashlib.sha256(got).digest() == hashlib.sha256(payload).digest()


def test_byte_integrity_32_mib(producer, secret):
    import random

    store, _, addr = producer
    payload = random.Random(5).randbytes(32 * MIB)
    key = store.buffer_object(payload, 1)
    got = pull_object(_plain(addr, key), secret)
    assert hashlib.sha256(got).digest() == hashlib.sha256(payload).digest()


def test_streaming_mode_aliases():
    assert TransferConfig(streaming_mode="sf").streaming_mode is StreamingMode.STORE_AND_FORWARD
    assert TransferConfig(streaming_mode="CT").streaming_mode is StreamingMode.CUT_THROUGH
