"""Microbenchmark harness for the four communication patterns.

Patterns: 1-1 (producer invokes one consumer), scatter (k parallel invokes
with distinct objects), gather (k producers buffer one object each, one
consumer fetches all), broadcast (one object buffered with n=k, fetched by
k consumers via the same reference). Every payload is hash-verified before
a timing is accepted; the latency clock starts at the caller's first
invoke (for gather this includes the producers' put side, since the
transfer starts when data becomes available) and stops when the last
consumer completes. Effective bandwidth is transferred bytes divided by
end-to-end latency.

Also hosts the word-count workflow demo whose output doubles as the
cross-transport equivalence oracle.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from .cluster import ClusterConfig, LocalCluster
from .controlplane import FunctionConfig
from .dataplane import TransferConfig
from .errors import ObjectNotFound, VerificationFailure
from .functions import gen_payload, parse_counts, serialize_counts, sha256_hex

logger = logging.getLogger(__name__)

CSV_FIELDS = ["pattern", "transport", "object_size", "fan", "rep", "latency_us", "eff_bw_bps"]
CSV_NOTES = [
    "# latency clock: first caller action to last consumer completion",
    "# gather timing includes producer put() latency (transfer starts at data availability)",
]

DEFAULT_REPETITIONS = 10
DEFAULT_WARMUP = 3


class Pattern(Enum):
    ONE_TO_ONE = "1-1"
    SCATTER = "scatter"
    GATHER = "gather"
    BROADCAST = "broadcast"


@dataclass
class PatternSpec:
    pattern: Pattern
    object_size: int
    fan_degree: int = 1
    repetitions: int = DEFAULT_REPETITIONS
    warmup: int = DEFAULT_WARMUP
    transport: str = "xdt"
    seed: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.pattern, str):
            self.pattern = Pattern(self.pattern)
        if self.pattern is Pattern.ONE_TO_ONE:
            self.fan_degree = 1
        if self.fan_degree < 1:
            raise ValueError("fan_degree must be >= 1")


def pattern_cluster_config(
    pattern: Pattern | str,
    fan: int,
    transport: str = "xdt",
    boot_delay_s: float = 0.02,
    **overrides,
) -> ClusterConfig:
    """Cluster sized for one pattern with fixed (min == max) instance counts."""
    pattern = Pattern(pattern) if isinstance(pattern, str) else pattern
    sizes = {"consumer": 1, "producer": 1, "getter": 1}
    if pattern is Pattern.SCATTER:
        sizes["consumer"] = fan
    elif pattern is Pattern.GATHER:
        sizes["producer"] = fan
    elif pattern is Pattern.BROADCAST:
        sizes["getter"] = fan
    handlers = {"consumer": "hasher", "producer": "producer", "getter": "getter"}
    functions = [
        FunctionConfig(url=url, handler_name=handlers[url], min_scale=n, max_scale=n)
        for url, n in sizes.items()
    ]
    return ClusterConfig(
        functions=functions, transport=transport, boot_delay_s=boot_delay_s, **overrides
    )


def wordcount_cluster_config(
    mappers: int, reducers: int, transport: str = "xdt", boot_delay_s: float = 0.02, **overrides
) -> ClusterConfig:
    functions = [
        FunctionConfig("mapper", "wordcount-mapper", min_scale=mappers, max_scale=mappers),
        FunctionConfig("reducer", "wordcount-reducer", min_scale=reducers, max_scale=reducers),
    ]
    return ClusterConfig(
        functions=functions, transport=transport, boot_delay_s=boot_delay_s, **overrides
    )


def percentile(values: list[float], q: float) -> float:
    """Linear-interpolated percentile, q in [0, 100]."""
    if not values:
        raise ValueError("no samples")
    data = sorted(values)
    if len(data) == 1:
        return data[0]
    pos = (len(data) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(data) - 1)
    frac = pos - lo
    return data[lo] * (1 - frac) + data[hi] * frac


@dataclass
class RunReport:
    pattern: Pattern
    transport: str
    object_size: int
    fan_degree: int
    latencies: list[float] = field(default_factory=list)  # seconds, per repetition

    @property
    def total_bytes(self) -> int:
        return self.object_size * self.fan_degree

    @property
    def median(self) -> float:
        return percentile(self.latencies, 50)

    @property
    def p99(self) -> float:
        return percentile(self.latencies, 99)

    @property
    def effective_bandwidth(self) -> float:
        return self.total_bytes / self.median if self.median > 0 else float("inf")

    def csv_rows(self) -> list[dict]:
        rows = []
        for rep, lat in enumerate(self.latencies):
            rows.append(
                {
                    "pattern": self.pattern.value,
                    "transport": self.transport,
                    "object_size": self.object_size,
                    "fan": self.fan_degree,
                    "rep": rep,
                    "latency_us": round(lat * 1e6, 1),
                    "eff_bw_bps": round(self.total_bytes / lat, 1) if lat > 0 else "",
                }
            )
        return rows


def _parallel(fns) -> list:
    """Run callables concurrently, re-raising the first failure."""
    with ThreadPoolExecutor(max_workers=max(1, len(fns))) as pool:
        futures = [pool.submit(fn) for fn in fns]
        return [f.result() for f in futures]


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise VerificationFailure(message)


class _PatternRunner:
    def __init__(self, spec: PatternSpec, cluster: LocalCluster) -> None:
        self.spec = spec
        self.cluster = cluster
        self.ctx = cluster.driver_context()
        self._rep_seed = spec.seed * 100_003

    def run_once(self, rep: int) -> float:
        seed = self._rep_seed + rep
        fn = {
            Pattern.ONE_TO_ONE: self._one_to_one,
            Pattern.SCATTER: self._scatter,
            Pattern.GATHER: self._gather,
            Pattern.BROADCAST: self._broadcast,
        }[self.spec.pattern]
        return fn(seed)

    def _one_to_one(self, seed: int) -> float:
        payload = gen_payload(seed, self.spec.object_size)
        expected = sha256_hex(payload).encode()
        t0 = time.perf_counter()
        resp = self.ctx.invoke("consumer", payload)
        elapsed = time.perf_counter() - t0
        _check(resp == expected, "1-1 payload corrupted in flight")
        return elapsed

    def _scatter(self, seed: int) -> float:
        k = self.spec.fan_degree
        payloads = [gen_payload(seed + i, self.spec.object_size) for i in range(k)]
        expected = [sha256_hex(p).encode() for p in payloads]
        t0 = time.perf_counter()
        responses = _parallel([lambda p=p: self.ctx.invoke("consumer", p) for p in payloads])
        elapsed = time.perf_counter() - t0
        _check(responses == expected, "scatter payload corrupted in flight")
        _check(len(set(responses)) == k, "scatter responses were not distinct")
        return elapsed

    def _gather(self, seed: int) -> float:
        k = self.spec.fan_degree
        requests = [
            json.dumps({"seed": seed + i, "size": self.spec.object_size, "retrievals": 1}).encode()
            for i in range(k)
        ]
        t0 = time.perf_counter()
        produced = _parallel(
            [lambda r=r: json.loads(self.ctx.invoke("producer", r)) for r in requests]
        )
        refs = [p["ref"] for p in produced]
        reply = json.loads(self.ctx.invoke("getter", json.dumps({"refs": refs}).encode()))
        elapsed = time.perf_counter() - t0
        expected = [p["sha256"] for p in produced]
        _check(reply["hashes"] == expected, "gather payload mismatch")
        _check(len(set(expected)) == k, "gather payloads were not distinct")
        _check(reply["bytes_in"] == self.spec.object_size * k, "gather volume mismatch")
        return elapsed

    def _broadcast(self, seed: int) -> float:
        k = self.spec.fan_degree
        req = json.dumps(
            {"seed": seed, "size": self.spec.object_size, "retrievals": k}
        ).encode()
        t0 = time.perf_counter()
        produced = json.loads(self.ctx.invoke("producer", req))
        ref = produced["ref"]
        get_req = json.dumps({"refs": [ref]}).encode()
        replies = _parallel(
            [lambda: json.loads(self.ctx.invoke("getter", get_req)) for _ in range(k)]
        )
        elapsed = time.perf_counter() - t0
        for reply in replies:
            _check(reply["hashes"] == [produced["sha256"]], "broadcast copy corrupted")
        # The budget was exactly k: one more retrieval must fail.
        try:
            self.ctx.get(ref)
        except ObjectNotFound:
            pass
        else:
            raise VerificationFailure("broadcast object outlived its retrieval budget")
        return elapsed


def run_pattern(spec: PatternSpec, cluster: LocalCluster) -> RunReport:
    """Execute one pattern measurement: warmup reps, then timed reps."""
    cluster.set_transport(spec.transport)
    runner = _PatternRunner(spec, cluster)
    for w in range(spec.warmup):
        runner.run_once(-(w + 1))
    report = RunReport(spec.pattern, spec.transport, spec.object_size, spec.fan_degree)
    for rep in range(spec.repetitions):
        report.latencies.append(runner.run_once(rep))
    return report


SWEEP_AXES = ("object_size", "fan_degree", "buffer_depth", "streaming_mode", "transport")


@dataclass
class SweepRow:
    axis: str
    value: object
    report: RunReport | None = None
    error: str = ""


def sweep(base: PatternSpec, axis: str, values, cluster: LocalCluster) -> list[SweepRow]:
    """One run_pattern per axis value; failed rows are marked, not fatal."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows = []
    for value in values:
        spec = PatternSpec(
            pattern=base.pattern,
            object_size=base.object_size,
            fan_degree=base.fan_degree,
            repetitions=base.repetitions,
            warmup=base.warmup,
            transport=base.transport,
            seed=base.seed,
        )
        if axis == "object_size":
            spec.object_size = int(value)
        elif axis == "fan_degree":
            spec.fan_degree = int(value)
        elif axis == "transport":
            spec.transport = str(value)
        elif axis in ("buffer_depth", "streaming_mode"):
            current = cluster.env.transfer_config
            cfg = TransferConfig(
                chunk_size=current.chunk_size,
                buffer_depth=int(value) if axis == "buffer_depth" else current.buffer_depth,
                streaming_mode=value if axis == "streaming_mode" else current.streaming_mode,
            )
            cluster.set_transfer_config(cfg)
        row = SweepRow(axis, value)
        try:
            row.report = run_pattern(spec, cluster)
        except Exception as e:
            row.error = f"{type(e).__name__}: {e}"
            logger.warning("sweep point %s=%r failed: %s", axis, value, row.error)
        rows.append(row)
    return rows


def reports_to_csv(reports: list[RunReport], notes: list[str] | None = None) -> str:
    out = io.StringIO()
    for note in CSV_NOTES + (notes or []):
        out.write(note + "\n")
    writer = csv.DictWriter(out, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for report in reports:
        for row in report.csv_rows():
            writer.writerow(row)
    return out.getvalue()


def sweep_to_csv(rows: list[SweepRow]) -> str:
    notes = []
    reports = []
    for row in rows:
        if row.report is not None:
            reports.append(row.report)
            notes.append(f"# sweep {row.axis}={row.value}: ok")
        else:
            notes.append(f"# sweep {row.axis}={row.value}: FAILED {row.error}")
    return reports_to_csv(reports, notes)


# -- word-count workflow demo -------------------------------------------------

_VOCABULARY_SIZE = 997


def make_corpus(seed: int, size_bytes: int) -> str:
    """Deterministic synthetic corpus of roughly size_bytes."""
    rng = random.Random(seed)
    vocab = [f"w{idx:03d}x{rng.randrange(1000):03d}" for idx in range(_VOCABULARY_SIZE)]
    parts: list[str] = []
    total = 0
    while total < size_bytes:
        word = vocab[rng.randrange(len(vocab))]
        parts.append(word)
        total += len(word) + 1
    return " ".join(parts)


def wordcount_oracle(corpus: str) -> bytes:
    """Independent in-process word count for cross-checking the workflow."""
    return serialize_counts(Counter(corpus.split()))


def _shard_corpus(corpus: str, mappers: int) -> list[str]:
    words = corpus.split()
    per = (len(words) + mappers - 1) // mappers if words else 0
    return [" ".join(words[i * per : (i + 1) * per]) for i in range(mappers)]


@dataclass
class WordcountResult:
    transport: str
    output: bytes
    output_sha256: str
    mapper_output_bytes: int
    shuffle_bytes_measured: int
    elapsed_s: float
    ledger: dict


def collect_run_ledger(cluster: LocalCluster) -> dict:
    """Join the put log with residency windows into a costable run ledger."""
    env = cluster.env
    residency = {r["key"]: r for r in cluster.residency_records()}
    objects = []
    for obj in env.ledger.objects():
        window = residency.get(obj["key"])
        if window is None:
            continue
        objects.append(
            {
                "request_id": obj["request_id"],
                "bytes": obj["bytes"],
                "residency_s": max(0.0, window["released_at"] - window["stored_at"]),
            }
        )
    return {
        "transport": env.transport,
        "invocations": env.ledger.durations(),
        "objects": objects,
    }


def run_wordcount_demo(
    cluster: LocalCluster,
    mappers: int,
    reducers: int,
    transport: str | None = None,
    corpus: str | None = None,
    corpus_size: int = 1024 * 1024,
    seed: int = 7,
) -> WordcountResult:
    """Map/shuffle/reduce over the SDK; shuffle uses put/get in gather form."""
    if transport is not None:
        cluster.set_transport(transport)
    if corpus is None:
        corpus = make_corpus(seed, corpus_size)
    cluster.reset_instrumentation()
    ctx = cluster.driver_context()
    shards = _shard_corpus(corpus, mappers)

    t0 = time.perf_counter()
    map_replies = _parallel(
        [
            lambda s=s: json.loads(
                ctx.invoke("mapper", json.dumps({"shard": s, "reducers": reducers}).encode())
            )
            for s in shards
        ]
    )
    refs_by_pid: dict[int, list[str]] = {pid: [] for pid in range(reducers)}
    mapper_output_bytes = 0
    for reply in map_replies:
        for part in reply["partitions"]:
            refs_by_pid[part["pid"]].append(part["ref"])
            mapper_output_bytes += part["size"]

    reduce_replies = _parallel(
        [
            lambda pid=pid: json.loads(
                ctx.invoke("reducer", json.dumps({"refs": refs_by_pid[pid]}).encode())
            )
            for pid in range(reducers)
        ]
    )
    elapsed = time.perf_counter() - t0

    merged: Counter = Counter()
    shuffle_bytes = 0
    for reply in reduce_replies:
        merged.update(parse_counts(reply["counts"].encode()))
        shuffle_bytes += reply["bytes_in"]
    output = serialize_counts(merged)

    return WordcountResult(
        transport=cluster.env.transport,
        output=output,
        output_sha256=sha256_hex(output),
        mapper_output_bytes=mapper_output_bytes,
        shuffle_bytes_measured=shuffle_bytes,
        elapsed_s=elapsed,
        ledger=collect_run_ledger(cluster),
    )
