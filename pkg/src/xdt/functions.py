"""Demo function handlers deployable by name from a cluster config.

Handlers follow the SDK contract ``fn(payload: bytes, ctx) -> bytes`` and
only ever touch the public API (invoke/put/get), never provider internals.
"""

from __future__ import annotations

import hashlib
import json
import random
import zlib
from collections import Counter


def gen_payload(seed: int, size: int) -> bytes:
    """Deterministic pseudo-random payload."""
    return random.Random(seed).randbytes(size)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def echo(payload: bytes, ctx) -> bytes:
    return payload


def hasher(payload: bytes, ctx) -> bytes:
    """Respond with the SHA-256 of the received payload."""
    return sha256_hex(payload).encode()


def producer(payload: bytes, ctx) -> bytes:
    """Generate a payload and buffer it for n retrievals.

    Request: JSON {"seed": int, "size": int, "retrievals": int}
    Response: JSON {"ref": token, "sha256": hex}
    """
    req = json.loads(payload)
    data = gen_payload(int(req["seed"]), int(req["size"]))
    ref = ctx.put(data, int(req.get("retrievals", 1)))
    return json.dumps({"ref": ref, "sha256": sha256_hex(data)}).encode()


def getter(payload: bytes, ctx) -> bytes:
    """Fetch every referenced object and report hashes.

    Request: JSON {"refs": [token, ...]}
    Response: JSON {"hashes": [hex, ...], "bytes_in": int}
    """
    req = json.loads(payload)
    hashes = []
    total = 0
    for ref in req["refs"]:
        data = ctx.get(ref)
        hashes.append(sha256_hex(data))
        total += len(data)
    return json.dumps({"hashes": hashes, "bytes_in": total}).encode()


# -- word-count workflow ----------------------------------------------------


def partition_of(word: str, reducers: int) -> int:
    # crc32 is stable across processes, unlike the salted builtin hash.
    return zlib.crc32(word.encode()) % reducers


def serialize_counts(counts: Counter) -> bytes:
    lines = [f"{word}\t{n}" for word, n in sorted(counts.items())]
    return "\n".join(lines).encode()


def parse_counts(data: bytes) -> Counter:
    counts: Counter = Counter()
    if not data:
        return counts
    for line in data.decode().splitlines():
        word, n = line.rsplit("\t", 1)
        counts[word] += int(n)
    return counts


def wordcount_mapper(payload: bytes, ctx) -> bytes:
    """Count words in one shard and buffer one partition per reducer.

    Request: JSON {"shard": str, "reducers": int}
    Response: JSON {"partitions": [{"pid": int, "ref": token, "size": int}]}
    """
    req = json.loads(payload)
    reducers = int(req["reducers"])
    partitions = [Counter() for _ in range(reducers)]
    for word in req["shard"].split():
        partitions[partition_of(word, reducers)][word] += 1
    out = []
    for pid, counts in enumerate(partitions):
        data = serialize_counts(counts)
        ref = ctx.put(data, 1)
        out.append({"pid": pid, "ref": ref, "size": len(data)})
    return json.dumps({"partitions": out}).encode()


def wordcount_reducer(payload: bytes, ctx) -> bytes:
    """Gather one partition from every mapper and merge the counts.

    Request: JSON {"refs": [token, ...]}
    Response: JSON {"counts": str, "bytes_in": int}
    """
    req = json.loads(payload)
    merged: Counter = Counter()
    bytes_in = 0
    for ref in req["refs"]:
        data = ctx.get(ref)
        bytes_in += len(data)
        merged.update(parse_counts(data))
    return json.dumps({"counts": serialize_counts(merged).decode(), "bytes_in": bytes_in}).encode()


HANDLERS = {
    "echo": echo,
    "hasher": hasher,
    "producer": producer,
    "getter": getter,
    "wordcount-mapper": wordcount_mapper,
    "wordcount-reducer": wordcount_reducer,
}
