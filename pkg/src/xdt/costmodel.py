"""Developer-side cost model for a workflow run.

The price of one invocation is a fixed fee, plus compute billed on the
duration x memory product, plus storage billed on bytes x residency where
residency is the fraction of the backend's billing unit the transferred
data stayed resident (minimal residency: stored-at to last retrieval).
Direct transfers keep data in function memory, so their storage rate is
zero by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

# Calendar-average month, i.e. 365.25 * 24 / 12 hours.
HOURS_PER_MONTH = 730.5

_UNIT_SECONDS = {
    "hour": 3600.0,
    "month": HOURS_PER_MONTH * 3600.0,
}

GB = 1e9


@dataclass(frozen=True)
class PricingProfile:
    name: str
    invocation_fee: float  # currency per invocation
    compute_rate: float  # currency per GB-second
    storage_rate: float  # currency per GB per billing unit
    billing_unit: str  # "month" | "hour" | "none"

    def __post_init__(self) -> None:
        if min(self.invocation_fee, self.compute_rate, self.storage_rate) < 0:
            raise ValueError("rates must be >= 0")
        if self.billing_unit == "none":
            if self.storage_rate != 0:
                raise ValueError("billing_unit 'none' requires storage_rate 0")
        elif self.billing_unit not in _UNIT_SECONDS:
            raise ValueError(f"unknown billing unit {self.billing_unit!r}")


@dataclass(frozen=True)
class InvocationRecord:
    duration_s: float
    memory_gb: float = 0.5
    bytes_stored_gb: float = 0.0
    residency: float = 0.0  # fraction of the billing unit

    def __post_init__(self) -> None:
        if self.duration_s < 0 or self.memory_gb < 0:
            raise ValueError("duration and memory must be >= 0")
        if self.bytes_stored_gb < 0 or self.residency < 0:
            raise ValueError("storage fields must be >= 0")


def residency_fraction(seconds: float, billing_unit: str) -> float:
    """Fraction of one billing unit covered by a residency window."""
    if billing_unit == "none":
        return 0.0
    return seconds / _UNIT_SECONDS[billing_unit]


def invocation_cost(rec: InvocationRecord, p: PricingProfile) -> float:
    return (
        p.invocation_fee
        + rec.duration_s * rec.memory_gb * p.compute_rate
        + rec.bytes_stored_gb * rec.residency * p.storage_rate
    )


@dataclass(frozen=True)
class CostRow:
    transport: str
    compute: float
    storage: float

    @property
    def total(self) -> float:
        return self.compute + self.storage


def cost_breakdown(records: list[InvocationRecord], p: PricingProfile) -> CostRow:
    compute = sum(p.invocation_fee + r.duration_s * r.memory_gb * p.compute_rate for r in records)
    storage = sum(r.bytes_stored_gb * r.residency * p.storage_rate for r in records)
    return CostRow(p.name, compute, storage)


def workflow_cost(
    records_by_transport: dict[str, list[InvocationRecord]],
    profiles: dict[str, PricingProfile],
) -> list[CostRow]:
    """(compute, storage, total) per transport; ordered as given."""
    return [
        cost_breakdown(records, profiles[transport])
        for transport, records in records_by_transport.items()
    ]


def records_from_ledger(
    ledger: dict, profile: PricingProfile, memory_gb: float = 0.5
) -> list[InvocationRecord]:
    """Build invocation records from a run ledger.

    The ledger carries one entry per invocation plus the stored objects with
    their residency windows. Objects fold into the record of the invocation
    that stored them; storage cost is linear in bytes x residency, so
    multiple objects merge exactly into one byte-weighted pair. Objects put
    outside any invocation fold into the first record.
    """
    records: list[dict] = [
        {
            "request_id": inv.get("request_id", ""),
            "duration_s": float(inv["duration_s"]),
            "gb_x_res": 0.0,
            "gb": 0.0,
        }
        for inv in ledger.get("invocations", [])
    ]
    by_request = {r["request_id"]: r for r in records if r["request_id"]}
    orphan: dict | None = records[0] if records else None
    extra: list[dict] = []
    for obj in ledger.get("objects", []):
        target = by_request.get(obj.get("request_id", ""))
        if target is None:
            if orphan is None:
                orphan = {"request_id": "", "duration_s": 0.0, "gb_x_res": 0.0, "gb": 0.0}
                extra.append(orphan)
            target = orphan
        gb = float(obj["bytes"]) / GB
        res = residency_fraction(float(obj["residency_s"]), profile.billing_unit)
        target["gb"] += gb
        target["gb_x_res"] += gb * res

    out = []
    for r in records + extra:
        residency = (r["gb_x_res"] / r["gb"]) if r["gb"] else 0.0
        out.append(
            InvocationRecord(
                duration_s=r["duration_s"],
                memory_gb=memory_gb,
                bytes_stored_gb=r["gb"],
                residency=residency,
            )
        )
    return out


DEFAULT_PRICING: dict[str, PricingProfile] = {
    "xdt": PricingProfile("xdt", 2e-7, 1.6667e-5, 0.0, "none"),
    "cold-store": PricingProfile("cold-store", 2e-7, 1.6667e-5, 0.02, "month"),
    "mem-cache": PricingProfile("mem-cache", 2e-7, 1.6667e-5, 0.02, "hour"),
}


def load_pricing(path: str | None) -> dict[str, PricingProfile]:
    if path is None:
        return dict(DEFAULT_PRICING)
    with open(path) as f:
        raw = json.load(f)
    profiles = {}
    for name, p in raw.items():
        profiles[name] = PricingProfile(
            name=name,
            invocation_fee=float(p["invocation_fee"]),
            compute_rate=float(p["compute_rate"]),
            storage_rate=float(p["storage_rate"]),
            billing_unit=p["billing_unit"],
        )
    return profiles


def dump_default_pricing(path: str) -> None:
    raw = {
        name: {
            "invocation_fee": p.invocation_fee,
            "compute_rate": p.compute_rate,
            "storage_rate": p.storage_rate,
            "billing_unit": p.billing_unit,
        }
        for name, p in DEFAULT_PRICING.items()
    }
    with open(path, "w") as f:
        json.dump(raw, f, indent=2)


def format_cost_table(rows: list[CostRow]) -> str:
    header = f"{'transport':<12} {'compute_usd':>14} {'storage_usd':>14} {'total_usd':>14}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.transport:<12} {row.compute:>14.6e} {row.storage:>14.6e} {row.total:>14.6e}"
        )
    return "\n".join(lines)
