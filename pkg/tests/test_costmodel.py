import random

import pytest

from xdt.costmodel import (
    DEFAULT_PRICING,
    CostRow,
    InvocationRecord,
    PricingProfile,
    cost_breakdown,
    format_cost_table,
    invocation_cost,
    records_from_ledger,
    residency_fraction,
    workflow_cost,
)


def test_stated_arithmetic_example():
    profile = PricingProfile("xdt", 2e-7, 1.6667e-5, 0.0, "none")
    rec = InvocationRecord(duration_s=1.0, memory_gb=0.5)
    cost = invocation_cost(rec, profile)
    assert cost == pytest.approx(2e-7 + 8.33e-6, rel=1e-3)


def test_zero_duration_zero_storage_costs_only_the_fee():
    profile = DEFAULT_PRICING["cold-store"]
    rec = InvocationRecord(duration_s=0.0, memory_gb=0.5)
    assert invocation_cost(rec, profile) == profile.invocation_fee


def test_gb_hour_vs_gb_month_ratio_near_700():
    hour = PricingProfile("cache", 0.0, 0.0, 0.02, "hour")
    month = PricingProfile("cold", 0.0, 0.0, 0.02, "month")
    seconds = 120.0
    rec_hour = InvocationRecord(0.0, 0.0, 1.0, residency_fraction(seconds, "hour"))
    rec_month = InvocationRecord(0.0, 0.0, 1.0, residency_fraction(seconds, "month"))
    ratio = invocation_cost(rec_hour, hour) / invocation_cost(rec_month, month)
    assert 700 <= ratio <= 744


def test_linearity_under_random_scaling():
    # with a zero fee, cost is linear in duration, memory, and bytes separately
    rng = random.Random(99)
    profile = PricingProfile("p", 0.0, 3e-5, 0.04, "hour")
    base = InvocationRecord(1.3, 0.5, 2.0, 0.01)
    compute_base = invocation_cost(InvocationRecord(base.duration_s, base.memory_gb), profile)
    storage_base = invocation_cost(
        InvocationRecord(0.0, 0.0, base.bytes_stored_gb, base.residency), profile
    )
    for _ in range(50):
        k = rng.uniform(0.1, 10)
        scaled_duration = invocation_cost(
            InvocationRecord(base.duration_s * k, base.memory_gb), profile
        )
        assert scaled_duration == pytest.approx(k * compute_base, rel=1e-9)
        scaled_memory = invocation_cost(
            InvocationRecord(base.duration_s, base.memory_gb * k), profile
        )
        assert scaled_memory == pytest.approx(k * compute_base, rel=1e-9)
        scaled_bytes = invocation_cost(
            InvocationRecord(0.0, 0.0, base.bytes_stored_gb * k, base.residency), profile
        )
        assert scaled_bytes == pytest.approx(k * storage_base, rel=1e-9)


def test_xdt_storage_cost_identically_zero():
    profile = DEFAULT_PRICING["xdt"]
    records = [InvocationRecord(2.0, 0.5, 5.0, 0.9) for _ in range(10)]
    row = cost_breakdown(records, profile)
    assert row.storage == 0.0
    assert row.compute > 0


def test_total_ordering_with_equal_compute():
    records = [InvocationRecord(1.0, 0.5, 1.0, 0.5)]
    rows = workflow_cost(
        {"xdt": records, "cold-store": records},
        {"xdt": DEFAULT_PRICING["xdt"], "cold-store": DEFAULT_PRICING["cold-store"]},
    )
    by_name = {r.transport: r for r in rows}
    assert by_name["xdt"].total < by_name["cold-store"].total


def test_billing_unit_none_requires_zero_storage_rate():
    with pytest.raises(ValueError):
        PricingProfile("bad", 0.0, 0.0, 0.01, "none")


def test_records_from_ledger_weighted_merge():
    profile = PricingProfile("cache", 1e-7, 1e-5, 0.02, "hour")
    ledger = {
        "transport": "mem-cache",
        "invocations": [
            {"request_id": "a", "duration_s": 1.0},
            {"request_id": "b", "duration_s": 2.0},
        ],
        "objects": [
            {"request_id": "a", "bytes": 1e9, "residency_s": 3600.0},  # 1 GB for 1 unit
            {"request_id": "a", "bytes": 3e9, "residency_s": 1800.0},  # 3 GB for 0.5 unit
            {"request_id": "", "bytes": 2e9, "residency_s": 360.0},  # unattributed
        ],
    }
    records = records_from_ledger(ledger, profile)
    assert len(records) == 2
    storage = cost_breakdown(records, profile).storage
    expected = 0.02 * (1 * 1.0 + 3 * 0.5 + 2 * 0.1)
    assert storage == pytest.approx(expected, rel=1e-9)


def test_records_from_ledger_empty_invocations():
    profile = DEFAULT_PRICING["mem-cache"]
    ledger = {"invocations": [], "objects": [{"request_id": "", "bytes": 1e9, "residency_s": 3600}]}
    records = records_from_ledger(ledger, profile)
    assert len(records) == 1
    assert cost_breakdown(records, profile).storage == pytest.approx(0.02, rel=1e-9)


def test_minimal_residency_never_longer_than_window():
    # residency derives from stored_at -> last retrieval deltas, never padded
    assert residency_fraction(0.0, "hour") == 0.0
    assert residency_fraction(3600.0, "hour") == 1.0


def test_format_cost_table_shape():
    rows = [CostRow("xdt", 1e-5, 0.0), CostRow("cold-store", 1e-5, 2e-6)]
    table = format_cost_table(rows)
    lines = table.splitlines()
    assert "transport" in lines[0]
    assert len(lines) == 4
    assert "xdt" in lines[2]
