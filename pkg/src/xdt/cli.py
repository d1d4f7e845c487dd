"""Command-line entry point: run a cluster, benches, the demo, cost tables."""

from __future__ import annotations

import json
import logging
import signal
import sys
import threading

import click

from . import bench as bench_mod
from . import costmodel
from .cluster import ClusterConfig, LocalCluster
from .errors import XdtError
from .storage import PROFILES, StorageProfile, StorageServer

logger = logging.getLogger(__name__)

_SIZE_UNITS = {
    "kib": 1024,
    "mib": 1024**2,
    "gib": 1024**3,
    "kb": 1000,
    "mb": 1000**2,
    "gb": 1000**3,
    "b": 1,
}


def parse_size(text: str) -> int:
    """'64KiB' / '10MB' / '1048576' -> bytes."""
    s = str(text).strip().lower()
    for unit in sorted(_SIZE_UNITS, key=len, reverse=True):
        if s.endswith(unit):
            return int(float(s[: -len(unit)]) * _SIZE_UNITS[unit])
    return int(s)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Serverless mini-cluster with direct pull-based data transfers."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _fail(e: Exception) -> None:
    click.echo(f"error: {e}", err=True)
    raise SystemExit(1)


def _wait_for_interrupt() -> None:
    stop = threading.Event()

    def _handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _handler)
    signal.signal(signal.SIGTERM, _handler)
    stop.wait()


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def up(config_path: str) -> None:
    """Run a local cluster in the foreground until interrupted."""
    try:
        config = ClusterConfig.from_json_file(config_path)
        cluster = LocalCluster(config).boot()
    except XdtError as e:
        _fail(e)
        return
    click.echo(f"READY activator {cluster.env.activator_addr}")
    for name, addr in cluster.env.storage_addrs.items():
        click.echo(f"READY storaged {name} {addr}")
    for fn in config.functions:
        click.echo(f"READY function {fn.url} instances={fn.min_scale}")
    click.echo("READY")
    sys.stdout.flush()
    try:
        _wait_for_interrupt()
    finally:
        cluster.shutdown()
    click.echo("cluster stopped")


@main.command(name="bench")
@click.option("--pattern", type=click.Choice([p.value for p in bench_mod.Pattern]), default="1-1")
@click.option("--size", default="1MiB", help="Object size, e.g. 10KiB, 1MiB.")
@click.option("--fan", default=1, type=int, help="Fan degree for collective patterns.")
@click.option(
    "--transport",
    type=click.Choice(["xdt", "cold-store", "mem-cache"]),
    default="xdt",
    envvar="XDT_TRANSPORT",
)
@click.option("--reps", default=bench_mod.DEFAULT_REPETITIONS, type=int)
@click.option("--warmup", default=bench_mod.DEFAULT_WARMUP, type=int)
@click.option("--sweep", "sweep_axis", type=click.Choice(bench_mod.SWEEP_AXES), default=None)
@click.option("--values", default="", help="Comma-separated sweep values.")
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="Write CSV here.")
@click.option("--boot-delay-ms", default=20.0, type=float)
def bench_cmd(pattern, size, fan, transport, reps, warmup, sweep_axis, values, csv_path, boot_delay_ms):
    """Run one microbenchmark pattern (or a parameter sweep) and emit CSV."""
    object_size = parse_size(size)
    spec = bench_mod.PatternSpec(
        pattern=pattern,
        object_size=object_size,
        fan_degree=fan,
        repetitions=reps,
        warmup=warmup,
        transport=transport,
    )
    max_fan = fan
    sweep_values: list = []
    if sweep_axis:
        if not values:
            _fail(XdtError("--sweep requires --values"))
        raw = [v.strip() for v in values.split(",") if v.strip()]
        if sweep_axis in ("object_size", "buffer_depth"):
            sweep_values = [parse_size(v) for v in raw]
        elif sweep_axis == "fan_degree":
            sweep_values = [int(v) for v in raw]
            max_fan = max(max_fan, *sweep_values)
        else:
            sweep_values = raw

    config = bench_mod.pattern_cluster_config(
        spec.pattern, max_fan, transport=transport, boot_delay_s=boot_delay_ms / 1000.0
    )
    cluster = LocalCluster(config).boot()
    try:
        if sweep_axis:
            rows = bench_mod.sweep(spec, sweep_axis, sweep_values, cluster)
            out = bench_mod.sweep_to_csv(rows)
            failed = [r for r in rows if r.report is None]
        else:
            report = bench_mod.run_pattern(spec, cluster)
            out = bench_mod.reports_to_csv([report])
            failed = []
    except XdtError as e:
        _fail(e)
        return
    finally:
        cluster.shutdown()
    if csv_path:
        with open(csv_path, "w") as f:
            f.write(out)
        click.echo(f"wrote {csv_path}")
    else:
        click.echo(out, nl=False)
    if failed:
        _fail(XdtError(f"{len(failed)} sweep point(s) failed"))


@main.command()
@click.option("--mappers", default=4, type=int)
@click.option("--reducers", default=2, type=int)
@click.option(
    "--transport",
    type=click.Choice(["xdt", "cold-store", "mem-cache"]),
    default=None,
    envvar="XDT_TRANSPORT",
)
@click.option("--all-transports", is_flag=True, help="Run once per transport and compare.")
@click.option("--corpus-size", default="1MiB")
@click.option("--seed", default=7, type=int)
@click.option("--ledger", "ledger_path", type=click.Path(), default=None)
@click.option("--boot-delay-ms", default=20.0, type=float)
def wordcount(mappers, reducers, transport, all_transports, corpus_size, seed, ledger_path, boot_delay_ms):
    """Run the word-count workflow demo and verify its output."""
    transports = ["xdt", "cold-store", "mem-cache"] if all_transports else [transport or "xdt"]
    corpus = bench_mod.make_corpus(seed, parse_size(corpus_size))
    expected = bench_mod.wordcount_oracle(corpus)
    config = bench_mod.wordcount_cluster_config(
        mappers, reducers, transport=transports[0], boot_delay_s=boot_delay_ms / 1000.0
    )
    cluster = LocalCluster(config).boot()
    runs = []
    try:
        for t in transports:
            result = bench_mod.run_wordcount_demo(
                cluster, mappers, reducers, transport=t, corpus=corpus
            )
            verified = result.output == expected
            click.echo(
                f"wordcount transport={t} sha256={result.output_sha256} "
                f"shuffle_bytes={result.shuffle_bytes_measured} "
                f"elapsed_s={result.elapsed_s:.3f} verified={verified}"
            )
            if not verified:
                _fail(XdtError(f"wordcount output mismatch under {t}"))
            runs.append(result.ledger)
    finally:
        cluster.shutdown()
    if ledger_path:
        with open(ledger_path, "w") as f:
            json.dump({"runs": runs}, f, indent=2)
        click.echo(f"wrote {ledger_path}")


@main.command()
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="cold-store")
@click.option("--latency-ms", default=None, type=float, help="Override per-op latency.")
@click.option("--bandwidth-mbps", default=None, type=float, help="Override bandwidth cap.")
@click.option("--listen", default="127.0.0.1:0", help="host:port to bind.")
def storaged(profile, latency_ms, bandwidth_mbps, listen):
    """Run the emulated through-storage service in the foreground."""
    base = PROFILES[profile]
    prof = StorageProfile(
        name=base.name,
        per_op_latency=(latency_ms / 1000.0) if latency_ms is not None else base.per_op_latency,
        bandwidth_cap=(bandwidth_mbps * 1024 * 1024)
        if bandwidth_mbps is not None
        else base.bandwidth_cap,
        price_rate=base.price_rate,
        billing_unit=base.billing_unit,
    )
    host, port = listen.rsplit(":", 1)
    server = StorageServer(prof, host=host, port=int(port))
    try:
        addr = server.start()
    except OSError as e:
        _fail(e)
        return
    click.echo(f"READY storaged {profile} {addr}")
    sys.stdout.flush()
    try:
        _wait_for_interrupt()
    finally:
        server.stop()


@main.command()
@click.option("--ledger", "ledger_path", required=True, type=click.Path(exists=True))
@click.option("--pricing", "pricing_path", type=click.Path(exists=True), default=None)
def cost(ledger_path, pricing_path):
    """Price a recorded run ledger per transport."""
    try:
        with open(ledger_path) as f:
            raw = json.load(f)
        profiles = costmodel.load_pricing(pricing_path)
        runs = raw["runs"] if "runs" in raw else [raw]
        rows = []
        for ledger in runs:
            profile = profiles[ledger["transport"]]
            records = costmodel.records_from_ledger(ledger, profile)
            rows.append(costmodel.cost_breakdown(records, profile))
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        _fail(XdtError(f"cannot price ledger: {e}"))
        return
    click.echo(costmodel.format_cost_table(rows))


@main.command(name="write-pricing")
@click.argument("path", type=click.Path())
def write_pricing(path):
    """Write the default pricing profiles to PATH as JSON."""
    costmodel.dump_default_pricing(path)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
