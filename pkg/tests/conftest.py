import pytest

from xdt.cluster import ClusterConfig, LocalCluster
from xdt.controlplane import FunctionConfig

FAST_STORAGE = {
    "cold-store": {"latency_ms": 2, "bandwidth_mbps": 500},
    "mem-cache": {"latency_ms": 0.5, "bandwidth_mbps": 1000},
}


def build_cluster(functions, handlers=None, **cfg):
    defaults = {
        "boot_delay_s": 0.02,
        "metrics_interval_s": 0.05,
        "storage_overrides": FAST_STORAGE,
    }
    defaults.update(cfg)
    config = ClusterConfig(functions=functions, **defaults)
    return LocalCluster(config, handlers=handlers).boot()


@pytest.fixture
def make_cluster():
    clusters = []

    def _make(functions, handlers=None, **cfg):
        cluster = build_cluster(functions, handlers, **cfg)
        clusters.append(cluster)
        return cluster

    yield _make
    for cluster in clusters:
        cluster.shutdown()


@pytest.fixture(scope="module")
def echo_cluster():
    cluster = build_cluster([FunctionConfig("echo", "echo", min_scale=1, max_scale=2)])
    yield cluster
    cluster.shutdown()
