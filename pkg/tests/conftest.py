import time

import pytest
import threadpoolctl

from warpmark.synth import SynthConfig, synth_generate
from warpmark.trainer import TrainConfig, TrainData, pretrain_source


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    """Bit-exact comparisons assume a single BLAS thread."""
    with threadpoolctl.threadpool_limits(1):
        yield


def as_train_data(bench) -> TrainData:
    return TrainData(bench.source_train, bench.target_train, bench.source_val, bench.labeled_target("val"))


@pytest.fixture(scope="session")
def synth_small():
    """Small seeded benchmark shared by unit tests."""
    return synth_generate(SynthConfig(n_train=12, n_val=4, seed=7))


@pytest.fixture(scope="session")
def small_data(synth_small):
    return as_train_data(synth_small)


@pytest.fixture(scope="session")
def stage_seconds():
    """Wall time of cached session stages, so end-to-end runtimes can be reported in full."""
    return {}


@pytest.fixture(scope="session")
def benchmark_data(stage_seconds):
    """The default seeded benchmark: 200+200 training faces, 50+50 validation."""
    t0 = time.perf_counter()
    data = as_train_data(synth_generate(SynthConfig()))
    stage_seconds["synth"] = time.perf_counter() - t0
    return data


@pytest.fixture(scope="session")
def source_only(benchmark_data, stage_seconds):
    """Default-config source-only models keyed by training seed, built on first use."""
    cache = {}

    def get(seed: int):
        if seed not in cache:
            t0 = time.perf_counter()
            cache[seed] = pretrain_source(TrainConfig(seed=seed), benchmark_data.source_train)
            stage_seconds[f"pretrain_{seed}"] = time.perf_counter() - t0
        return cache[seed]

    return get


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
