import numpy as np
import pytest
import torch

from shotfi.dataset import stack_samples
from shotfi.synth import BenchmarkConfig, build_benchmark

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_mu():
    cfg = BenchmarkConfig(n_source=48, n_target=32, n_holdout=8, T=40, N_sc=4, seed=1)
    sp = build_benchmark(cfg, keep_raw=False)
    return {k: stack_samples(v) for k, v in sp.items()}


@pytest.fixture(scope="session")
def tiny_su():
    cfg = BenchmarkConfig(n_source=36, n_target=24, n_holdout=0, K=6, M=1, occupancy_dist={1: 1.0},
                          preprocess="phase-ratio", N_r=6, receivers=3, N_sc=4, T=180, seed=2)
    sp = build_benchmark(cfg, keep_raw=False)
    return {k: stack_samples(v, single_user=True) for k, v in sp.items() if v}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: desk-scale acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) in ("call", "setup"):
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines), key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
