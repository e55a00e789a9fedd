import pytest

from ucdr.core import RunConfig, build_split
from ucdr.synthgen import default_benchmark


@pytest.fixture(scope="session")
def tiny():
    """A small benchmark that trains in well under a second per epoch."""
    ds, sem, _ = default_benchmark(seed=0, samples_per_class_per_domain=6)
    split = build_split(ds, "UCDR", held_out_domain=4, rng_seed=0)
    cfg = RunConfig(kappa=1.0, lr_start=0.05, lr_end=1e-4, max_epochs=4, patience=1, val_k=10)
    return ds, sem, split, cfg


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
