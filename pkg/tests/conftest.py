import numpy as np
import pytest

from dafd import ingest
from dafd.signal import preprocess_many


@pytest.fixture(scope="session")
def small_spec():
    return ingest.SynthSpec(n_subjects=6, trials_per_class_per_subject=3, seed=3)


@pytest.fixture(scope="session")
def small_segments(small_spec):
    """Source/target segment lists from a small shifted synthetic corpus."""
    import math
    from dataclasses import replace
    shifted = replace(small_spec, position="RP",
                      domain_shift=ingest.DomainShift(math.radians(25), (0.9, 1.1, 1.0)))
    src = preprocess_many(ingest.synth_trials(small_spec), domain="source")
    tgt = preprocess_many(ingest.synth_trials(shifted), domain="target")
    return src, tgt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
