import gzip
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointiso.lcms import LcmsMap  # noqa: E402
from pointiso.pipeline import load_network  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def fixture_map():
    """Two scans: 400.1234/400.6234 at rt 10.00, 400.1234 at rt 10.02."""
    return LcmsMap.from_scans([(10.00, [(400.6234, 50.0), (400.1234, 100.0)]),
                               (10.02, [(400.1234, 90.0)])])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained():
    """Detecting and grouping networks trained by scripts/run_acceptance_experiment.py."""
    nets = []
    for name in ("detecting", "grouping"):
        with gzip.open(DATA / f"{name}.json.gz", "rt") as fh:
            nets.append(load_network(fh, name))
    return tuple(nets)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
