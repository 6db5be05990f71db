import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from domainscope.calibration import NORMALIZED_METRICS, CalibrationProfile, NormEntry  # noqa: E402
from domainscope import synthetic  # noqa: E402


def identity_profile(**kwargs) -> CalibrationProfile:
    """No log, clip window [0, 1]: normalized value = clamp(raw, 0, 1)."""
    norm = {m: NormEntry(False, 0.0, 1.0) for m in NORMALIZED_METRICS}
    return CalibrationProfile(normalization=norm, name="identity", **kwargs)


@pytest.fixture
def ident():
    return identity_profile()


@pytest.fixture(scope="session")
def corpus60(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus60")
    images = synthetic.generate(60, seed=0)
    paths = synthetic.write_corpus(out, images)
    return images, paths


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
