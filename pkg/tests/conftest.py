import numpy as np
import pytest

from crimelink.dataset import CaseTable, FeatureSchema
from crimelink.synthgen import GenConfig, generate


def make_table(features, series, locations=None, times=None, names=None):
    features = np.asarray(features, dtype=np.uint8)
    n, m = features.shape
    names = names or [f"f{j}" for j in range(m)]
    if locations is None:
        locations = np.zeros((n, 2))
    if times is None:
        times = np.zeros(n)
    return CaseTable(
        FeatureSchema.uniform(names),
        [f"C{i:03d}" for i in range(n)],
        list(series),
        features,
        locations,
        times,
    )


@pytest.fixture(scope="session")
def small_config():
    return GenConfig(
        n_cases=200,
        dims=30,
        n_signature_features=5,
        target_sparsity=0.85,
        series_size_min=3,
        series_size_max=8,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_table(small_config):
    return generate(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        verdict = "PASS" if report.passed else "FAIL"
        _CRITERIA[props["criterion"]] = (verdict, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
