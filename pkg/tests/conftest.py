import numpy as np
import pytest

from thermohybrid import exper
from thermohybrid.estimator import HybridLossCorrector


@pytest.fixture(scope="session")
def small_bundle():
    bundle = exper.make_bundle(exper.Scenario("accurate", seed=0))
    data = exper.build_dataset(bundle, exper.generate_profiles(300), seed=0)
    return bundle, data


def make_estimator(bundle, **kw):
    params = dict(epochs=4, n_b=2, val_every=1, sample_stride=25, random_state=0)
    params.update(kw)
    return HybridLossCorrector(bundle.nominal_rom, bundle.nominal_losses, **params)


@pytest.fixture
def small_trainer(small_bundle):
    def build(**kw):
        bundle, data = small_bundle
        est = make_estimator(bundle, **kw)
        tr, va = data.subset("train"), data.subset("val")
        return est, est.setup(tr["X"], tr["y"], (va["X"], va["y"]))
    return build


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        summary = dict(report.user_properties).get("summary", "")
        if report.failed and not summary:
            summary = report.longreprtext.strip().splitlines()[-1][:160]
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = (report.outcome, summary)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (outcome, summary) in _ACCEPTANCE.items():
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{verdict} {name}: {summary}")
