import numpy as np
import pytest

from lexnet import flowdata
from lexnet.backbone import lexnet_config
from lexnet.model import build_model

SMALL = lexnet_config(widths=(4, 4, 8, 8), stem_channels=2)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        results = report.config_criteria
        results.setdefault(crit, []).append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])
        report.config_criteria = item.config._criteria


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcomes in sorted(results.items()):
        status = "PASS" if all(outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {title}")


# ---------------------------------------------------------------- shared fixtures


def tiny_data(k=4, per_class=12, seed=0, noise=0.1):
    recs, sigs = flowdata.synth_generate(k, per_class, noise, seed)
    return flowdata.encode_records(recs), sigs


def tiny_model(k=4, seed=0, dtype=np.float32, **kw):
    return build_model(k, SMALL, seed=seed, dtype=dtype, **kw)


@pytest.fixture
def tiny():
    data, sigs = tiny_data()
    model = tiny_model(label_names=data.labels.names)
    model.forward(data.x[:8], train=True)  # seed the batch-norm statistics
    return model, data
