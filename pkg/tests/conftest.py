import pytest

from curatedcl.config import TrainConfig, apply_overrides
from curatedcl.datasets import make_synthetic


def tiny_config(**overrides):
    """A run that finishes in well under a second per epoch."""
    base = {
        "epochs": 4,
        "warmup_epochs": 1,
        "calibration_epoch": 2,
        "batch_size": 8,
        "base_lr": 0.05,
        "checkpoint_every": 2,
        "encoder.conv_channels": [4, 8],
        "encoder.hidden_dim": 16,
        "encoder.projection_dim": 4,
        "data.classes": 4,
        "data.per_class": 8,
        "data.test_per_class": 4,
        "data.size": 8,
    }
    base.update(overrides)
    return apply_overrides(TrainConfig(), base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data():
    return make_synthetic(4, 8, 8, seed=0)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion in the terminal summary

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "notes": []})
    if not report.passed:
        entry["passed"] = False
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else report.when
        entry["notes"].append(f"{item.name}: {msg[:160]}")
    else:
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        verdict = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number} {verdict}: {entry['title']}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
