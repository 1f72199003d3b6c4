import re

import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or not report.failed:
        return
    if "test_acceptance" not in str(item.fspath):
        return
    m = re.search(r"criterion_(\d+)_(\w+)", item.name)
    if m:
        reason = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else ""
        print(f"\nACCEPTANCE {m.group(1)} {m.group(2).replace('_', '-')}: FAIL  {reason}")
