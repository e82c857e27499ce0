import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ref_data():
    import reference

    return reference.data()


@pytest.fixture(scope="session")
def ref_teacher(ref_data):
    import reference

    m, log = reference.teacher(ref_data)
    return m, log


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in acc.TITLES.items():
        if n in acc.RESULTS:
            ok, detail = acc.RESULTS[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  {title}")
