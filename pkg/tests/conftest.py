import pytest

from tmlga import benchmark


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """The default synthetic benchmark (500 train / 100 test videos), generated once."""
    return benchmark.build(tmp_path_factory.mktemp("benchmark"))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
