from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

import pytest

_criteria: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if rep.when == "call" and item.module.__name__.endswith("test_acceptance") and name.startswith("test_criterion_"):
        title = (item.function.__doc__ or name).strip().splitlines()[0]
        _criteria.append((name.split("_")[2], "PASS" if rep.passed else "FAIL", title))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, title in sorted(_criteria, key=lambda c: int(c[0])):
        terminalreporter.write_line(f"criterion {num}: {verdict}  {title}")
