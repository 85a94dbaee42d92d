import pytest

from asklearn import kb as kbmod

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def desk_kb():
    return kbmod.generate_kb(n_movies=200, n_people=150, seed=0)


@pytest.fixture(scope="session")
def small_kb():
    return kbmod.generate_kb(n_movies=60, n_people=60, seed=1)


@pytest.fixture(scope="session")
def fig_kb():
    """Four-fact KB around Tom Hanks used by several hand-checked examples."""
    return kbmod.parse_kb(
        "#relation directed_by\n#relation starred_actors\n"
        "Larry Crowne|directed_by|Tom Hanks\n"
        "Forrest Gump|starred_actors|Tom Hanks\n"
        "Forrest Gump|starred_actors|Sally Field\n"
        "Forrest Gump|directed_by|Robert Zemeckis\n")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
