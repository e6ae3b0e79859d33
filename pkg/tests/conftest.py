import numpy as np
import pytest

from xote.synthetic import twin_languages


@pytest.fixture(scope="session")
def twins():
    return twin_languages(dim=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def aligned_tables(twins):
    from xote.align import align_tables
    from xote.embeddings import apply_projection

    W = align_tables(twins.target, twins.source, twins.dictionary)
    return {"aa": twins.source, "bb": apply_projection(twins.target, W)}


@pytest.fixture(scope="session")
def twin_data():
    from xote.synthetic import make_corpus

    return {
        lang: (make_corpus(60, lang, 0, "train", translate=tr), make_corpus(30, lang, 0, "test", translate=tr))
        for lang, tr in (("aa", False), ("bb", True))
    }


# -- acceptance summary ----------------------------------------------------
# Acceptance tests attach ("criterion", text) to user_properties; a single
# PASS/FAIL/SKIP line per criterion is printed at the end of the session.

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = props.get("measured", "")
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _ACCEPTANCE[props["criterion"]] = f"{status}  {props['criterion']}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
