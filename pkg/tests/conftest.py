import numpy as np
import pytest

from hycedis.corpus import CorpusConfig, generate_corpus
from hycedis.vcad import VcadModel


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(CorpusConfig())


@pytest.fixture(scope="session")
def default_vcad(default_corpus):
    tr = default_corpus["train"]
    X = np.stack([d.doc_feature for d in tr.documents])
    C = np.array([d.category for d in tr.documents])
    v = VcadModel(X.shape[1])
    v.fit(X, C, seed=0)
    return v


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion; printed in the summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
