import numpy as np
import pytest
import torch

from tripletgen.corpus import default_corpus_config, generate_corpus


@pytest.fixture(scope="session")
def corpus_cfg():
    return default_corpus_config((32, 32))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, corpus_cfg):
    return generate_corpus(corpus_cfg, 60, 11, tmp_path_factory.mktemp("small_corpus"))


@pytest.fixture(scope="session")
def small_triplets(small_corpus):
    return small_corpus.load_all()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# --------------------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
