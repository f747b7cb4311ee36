import numpy as np
import pytest

from mdrl.dst import DstConfig, DstModel
from mdrl.env import get_domain, micro_domain
from mdrl.policy import MultiDomainPolicy, PolicyConfig

TINY_DST = DstConfig(word_emb_width=4, utt_hidden_width=3, dialog_hidden_width=5, shared_dense_width=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    return micro_domain()


@pytest.fixture(scope="session")
def tiny_dst():
    """Untrained tracker over micro + rest: small enough for finite differences and quick rollouts."""
    return DstModel([micro_domain(), get_domain("rest")], TINY_DST, rng=np.random.default_rng(0))


@pytest.fixture
def two_head_policy():
    doms = [get_domain("rest"), get_domain("weather")]
    return MultiDomainPolicy(6, doms, PolicyConfig(embed_width=5, head_init_scale=1.0), rng=np.random.default_rng(3))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(n: int, title: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        assert passed, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
