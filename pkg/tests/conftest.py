import os

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from sdlt.ledger import (
    AppendRecord,
    BaEvidence,
    GenesisDescriptor,
    LedgerState,
    NodeId,
    PosEvidence,
    PowEvidence,
    Transfer,
)

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

LABELS = ["A", "B", "C", "D", "E", "F", "G", "H"]

node_ids = st.sampled_from(LABELS).map(NodeId.from_label)

genesis_descriptors = st.builds(
    GenesisDescriptor,
    st.binary(max_size=8),
    st.none() | st.lists(node_ids, min_size=1, max_size=4, unique=True).map(tuple),
    st.none()
    | st.dictionaries(node_ids, st.integers(0, 1000), min_size=1, max_size=4).filter(
        lambda d: sum(d.values()) > 0
    ),
)

evidence = st.one_of(
    st.lists(node_ids, max_size=4, unique=True).map(lambda ids: BaEvidence(tuple(ids))),
    st.builds(PowEvidence, st.integers(1, 5), node_ids),
    st.builds(
        PosEvidence,
        st.dictionaries(node_ids, st.integers(0, 1000), max_size=3).map(lambda d: tuple(d.items())),
        st.lists(st.builds(Transfer, node_ids, node_ids, st.integers(1, 50)), max_size=3).map(tuple),
    ),
)

records = st.builds(AppendRecord, st.binary(min_size=32, max_size=32), evidence)


@st.composite
def ledger_states(draw, genesis=None, max_height=6):
    g = genesis if genesis is not None else draw(genesis_descriptors)
    return LedgerState(g, tuple(draw(st.lists(records, max_size=max_height))))


@st.composite
def prefix_chains(draw):
    """Three states on one chain: a <= b <= c."""
    g = draw(genesis_descriptors)
    recs = draw(st.lists(records, max_size=8))
    i, j = sorted(draw(st.lists(st.integers(0, len(recs)), min_size=2, max_size=2)))
    return (LedgerState(g, tuple(recs[:i])), LedgerState(g, tuple(recs[:j])), LedgerState(g, tuple(recs)))


# -- acceptance summary -----------------------------------------------------

CRITERIA = {
    1: "BA strong statelessness, |C| in 2..9, exhaustive subsets",
    2: "BA threshold tightness, |C|=4 with 2 colluders",
    3: "PoW rewrite rate vs (4pq)^k bound and (q/p)^k oracle",
    4: "PoS witness on 50 random scenarios",
    5: "mirror consistency on every witness",
    6: "CLI byte determinism and thread-independent aggregates",
    7: "state-algebra property suite (>=1000 cases each)",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n in getattr(report, "criteria", ()):
        _outcomes.setdefault(n, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criteria = tuple(m.args[0] for m in item.iter_markers("criterion"))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, text in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            verdict = "NOT RUN"
        elif all(r == "passed" for r in results):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        tr.write_line(f"criterion {n}: {verdict:7s} {text} ({len(results or [])} tests)")
