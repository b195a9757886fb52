import math

import numpy as np
import pytest

from sdlt.consensus import (
    EventBatch,
    NodeProfile,
    StakeLedger,
    default_event,
    event_digest,
    pow_record,
    pow_total,
    replay_stake,
    sample_producer,
    step_ba,
    step_pos,
    step_pow,
)
from sdlt.errors import (
    AlignmentError,
    EmptyNetwork,
    EvidenceKindMismatch,
    InsufficientStake,
    InvalidShare,
    NegativeBalance,
    QuorumUnavailable,
)
from sdlt.ledger import BaEvidence, GenesisDescriptor, NodeId, Transfer, genesis_state

N = NodeId.from_label
COMMITTEE = (N("C1"), N("C2"), N("C3"), N("C4"))
BA = GenesisDescriptor(b"ba", COMMITTEE)


class TestEvents:
    def test_digest_ignores_transfers(self):
        plain = EventBatch(3, b"p")
        moved = EventBatch(3, b"p", (Transfer(N("A"), N("B"), 1),))
        assert event_digest(plain) == event_digest(moved)

    def test_digest_separates_time_and_payload(self):
        assert event_digest(EventBatch(1, b"x")) != event_digest(EventBatch(2, b"x"))
        assert event_digest(EventBatch(1, b"x")) != event_digest(EventBatch(1, b"y"))

    def test_default_event(self):
        assert default_event(4) == EventBatch(4, b"batch-4")


class TestBA:
    def test_honest_members_sign(self):
        s = step_ba(genesis_state(BA), COMMITTEE, {N("C4")}, default_event(0))
        assert s.records[0].evidence == BaEvidence(COMMITTEE[:3])

    def test_quorum_unavailable_at_half(self):
        with pytest.raises(QuorumUnavailable):
            step_ba(genesis_state(BA), COMMITTEE, COMMITTEE[:2], default_event(0))

    def test_committee_must_match_genesis(self):
        with pytest.raises(ValueError):
            step_ba(genesis_state(BA), COMMITTEE[:3], (), default_event(0))

    def test_deterministic(self):
        a = step_ba(genesis_state(BA), COMMITTEE, (), default_event(0))
        b = step_ba(genesis_state(BA), COMMITTEE, (), default_event(0))
        assert a.canonical == b.canonical


class TestPoW:
    roster = [NodeProfile(N("H"), True, 0.7), NodeProfile(N("A"), False, 0.3)]

    def test_shares_must_sum_to_one(self):
        bad = [NodeProfile(N("H"), True, 0.5), NodeProfile(N("A"), False, 0.3)]
        with pytest.raises(InvalidShare):
            sample_producer(bad, np.random.default_rng(0))

    def test_empty_network(self):
        with pytest.raises(EmptyNetwork):
            sample_producer([], np.random.default_rng(0))

    def test_power_outside_unit_interval(self):
        with pytest.raises(InvalidShare):
            NodeProfile(N("H"), True, 1.5)

    def test_producer_frequencies(self):
        rng = np.random.default_rng(11)
        n = 20_000
        hits = sum(sample_producer(self.roster, rng) == N("A") for _ in range(n))
        sigma = math.sqrt(0.3 * 0.7 / n)
        assert abs(hits / n - 0.3) < 4 * sigma

    def test_work_accumulates(self):
        rng = np.random.default_rng(0)
        s = genesis_state(GenesisDescriptor(b"pow"))
        for t in range(7):
            s = step_pow(s, self.roster, default_event(t), rng)
        assert pow_total(s) == 7
        assert pow_total(genesis_state(GenesisDescriptor(b"pow"))) == 0

    def test_weighted_work(self):
        s = genesis_state(GenesisDescriptor(b"pow")).append(pow_record(default_event(0), N("H"), work=5))
        assert pow_total(s) == 5

    def test_kind_mismatch(self):
        s = step_ba(genesis_state(BA), COMMITTEE, (), default_event(0))
        with pytest.raises(EvidenceKindMismatch):
            pow_total(s)


class TestPoS:
    g = GenesisDescriptor(b"pos", None, {N("G"): 60, N("K"): 40})

    def test_majority_coalition_appends(self):
        s0 = genesis_state(self.g)
        stake = StakeLedger.from_genesis(s0)
        e = EventBatch(0, b"e", (Transfer(N("G"), N("H"), 10),))
        s1 = step_pos(s0, stake, [N("G")], e)
        assert s1.records[0].evidence.signers == ((N("G"), 60),)
        assert s1.records[0].evidence.transfers == e.transfers

    def test_exact_half_is_not_majority(self):
        g = GenesisDescriptor(b"pos", None, {N("G"): 50, N("K"): 50})
        s0 = genesis_state(g)
        with pytest.raises(InsufficientStake):
            step_pos(s0, StakeLedger.from_genesis(s0), [N("G")], default_event(0))

    def test_overdraft_rejected(self):
        s0 = genesis_state(self.g)
        e = EventBatch(0, b"e", (Transfer(N("K"), N("H"), 41),))
        with pytest.raises(NegativeBalance):
            step_pos(s0, StakeLedger.from_genesis(s0), [N("G"), N("K")], e)

    def test_replay_alignment(self):
        s0 = genesis_state(self.g)
        with pytest.raises(AlignmentError):
            replay_stake(s0, [default_event(0)])

    def test_replay_matches_apply(self):
        s = genesis_state(self.g)
        stake = StakeLedger.from_genesis(s)
        events = [EventBatch(t, b"e", (Transfer(N("G"), N("H"), 5),)) for t in range(3)]
        for e in events:
            s = step_pos(s, stake, stake.holders(), e)
            stake = stake.apply(e.transfers)
        assert replay_stake(s, events) == stake
        assert stake.of(N("H")) == 15

    def test_zero_balances_do_not_affect_equality(self):
        assert StakeLedger({N("A"): 3, N("B"): 0}) == StakeLedger({N("A"): 3})
        assert hash(StakeLedger({N("A"): 3, N("B"): 0})) == hash(StakeLedger({N("A"): 3}))
