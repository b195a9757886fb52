"""The three transition functions (BA, PoW, PoS) and their bookkeeping.

Each ``step_*`` maps a ledger state plus the current network and event batch
to the successor state, appending exactly one record.  All of them are pure:
the PoW step draws from a random generator that the caller owns and passes in.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    EmptyNetwork,
    EvidenceKindMismatch,
    InsufficientStake,
    InvalidShare,
    NegativeBalance,
    QuorumUnavailable,
)
from .ledger import (
    AppendRecord,
    BaEvidence,
    LedgerState,
    NodeId,
    PosEvidence,
    PowEvidence,
    Transfer,
)

_U64 = struct.Struct(">Q")


@dataclass(frozen=True)
class NodeProfile:
    """A roster entry.  ``online=None`` means present at every step."""

    id: NodeId
    honest: bool = True
    power: float = 0.0
    online: frozenset[int] | None = None

    def __post_init__(self):
        if not 0.0 <= self.power <= 1.0:
            raise InvalidShare(f"power of {self.id} outside [0, 1]: {self.power}")
        if self.online is not None and not isinstance(self.online, frozenset):
            object.__setattr__(self, "online", frozenset(self.online))

    def is_online(self, t: int) -> bool:
        return self.online is None or t in self.online


@dataclass(frozen=True)
class EventBatch:
    time: int
    payload: bytes = b""
    transfers: tuple[Transfer, ...] = ()

    def __post_init__(self):
        if not isinstance(self.transfers, tuple):
            object.__setattr__(self, "transfers", tuple(self.transfers))


@lru_cache(maxsize=1 << 16)
def event_digest(e: EventBatch) -> bytes:
    """SHA-256 over the batch time and payload.

    Transfers are not hashed here: PoS records carry them verbatim in their
    evidence, which keeps relabeling a state a pure function of the state.
    """
    h = hashlib.sha256()
    h.update(_U64.pack(e.time))
    h.update(struct.pack(">I", len(e.payload)))
    h.update(e.payload)
    return h.digest()


def default_event(t: int) -> EventBatch:
    return EventBatch(t, f"batch-{t}".encode())


# -- Byzantine agreement ----------------------------------------------------


def step_ba(
    s: LedgerState,
    committee: Sequence[NodeId],
    byzantine: Iterable[NodeId],
    e: EventBatch,
) -> LedgerState:
    """Order ``e`` by agreement among the committee; honest members sign."""
    committee = tuple(committee)
    if s.genesis.ba_committee is None or committee != s.genesis.ba_committee:
        raise ValueError("committee does not match the genesis committee")
    faulty = set(byzantine) & set(committee)
    if 2 * len(faulty) >= len(committee):
        raise QuorumUnavailable(
            f"{len(faulty)} of {len(committee)} committee members are Byzantine"
        )
    signers = [node for node in committee if node not in faulty]
    return s.append(AppendRecord(event_digest(e), BaEvidence(tuple(signers))))


# -- proof of work ----------------------------------------------------------


def _check_powers(online: Sequence[NodeProfile]) -> None:
    total = math.fsum(p.power for p in online)
    if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=1e-9):
        raise InvalidShare(f"online powers sum to {total}, expected 1")


def sample_producer(online: Sequence[NodeProfile], rng: np.random.Generator) -> NodeId:
    """Pick one node with probability equal to its power share."""
    if not online:
        raise EmptyNetwork("no node online to produce a block")
    _check_powers(online)
    u = rng.random()
    acc = 0.0
    chosen = None
    for p in online:
        if p.power <= 0.0:
            continue
        acc += p.power
        chosen = p.id
        if u < acc:
            return p.id
    # u landed in the float rounding gap above the last cumulative sum
    return chosen


@lru_cache(maxsize=1 << 16)
def pow_record(e: EventBatch, producer: NodeId, work: int = 1) -> AppendRecord:
    return AppendRecord(event_digest(e), PowEvidence(work, producer))


def step_pow(
    s: LedgerState,
    online: Sequence[NodeProfile],
    e: EventBatch,
    rng: np.random.Generator,
) -> LedgerState:
    """Append one unit-work block produced by a power-weighted random node."""
    producer = sample_producer(online, rng)
    return s.append(pow_record(e, producer))


def pow_total(s: LedgerState) -> int:
    """Cumulative work embedded in ``s``; zero for the genesis-only state."""
    total = 0
    for r in s.records:
        ev = r.evidence
        if not isinstance(ev, PowEvidence):
            raise EvidenceKindMismatch(f"record carries {type(ev).__name__}, not PoW")
        total += ev.work
    return total


# -- proof of stake ---------------------------------------------------------


@dataclass(frozen=True)
class StakeLedger:
    balances: Mapping[NodeId, int] = field(default_factory=dict)

    def __post_init__(self):
        bal = {node: int(v) for node, v in self.balances.items()}
        if any(v < 0 for v in bal.values()):
            raise NegativeBalance("stake balances must be non-negative")
        object.__setattr__(self, "balances", bal)

    @classmethod
    def from_genesis(cls, s: LedgerState) -> "StakeLedger":
        if s.genesis.initial_stake is None:
            raise ValueError("genesis carries no initial stake")
        return cls(s.genesis.stake_map())

    @property
    def total(self) -> int:
        return sum(self.balances.values())

    def of(self, node: NodeId) -> int:
        return self.balances.get(node, 0)

    def holders(self) -> list[NodeId]:
        return sorted(node for node, v in self.balances.items() if v > 0)

    def apply(self, transfers: Iterable[Transfer]) -> "StakeLedger":
        bal = dict(self.balances)
        for t in transfers:
            have = bal.get(t.src, 0)
            if have < t.amount:
                raise NegativeBalance(f"{t.src} holds {have}, cannot send {t.amount}")
            bal[t.src] = have - t.amount
            bal[t.dst] = bal.get(t.dst, 0) + t.amount
        return StakeLedger(bal)

    def __eq__(self, other):
        if not isinstance(other, StakeLedger):
            return NotImplemented
        a = {k: v for k, v in self.balances.items() if v}
        b = {k: v for k, v in other.balances.items() if v}
        return a == b

    def __hash__(self):
        return hash(frozenset((k, v) for k, v in self.balances.items() if v))


def step_pos(
    s: LedgerState,
    stake: StakeLedger,
    coalition: Iterable[NodeId],
    e: EventBatch,
) -> LedgerState:
    """Append a block signed by a coalition holding a strict stake majority."""
    members = sorted(set(coalition))
    held = sum(stake.of(node) for node in members)
    if 2 * held <= stake.total:
        raise InsufficientStake(f"coalition holds {held} of {stake.total} tokens")
    stake.apply(e.transfers)  # validates; the successor ledger comes from replay_stake
    signers = tuple((node, stake.of(node)) for node in members)
    return s.append(AppendRecord(event_digest(e), PosEvidence(signers, e.transfers)))


def replay_stake(s: LedgerState, events: Sequence[EventBatch]) -> StakeLedger:
    """Stake distribution after applying every batch behind ``s`` in order."""
    if len(events) != s.height:
        raise AlignmentError(f"{len(events)} event batches for {s.height} records")
    stake = StakeLedger.from_genesis(s)
    for e in events:
        stake = stake.apply(e.transfers)
    return stake
