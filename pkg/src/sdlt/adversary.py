"""Byzantine local states and the two attack executions.

* BA forgeries: Byzantine committee members hand a joining node a state of
  their choosing, but can only reuse honestly signed records or sign with
  their own ids.
* Private PoW mining: the adversary forks below the honest tip and races the
  honest miners block by block.
* PoS long-range mirror: the adversary replays the same events in a world
  where every honest identity is swapped for one it controls.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .consensus import (
    EventBatch,
    NodeProfile,
    StakeLedger,
    event_digest,
    pow_record,
    pow_total,
    step_pos,
)
from .errors import InvalidShare, PoolExhausted, SignatureForgery
from .ledger import (
    AppendRecord,
    BaEvidence,
    GenesisDescriptor,
    LedgerState,
    LocalStateBag,
    NodeId,
    PosEvidence,
    PowEvidence,
    Transfer,
    genesis_state,
    truncate,
)

# -- BA forgeries -----------------------------------------------------------


def forged_signers(record: AppendRecord) -> tuple[NodeId, ...]:
    ev = record.evidence
    if isinstance(ev, BaEvidence):
        return ev.signers
    if isinstance(ev, PowEvidence):
        return (ev.producer,)
    return tuple(node for node, _ in ev.signers)


def scan_forged_signatures(
    states: Iterable[LedgerState],
    honest: Iterable[NodeId],
    honest_records: Iterable[AppendRecord],
) -> list[tuple[int, int, NodeId]]:
    """List (state index, record index, node) for honest ids on records honest nodes never produced."""
    honest = set(honest)
    produced = set(honest_records)
    hits = []
    for i, s in enumerate(states):
        for j, r in enumerate(s.records):
            if r in produced:
                continue
            for node in forged_signers(r):
                if node in honest:
                    hits.append((i, j, node))
    return hits


def forge_ba_state(truth: LedgerState, byzantine: Sequence[NodeId], kind: str) -> LedgerState:
    """A Byzantine claim derived from ``truth``.

    ``stale`` drops the last append, ``replace_last`` swaps it for a record
    signed by the Byzantine members only, ``extend`` adds such a record on top.
    """
    signers = tuple(sorted(set(byzantine)))
    fake = hashlib.sha256(b"forged|" + kind.encode() + truth.canonical).digest()
    record = AppendRecord(fake, BaEvidence(signers))
    if kind == "stale":
        return truncate(truth, 1)
    if kind == "replace_last":
        return truncate(truth, 1).append(record)
    if kind == "extend":
        return truth.append(record)
    raise ValueError(f"unknown forgery kind {kind!r}")


FORGERY_KINDS = ("stale", "replace_last", "extend")


def fabricate_ba_bag(
    truth: LedgerState,
    committee: Sequence[NodeId],
    byzantine: Iterable[NodeId],
    forgery: LedgerState | Mapping[NodeId, LedgerState],
    observers: Iterable[NodeId] = (),
) -> LocalStateBag:
    """Honest committee members (and observers) claim ``truth``; Byzantine ones claim a forgery.

    ``forgery`` is either one state shared by all Byzantine members or a
    per-member mapping.
    """
    byzantine = set(byzantine)
    if not byzantine <= set(committee):
        raise ValueError("Byzantine nodes must belong to the committee")
    if isinstance(forgery, LedgerState):
        claims = {node: forgery for node in byzantine}
    else:
        claims = dict(forgery)
        if set(claims) != byzantine:
            raise ValueError("forgery mapping must cover exactly the Byzantine members")
    honest = [node for node in committee if node not in byzantine]
    honest.extend(node for node in observers if node not in committee)
    hits = scan_forged_signatures(claims.values(), honest, truth.records)
    if hits:
        _, j, node = hits[0]
        raise SignatureForgery(f"forged record {j} carries honest signer {node}")
    entries = [(node, truth) for node in honest]
    entries.extend(claims.items())
    return LocalStateBag(tuple(entries))


# -- private PoW mining -----------------------------------------------------


ADVERSARY_MINER = NodeId.from_label("adversary")
HONEST_MINER = NodeId.from_label("honest")


def ground_record(rival: AppendRecord, producer: NodeId, time: int) -> AppendRecord:
    """A fork block whose payload digest sorts strictly below ``rival``'s.

    The adversary picks its own payload, so it can grind a nonce until its
    block wins the smallest-bytes tie-break against the honest block at the
    same height.  Deterministic: nonces are tried in order from zero.
    """
    for nonce in itertools.count():
        e = EventBatch(time, b"fork|%d|%d" % (time, nonce))
        if event_digest(e) < rival.payload_digest:
            return pow_record(e, producer)
    raise AssertionError("unreachable")


def fork_event(time: int) -> EventBatch:
    return EventBatch(time, b"fork|%d" % time)


@dataclass
class Race:
    """Outcome of one block race between honest miners and a private fork."""

    honest: LedgerState
    fork: LedgerState
    caught_up_at: int | None
    honest_blocks: int
    adversary_blocks: int
    producers: list[NodeId] = field(default_factory=list)

    @property
    def caught_up(self) -> bool:
        return self.caught_up_at is not None


class MinerDraw:
    """Vectorised producer sampling over a fixed roster of miners."""

    def __init__(self, miners: Sequence[NodeProfile]):
        miners = [m for m in miners if m.power > 0.0]
        if not miners:
            raise InvalidShare("no miner with positive power")
        total = sum(m.power for m in miners)
        if abs(total - 1.0) > 1e-9:
            raise InvalidShare(f"miner powers sum to {total}, expected 1")
        self.ids = [m.id for m in miners]
        self.adversarial = np.array([not m.honest for m in miners])
        self.cum = np.cumsum([m.power for m in miners])
        self.cum[-1] = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.searchsorted(self.cum, rng.random(n), side="right")


def two_miner_roster(q_share: float) -> list[NodeProfile]:
    if not 0.0 < q_share < 1.0:
        raise InvalidShare(f"adversary share must lie in (0, 1), got {q_share}")
    return [
        NodeProfile(HONEST_MINER, honest=True, power=1.0 - q_share),
        NodeProfile(ADVERSARY_MINER, honest=False, power=q_share),
    ]


def mining_race(
    anchor: LedgerState,
    fork_depth: int,
    miners: Sequence[NodeProfile],
    horizon: int,
    rng: np.random.Generator,
    *,
    head_start: int = 0,
    start_time: int | None = None,
) -> Race:
    """Race a private fork rooted ``fork_depth`` blocks below ``anchor``'s tip.

    The fork starts with ``head_start`` withheld adversary blocks.  Each of
    the next ``horizon`` blocks goes to a miner drawn by power share: honest
    miners extend the honest chain, adversarial ones the fork.  The race ends
    as soon as the fork's cumulative work reaches the honest chain's; the
    adversary wins that tie because its first fork block was ground to sort
    first.
    """
    if fork_depth < 0 or anchor.height < fork_depth:
        raise ValueError(f"anchor of height {anchor.height} cannot fork {fork_depth} deep")
    draw = MinerDraw(miners)
    adversaries = [i for i, bad in enumerate(draw.adversarial) if bad]
    if head_start and not adversaries:
        raise ValueError("head start requires an adversarial miner")
    time = anchor.height if start_time is None else start_time
    base = truncate(anchor, fork_depth)
    honest_tail: list[AppendRecord] = []
    fork_tail: list[AppendRecord] = []
    rival = anchor.records[base.height] if fork_depth else None

    def fork_block(producer: NodeId, t: int) -> AppendRecord:
        if not fork_tail and rival is not None:
            return ground_record(rival, producer, t)
        return pow_record(fork_event(t), producer)

    producers: list[NodeId] = []
    for i in range(head_start):
        producer = draw.ids[adversaries[0]]
        fork_tail.append(fork_block(producer, base.height + i + 1))
    honest_work = pow_total(anchor)
    fork_work = pow_total(base) + len(fork_tail)
    caught = 0 if fork_work >= honest_work else None
    honest_blocks = adversary_blocks = 0
    if caught is None and horizon > 0:
        picks = draw.draw(rng, horizon)
        for step, idx in enumerate(picks, start=1):
            t = time + step
            producer = draw.ids[idx]
            producers.append(producer)
            if draw.adversarial[idx]:
                fork_tail.append(fork_block(producer, t))
                fork_work += 1
                adversary_blocks += 1
            else:
                honest_tail.append(pow_record(EventBatch(t, b"batch-%d" % t), producer))
                honest_work += 1
                honest_blocks += 1
            if fork_work >= honest_work:
                caught = step
                break
    honest = LedgerState(anchor.genesis, anchor.records + tuple(honest_tail))
    fork = LedgerState(anchor.genesis, base.records + tuple(fork_tail))
    return Race(honest, fork, caught, honest_blocks, adversary_blocks, producers)


def private_mine(
    anchor: LedgerState,
    fork_depth: int,
    q_share: float,
    horizon: int,
    rng: np.random.Generator,
    *,
    head_start: int = 0,
) -> LedgerState | None:
    """The adversary's chain if it catches up with the honest chain within ``horizon`` blocks."""
    race = mining_race(anchor, fork_depth, two_miner_roster(q_share), horizon, rng,
                       head_start=head_start)
    return race.fork if race.caught_up else None


# -- PoS long-range mirror --------------------------------------------------


@dataclass(frozen=True)
class MirrorMap:
    """Bijection from roster ids to adversary-controlled ids."""

    pairs: tuple[tuple[NodeId, NodeId], ...]

    def __post_init__(self):
        pairs = self.pairs
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        pairs = tuple(sorted(pairs))
        domain = [a for a, _ in pairs]
        image = [b for _, b in pairs]
        if len(set(domain)) != len(domain) or len(set(image)) != len(image):
            raise ValueError("mirror map is not a bijection")
        object.__setattr__(self, "pairs", pairs)

    def as_dict(self) -> dict[NodeId, NodeId]:
        return dict(self.pairs)

    def __call__(self, node: NodeId) -> NodeId:
        for a, b in self.pairs:
            if a == node:
                return b
        raise KeyError(f"{node} is outside the mirror map's domain")

    def inverse(self) -> "MirrorMap":
        return MirrorMap(tuple((b, a) for a, b in self.pairs))

    def moved(self) -> dict[NodeId, NodeId]:
        return {a: b for a, b in self.pairs if a != b}

    def fixed_points(self) -> set[NodeId]:
        return {a for a, b in self.pairs if a == b}


def mirror_network(roster: Sequence[NodeProfile], adversary_pool: Sequence[NodeId]) -> MirrorMap:
    """Send each honest id (sorted) to the next pool id; malicious ids stay put."""
    roster_ids = {p.id for p in roster}
    if len(roster_ids) != len(roster):
        raise ValueError("roster ids are not unique")
    if roster_ids & set(adversary_pool):
        raise ValueError("adversary pool overlaps the roster")
    honest = sorted(p.id for p in roster if p.honest)
    if len(adversary_pool) < len(honest):
        raise PoolExhausted(f"{len(honest)} honest ids but only {len(adversary_pool)} pool ids")
    pairs = list(zip(honest, adversary_pool))
    pairs.extend((p.id, p.id) for p in roster if not p.honest)
    return MirrorMap(tuple(pairs))


def _relabeler(mapping: MirrorMap | Mapping[NodeId, NodeId]):
    table = mapping.as_dict() if isinstance(mapping, MirrorMap) else dict(mapping)
    return lambda node: table.get(node, node)


def relabel_transfers(transfers: Iterable[Transfer], mapping) -> tuple[Transfer, ...]:
    m = _relabeler(mapping)
    return tuple(Transfer(m(t.src), m(t.dst), t.amount) for t in transfers)


def relabel_event(e: EventBatch, mapping) -> EventBatch:
    return EventBatch(e.time, e.payload, relabel_transfers(e.transfers, mapping))


def relabel_state(s: LedgerState, mapping) -> LedgerState:
    """Rename every node id inside ``s``; ids outside the map are kept."""
    m = _relabeler(mapping)
    g = s.genesis
    genesis = GenesisDescriptor(
        g.tag,
        None if g.ba_committee is None else tuple(m(n) for n in g.ba_committee),
        None if g.initial_stake is None else tuple((m(n), a) for n, a in g.initial_stake),
    )
    records = []
    for r in s.records:
        ev = r.evidence
        if isinstance(ev, BaEvidence):
            ev = BaEvidence(tuple(m(n) for n in ev.signers))
        elif isinstance(ev, PowEvidence):
            ev = PowEvidence(ev.work, m(ev.producer))
        else:
            ev = PosEvidence(
                tuple((m(n), st) for n, st in ev.signers),
                relabel_transfers(ev.transfers, mapping),
            )
        records.append(AppendRecord(r.payload_digest, ev))
    return LedgerState(genesis, tuple(records))


@dataclass(frozen=True)
class AttackTrace:
    honest_states: tuple[LedgerState, ...]
    adversary_states: tuple[LedgerState, ...]
    merged_bags: tuple[LocalStateBag, ...]
    mirror: MirrorMap


def run_pos(
    genesis: GenesisDescriptor,
    events: Sequence[EventBatch],
    t: int,
    coalitions: Sequence[Iterable[NodeId]] | None = None,
) -> list[LedgerState]:
    """States S_0..S_t of a PoS execution; by default every token holder signs."""
    state = genesis_state(genesis)
    stake = StakeLedger.from_genesis(state)
    states = [state]
    for step in range(t):
        e = events[step]
        coalition = stake.holders() if coalitions is None else coalitions[step]
        state = step_pos(state, stake, coalition, e)
        stake = stake.apply(e.transfers)
        states.append(state)
    return states


def long_range_attack(
    genesis: GenesisDescriptor,
    events: Sequence[EventBatch],
    roster: Sequence[NodeProfile],
    mirror: MirrorMap,
    t: int,
    coalitions: Sequence[Iterable[NodeId]] | None = None,
) -> AttackTrace:
    """Run the honest execution and its mirrored twin on the same events.

    Genesis stakeholders must be fixed points of ``mirror``: they are the
    keys the adversary holds, and both worlds share the genesis descriptor.
    The bag at each step holds the online honest nodes claiming the honest
    state and their mirror images claiming the mirrored state.  Malicious
    roster nodes stay silent so that the bag is the same in both worlds.
    """
    if genesis.initial_stake is None:
        raise ValueError("long-range attack needs a PoS genesis")
    if len(events) < t:
        raise ValueError(f"{len(events)} event batches cannot drive {t} steps")
    moved = mirror.moved()
    for node, _ in genesis.initial_stake:
        if node in moved:
            raise ValueError(f"genesis stakeholder {node} is not adversary-owned")
    honest_states = run_pos(genesis, events, t, coalitions)
    mirror_events = [relabel_event(e, mirror) for e in events[:t]]
    m = _relabeler(mirror)
    mirror_coalitions = (
        None if coalitions is None else [[m(n) for n in c] for c in coalitions[:t]]
    )
    adversary_states = run_pos(genesis, mirror_events, t, mirror_coalitions)
    bags = []
    for step in range(t + 1):
        entries = []
        for p in roster:
            if p.honest and p.is_online(step):
                entries.append((p.id, honest_states[step]))
                entries.append((m(p.id), adversary_states[step]))
        bags.append(LocalStateBag(tuple(entries)))
    return AttackTrace(tuple(honest_states), tuple(adversary_states), tuple(bags), mirror)


def swapped_worlds(
    genesis: GenesisDescriptor,
    events: Sequence[EventBatch],
    roster: Sequence[NodeProfile],
    adversary_pool: Sequence[NodeId],
    t: int,
    coalitions: Sequence[Iterable[NodeId]] | None = None,
) -> tuple[AttackTrace, AttackTrace]:
    """Trace A runs on the real roster; trace B is the same construction seen from the mirror.

    In B the honest nodes carry the pool ids and the adversary mirrors them
    back onto the original ids, so both traces expose the same bag.
    """
    mirror = mirror_network(roster, adversary_pool)
    trace_a = long_range_attack(genesis, events, roster, mirror, t, coalitions)
    m = _relabeler(mirror)
    roster_b = [NodeProfile(m(p.id), p.honest, p.power, p.online) for p in roster]
    events_b = [relabel_event(e, mirror) for e in events[:t]]
    coalitions_b = None if coalitions is None else [[m(n) for n in c] for c in coalitions[:t]]
    trace_b = long_range_attack(genesis, events_b, roster_b, mirror.inverse(), t, coalitions_b)
    return trace_a, trace_b
