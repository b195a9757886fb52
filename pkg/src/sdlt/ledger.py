"""Ledger states, appends, prefix order, truncation and canonical encoding.

Every type here is an immutable value.  A :class:`LedgerState` is a genesis
descriptor followed by the ordered sequence of appends performed since it;
:func:`canonical_bytes` gives the byte-exact identity used whenever two states
(or two local-state bags) must be compared.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Union

from .errors import DecodeError, GenesisMismatch

NODE_ID_WIDTH = 16
DIGEST_WIDTH = 32

MAGIC = b"SDLT\x01"

KIND_BA = 1
KIND_POW = 2
KIND_POS = 3

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


@dataclass(frozen=True, order=True)
class NodeId:
    """Opaque 16-byte node address."""

    address: bytes

    def __post_init__(self):
        if not isinstance(self.address, bytes) or len(self.address) != NODE_ID_WIDTH:
            raise ValueError(f"NodeId needs exactly {NODE_ID_WIDTH} bytes, got {self.address!r}")

    @classmethod
    def from_label(cls, label: str) -> "NodeId":
        """Build an id from a short label (NUL padded) or a 32-char hex string."""
        if len(label) == 2 * NODE_ID_WIDTH:
            try:
                return cls(bytes.fromhex(label))
            except ValueError:
                pass
        raw = label.encode("utf-8")
        if not raw or len(raw) > NODE_ID_WIDTH or b"\x00" in raw:
            raise ValueError(f"label {label!r} does not fit a {NODE_ID_WIDTH}-byte id")
        return cls(raw.ljust(NODE_ID_WIDTH, b"\x00"))

    @property
    def label(self) -> str:
        raw = self.address.rstrip(b"\x00")
        if raw and b"\x00" not in raw:
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError:
                text = ""
            if text.isprintable() and len(text) != 2 * NODE_ID_WIDTH:
                return text
        return self.address.hex()

    def __str__(self):
        return self.label

    def __repr__(self):
        return f"NodeId({self.label!r})"


@dataclass(frozen=True)
class Transfer:
    src: NodeId
    dst: NodeId
    amount: int

    def __post_init__(self):
        if self.amount <= 0:
            raise ValueError(f"transfer amount must be positive, got {self.amount}")


def _sorted_unique(ids: Iterable[NodeId], what: str) -> tuple[NodeId, ...]:
    out = tuple(sorted(ids))
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate node id in {what}")
    return out


@dataclass(frozen=True)
class GenesisDescriptor:
    """The initial state I: an opaque tag plus optional BA committee / PoS stake."""

    tag: bytes = b""
    ba_committee: tuple[NodeId, ...] | None = None
    initial_stake: tuple[tuple[NodeId, int], ...] | None = None

    def __post_init__(self):
        if self.ba_committee is not None:
            committee = tuple(self.ba_committee)
            if not committee:
                raise ValueError("BA committee must be non-empty")
            if len(set(committee)) != len(committee):
                raise ValueError("BA committee contains duplicates")
            object.__setattr__(self, "ba_committee", committee)
        if self.initial_stake is not None:
            items = self.initial_stake
            if isinstance(items, Mapping):
                items = items.items()
            stake = tuple(sorted((node, int(amount)) for node, amount in items))
            if len({node for node, _ in stake}) != len(stake):
                raise ValueError("initial stake lists a node twice")
            if any(amount < 0 for _, amount in stake):
                raise ValueError("initial stake must be non-negative")
            if sum(amount for _, amount in stake) <= 0:
                raise ValueError("total initial stake must be positive")
            object.__setattr__(self, "initial_stake", stake)

    def stake_map(self) -> dict[NodeId, int]:
        return dict(self.initial_stake or ())

    @cached_property
    def committee_set(self) -> frozenset[NodeId]:
        return frozenset(self.ba_committee or ())


@dataclass(frozen=True)
class BaEvidence:
    signers: tuple[NodeId, ...]

    def __post_init__(self):
        object.__setattr__(self, "signers", _sorted_unique(self.signers, "BA signers"))


@dataclass(frozen=True)
class PowEvidence:
    work: int
    producer: NodeId

    def __post_init__(self):
        if self.work < 1:
            raise ValueError(f"work must be >= 1, got {self.work}")


@dataclass(frozen=True)
class PosEvidence:
    """Coalition signatures with each signer's stake, plus the transfers applied."""

    signers: tuple[tuple[NodeId, int], ...]
    transfers: tuple[Transfer, ...] = ()

    def __post_init__(self):
        signers = tuple(sorted((node, int(stake)) for node, stake in self.signers))
        if len({node for node, _ in signers}) != len(signers):
            raise ValueError("duplicate node id in PoS signers")
        object.__setattr__(self, "signers", signers)
        object.__setattr__(self, "transfers", tuple(self.transfers))


Evidence = Union[BaEvidence, PowEvidence, PosEvidence]


@dataclass(frozen=True)
class AppendRecord:
    payload_digest: bytes
    evidence: Evidence

    def __post_init__(self):
        if len(self.payload_digest) != DIGEST_WIDTH:
            raise ValueError(f"payload digest must be {DIGEST_WIDTH} bytes")
        if not isinstance(self.evidence, (BaEvidence, PowEvidence, PosEvidence)):
            raise TypeError(f"unknown evidence type {type(self.evidence).__name__}")


@dataclass(frozen=True)
class LedgerState:
    genesis: GenesisDescriptor
    records: tuple[AppendRecord, ...] = ()

    def __post_init__(self):
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))

    @property
    def height(self) -> int:
        return len(self.records)

    def append(self, record: AppendRecord) -> "LedgerState":
        return LedgerState(self.genesis, self.records + (record,))

    @cached_property
    def canonical(self) -> bytes:
        return _encode_state(self)

    def __repr__(self):
        return f"LedgerState(height={self.height}, digest={self.canonical.hex()[-12:]})"


def genesis_state(genesis: GenesisDescriptor) -> LedgerState:
    return LedgerState(genesis, ())


def is_prefix(a: LedgerState, b: LedgerState) -> bool:
    """True iff ``a``'s records are an initial segment of ``b``'s."""
    if a.genesis != b.genesis:
        raise GenesisMismatch("prefix comparison across different genesis descriptors")
    n = len(a.records)
    if n > len(b.records):
        return False
    return a.records == b.records[:n]


def truncate(s: LedgerState, k: int) -> LedgerState:
    """Drop the last ``k`` appends; saturates at the genesis-only state."""
    if k < 0:
        raise ValueError("truncation depth must be non-negative")
    if k == 0:
        return s
    keep = max(len(s.records) - k, 0)
    return LedgerState(s.genesis, s.records[:keep])


# -- canonical encoding -----------------------------------------------------


def _blob(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


def _encode_genesis(g: GenesisDescriptor) -> bytes:
    parts = [_blob(g.tag)]
    if g.ba_committee is None:
        parts.append(_U8.pack(0))
    else:
        parts.append(_U8.pack(1) + _U32.pack(len(g.ba_committee)))
        parts.extend(node.address for node in g.ba_committee)
    if g.initial_stake is None:
        parts.append(_U8.pack(0))
    else:
        parts.append(_U8.pack(1) + _U32.pack(len(g.initial_stake)))
        parts.extend(node.address + _U64.pack(amount) for node, amount in g.initial_stake)
    return b"".join(parts)


def encode_record(r: AppendRecord) -> bytes:
    ev = r.evidence
    if isinstance(ev, BaEvidence):
        body = _U32.pack(len(ev.signers)) + b"".join(n.address for n in ev.signers)
        return _U8.pack(KIND_BA) + r.payload_digest + body
    if isinstance(ev, PowEvidence):
        return _U8.pack(KIND_POW) + r.payload_digest + _U64.pack(ev.work) + ev.producer.address
    signers = b"".join(n.address + _U64.pack(s) for n, s in ev.signers)
    transfers = b"".join(
        t.src.address + t.dst.address + _U64.pack(t.amount) for t in ev.transfers
    )
    return (
        _U8.pack(KIND_POS)
        + r.payload_digest
        + _U32.pack(len(ev.signers))
        + signers
        + _U32.pack(len(ev.transfers))
        + transfers
    )


def _encode_state(s: LedgerState) -> bytes:
    parts = [MAGIC, _encode_genesis(s.genesis), _U32.pack(len(s.records))]
    parts.extend(encode_record(r) for r in s.records)
    return b"".join(parts)


def canonical_bytes(s: LedgerState) -> bytes:
    """Deterministic, injective binary encoding (also the on-disk snapshot format)."""
    return s.canonical


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError(f"truncated input at offset {self.pos}")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def node(self) -> NodeId:
        return NodeId(self.take(NODE_ID_WIDTH))


def decode_state(data: bytes) -> LedgerState:
    """Inverse of :func:`canonical_bytes`."""
    rd = _Reader(data)
    if rd.take(len(MAGIC)) != MAGIC:
        raise DecodeError("bad magic")
    tag = rd.take(rd.u32())
    committee = None
    if rd.u8():
        committee = tuple(rd.node() for _ in range(rd.u32()))
    stake = None
    if rd.u8():
        stake = tuple((rd.node(), rd.u64()) for _ in range(rd.u32()))
    genesis = GenesisDescriptor(tag, committee, stake)
    records = []
    for _ in range(rd.u32()):
        kind = rd.u8()
        digest = rd.take(DIGEST_WIDTH)
        if kind == KIND_BA:
            ev = BaEvidence(tuple(rd.node() for _ in range(rd.u32())))
        elif kind == KIND_POW:
            work = rd.u64()
            ev = PowEvidence(work, rd.node())
        elif kind == KIND_POS:
            signers = tuple((rd.node(), rd.u64()) for _ in range(rd.u32()))
            transfers = tuple(
                Transfer(rd.node(), rd.node(), rd.u64()) for _ in range(rd.u32())
            )
            ev = PosEvidence(signers, transfers)
        else:
            raise DecodeError(f"unknown record kind {kind}")
        records.append(AppendRecord(digest, ev))
    if rd.pos != len(data):
        raise DecodeError("trailing bytes after state")
    return LedgerState(genesis, tuple(records))


# -- local-state bags -------------------------------------------------------


@dataclass(frozen=True)
class LocalStateBag:
    """The (node, claimed state) pairs a joining node observes.

    At most one entry per node; when a node is listed twice its last claim
    wins.  Entries are kept sorted by node id so iteration order never depends
    on construction order.
    """

    entries: tuple[tuple[NodeId, LedgerState], ...] = field(default=())

    def __post_init__(self):
        claims: dict[NodeId, LedgerState] = {}
        for node, state in self.entries:
            claims[node] = state
        entries = tuple(sorted(claims.items(), key=lambda kv: kv[0].address))
        genesis = {state.genesis for _, state in entries}
        if len(genesis) > 1:
            raise GenesisMismatch("bag entries disagree on the genesis descriptor")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def _trusted(cls, entries: tuple[tuple[NodeId, LedgerState], ...]) -> "LocalStateBag":
        # entries already sorted, unique and genesis-consistent (subsets of a valid bag)
        bag = object.__new__(cls)
        object.__setattr__(bag, "entries", entries)
        return bag

    @property
    def genesis(self) -> GenesisDescriptor | None:
        return self.entries[0][1].genesis if self.entries else None

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[NodeId, LedgerState]]:
        return iter(self.entries)

    def claims(self) -> dict[NodeId, LedgerState]:
        return dict(self.entries)

    def key(self) -> frozenset[tuple[bytes, bytes]]:
        return frozenset((node.address, state.canonical) for node, state in self.entries)

    def merged(self, other: "LocalStateBag") -> "LocalStateBag":
        return LocalStateBag(self.entries + other.entries)


def bag_equal(x: LocalStateBag, y: LocalStateBag) -> bool:
    return x.key() == y.key()


# -- JSON mirror ------------------------------------------------------------


def genesis_to_json(g: GenesisDescriptor) -> dict:
    return {
        "tag": g.tag.hex(),
        "ba_committee": None if g.ba_committee is None else [str(n) for n in g.ba_committee],
        "initial_stake": (
            None if g.initial_stake is None else [[str(n), a] for n, a in g.initial_stake]
        ),
    }


def record_to_json(r: AppendRecord) -> dict:
    ev = r.evidence
    if isinstance(ev, BaEvidence):
        body = {"kind": "BA", "signers": [str(n) for n in ev.signers]}
    elif isinstance(ev, PowEvidence):
        body = {"kind": "PoW", "work": ev.work, "producer": str(ev.producer)}
    else:
        body = {
            "kind": "PoS",
            "signers": [[str(n), s] for n, s in ev.signers],
            "transfers": [[str(t.src), str(t.dst), t.amount] for t in ev.transfers],
        }
    return {"payload_digest": r.payload_digest.hex(), "evidence": body}


def state_to_json(s: LedgerState, *, with_genesis: bool = True) -> dict:
    out = {}
    if with_genesis:
        out["genesis"] = genesis_to_json(s.genesis)
    out["height"] = s.height
    out["digest"] = state_digest(s)
    out["records"] = [record_to_json(r) for r in s.records]
    return out


def bag_to_json(bag: LocalStateBag) -> list:
    return [{"node": str(n), "state": state_digest(s), "height": s.height} for n, s in bag]


def state_digest(s: LedgerState) -> str:
    """Hex SHA-256 of the canonical encoding; a compact name for a state in reports."""
    return hashlib.sha256(s.canonical).hexdigest()
