"""Discrete-time simulator for ledger statelessness under BA, PoW and PoS consensus."""

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
    bag_equal,
    canonical_bytes,
    decode_state,
    genesis_state,
    is_prefix,
    truncate,
)
from .resolvers import BOTTOM, resolve_ba, resolve_pow

__version__ = "0.1.0"

__all__ = [
    "BOTTOM",
    "AppendRecord",
    "BaEvidence",
    "GenesisDescriptor",
    "LedgerState",
    "LocalStateBag",
    "NodeId",
    "PosEvidence",
    "PowEvidence",
    "Transfer",
    "bag_equal",
    "canonical_bytes",
    "decode_state",
    "genesis_state",
    "is_prefix",
    "resolve_ba",
    "resolve_pow",
    "truncate",
]
