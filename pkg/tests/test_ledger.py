import pytest

from sdlt.errors import DecodeError, GenesisMismatch
from sdlt.ledger import (
    MAGIC,
    AppendRecord,
    BaEvidence,
    GenesisDescriptor,
    LocalStateBag,
    NodeId,
    PowEvidence,
    Transfer,
    bag_equal,
    canonical_bytes,
    decode_state,
    genesis_state,
    is_prefix,
    truncate,
)

N = NodeId.from_label
G = GenesisDescriptor(b"t", (N("A"), N("B"), N("C")))


def chain(n, g=G):
    s = genesis_state(g)
    for i in range(n):
        s = s.append(AppendRecord(bytes([i]) * 32, BaEvidence((N("A"), N("B")))))
    return s


class TestNodeId:
    def test_label_round_trip(self):
        assert N("alice").label == "alice"
        assert str(N("alice")) == "alice"

    def test_hex_form(self):
        raw = bytes(range(16))
        assert NodeId.from_label(raw.hex()).address == raw

    def test_rejects_long_labels(self):
        with pytest.raises(ValueError):
            N("x" * 17)

    def test_ordering_is_bytewise(self):
        assert N("A") < N("B") < N("a")


class TestValueTypes:
    def test_transfer_amount_positive(self):
        with pytest.raises(ValueError):
            Transfer(N("A"), N("B"), 0)

    def test_record_digest_length(self):
        with pytest.raises(ValueError):
            AppendRecord(b"short", PowEvidence(1, N("A")))

    def test_ba_signers_sorted_unique(self):
        assert BaEvidence((N("B"), N("A"))).signers == (N("A"), N("B"))
        with pytest.raises(ValueError):
            BaEvidence((N("A"), N("A")))

    def test_genesis_stake_map_sorted(self):
        g = GenesisDescriptor(b"", None, {N("B"): 2, N("A"): 1})
        assert g.initial_stake == ((N("A"), 1), (N("B"), 2))
        assert g.stake_map() == {N("A"): 1, N("B"): 2}


class TestPrefix:
    def test_genesis_is_prefix_of_everything(self):
        assert is_prefix(genesis_state(G), chain(5))

    def test_longer_is_not_prefix_of_shorter(self):
        assert not is_prefix(chain(3), chain(2))

    def test_divergent_chains(self):
        a = chain(2).append(AppendRecord(b"\xaa" * 32, BaEvidence((N("A"),))))
        b = chain(2).append(AppendRecord(b"\xbb" * 32, BaEvidence((N("A"),))))
        assert not is_prefix(a, b) and not is_prefix(b, a)

    def test_genesis_mismatch_raises(self):
        other = GenesisDescriptor(b"u", (N("A"), N("B"), N("C")))
        with pytest.raises(GenesisMismatch):
            is_prefix(chain(1), chain(1, other))


class TestTruncate:
    def test_basic(self):
        assert truncate(chain(5), 2) == chain(3)

    def test_saturates_at_genesis(self):
        assert truncate(chain(2), 9) == genesis_state(G)

    def test_zero_is_identity(self):
        assert truncate(chain(4), 0) == chain(4)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            truncate(chain(1), -1)


class TestEncoding:
    def test_magic_prefix(self):
        assert canonical_bytes(chain(1)).startswith(MAGIC)

    def test_golden_genesis_bytes(self):
        g = GenesisDescriptor(b"x", None, None)
        assert canonical_bytes(genesis_state(g)).hex() == "53444c5401" + "00000001" + "78" + "00" + "00" + "00000000"

    @pytest.mark.parametrize("cut", [0, 4, 9, -1])
    def test_truncated_input_rejected(self, cut):
        data = canonical_bytes(chain(2))
        with pytest.raises(DecodeError):
            decode_state(data[:cut])

    def test_trailing_bytes_rejected(self):
        with pytest.raises(DecodeError):
            decode_state(canonical_bytes(chain(1)) + b"\x00")

    def test_bad_magic(self):
        with pytest.raises(DecodeError):
            decode_state(b"XXXX\x01" + canonical_bytes(chain(1))[5:])


class TestBag:
    def test_last_claim_per_node_wins(self):
        bag = LocalStateBag(((N("A"), chain(1)), (N("A"), chain(2))))
        assert len(bag) == 1
        assert bag.claims()[N("A")] == chain(2)

    def test_order_irrelevant(self):
        x = LocalStateBag(((N("A"), chain(1)), (N("B"), chain(2))))
        y = LocalStateBag(((N("B"), chain(2)), (N("A"), chain(1))))
        assert bag_equal(x, y)

    def test_mixed_genesis_rejected(self):
        other = GenesisDescriptor(b"u")
        with pytest.raises(GenesisMismatch):
            LocalStateBag(((N("A"), chain(1)), (N("B"), genesis_state(other))))

    def test_empty_bag_has_no_genesis(self):
        assert LocalStateBag(()).genesis is None
