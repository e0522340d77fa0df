"""Hash-indexed message digest used for anti-entropy exchange.

A node's :class:`Digest` holds every packet it currently remembers together with
the time it was first seen, plus a bit array with one bit per hash slot. The
timestamp-free :class:`CompactDigest` is what goes on the air.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .crypto import PACKET_SIZE, message_id

TABLE_SIZE = 4096
TIME_TO_KEEP_MS = 300_000


class DigestSizeMismatch(ValueError):
    """Two digests with different table sizes; peers run incompatible versions."""


def slot(mid: bytes, table_size: int = TABLE_SIZE) -> int:
    """First 16 bits of the message id, big-endian, reduced mod ``table_size``."""
    return int.from_bytes(mid[:2], "big") % table_size


@dataclass
class CompactDigest:
    bits: np.ndarray

    @property
    def table_size(self) -> int:
        return len(self.bits)

    def to_bytes(self) -> bytes:
        n = self.table_size // 8
        return n.to_bytes(2, "big") + np.packbits(self.bits, bitorder="big").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompactDigest":
        if len(data) < 2:
            raise ValueError("truncated digest")
        n = int.from_bytes(data[:2], "big")
        if n == 0 or len(data) != 2 + n:
            raise ValueError("digest length field does not match payload")
        raw = np.frombuffer(data, dtype=np.uint8, offset=2)
        return cls(np.unpackbits(raw, bitorder="big").astype(bool))

    def wire_size(self) -> int:
        return 2 + self.table_size // 8


class Digest:
    """Mutable per-node store: packets by id, first-seen times, slot bits."""

    def __init__(self, table_size: int = TABLE_SIZE):
        if table_size <= 0 or table_size % 8:
            raise ValueError("table size must be a positive multiple of 8")
        self.table_size = table_size
        self.bits = np.zeros(table_size, dtype=bool)
        self.entries: Dict[bytes, tuple] = {}
        self._by_slot: Dict[int, Dict[bytes, None]] = {}
        # ids dropped by expiry, remembered for one more retention period
        self.expired: Dict[bytes, int] = {}
        # entries are kept in first-seen order while adds arrive in time order
        self._ordered = True
        self._latest = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, mid: bytes) -> bool:
        return mid in self.entries

    def contains(self, mid: bytes) -> bool:
        return mid in self.entries

    def was_expired(self, mid: bytes) -> bool:
        return mid in self.expired

    def add(self, pkt: bytes, now: int, mid: Optional[bytes] = None) -> bool:
        """Store ``pkt`` seen at ``now`` ms. Returns False if it was already held."""
        if len(pkt) != PACKET_SIZE:
            raise ValueError(f"packet must be {PACKET_SIZE} bytes")
        if mid is None:
            mid = message_id(pkt)
        if mid in self.entries:
            return False
        i = slot(mid, self.table_size)
        if self._latest is not None and now < self._latest:
            self._ordered = False
        self._latest = now if self._latest is None else max(self._latest, now)
        self.entries[mid] = (bytes(pkt), now)
        self._by_slot.setdefault(i, {})[mid] = None
        self.bits[i] = True
        return True

    def first_seen(self, mid: bytes) -> Optional[int]:
        entry = self.entries.get(mid)
        return None if entry is None else entry[1]

    def compact(self) -> CompactDigest:
        return CompactDigest(self.bits.copy())

    def lookup_by_index(self, i: int) -> List[bytes]:
        """All held packets hashing to slot ``i``; [] for empty or invalid slots."""
        if not isinstance(i, (int, np.integer)) or not 0 <= i < self.table_size:
            return []
        ids = self._by_slot.get(int(i), ())
        return [self.entries[mid][0] for mid in ids]

    def items_by_index(self, i: int) -> List[tuple]:
        """``(message_id, packet)`` pairs held in slot ``i``."""
        if not isinstance(i, (int, np.integer)) or not 0 <= i < self.table_size:
            return []
        return [(mid, self.entries[mid][0]) for mid in self._by_slot.get(int(i), ())]

    def expire_before(self, now: int, time_to_keep: int = TIME_TO_KEEP_MS) -> int:
        """Drop entries first seen before ``now - time_to_keep``; returns count removed."""
        cutoff = now - time_to_keep
        if self._ordered:
            stale = []
            for mid, (_, seen) in self.entries.items():
                if seen >= cutoff:
                    break
                stale.append(mid)
        else:
            stale = [mid for mid, (_, seen) in self.entries.items() if seen < cutoff]
        while self.expired:
            mid, when = next(iter(self.expired.items()))
            if when >= cutoff:
                break
            del self.expired[mid]
        for mid in stale:
            self.expired[mid] = now
            del self.entries[mid]
            i = slot(mid, self.table_size)
            held = self._by_slot[i]
            del held[mid]
            if not held:
                del self._by_slot[i]
                self.bits[i] = False
        return len(stale)

    def clear(self) -> None:
        self._ordered = True
        self._latest = None
        self.bits[:] = False
        self.expired.clear()
        self.entries.clear()
        self._by_slot.clear()


def diff(theirs: CompactDigest, mine) -> List[int]:
    """Ascending slot indices set in ``theirs`` but clear in ``mine``."""
    mine_bits = mine.bits
    if len(theirs.bits) != len(mine_bits):
        raise DigestSizeMismatch(
            f"table sizes differ: {len(theirs.bits)} vs {len(mine_bits)}")
    return np.flatnonzero(theirs.bits & ~mine_bits).tolist()
