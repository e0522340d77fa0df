"""Messaging-phase node: cover traffic, digest exchange, requests, responses.

One call to :meth:`Node.tick` runs the control loop once, in a fixed order:

1. send slot: one MESSAGE, real if anything is queued, dummy otherwise
2. digest share (smart mode)
3. diff incoming digests, broadcast one REQUEST for everything missing
4. answer the union of incoming requests with one RESPONSE
5. take in new packets (try to decrypt; simple mode forwards them)
6. expire old digest entries (expired ids are not stored again)

Envelopes returned from a tick are heard by neighbours on their next tick.
"""
from __future__ import annotations

import enum
import functools
import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import crypto
from .crypto import (
    GROUP_ID_SIZE,
    MAX_TEXT,
    PACKET_SIZE,
    PK_SIZE,
    GroupKey,
    KeyPair,
    message_id,
    pad,
    pk_fingerprint,
    unpad,
)
from .digest import TABLE_SIZE, TIME_TO_KEEP_MS, CompactDigest, Digest, diff, slot

TURN_WINDOW_MS = 60_000
TICK_MS = 100
DEFAULT_HOP_LIMIT = 2

# first byte of the framed text says what the plaintext carries
TEXT, INTRO, GROUP_SETUP = 0, 1, 2
FINGERPRINT_SIZE = 8
MAX_DELEGATED = (MAX_TEXT - 1 - crypto.SYM_KEY_SIZE - GROUP_ID_SIZE - 1) // FINGERPRINT_SIZE
MAX_USER_TEXT = MAX_TEXT - 1


class Kind(enum.IntEnum):
    MESSAGE = 0
    DIGEST = 1
    REQUEST = 2
    RESPONSE = 3


class BroadcastMode(str, enum.Enum):
    SIMPLE = "simple"
    SMART = "smart"


class UnknownRecipient(ValueError):
    pass


class NotAFriend(ValueError):
    pass


def short_id(mid: bytes) -> str:
    return mid[:8].hex()


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    payload: bytes
    comm_id: str
    size_bytes: int

    @functools.cached_property
    def packets(self) -> Optional[List[Tuple[bytes, bytes]]]:
        """``(message_id, packet)`` pairs carried by a MESSAGE/RESPONSE; None if malformed.

        Parsed once per transmission and shared by every receiver.
        """
        if self.kind is Kind.MESSAGE:
            pkts = [self.payload] if len(self.payload) == PACKET_SIZE else None
        elif self.kind is Kind.RESPONSE:
            pkts = parse_response(self.payload)
        else:
            return None
        if pkts is None:
            return None
        return [(message_id(p), bytes(p)) for p in pkts]

    def to_bytes(self) -> bytes:
        return bytes([int(self.kind)]) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        kind = Kind(data[0])
        payload = bytes(data[1:])
        if kind is Kind.MESSAGE:
            return message_envelope(payload)
        if kind is Kind.RESPONSE:
            pkts = parse_response(payload)
            if pkts is None:
                raise ValueError("malformed response")
            return response_envelope(pkts)
        return cls(kind, payload, _payload_id(kind, payload), len(payload))


def _payload_id(kind: Kind, payload: bytes) -> str:
    return hashlib.sha256(bytes([int(kind)]) + payload).hexdigest()[:16]


def message_envelope(pkt: bytes, mid: Optional[bytes] = None) -> Envelope:
    mid = mid or message_id(pkt)
    return Envelope(Kind.MESSAGE, pkt, short_id(mid), len(pkt))


def digest_envelope(cd: CompactDigest) -> Envelope:
    payload = cd.to_bytes()
    return Envelope(Kind.DIGEST, payload, _payload_id(Kind.DIGEST, payload), len(payload))


def request_envelope(indices: Sequence[int]) -> Envelope:
    payload = len(indices).to_bytes(2, "big") + b"".join(
        int(i).to_bytes(2, "big") for i in indices)
    return Envelope(Kind.REQUEST, payload, _payload_id(Kind.REQUEST, payload), len(payload))


def response_envelope(pkts: Sequence[bytes], mids: Optional[Sequence[bytes]] = None) -> Envelope:
    payload = len(pkts).to_bytes(2, "big") + b"".join(pkts)
    if mids is None:
        mids = [message_id(p) for p in pkts]
    comm_id = ",".join(short_id(m) for m in mids)
    return Envelope(Kind.RESPONSE, payload, comm_id, len(payload))


def parse_request(payload: bytes) -> Optional[List[int]]:
    if len(payload) < 2:
        return None
    n = int.from_bytes(payload[:2], "big")
    if len(payload) != 2 + 2 * n:
        return None
    return [int.from_bytes(payload[2 + 2 * k:4 + 2 * k], "big") for k in range(n)]


def parse_response(payload: bytes) -> Optional[List[bytes]]:
    if len(payload) < 2:
        return None
    n = int.from_bytes(payload[:2], "big")
    if len(payload) != 2 + PACKET_SIZE * n:
        return None
    return [payload[2 + PACKET_SIZE * k:2 + PACKET_SIZE * (k + 1)] for k in range(n)]


@dataclass
class NodeConfig:
    keys: KeyPair
    send_rate_ms: int = 30_000
    ds_share_interval_ms: int = 5_000
    time_to_keep_ms: int = TIME_TO_KEEP_MS
    turn_ms: int = 0
    broadcast_mode: BroadcastMode = BroadcastMode.SMART
    table_size: int = TABLE_SIZE
    # an index is not asked for again until a response could have come back
    request_holdoff_ms: int = 2 * TICK_MS

    def __post_init__(self):
        self.broadcast_mode = BroadcastMode(self.broadcast_mode)
        if not 0 <= self.turn_ms < TURN_WINDOW_MS:
            raise ValueError(f"turn must lie in [0, {TURN_WINDOW_MS}) ms")
        if self.send_rate_ms <= 0 or self.ds_share_interval_ms <= 0:
            raise ValueError("send rate and digest interval must be positive")


@dataclass
class Friend:
    may_introduce: bool = False
    hops: int = 0


@dataclass(frozen=True)
class Delivery:
    time_ms: int
    sender_pk: bytes
    text: bytes
    group_id: Optional[bytes] = None


@dataclass(frozen=True)
class SentRecord:
    time_ms: int
    recipient: bytes  # public key, or group id for group messages
    plaintext: bytes
    packet: bytes


@dataclass(frozen=True)
class Accepted:
    time_ms: int
    sender_pk: bytes
    plaintext: bytes
    packet: bytes
    group_id: Optional[bytes] = None


def frame(tag: int, body: bytes) -> bytes:
    return pad(bytes([tag]) + body)


def unframe(plaintext: bytes) -> Optional[Tuple[int, bytes]]:
    text = unpad(plaintext)
    if not text:
        return None
    return text[0], text[1:]


class Node:
    """State of one protocol participant."""

    def __init__(self, config: NodeConfig, seed=None, suite=crypto.DEFAULT_SUITE,
                 hop_limit: int = DEFAULT_HOP_LIMIT):
        self.config = config
        self.suite = suite
        self.hop_limit = hop_limit
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        crypto_ss, dummy_ss, misc_ss = ss.spawn(3)
        self._crypto_rng = np.random.default_rng(crypto_ss)
        self._dummy_rng = np.random.default_rng(dummy_ss)
        self._misc_rng = np.random.default_rng(misc_ss)
        # the dummy key's secret half is never kept
        self.dummy_pk = crypto.keygen(self._misc_rng.bytes(32)).pk
        self.ds = Digest(config.table_size)
        self.friends: Dict[bytes, Friend] = {}
        self.groups: Dict[bytes, GroupKey] = {}
        self.outgoing: deque = deque()
        self.pending_requests: set = set()
        self.requested: Dict[int, int] = {}
        self.forward_queue: deque = deque()
        self.forwarded: set = set()
        self.inbox: List[Delivery] = []
        self.sent: List[SentRecord] = []
        self.accepted: List[Accepted] = []
        self.messages_sent = 0
        self.ds_arrived = False
        self.message_arrived = False

    @property
    def pk(self) -> bytes:
        return self.config.keys.pk

    @property
    def turn(self) -> int:
        return self.config.turn_ms

    @property
    def has_send(self) -> bool:
        return bool(self.outgoing)

    # -- contacts -------------------------------------------------------

    def add_friend(self, pk: bytes, may_introduce: bool = False, hops: int = 0) -> None:
        if pk == self.pk:
            return
        current = self.friends.get(pk)
        if current is None or hops < current.hops:
            self.friends[pk] = Friend(may_introduce, hops)
        elif may_introduce:
            current.may_introduce = True

    def _friend_by_fingerprint(self, fp: bytes) -> Optional[bytes]:
        for pk in self.friends:
            if pk_fingerprint(pk) == fp:
                return pk
        return None

    # -- application side -----------------------------------------------

    def queue_send(self, recipient: bytes, text: bytes) -> None:
        """Queue user text for a friend (33-byte pk) or a joined group (8-byte id)."""
        if len(text) > MAX_USER_TEXT:
            raise crypto.PlaintextError(f"text longer than {MAX_USER_TEXT} bytes")
        self.queue_plaintext(recipient, frame(TEXT, bytes(text)))

    def queue_plaintext(self, recipient: bytes, plaintext: bytes) -> None:
        recipient = bytes(recipient)
        if len(recipient) == PK_SIZE:
            if recipient not in self.friends:
                raise UnknownRecipient("recipient public key is not in the friend list")
        elif len(recipient) == GROUP_ID_SIZE:
            if recipient not in self.groups:
                raise UnknownRecipient("not a member of that group")
        else:
            raise UnknownRecipient("recipient must be a public key or a group id")
        if len(plaintext) != crypto.PLAINTEXT_SIZE:
            raise crypto.PlaintextError("plaintext has the wrong length")
        self.outgoing.append((recipient, bytes(plaintext)))

    def introduce(self, a_pk: bytes, b_pk: bytes) -> List[Tuple[bytes, bytes]]:
        """Introduction plaintexts: ``a`` learns ``b``'s key and vice versa."""
        for pk in (a_pk, b_pk):
            if pk not in self.friends:
                raise NotAFriend("can only introduce friends")
        return [(a_pk, frame(INTRO, b_pk)), (b_pk, frame(INTRO, a_pk))]

    def form_group(self, members: Sequence[bytes],
                   invite_fanout: Optional[Sequence[Sequence[bytes]]] = None,
                   ) -> Tuple[GroupKey, List[Tuple[bytes, bytes]]]:
        """Create a group and the setup plaintexts this node must send.

        ``invite_fanout[i]`` lists the keys ``members[i]`` should invite in turn;
        they travel as 8-byte fingerprints resolved against that member's friends.
        Members that are not our friends are skipped.
        """
        if invite_fanout is None:
            invite_fanout = [()] * len(members)
        if len(invite_fanout) != len(members):
            raise ValueError("invite_fanout must align with members")
        gk = crypto.new_group_key(self._misc_rng)
        self.groups[gk.group_id] = gk
        setups = []
        for member, delegated in zip(members, invite_fanout):
            if member not in self.friends:
                continue
            if len(delegated) > MAX_DELEGATED:
                raise ValueError(f"at most {MAX_DELEGATED} delegated invites per member")
            setups.append((member, _group_setup(gk, delegated)))
        return gk, setups

    def distancing_wipe(self) -> None:
        """Forget everything from the session; keys, friends and groups persist."""
        self.ds.clear()
        self.outgoing.clear()
        self.pending_requests.clear()
        self.requested.clear()
        self.forward_queue.clear()
        self.forwarded.clear()
        self.inbox.clear()
        self.sent.clear()
        self.accepted.clear()

    # -- control loop ---------------------------------------------------

    def _slot_due(self, now: int, period: int) -> bool:
        return now >= self.turn and (now - self.turn) % period == 0

    def tick(self, now: int, inbound: Iterable[Envelope] = ()) -> List[Envelope]:
        cfg = self.config
        smart = cfg.broadcast_mode is BroadcastMode.SMART
        out: List[Envelope] = []

        digests, requests, packets = [], [], []
        for env in inbound:
            try:
                kind = env.kind
                if kind is Kind.DIGEST:
                    digests.append(CompactDigest.from_bytes(env.payload))
                elif kind is Kind.REQUEST:
                    idx = parse_request(env.payload)
                    if idx is not None:
                        requests.append(idx)
                elif kind is Kind.MESSAGE or kind is Kind.RESPONSE:
                    pkts = env.packets
                    if pkts is not None:
                        packets.extend(pkts)
            except (ValueError, AttributeError, TypeError):
                continue
        self.ds_arrived = bool(digests)
        self.message_arrived = bool(packets)

        if self._slot_due(now, cfg.send_rate_ms):
            out.append(self._send(now))

        if smart and self._slot_due(now, cfg.ds_share_interval_ms):
            out.append(digest_envelope(self.ds.compact()))

        if digests:
            # packets heard in this same batch count as held
            held = self.ds.compact()
            for mid, _ in packets:
                held.bits[slot(mid, cfg.table_size)] = True
            missing = set()
            for cd in digests:
                try:
                    missing.update(diff(cd, held))
                except ValueError:
                    continue
            holdoff = cfg.request_holdoff_ms
            missing = sorted(i for i in missing
                             if now - self.requested.get(i, -holdoff) >= holdoff)
            if missing:
                for i in missing:
                    self.requested[i] = now
                out.append(request_envelope(missing))

        for idx in requests:
            self.pending_requests.update(idx)
        if self.pending_requests:
            found: Dict[bytes, bytes] = {}
            for i in sorted(self.pending_requests):
                for mid, pkt in self.ds.items_by_index(i):
                    found.setdefault(mid, pkt)
            self.pending_requests.clear()
            if found:
                out.append(response_envelope(list(found.values()), list(found)))

        for mid, pkt in packets:
            # re-storing an expired packet would restart its clock and let
            # it circulate forever between neighbours with staggered expiry
            if mid in self.ds or self.ds.was_expired(mid):
                continue
            self.ds.add(pkt, now, mid)
            self._receive(pkt, now)
            if not smart and mid not in self.forwarded:
                self.forward_queue.append((mid, pkt))
        while self.forward_queue:
            mid, pkt = self.forward_queue.popleft()
            if mid in self.forwarded:
                continue
            self.forwarded.add(mid)
            out.append(message_envelope(pkt, mid))

        self.ds.expire_before(now, cfg.time_to_keep_ms)
        return out

    def _send(self, now: int) -> Envelope:
        keys = self.config.keys
        # one draw per slot from each stream regardless of real/dummy,
        # so the randomness schedule never depends on queue contents
        dummy_text = self._dummy_rng.bytes(crypto.PLAINTEXT_SIZE)
        slot_rng = np.random.default_rng(self._crypto_rng.integers(2 ** 63))
        if self.outgoing:
            recipient, plaintext = self.outgoing.popleft()
            if len(recipient) == GROUP_ID_SIZE:
                pkt = self.suite.group_signcrypt(keys, self.groups[recipient], plaintext, slot_rng)
            else:
                pkt = self.suite.signcrypt(keys, recipient, plaintext, slot_rng)
            self.sent.append(SentRecord(now, recipient, plaintext, pkt))
        else:
            pkt = self.suite.signcrypt(keys, self.dummy_pk, dummy_text, slot_rng)
        mid = message_id(pkt)
        self.ds.add(pkt, now, mid)
        self.forwarded.add(mid)
        self.messages_sent += 1
        return message_envelope(pkt, mid)

    def _receive(self, pkt: bytes, now: int) -> None:
        opened = self.suite.designcrypt(self.config.keys, pkt)
        group_id = None
        if opened is None:
            for gid, gk in self.groups.items():
                opened = self.suite.group_designcrypt(gk, pkt)
                if opened is not None:
                    group_id = gid
                    break
        if opened is None:
            return
        sender_pk, plaintext = opened
        self.accepted.append(Accepted(now, sender_pk, plaintext, pkt, group_id))
        if group_id is None and sender_pk not in self.friends:
            return
        content = unframe(plaintext)
        if content is None:
            return
        tag, body = content
        if tag == TEXT:
            self.inbox.append(Delivery(now, sender_pk, body, group_id))
        elif group_id is not None:
            return
        elif tag == INTRO:
            self._accept_introduction(sender_pk, body)
        elif tag == GROUP_SETUP:
            self._accept_group_setup(body)

    def _accept_introduction(self, introducer: bytes, body: bytes) -> None:
        if len(body) != PK_SIZE:
            return
        friend = self.friends[introducer]
        if not friend.may_introduce or friend.hops + 1 > self.hop_limit:
            return
        self.add_friend(body, hops=friend.hops + 1)

    def _accept_group_setup(self, body: bytes) -> None:
        parsed = _parse_group_setup(body)
        if parsed is None:
            return
        gk, fingerprints = parsed
        self.groups[gk.group_id] = gk
        for fp in fingerprints:
            pk = self._friend_by_fingerprint(fp)
            if pk is not None:
                self.outgoing.append((pk, _group_setup(gk, ())))


def _group_setup(gk: GroupKey, delegated: Sequence[bytes]) -> bytes:
    body = gk.key + gk.group_id + bytes([len(delegated)])
    body += b"".join(pk_fingerprint(pk) for pk in delegated)
    return frame(GROUP_SETUP, body)


def _parse_group_setup(body: bytes):
    head = crypto.SYM_KEY_SIZE + GROUP_ID_SIZE
    if len(body) < head + 1:
        return None
    n = body[head]
    if len(body) != head + 1 + n * FINGERPRINT_SIZE:
        return None
    gk = GroupKey(body[:crypto.SYM_KEY_SIZE], body[crypto.SYM_KEY_SIZE:head])
    fps = [body[head + 1 + k * FINGERPRINT_SIZE:head + 1 + (k + 1) * FINGERPRINT_SIZE]
           for k in range(n)]
    return gk, fps


def join(base: NodeConfig, seed=None, tick_ms: int = TICK_MS, **kwargs) -> Node:
    """Start a node with its turn drawn uniformly from the turn window.

    Turns are whole ticks so that send slots line up with the simulation clock.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    turn_ss, node_ss = ss.spawn(2)
    turn = int(np.random.default_rng(turn_ss).integers(TURN_WINDOW_MS // tick_ms)) * tick_ms
    cfg = NodeConfig(**{**base.__dict__, "turn_ms": turn})
    return Node(cfg, node_ss, **kwargs)
