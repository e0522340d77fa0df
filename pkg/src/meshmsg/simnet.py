"""Discrete-time mesh simulator.

Time advances in 100 ms ticks. Every active device runs one :meth:`Node.tick`
per tick; each envelope it returns is one broadcast transmission, heard by all
active neighbours within radio range on the following tick. Bandwidth is
accounted per transmission (sender egress once, receiver ingress per
neighbour) and every (transmission, receiver) pair is written to the event log.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import crypto
from .node import BroadcastMode, Envelope, Kind, Node, NodeConfig, message_envelope

LOG_FORMAT = "meshmsg-log/1"
BLUETOOTH_RANGE_FT = 30.0
BLUETOOTH_CAPACITY_BPS = 1_400_000
TICK_MS = 100
START_WINDOW_MS = 60_000
# float slack so lattice points exactly at the range boundary stay connected
_RANGE_EPS = 1e-9


@dataclass
class SimConfig:
    minutes: float = 5.0
    devices: int = 10
    placement: str = "grid"
    spacing_ft: float = 15.0
    movement: str = "static"
    step_ft: float = 1.5
    broadcast: str = "smart"
    ds_interval_ms: int = 5_000
    rate_ms: int = 30_000
    seed: int = 0
    radio_range_ft: float = BLUETOOTH_RANGE_FT
    link_capacity_bps: float = BLUETOOTH_CAPACITY_BPS
    tick_ms: int = TICK_MS
    time_to_keep_ms: int = 300_000
    table_size: int = 4096
    crypto: str = "full"
    sigma_ft: Optional[float] = None
    start_window_ms: int = START_WINDOW_MS
    # scripted real messages: [at_ms, sender, recipient, text]
    messages: List[list] = field(default_factory=list)

    def __post_init__(self):
        if self.tick_ms <= 0 or self.minutes <= 0:
            raise ValueError("tick and duration must be positive")
        if self.devices < 1:
            raise ValueError("need at least one device")
        if self.placement not in ("grid", "normal"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.movement not in ("static", "random_walk"):
            raise ValueError(f"unknown movement {self.movement!r}")
        if self.crypto not in ("full", "opaque"):
            raise ValueError(f"unknown crypto mode {self.crypto!r}")
        BroadcastMode(self.broadcast)
        if self.spacing_ft <= 0:
            raise ValueError("spacing must be positive")
        if self.rate_ms % self.tick_ms or self.ds_interval_ms % self.tick_ms:
            raise ValueError("rates must be whole ticks")
        for msg in self.messages:
            at, src, dst = msg[0], msg[1], msg[2]
            if not (0 <= src < self.devices and 0 <= dst < self.devices) or src == dst:
                raise ValueError(f"bad scripted message {msg!r}")
            if at % self.tick_ms:
                raise ValueError("scripted message times must be whole ticks")

    @property
    def n_ticks(self) -> int:
        return int(round(self.minutes * 60_000 / self.tick_ms))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    @property
    def sim_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def wifi_direct(cls, **kw) -> "SimConfig":
        """Preset for Wi-Fi Direct links: longer range, tens of Mb/s.

        Packets stay 255 bytes; larger frames would need a different crypto layout.
        """
        kw.setdefault("radio_range_ft", 200.0)
        kw.setdefault("link_capacity_bps", 20_000_000)
        return cls(**kw)


@dataclass
class TopologySnapshot:
    round: int
    positions: Optional[np.ndarray]
    neighbors: Tuple[Tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.neighbors)

    def edges(self) -> set:
        return {(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j}

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], round: int = 0,
                   positions=None) -> "TopologySnapshot":
        adj = [set() for _ in range(n)]
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge {e} outside the {n}-node vertex set")
            if i == j:
                raise ValueError("self edges are not allowed")
            adj[i].add(j)
            adj[j].add(i)
        return cls(round, positions, tuple(tuple(sorted(a)) for a in adj))

    @classmethod
    def from_positions(cls, positions: np.ndarray, radio_range: float,
                       round: int = 0) -> "TopologySnapshot":
        positions = np.asarray(positions, dtype=float)
        n = len(positions)
        if n < 2:
            pairs = []
        else:
            pairs = cKDTree(positions).query_pairs(radio_range + _RANGE_EPS)
        return cls.from_edges(n, pairs, round, positions)


def grid_positions(n: int, spacing: float) -> np.ndarray:
    """Row-major lattice in a near-square rectangle."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    cols = math.ceil(math.sqrt(n))
    ids = np.arange(n)
    return np.column_stack([ids % cols, ids // cols]).astype(float) * spacing


def normal_sigma(n: int, spacing: float) -> float:
    # mean nearest-neighbour distance of n gaussian points ~ sigma*sqrt(pi/n)
    return spacing * math.sqrt(n / math.pi)


def place(cfg: SimConfig, rng=None) -> TopologySnapshot:
    if cfg.placement == "grid":
        pos = grid_positions(cfg.devices, cfg.spacing_ft)
    else:
        rng = np.random.default_rng(rng)
        sigma = cfg.sigma_ft or normal_sigma(cfg.devices, cfg.spacing_ft)
        pos = rng.normal(0.0, sigma, size=(cfg.devices, 2))
    return TopologySnapshot.from_positions(pos, cfg.radio_range_ft)


def assign_start_times(cfg: SimConfig, rng=None) -> np.ndarray:
    """Start tick for every device, uniform over the start window."""
    rng = np.random.default_rng(rng)
    window = cfg.start_window_ms // cfg.tick_ms
    return rng.integers(0, window, size=cfg.devices)


def random_walk(positions: np.ndarray, step: float, bounds, rng) -> np.ndarray:
    """Move every point ``step`` in a uniform direction, reflecting off ``bounds``."""
    theta = rng.uniform(0.0, 2 * math.pi, size=len(positions))
    moved = positions + step * np.column_stack([np.cos(theta), np.sin(theta)])
    lo, hi = bounds
    for axis in range(2):
        a, b = lo[axis], hi[axis]
        if b <= a:
            moved[:, axis] = a
            continue
        x = moved[:, axis]
        x = np.where(x < a, 2 * a - x, x)
        x = np.where(x > b, 2 * b - x, x)
        moved[:, axis] = np.clip(x, a, b)
    return moved


class OpaqueSuite(crypto.Suite):
    """Stand-in backend producing random 255-byte packets nobody can open.

    Traffic shape is identical to the real suite; use it where only bandwidth
    and delivery of packets (not plaintexts) matter.
    """

    name = "opaque"

    def signcrypt(self, sender, recipient_pk, m, rng=None):
        return crypto.randbytes(rng, crypto.PACKET_SIZE)

    def group_signcrypt(self, sender, gk, m, rng=None):
        return crypto.randbytes(rng, crypto.PACKET_SIZE)

    def designcrypt(self, recipient, pkt):
        return None

    def group_designcrypt(self, gk, pkt):
        return None


class EventRecord(NamedTuple):
    sim_id: str
    sender_id: int
    receiver_id: Optional[int]
    comm_type: str
    comm_id: str
    transmission_id: int
    size_bytes: int
    timestamp_ms: int


def header_line(cfg: SimConfig, start_ticks) -> dict:
    return {"format": LOG_FORMAT, "sim_id": cfg.sim_id, "config": cfg.to_dict(),
            "start_ticks": [int(s) for s in start_ticks]}


def record_line(rec: EventRecord) -> str:
    return json.dumps(rec._asdict(), separators=(",", ":"))


@dataclass
class SimResult:
    config: SimConfig
    start_ticks: np.ndarray
    ingress: np.ndarray  # bytes, shape (ticks, devices)
    egress: np.ndarray
    nodes: List[Node]
    records: Optional[List[EventRecord]]
    snapshots: List[TopologySnapshot]

    @property
    def header(self) -> dict:
        return header_line(self.config, self.start_ticks)

    def write_log(self, fh) -> None:
        fh.write(json.dumps(self.header, separators=(",", ":")) + "\n")
        for rec in self.records or ():
            fh.write(record_line(rec) + "\n")

    def log_text(self) -> str:
        buf = io.StringIO()
        self.write_log(buf)
        return buf.getvalue()


def build_nodes(cfg: SimConfig, start_ticks, seed_seq) -> List[Node]:
    suite = crypto.DEFAULT_SUITE if cfg.crypto == "full" else OpaqueSuite()
    nodes = []
    for i, ss in enumerate(seed_seq.spawn(cfg.devices)):
        key_ss, node_ss = ss.spawn(2)
        keys = crypto.keygen(np.random.default_rng(key_ss).bytes(32))
        nc = NodeConfig(keys=keys, send_rate_ms=cfg.rate_ms,
                        ds_share_interval_ms=cfg.ds_interval_ms,
                        time_to_keep_ms=cfg.time_to_keep_ms,
                        turn_ms=int(start_ticks[i]) * cfg.tick_ms,
                        broadcast_mode=cfg.broadcast, table_size=cfg.table_size)
        nodes.append(Node(nc, node_ss, suite=suite))
    for msg in cfg.messages:
        a, b = nodes[msg[1]], nodes[msg[2]]
        a.add_friend(b.pk)
        b.add_friend(a.pk)
    return nodes


def run(cfg: SimConfig, keep_records: bool = True, sink=None,
        keep_snapshots: bool = False) -> SimResult:
    """Run one simulation.

    ``sink`` (a text file object) receives the JSON-lines log as it is
    produced; ``keep_records=False`` skips building records in memory, which
    is what capacity sweeps use.
    """
    root = np.random.SeedSequence(cfg.seed)
    place_ss, start_ss, move_ss, node_ss = root.spawn(4)
    snap = place(cfg, np.random.default_rng(place_ss))
    start = assign_start_times(cfg, np.random.default_rng(start_ss))
    nodes = build_nodes(cfg, start, node_ss)
    move_rng = np.random.default_rng(move_ss)
    positions = snap.positions
    bounds = (positions.min(axis=0), positions.max(axis=0))
    moving = cfg.movement == "random_walk"

    n, ticks, tick_ms = cfg.devices, cfg.n_ticks, cfg.tick_ms
    ingress = np.zeros((ticks, n), dtype=np.int64)
    egress = np.zeros((ticks, n), dtype=np.int64)
    records: Optional[List[EventRecord]] = [] if keep_records else None
    snapshots = [snap]
    sim_id = cfg.sim_id
    want_records = keep_records or sink is not None
    if sink is not None:
        sink.write(json.dumps(header_line(cfg, start), separators=(",", ":")) + "\n")

    scripted: Dict[int, list] = {}
    for msg in cfg.messages:
        scripted.setdefault(int(msg[0]), []).append(msg)

    nbr_arrays = [np.asarray(nb, dtype=np.int64) for nb in snap.neighbors]
    inbox: List[list] = [[] for _ in range(n)]
    tid = 0
    for t in range(ticks):
        now = t * tick_ms
        for msg in scripted.get(now, ()):
            text = msg[3] if len(msg) > 3 else f"m{now}:{msg[1]}->{msg[2]}"
            nodes[msg[1]].queue_send(nodes[msg[2]].pk, text.encode())
        active = start <= t
        nxt: List[list] = [[] for _ in range(n)]
        for i in range(n):
            if not active[i]:
                continue
            out = nodes[i].tick(now, inbox[i])
            if not out:
                continue
            nb = nbr_arrays[i]
            hearers = nb[active[nb]] if len(nb) else nb
            for env in out:
                tid += 1
                size = env.size_bytes
                egress[t, i] += size
                if len(hearers):
                    ingress[t, hearers] += size
                for j in hearers:
                    nxt[j].append(env)
                if want_records:
                    kind = env.kind.name
                    batch = [EventRecord(sim_id, i, int(j), kind, env.comm_id, tid, size, now)
                             for j in hearers] or [
                        EventRecord(sim_id, i, None, kind, env.comm_id, tid, size, now)]
                    if records is not None:
                        records.extend(batch)
                    if sink is not None:
                        sink.write("".join(record_line(r) + "\n" for r in batch))
        inbox = nxt
        if moving:
            positions = random_walk(positions, cfg.step_ft, bounds, move_rng)
            snap = TopologySnapshot.from_positions(positions, cfg.radio_range_ft, t + 1)
            nbr_arrays = [np.asarray(nb, dtype=np.int64) for nb in snap.neighbors]
            if keep_snapshots:
                snapshots.append(snap)
    return SimResult(cfg, start, ingress, egress, nodes, records, snapshots)


# -- temporal reachability ---------------------------------------------------

def good_path_exists(snapshots: Sequence[TopologySnapshot], a: int, b: int) -> bool:
    """True iff ``b`` is reachable from ``a`` walking one edge (or waiting) per round."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    n = snapshots[0].n
    if any(s.n != n for s in snapshots):
        raise ValueError("snapshots must share one vertex set")
    for v in (a, b):
        if not 0 <= v < n:
            raise ValueError(f"unknown node id {v}")
    if a == b:
        return True
    rounds = len(snapshots)
    seen = {(a, 0)}
    queue = deque([(a, 0)])
    while queue:
        v, r = queue.popleft()
        if v == b:
            return True
        if r == rounds:
            continue
        for w in (v,) + tuple(snapshots[r].neighbors[v]):
            state = (w, r + 1)
            if state not in seen:
                seen.add(state)
                queue.append(state)
    return False


# -- adversary-scripted runs -------------------------------------------------

class TraceEvent(NamedTuple):
    round: int
    sender: int
    receiver: int
    kind: str
    size: int
    comm_id: str


@dataclass
class RoundScript:
    """One round chosen by the adversary.

    ``sends`` are ``(sender_node, recipient_pk, plaintext)`` for honest senders;
    ``injections`` are ``(malicious_node, target_node, packet)``.
    """
    edges: Sequence[Sequence[int]]
    sends: Sequence[tuple] = ()
    injections: Sequence[tuple] = ()


@dataclass
class RoundObservation:
    round: int
    received: List[Tuple[int, int, Envelope]]  # (sender, malicious receiver, envelope)
    events: List[TraceEvent]


class ScriptError(ValueError):
    pass


class ScriptedNetwork:
    """Honest nodes run under adversary-chosen topologies and injections.

    Malicious nodes do not run the protocol; they see every envelope their
    honest neighbours broadcast and can inject packets of their own.
    """

    def __init__(self, nodes: Dict[int, Node], n: int, malicious: Iterable[int],
                 tick_ms: int = TICK_MS):
        self.n = n
        self.malicious = frozenset(malicious)
        self.nodes = nodes
        self.tick_ms = tick_ms
        if set(nodes) & self.malicious or set(nodes) | self.malicious != set(range(n)):
            raise ScriptError("every node id must be either honest or malicious")
        self.round = 0
        self._inbox: Dict[int, list] = {i: [] for i in nodes}
        self.trace: List[TraceEvent] = []
        self.snapshots: List[TopologySnapshot] = []

    def validate(self, rs: RoundScript) -> TopologySnapshot:
        try:
            snap = TopologySnapshot.from_edges(self.n, rs.edges, self.round)
        except (ValueError, TypeError, IndexError) as exc:
            raise ScriptError(str(exc)) from exc
        for s in rs.sends:
            if s[0] not in self.nodes:
                raise ScriptError(f"sender {s[0]} is not honest")
        for m in rs.injections:
            if m[0] not in self.malicious or not 0 <= m[1] < self.n:
                raise ScriptError(f"bad injection {m[:2]}")
        return snap

    def step(self, rs: RoundScript) -> RoundObservation:
        snap = self.validate(rs)
        self.snapshots.append(snap)
        r = self.round
        now = r * self.tick_ms
        for sender, rec_pk, plaintext in rs.sends:
            self.nodes[sender].queue_plaintext(rec_pk, plaintext)
        for src, dst, pkt in rs.injections:
            if dst in self.nodes:
                self._inbox[dst].append(message_envelope(bytes(pkt)))
        received, events = [], []
        nxt: Dict[int, list] = {i: [] for i in self.nodes}
        for i in sorted(self.nodes):
            for env in self.nodes[i].tick(now, self._inbox[i]):
                for j in snap.neighbors[i]:
                    events.append(TraceEvent(r, i, j, env.kind.name, env.size_bytes, env.comm_id))
                    if j in self.nodes:
                        nxt[j].append(env)
                    else:
                        received.append((i, j, env))
        self._inbox = nxt
        self.trace.extend(events)
        self.round += 1
        return RoundObservation(r, received, events)


def adversary_script(nodes: Dict[int, Node], n: int, malicious: Iterable[int],
                     rounds: Sequence[RoundScript], tick_ms: int = TICK_MS):
    """Run a fixed (non-adaptive) script; returns the network and per-round observations.

    The whole script is validated before round 0.
    """
    net = ScriptedNetwork(nodes, n, malicious, tick_ms)
    for rs in rounds:
        net.validate(rs)
    return net, [net.step(rs) for rs in rounds]
