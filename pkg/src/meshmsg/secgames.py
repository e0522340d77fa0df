"""Executable security games.

* MINT (mesh integrity): honest users run the protocol under adversary-chosen
  topologies and injections. The challenger records every honest send in S and
  every honest acceptance of an honest-sender plaintext in R; the adversary
  wins (verdict 1) iff R is not a subset of S.
* MCONF trace invariance: a fixed script is run in world b=0 and world b=1,
  which differ only in the challenge recipient/plaintext. The metadata the
  malicious coalition observes must be identical.
* Key privacy: many packets, each encrypted to one of two public keys under a
  hidden bit; a suite of distinguishers tries to recover the bit.

The challenger owns all honest randomness. Seeds are split per purpose so the
two MCONF worlds share every draw; ciphertext bytes are the only difference.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import crypto
from .crypto import PACKET_SIZE, PLAINTEXT_SIZE, KeyPair
from .node import BroadcastMode, Envelope, Kind, Node, NodeConfig, parse_response
from .simnet import (TICK_MS, RoundObservation, RoundScript, ScriptedNetwork, ScriptError,
                     TraceEvent)

KEY_PRIVACY_QUERY_CAP = 10 ** 6


class Abort(Exception):
    """Challenger abort: the adversary broke a rule of the experiment."""


@dataclass(frozen=True)
class GameParams:
    N: int
    T: int
    h: int
    M: frozenset
    ell: int = PLAINTEXT_SIZE
    lam: int = 128
    broadcast: str = "simple"
    max_injections: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "M", frozenset(int(i) for i in self.M))
        if self.N < 1 or self.T < 1:
            raise ValueError("need N >= 1 and T >= 1")
        if not self.M <= set(range(self.N)):
            raise ValueError("malicious set must be drawn from 0..N-1")
        if len(self.M) != self.N - self.h:
            raise ValueError("|M| must equal N - h")
        if self.ell != PLAINTEXT_SIZE:
            raise ValueError(f"this instantiation fixes ell = {PLAINTEXT_SIZE}")
        if self.lam != 128:
            raise ValueError("only the 128-bit parameter set is implemented")
        BroadcastMode(self.broadcast)

    @property
    def honest(self) -> List[int]:
        return [i for i in range(self.N) if i not in self.M]

    @classmethod
    def make(cls, N: int, T: int, malicious: Iterable[int], **kw) -> "GameParams":
        M = frozenset(malicious)
        return cls(N=N, T=T, h=N - len(M), M=M, **kw)

    def to_dict(self) -> dict:
        return {"N": self.N, "T": self.T, "h": self.h, "M": sorted(self.M), "ell": self.ell,
                "lam": self.lam, "broadcast": self.broadcast,
                "max_injections": self.max_injections, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "GameParams":
        return cls(**{**d, "M": frozenset(d["M"])})


@dataclass
class Ledger:
    """Challenger bookkeeping: tuples (sender_pk, recipient_pk, m, ct)."""
    S: set = field(default_factory=set)
    R: set = field(default_factory=set)

    def forgeries(self) -> set:
        return self.R - self.S


@dataclass
class World:
    """Honest side of a game: keys and protocol nodes, all owned by the challenger."""
    params: GameParams
    keys: Dict[int, KeyPair]  # every user, malicious ones included
    nodes: Dict[int, Node]
    net: ScriptedNetwork

    def pk(self, i: int) -> bytes:
        return self.keys[i].pk

    @property
    def honest_pks(self) -> frozenset:
        return frozenset(self.keys[i].pk for i in self.nodes)


def build_world(params: GameParams, suite=crypto.DEFAULT_SUITE, tick_ms: int = TICK_MS,
                send_every: int = 1, ds_every: int = 1) -> World:
    """Set up keys and honest nodes.

    Malicious keys are derived from their own stream (they stand for keys the
    adversary registered). Every honest node befriends every user and sends
    once every ``send_every`` rounds from round 0.
    """
    root = np.random.SeedSequence(params.seed)
    key_ss, mal_ss, node_ss = root.spawn(3)
    keys = {}
    for i, ss in zip(params.honest, key_ss.spawn(params.h)):
        keys[i] = crypto.keygen(np.random.default_rng(ss).bytes(32))
    for i, ss in zip(sorted(params.M), mal_ss.spawn(len(params.M))):
        keys[i] = crypto.keygen(np.random.default_rng(ss).bytes(32))
    horizon = (params.T + 1) * tick_ms
    nodes = {}
    for i, ss in zip(params.honest, node_ss.spawn(params.h)):
        cfg = NodeConfig(keys[i], send_rate_ms=send_every * tick_ms,
                         ds_share_interval_ms=ds_every * tick_ms,
                         time_to_keep_ms=horizon, turn_ms=0,
                         broadcast_mode=params.broadcast)
        node = Node(cfg, ss, suite=suite)
        for j in range(params.N):
            if j != i:
                node.add_friend(keys[j].pk)
        nodes[i] = node
    return World(params, keys, nodes, ScriptedNetwork(nodes, params.N, params.M, tick_ms))


def observed_packets(obs: Optional[RoundObservation]) -> List[bytes]:
    """Every packet the coalition saw in one round, in arrival order."""
    if obs is None:
        return []
    out = []
    for _, _, env in obs.received:
        if env.kind is Kind.MESSAGE:
            out.append(env.payload)
        elif env.kind is Kind.RESPONSE:
            out.extend(parse_response(env.payload) or ())
    return out


# -- adversaries -------------------------------------------------------------

@dataclass
class AdvRound:
    edges: Sequence[Sequence[int]]
    queries: Sequence[tuple] = ()  # MINT: (sender, rec, m); MCONF: (sender, rec0, m0, rec1, m1)
    injections: Sequence[tuple] = ()  # (malicious node, target node, packet)


class Adversary:
    """Plug-in strategy. ``round`` sees the coalition's observation of the previous round."""

    name = "base"

    def setup(self, params: GameParams, pks: Dict[int, bytes],
              malicious_keys: Dict[int, KeyPair], rng: np.random.Generator) -> None:
        self.params = params
        self.pks = pks
        self.malicious_keys = malicious_keys
        self.rng = rng

    def edges(self, r: int) -> List[Tuple[int, int]]:
        n = self.params.N
        return [(i, j) for i in range(n) for j in range(i + 1, n)]

    def queries(self, r: int) -> List[tuple]:
        honest = self.params.honest
        if not honest or self.params.N < 2:
            return []
        s = int(self.rng.choice(honest))
        rec = int(self.rng.choice([j for j in range(self.params.N) if j != s]))
        return [(s, rec, self.rng.bytes(self.params.ell))]

    def injections(self, r: int, obs: Optional[RoundObservation]) -> List[tuple]:
        return []

    def round(self, r: int, obs: Optional[RoundObservation]) -> AdvRound:
        return AdvRound(self.edges(r), self.queries(r), self.injections(r, obs))

    def _spray(self, packets: Sequence[bytes]) -> List[tuple]:
        """Send each packet from a malicious node to every honest node, within budget."""
        mal = sorted(self.params.M)
        if not mal:
            return []
        out = []
        for k, pkt in enumerate(packets):
            for target in self.params.honest:
                out.append((mal[k % len(mal)], target, pkt))
        return out[:self.params.max_injections]


class PassiveAdversary(Adversary):
    name = "passive"


class ReplayAdversary(Adversary):
    """Re-injects previously observed honest ciphertexts to every honest node."""

    name = "replay"

    def setup(self, *a, **kw):
        super().setup(*a, **kw)
        self.recorded: List[bytes] = []

    def injections(self, r, obs):
        self.recorded.extend(observed_packets(obs))
        if not self.recorded:
            return []
        k = min(len(self.recorded), 4)
        pick = self.rng.choice(len(self.recorded), size=k, replace=False)
        return self._spray([self.recorded[int(i)] for i in pick])


class BitflipAdversary(Adversary):
    """Flips one random bit in every packet it relays and injects the result."""

    name = "bitflip"

    def injections(self, r, obs):
        mutated = []
        for pkt in observed_packets(obs):
            bit = int(self.rng.integers(len(pkt) * 8))
            buf = bytearray(pkt)
            buf[bit // 8] ^= 1 << (bit % 8)
            mutated.append(bytes(buf))
        return self._spray(mutated)


def _through_coalition(params: GameParams) -> List[Tuple[int, int]]:
    # honest nodes only touch malicious ones
    return [(h, m) for h in params.honest for m in sorted(params.M)]


class DropAdversary(Adversary):
    """Malicious nodes sit between honest ones and relay nothing."""

    name = "drop"

    def edges(self, r):
        return _through_coalition(self.params) if self.params.M else super().edges(r)


class DelayAdversary(Adversary):
    """Holds every packet for one round, then delivers it to all honest nodes."""

    name = "delay"

    def setup(self, *a, **kw):
        super().setup(*a, **kw)
        self.held: List[bytes] = []

    def edges(self, r):
        return _through_coalition(self.params) if self.params.M else super().edges(r)

    def injections(self, r, obs):
        release, self.held = self.held, observed_packets(obs)
        return self._spray(release)


ADVERSARIES = {cls.name: cls for cls in
               (PassiveAdversary, ReplayAdversary, BitflipAdversary, DropAdversary,
                DelayAdversary)}


# -- MINT --------------------------------------------------------------------

@dataclass
class GameResult:
    verdict: int
    aborted: bool
    reason: str
    rounds_run: int
    ledger: Ledger
    first_forgery_round: Optional[int] = None


def _harvest(world: World, ledger: Ledger, marks: Dict[int, Tuple[int, int]]) -> None:
    honest_pks = world.honest_pks
    for i, node in world.nodes.items():
        sent_mark, acc_mark = marks.get(i, (0, 0))
        for rec in node.sent[sent_mark:]:
            ledger.S.add((node.pk, rec.recipient, rec.plaintext, rec.packet))
        for acc in node.accepted[acc_mark:]:
            if acc.group_id is None and acc.sender_pk in honest_pks:
                ledger.R.add((acc.sender_pk, node.pk, acc.plaintext, acc.packet))
        marks[i] = (len(node.sent), len(node.accepted))


def run_mint(params: GameParams, adversary: Adversary, suite=crypto.DEFAULT_SUITE,
             stop_on_forgery: bool = False) -> GameResult:
    """Mesh-integrity experiment. Verdict 1 iff some honest user accepted a
    plaintext attributed to an honest sender that no honest user sent."""
    world = build_world(params, suite)
    adv_ss = np.random.SeedSequence(params.seed).spawn(4)[3]
    adversary.setup(params, {i: k.pk for i, k in world.keys.items()},
                    {i: world.keys[i] for i in params.M}, np.random.default_rng(adv_ss))
    ledger = Ledger()
    marks: Dict[int, Tuple[int, int]] = {}
    obs = None
    first = None
    for r in range(params.T):
        try:
            plan = adversary.round(r, obs)
            rs = _mint_round(world, plan)
            obs = world.net.step(rs)
        except (Abort, ScriptError) as exc:
            return GameResult(0, True, f"round {r}: {exc}", r, ledger)
        _harvest(world, ledger, marks)
        if first is None and ledger.forgeries():
            first = r
            if stop_on_forgery:
                return GameResult(1, False, f"forgery accepted in round {r}", r + 1, ledger, r)
    verdict = int(bool(ledger.forgeries()))
    reason = f"forgery accepted in round {first}" if verdict else "R is a subset of S"
    return GameResult(verdict, False, reason, params.T, ledger, first)


def _check_injections(params: GameParams, injections) -> List[tuple]:
    if len(injections) > params.max_injections:
        raise Abort(f"{len(injections)} injections exceed the per-round budget")
    return [(int(m), int(t), bytes(p)) for m, t, p in injections]


def _mint_round(world: World, plan: AdvRound) -> RoundScript:
    params = world.params
    sends = []
    for q in plan.queries:
        sender, rec, m = q
        if sender not in world.nodes:
            raise Abort(f"query sender {sender} is not honest")
        if not 0 <= rec < params.N or rec == sender:
            raise Abort(f"bad recipient {rec}")
        if len(m) != params.ell:
            raise Abort("message length differs from ell")
        sends.append((sender, world.pk(rec), bytes(m)))
    return RoundScript(plan.edges, sends, _check_injections(params, plan.injections))


# -- MCONF trace invariance --------------------------------------------------

@dataclass
class McRound:
    edges: Sequence[Sequence[int]]
    queries: Sequence[tuple] = ()  # (sender, rec0, m0, rec1, m1)
    injections: Sequence[tuple] = ()


@dataclass
class WorldTrace:
    observations: List[RoundObservation]
    events: List[TraceEvent]

    def received_projection(self) -> List[tuple]:
        """What reached malicious nodes, as (round, sender, receiver, kind, size)."""
        return [(o.round, s, j, env.kind.name, env.size_bytes)
                for o in self.observations for s, j, env in o.received]

    def event_projection(self) -> List[tuple]:
        """Every transmission in the network, as (round, sender, receiver, kind, size)."""
        return [(e.round, e.sender, e.receiver, e.kind, e.size) for e in self.events]


@dataclass
class McResult:
    aborted: bool
    reason: str
    traces: Tuple[Optional[WorldTrace], Optional[WorldTrace]]

    def invariant(self) -> bool:
        t0, t1 = self.traces
        if t0 is None or t1 is None:
            return True
        return (t0.received_projection() == t1.received_projection()
                and t0.event_projection() == t1.event_projection())


def check_restriction(params: GameParams, script: Sequence[McRound]) -> None:
    """Divergent challenges may only go to honest recipients."""
    for r, rnd in enumerate(script):
        for q in rnd.queries:
            sender, rec0, m0, rec1, m1 = q
            if sender in params.M:
                raise Abort(f"round {r}: query sender {sender} is malicious")
            for rec in (rec0, rec1):
                if not 0 <= rec < params.N or rec == sender:
                    raise Abort(f"round {r}: bad recipient {rec}")
            if len(m0) != params.ell or len(m1) != params.ell:
                raise Abort(f"round {r}: message length differs from ell")
            if (rec0 in params.M or rec1 in params.M) and (rec0, bytes(m0)) != (rec1, bytes(m1)):
                raise Abort(f"round {r}: divergent query to a malicious recipient")
        _check_injections(params, rnd.injections)


def _run_world(params: GameParams, script: Sequence[McRound], b: int, suite,
               send_every: int, ds_every: int) -> WorldTrace:
    world = build_world(params, suite, send_every=send_every, ds_every=ds_every)
    rounds = []
    for rnd in script:
        sends = []
        for sender, rec0, m0, rec1, m1 in rnd.queries:
            rec, m = (rec0, m0) if b == 0 else (rec1, m1)
            sends.append((sender, world.pk(rec), bytes(m)))
        rounds.append(RoundScript(rnd.edges, sends, list(rnd.injections)))
    for rs in rounds:
        world.net.validate(rs)
    obs = [world.net.step(rs) for rs in rounds]
    return WorldTrace(obs, list(world.net.trace))


def run_mconf_trace_pair(params: GameParams, script: Sequence[McRound],
                         suite=crypto.DEFAULT_SUITE, send_every: int = 1,
                         ds_every: int = 1) -> McResult:
    """Run the script in both worlds with identical seeds and return both traces."""
    if len(script) > params.T:
        return McResult(True, "script longer than T rounds", (None, None))
    try:
        check_restriction(params, script)
        t0 = _run_world(params, script, 0, suite, send_every, ds_every)
        t1 = _run_world(params, script, 1, suite, send_every, ds_every)
    except (Abort, ScriptError) as exc:
        return McResult(True, str(exc), (None, None))
    return McResult(False, "ok", (t0, t1))


def random_mconf_script(params: GameParams, rng: np.random.Generator,
                        edge_p: float = 0.5, query_p: float = 0.5,
                        injections: int = 1) -> List[McRound]:
    """Honest-only divergent queries under random topologies, plus junk injections."""
    n, honest, mal = params.N, params.honest, sorted(params.M)
    script = []
    for _ in range(params.T):
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < edge_p]
        queries = []
        if len(honest) >= 2 and rng.random() < query_p:
            s = int(rng.choice(honest))
            others = [j for j in honest if j != s]
            rec0, rec1 = (int(x) for x in rng.choice(others, size=2))
            queries.append((s, rec0, rng.bytes(params.ell), rec1, rng.bytes(params.ell)))
        inj = []
        if mal:
            for _ in range(injections):
                inj.append((int(rng.choice(mal)), int(rng.integers(n)), rng.bytes(PACKET_SIZE)))
        script.append(McRound(edges, queries, inj))
    return script


# -- JSON scripts ------------------------------------------------------------

def mconf_script_to_json(params: GameParams, script: Sequence[McRound]) -> str:
    rounds = [{"edges": [list(map(int, e)) for e in rnd.edges],
               "queries": [[s, r0, m0.hex(), r1, m1.hex()] for s, r0, m0, r1, m1 in rnd.queries],
               "injections": [[m, t, p.hex()] for m, t, p in rnd.injections]}
              for rnd in script]
    return json.dumps({"game": "mconf", "params": params.to_dict(), "rounds": rounds},
                      indent=1, sort_keys=True)


def mconf_script_from_json(text: str) -> Tuple[GameParams, List[McRound]]:
    d = json.loads(text)
    if d.get("game") != "mconf":
        raise ValueError("not an mconf script")
    params = GameParams.from_dict(d["params"])
    script = [McRound([tuple(e) for e in rnd["edges"]],
                      [(s, r0, bytes.fromhex(m0), r1, bytes.fromhex(m1))
                       for s, r0, m0, r1, m1 in rnd.get("queries", ())],
                      [(m, t, bytes.fromhex(p)) for m, t, p in rnd.get("injections", ())])
              for rnd in d["rounds"]]
    return params, script


def mint_spec_to_json(params: GameParams, adversary: str, suite: str = "default") -> str:
    return json.dumps({"game": "mint", "params": params.to_dict(), "adversary": adversary,
                       "suite": suite}, indent=1, sort_keys=True)


SUITES = {"default": crypto.DEFAULT_SUITE, "unauthenticated": crypto.UnauthenticatedSuite()}


def mint_spec_from_json(text: str):
    d = json.loads(text)
    if d.get("game") != "mint":
        raise ValueError("not a mint script")
    if d["adversary"] not in ADVERSARIES:
        raise ValueError(f"unknown adversary {d['adversary']!r}")
    suite = SUITES[d.get("suite", "default")]
    return GameParams.from_dict(d["params"]), ADVERSARIES[d["adversary"]](), suite


# -- key privacy -------------------------------------------------------------

@dataclass
class KeyPrivacyResult:
    queries: int
    advantage: float  # max over distinguishers, after subtracting 3 sigma of noise
    raw: Dict[str, float]  # |2 * accuracy - 1| on held-out queries, per distinguisher
    sigma: float
    uniformity_p: float  # smallest per-byte uniformity p-value, Bonferroni-adjusted


def _majority(train_x, train_y, test_x):
    # guess the training majority for each distinct feature value
    table: Dict = {}
    for x, y in zip(train_x, train_y):
        c = table.setdefault(x, [0, 0])
        c[y] += 1
    default = int(np.mean(train_y) > 0.5) if len(train_y) else 0
    out = []
    for x in test_x:
        c = table.get(x)
        out.append(default if c is None or c[0] == c[1] else int(c[1] > c[0]))
    return np.array(out, dtype=np.int64)


def dist_ignore(pk0, pk1, train, ytrain, test):
    """Ignores the ciphertexts entirely."""
    return np.zeros(len(test), dtype=np.int64)


def dist_length(pk0, pk1, train, ytrain, test):
    return _majority([len(c) for c in train], ytrain, [len(c) for c in test])


def dist_byte_position(pk0, pk1, train, ytrain, test):
    """Most label-dependent byte position on the training half (chi-square), then
    a per-value majority vote at that position."""
    arr = np.frombuffer(b"".join(train), dtype=np.uint8).reshape(len(train), -1)
    y = np.asarray(ytrain)
    best, best_stat = 0, -1.0
    for pos in range(arr.shape[1]):
        table = np.zeros((2, 256))
        np.add.at(table, (y, arr[:, pos]), 1)
        table = table[:, table.sum(axis=0) > 0]
        if table.shape[1] < 2:
            continue
        stat = stats.chi2_contingency(table)[0]
        if stat > best_stat:
            best, best_stat = pos, stat
    return _majority(arr[:, best].tolist(), ytrain, [c[best] for c in test])


def dist_prefix_correlation(pk0, pk1, train, ytrain, test):
    """Guesses the key whose bytes share more bits with the KEM prefix."""
    n = crypto.KEM_SIZE

    def closer(c):
        d0 = sum(bin(a ^ b).count("1") for a, b in zip(c[:n], pk0[:n]))
        d1 = sum(bin(a ^ b).count("1") for a, b in zip(c[:n], pk1[:n]))
        return 0 if d0 < d1 else 1 if d1 < d0 else 2
    return _majority([closer(c) for c in train], ytrain, [closer(c) for c in test])


DISTINGUISHERS = {
    "ignore": dist_ignore,
    "length": dist_length,
    "byte_position": dist_byte_position,
    "prefix_correlation": dist_prefix_correlation,
}


def byte_uniformity_p(packets: Sequence[bytes]) -> float:
    """Bonferroni-adjusted minimum p-value of per-position chi-square uniformity tests."""
    if not packets:
        return 1.0
    lengths = {len(p) for p in packets}
    if len(lengths) != 1:
        return 0.0
    arr = np.frombuffer(b"".join(packets), dtype=np.uint8).reshape(len(packets), -1)
    pmin = 1.0
    for pos in range(arr.shape[1]):
        counts = np.bincount(arr[:, pos], minlength=256)
        pmin = min(pmin, stats.chisquare(counts).pvalue)
    return min(1.0, pmin * arr.shape[1])


def run_key_privacy(pk0: bytes, pk1: bytes, Q: int, seed: int = 0,
                    encrypt: Optional[Callable] = None,
                    distinguishers: Optional[Dict[str, Callable]] = None) -> KeyPrivacyResult:
    """Multi-query key-privacy experiment.

    Each query is encrypted to ``pk_b`` for a fresh hidden bit b. Half the
    queries (with their bits) train each distinguisher, the other half score
    it. The reported advantage is the largest raw advantage minus three
    standard deviations of the no-information null, floored at 0.
    """
    if not 0 <= Q <= KEY_PRIVACY_QUERY_CAP:
        raise ValueError(f"query count must lie in [0, {KEY_PRIVACY_QUERY_CAP}]")
    distinguishers = distinguishers or DISTINGUISHERS
    if Q == 0:
        return KeyPrivacyResult(0, 0.0, {k: 0.0 for k in distinguishers}, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    sender = crypto.keygen(rng.bytes(32))
    if encrypt is None:
        def encrypt(pk, m, r):
            return crypto.signcrypt(sender, pk, m, r)
    bits = rng.integers(0, 2, size=Q)
    cts = [encrypt(pk1 if b else pk0, rng.bytes(PLAINTEXT_SIZE), rng) for b in bits]
    half = Q // 2
    train, test = cts[:half], cts[half:]
    ytrain, ytest = bits[:half], bits[half:]
    raw = {}
    for name, fn in distinguishers.items():
        if len(test) == 0 or len(train) == 0:
            raw[name] = 0.0
            continue
        guess = fn(pk0, pk1, train, ytrain, test)
        raw[name] = abs(2.0 * float(np.mean(guess == ytest)) - 1.0)
    sigma = 1.0 / math.sqrt(max(1, len(test)))
    adv = max(0.0, max(raw.values()) - 3 * sigma)
    return KeyPrivacyResult(Q, adv, raw, sigma, byte_uniformity_p(cts))
