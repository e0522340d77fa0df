import io
import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from meshmsg import crypto, simnet
from meshmsg.node import Kind, NodeConfig, Node
from meshmsg.simnet import (RoundScript, ScriptError, ScriptedNetwork, SimConfig,
                            TopologySnapshot, good_path_exists, grid_positions)


def small(**kw):
    base = dict(minutes=0.5, devices=6, spacing_ft=15.0, seed=3, rate_ms=1000,
                ds_interval_ms=1000, start_window_ms=2000, crypto="opaque")
    base.update(kw)
    return SimConfig(**base)


# -- config --------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"placement": "hex"}, {"movement": "fly"}, {"crypto": "x"},
                                {"broadcast": "flood"}, {"rate_ms": 150}, {"devices": 0},
                                {"spacing_ft": 0}, {"messages": [[0, 1, 1]]},
                                {"messages": [[50, 0, 1]]}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_config_dict_round_trip_and_id():
    cfg = small(messages=[[0, 0, 1, "hi"]])
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.sim_id == SimConfig.from_dict(cfg.to_dict()).sim_id
    assert cfg.sim_id != cfg.replace(seed=4).sim_id
    with pytest.raises(ValueError):
        SimConfig.from_dict({"bogus": 1})


def test_wifi_direct_preset():
    cfg = SimConfig.wifi_direct(devices=4)
    assert cfg.radio_range_ft > simnet.BLUETOOTH_RANGE_FT
    assert cfg.link_capacity_bps > simnet.BLUETOOTH_CAPACITY_BPS


# -- topology ------------------------------------------------------------

@pytest.mark.parametrize("spacing,degree", [(15.0, 12), (30.0, 4), (3.0, None)])
def test_grid_interior_degree(spacing, degree):
    pos = grid_positions(100, spacing)
    snap = TopologySnapshot.from_positions(pos, 30.0)
    interior = 55  # row 5, col 5 of the 10x10 grid
    if degree is None:
        # at 3 ft every node within 10 lattice steps is a neighbour
        r = 10
        degree = sum(1 for dx in range(-r, r + 1) for dy in range(-r, r + 1)
                     if (dx or dy) and dx * dx + dy * dy <= r * r
                     and 0 <= 5 + dx < 10 and 0 <= 5 + dy < 10)
    assert snap.degree(interior) == degree


@given(st.integers(2, 40), st.floats(1.0, 40.0), st.integers(0, 10 ** 6))
def test_neighbours_match_pairwise_distances(n, rng_range, seed):
    pos = np.random.default_rng(seed).uniform(0, 60, size=(n, 2))
    snap = TopologySnapshot.from_positions(pos, rng_range)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    expected = {(i, j) for i in range(n) for j in range(i + 1, n) if d[i, j] <= rng_range}
    assert snap.edges() == expected


def test_from_edges_validation():
    with pytest.raises(ValueError):
        TopologySnapshot.from_edges(3, [(0, 3)])
    with pytest.raises(ValueError):
        TopologySnapshot.from_edges(3, [(1, 1)])
    snap = TopologySnapshot.from_edges(3, [(0, 1), (1, 0), (2, 1)])
    assert snap.neighbors == ((1,), (0, 2), (1,))


def test_start_times_uniform():
    cfg = SimConfig(devices=100_000)
    starts = simnet.assign_start_times(cfg, np.random.default_rng(0))
    counts = np.bincount(starts, minlength=600)
    assert len(counts) == 600
    assert stats.chisquare(counts).pvalue > 0.01


def test_normal_placement_is_seeded():
    cfg = small(placement="normal", devices=30)
    a = simnet.place(cfg, np.random.default_rng(1))
    b = simnet.place(cfg, np.random.default_rng(1))
    assert np.array_equal(a.positions, b.positions)


@given(st.integers(0, 10 ** 6))
def test_random_walk_stays_in_bounds_and_moves_one_step(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 20, size=(30, 2))
    lo, hi = np.zeros(2), np.full(2, 20.0)
    moved = simnet.random_walk(pos, 1.5, (lo, hi), rng)
    assert np.all(moved >= lo) and np.all(moved <= hi)
    assert np.all(np.linalg.norm(moved - pos, axis=1) <= 1.5 + 1e-9)


# -- runs ----------------------------------------------------------------

def test_run_is_deterministic_and_log_has_header():
    cfg = small(broadcast="smart")
    a, b = simnet.run(cfg).log_text(), simnet.run(cfg).log_text()
    assert a == b
    head = json.loads(a.splitlines()[0])
    assert head["sim_id"] == cfg.sim_id and head["format"] == simnet.LOG_FORMAT
    assert len(head["start_ticks"]) == cfg.devices


def test_sink_matches_in_memory_log():
    cfg = small()
    buf = io.StringIO()
    res = simnet.run(cfg, sink=buf)
    assert buf.getvalue() == res.log_text()
    quiet = simnet.run(cfg, keep_records=False)
    assert quiet.records is None
    assert np.array_equal(quiet.ingress, res.ingress)


def test_bandwidth_matrices_agree_with_records():
    cfg = small(broadcast="smart")
    res = simnet.run(cfg)
    egress = np.zeros_like(res.egress)
    ingress = np.zeros_like(res.ingress)
    seen = set()
    for r in res.records:
        t = r.timestamp_ms // cfg.tick_ms
        if r.transmission_id not in seen:
            seen.add(r.transmission_id)
            egress[t, r.sender_id] += r.size_bytes
        if r.receiver_id is not None:
            ingress[t, r.receiver_id] += r.size_bytes
    assert np.array_equal(egress, res.egress) and np.array_equal(ingress, res.ingress)


def test_every_message_record_is_one_packet():
    res = simnet.run(small(crypto="full", messages=[[0, 0, 5, "x"]]))
    for r in res.records:
        if r.comm_type == "MESSAGE":
            assert r.size_bytes == crypto.PACKET_SIZE
        if r.comm_type == "RESPONSE":
            assert (r.size_bytes - 2) % crypto.PACKET_SIZE == 0


def test_inactive_nodes_neither_send_nor_hear():
    cfg = small(start_window_ms=20_000)
    res = simnet.run(cfg)
    for i, s in enumerate(res.start_ticks):
        assert not res.egress[:s, i].any() and not res.ingress[:s, i].any()


def test_smart_digest_every_20_ticks_at_2s():
    cfg = small(broadcast="smart", ds_interval_ms=2000, devices=3)
    res = simnet.run(cfg)
    for i in range(cfg.devices):
        ts = sorted({r.timestamp_ms for r in res.records
                     if r.sender_id == i and r.comm_type == "DIGEST"})
        assert np.all(np.diff(ts) == 2000) and ts[0] == res.start_ticks[i] * cfg.tick_ms


def test_scripted_message_arrives_full_crypto():
    cfg = small(crypto="full", broadcast="simple", messages=[[1000, 0, 5, "hello"]])
    res = simnet.run(cfg)
    assert [d.text for d in res.nodes[5].inbox] == [b"hello"]


def test_random_walk_run_records_snapshots():
    cfg = small(movement="random_walk", minutes=0.05)
    res = simnet.run(cfg, keep_snapshots=True)
    assert len(res.snapshots) == cfg.n_ticks + 1


# -- temporal reachability ---------------------------------------------------

def reach_oracle(snaps, a, b):
    # time-expanded graph searched by networkx
    g = nx.DiGraph()
    n = snaps[0].n
    for r, s in enumerate(snaps):
        for v in range(n):
            g.add_edge((v, r), (v, r + 1))
            for w in s.neighbors[v]:
                g.add_edge((v, r), (w, r + 1))
    return any(nx.has_path(g, (a, 0), (b, r)) for r in range(len(snaps) + 1)
               if (b, r) in g)


snapshot_lists = st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                      .filter(lambda e: e[0] != e[1]), max_size=6), min_size=1, max_size=6),
    st.integers(0, n - 1), st.integers(0, n - 1)))


@given(snapshot_lists)
def test_good_path_matches_time_expanded_graph(case):
    n, rounds, a, b = case
    snaps = [TopologySnapshot.from_edges(n, e, r) for r, e in enumerate(rounds)]
    assert good_path_exists(snaps, a, b) == (a == b or reach_oracle(snaps, a, b))


def test_good_path_order_matters():
    s01 = TopologySnapshot.from_edges(3, [(0, 1)])
    s12 = TopologySnapshot.from_edges(3, [(1, 2)])
    assert good_path_exists([s01, s12], 0, 2)
    assert not good_path_exists([s12, s01], 0, 2)


def test_good_path_validation():
    s = TopologySnapshot.from_edges(3, [])
    with pytest.raises(ValueError):
        good_path_exists([], 0, 1)
    with pytest.raises(ValueError):
        good_path_exists([s], 0, 5)
    with pytest.raises(ValueError):
        good_path_exists([s, TopologySnapshot.from_edges(4, [])], 0, 1)


# -- scripted network ------------------------------------------------------

def honest(seed):
    return Node(NodeConfig(crypto.keygen(seed), send_rate_ms=100, broadcast_mode="simple"), seed)


def test_scripted_network_routes_and_reports():
    nodes = {0: honest(0), 1: honest(1)}
    net = ScriptedNetwork(nodes, 3, [2])
    obs = net.step(RoundScript(edges=[(0, 2), (1, 2)]))
    assert {(s, m) for s, m, _ in obs.received} == {(0, 2), (1, 2)}
    assert all(e.kind == "MESSAGE" for e in obs.events)
    pkt = obs.received[0][2].payload
    net.step(RoundScript(edges=[], injections=[(2, 1, pkt)]))
    assert crypto.message_id(pkt) in nodes[1].ds


def test_scripted_network_rejects_bad_scripts():
    nodes = {0: honest(0), 1: honest(1)}
    with pytest.raises(ScriptError):
        ScriptedNetwork(nodes, 3, [1])
    net = ScriptedNetwork(nodes, 3, [2])
    with pytest.raises(ScriptError):
        net.step(RoundScript(edges=[(0, 7)]))
    with pytest.raises(ScriptError):
        net.step(RoundScript(edges=[], sends=[(2, b"", b"")]))
    with pytest.raises(ScriptError):
        net.step(RoundScript(edges=[], injections=[(0, 1, bytes(255))]))
    with pytest.raises(ScriptError):
        simnet.adversary_script(nodes, 3, [2], [RoundScript(edges=[]),
                                                RoundScript(edges=[(0, 0)])])
    assert net.round == 0
