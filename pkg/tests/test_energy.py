import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from tcal.energy import (FN, FP, SCALE, TN, TP, EnergyModel, FrameErrors, brute_force_min, collect_errors,
                         load_errors, reduce_to_binary, save_errors, solve_graph, solve_graphs)
from tcal.maxflow import FlowNetwork
from tcal.tcgraph import CANDIDATE, DETECTION, TCConfig, build_graph, graph_from_nodes

from conftest import det, one_video_dataset

D, C = DETECTION, CANDIDATE
EPS = EnergyModel().eps_units          # 10 units of 1e-7


# -- canonical scenarios; expected values enumerated by hand ---------------

def test_flicker_single_detection_is_fp():
    # detection in frame 1 with the two candidates it spawns in frames 0 and 2:
    # TP costs two cut edges (2), FP costs 1 + eps with both candidates TN
    g = graph_from_nodes([(D, 1), (C, 0), (C, 2)], [(0, 1), (0, 2)])
    sol = solve_graph(g)
    assert sol.label_names() == ["FP", "TN", "TN"]
    assert sol.energy_units == SCALE + EPS
    assert sol.fp_count == {1: 1} and sol.fn_count == {}


def test_gap_candidate_is_fn():
    # detections in frames 0 and 2, candidate in frame 1 linked to both:
    # FN costs 1 + eps, TN cuts two edges (2), an FP detection costs 1 + eps plus a cut
    g = graph_from_nodes([(D, 0), (D, 2), (C, 1)], [(0, 2), (1, 2)])
    sol = solve_graph(g)
    assert sol.label_names() == ["TP", "TP", "FN"]
    assert sol.energy_units == SCALE + EPS
    assert sol.fn_count == {1: 1}


def test_single_edge_tie_reports_no_error():
    # TP/TN cuts one edge (1); TP/FN and FP/TN both cost 1 + eps
    g = graph_from_nodes([(D, 0), (C, 1)], [(0, 1)])
    sol = solve_graph(g)
    assert sol.label_names() == ["TP", "TN"]
    assert sol.energy_units == SCALE


def test_gap_fixture_from_detections():
    box = [10, 10, 30, 40]
    ds = one_video_dataset([[det(box)], [], [det(box)]])
    g = build_graph(ds, config=TCConfig(window=1))[0]
    sol = solve_graph(g)
    assert sol.fn_count == {1: 1} and sol.fp_count == {}


def test_fig2_fixture_errors(fig2_dataset):
    g = build_graph(fig2_dataset, config=TCConfig(window=2))[0]
    sol = solve_graph(g)
    assert sol.fp_count == {1: 1}
    assert sol.fn_count == {2: 1}
    lone = [n for n, node in enumerate(g.nodes()) if node.kind == DETECTION and node.origin == 1][0]
    assert sol.labels[lone] == FP


def test_isolated_pair_of_linked_detections_stay_tp():
    g = graph_from_nodes([(D, 0), (D, 1)], [(0, 1)])
    assert solve_graph(g).label_names() == ["TP", "TP"]


def test_empty_graph():
    g = graph_from_nodes([], [])
    assert solve_graph(g).energy_units == 0


def test_model_validation():
    with pytest.raises(ValueError):
        EnergyModel(epsilon=-1)
    with pytest.raises(ValueError):
        EnergyModel(epsilon=1.5e-7)
    assert EnergyModel(epsilon=0).max_safe_nodes() == 0
    assert EnergyModel().max_safe_nodes() >= 10 ** 5


def test_unary_tables():
    m = EnergyModel()
    inf = float("inf")
    assert m.unary(False) == (0.0, 1.000001, inf, inf)
    assert m.unary(True) == (inf, inf, 0.0, 1.000001)


# -- random graphs ---------------------------------------------------------

@st.composite
def random_graph(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    kinds = draw(st.lists(st.sampled_from([D, C]), min_size=n, max_size=n))
    if D not in kinds:
        kinds[0] = D
    frames = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if not (kinds[u] == C and kinds[v] == C)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    dets = [i for i, k in enumerate(kinds) if k == D]
    edges = set(chosen)
    for i, k in enumerate(kinds):
        if k == C and not any(i in e for e in edges):
            j = draw(st.sampled_from(dets))
            edges.add((min(i, j), max(i, j)))
    return graph_from_nodes(list(zip(kinds, frames)), sorted(edges))


@settings(max_examples=300, deadline=None)
@given(random_graph())
def test_min_cut_matches_brute_force(g):
    fast = solve_graph(g)
    slow = brute_force_min(g)
    assert fast.energy_units == slow.energy_units
    # the tie-breaking cost makes the error count part of the optimum
    assert int(np.isin(fast.labels, (FP, FN)).sum()) == int(np.isin(slow.labels, (FP, FN)).sum())


@settings(max_examples=200, deadline=None)
@given(random_graph())
def test_labels_are_feasible(g):
    sol = solve_graph(g)
    cand = g.is_candidate
    assert np.all(np.isin(sol.labels[cand], (TN, FN)))
    assert np.all(np.isin(sol.labels[~cand], (TP, FP)))


@settings(max_examples=100, deadline=None)
@given(random_graph(), st.randoms(use_true_random=False))
def test_solution_invariant_to_node_order(g, rnd):
    n = g.num_nodes
    perm = list(range(n))
    rnd.shuffle(perm)
    inv = np.argsort(perm)
    nodes = [(C if g.is_candidate[p] else D, int(g.frames[p])) for p in perm]
    edges = [(int(inv[u]), int(inv[v])) for u, v in g.edges.tolist()]
    h = graph_from_nodes(nodes, edges)
    a, b = solve_graph(g), solve_graph(h)
    assert a.energy_units == b.energy_units
    assert np.array_equal(a.labels[perm], b.labels)


@settings(max_examples=100, deadline=None)
@given(random_graph())
def test_binary_reduction_evaluates_like_four_label_energy(g):
    m = EnergyModel()
    be = reduce_to_binary(g, m)
    sol = brute_force_min(g)
    present = np.isin(sol.labels, (TP, FN))
    assert be.evaluate(present) == sol.energy_units


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 9), st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(0, 50)),
                                   max_size=30))
def test_max_flow_matches_scipy(n, arcs):
    net = FlowNetwork(n)
    cap = np.zeros((n, n), dtype=np.int32)
    for u, v, c in arcs:
        u, v = u % n, v % n
        if u == v:
            continue
        net.add_edge(u, v, c)
        cap[u, v] += c
    want = maximum_flow(csr_matrix(cap), 0, n - 1).flow_value
    assert net.max_flow(0, n - 1) == want
    # the source side is a cut of exactly that capacity
    side = np.array(net.source_side(0))
    assert int(cap[np.ix_(side, ~side)].sum()) == want


def test_flow_network_rejects_negative_capacity():
    with pytest.raises(ValueError):
        FlowNetwork(2).add_edge(0, 1, -1)


def test_parallel_solve_matches_serial():
    rng = np.random.default_rng(0)
    graphs = []
    for _ in range(12):
        n = int(rng.integers(2, 8))
        nodes = [(D, int(f)) for f in rng.integers(0, 4, n)] + [(C, 1)]
        edges = [(i, i + 1) for i in range(n - 1)] + [(0, n)]
        graphs.append(graph_from_nodes(nodes, edges))
    a = solve_graphs(graphs, jobs=1)
    b = solve_graphs(graphs, jobs=2)
    assert [s.energy_units for s in a] == [s.energy_units for s in b]
    assert all(np.array_equal(x.labels, y.labels) for x, y in zip(a, b))


def test_errors_roundtrip(tmp_path, fig2_dataset):
    graphs = build_graph(fig2_dataset, config=TCConfig(window=2))
    errors = collect_errors(graphs, solve_graphs(graphs), {"v0": 4})
    assert [(fe.frame, fe.fp, fe.fn) for fe in errors["v0"]] == [(0, 0, 0), (1, 1, 0), (2, 0, 1), (3, 0, 0)]
    save_errors(errors, tmp_path)
    back = load_errors(tmp_path)
    assert back == errors
    assert isinstance(back["v0"][0], FrameErrors)
