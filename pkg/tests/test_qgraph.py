import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicap import autodiff as ad
from dicap.channels import ChannelSpec, FixedPolicy, channel_step, h2, initial_states, sample_trajectory
from dicap.clustering import kmeans
from dicap.qgraph import (
    BoundConfig,
    NotInPQ,
    QGraph,
    QGraphError,
    QNet,
    QNetConfig,
    belief_rollout,
    conditional_mi,
    count_qgraphs,
    cross_entropy,
    extract_qgraph,
    graph_from_beliefs,
    joint_transition,
    qgraph_bound,
    select_qgraph,
    stationary_joint,
    stationary_vector,
    train_qnet,
    trivial_graph,
)

POST_GRAPH = QGraph(np.array([[0, 1], [0, 1]]), np.eye(2))


# cross entropy ----------------------------------------------------------------


def test_cross_entropy_examples():
    states = np.array([[0, 1], [1, 1]])
    q = np.zeros((2, 2, 2))
    q[0, 0, 0] = q[0, 1, 1] = q[1, 0, 1] = q[1, 1, 1] = 1.0
    assert cross_entropy(q, states).item() == 0.0
    assert cross_entropy(np.full((1, 1, 2), 0.5), np.array([[1]])).item() == pytest.approx(math.log(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(3), size=(5, 2))
    assert cross_entropy(q, rng.integers(0, 3, (5, 2))).item() >= 0


def test_qnet_outputs_on_simplex(rng):
    net = QNet(2, 2, rng)
    qs = net.run(rng.integers(0, 2, (30, 4)))
    assert qs.shape == (30, 4, 2)
    assert np.all(qs >= 0) and np.allclose(qs.sum(-1), 1)
    assert np.all(net.initial(3) == 0)


def test_qnet_rejects_channels_without_state():
    with pytest.raises(QGraphError):
        train_qnet(ChannelSpec.bsc(0.1), FixedPolicy([0.5, 0.5]), QNetConfig(iterations=1), False)
    with pytest.raises(QGraphError):
        train_qnet(ChannelSpec.awgn(1.0, [-1.0, 1.0]), FixedPolicy([0.5, 0.5]), QNetConfig(iterations=1), False)


def test_qnet_gradient_finite_difference(rng):
    from tests.conftest import check_grads

    net = QNet(2, 2, rng, fc=(5,))
    ys = rng.integers(0, 2, (4, 3))
    ss = rng.integers(0, 2, (4, 3))
    assert check_grads(lambda: cross_entropy(net.sequence(ys, net.initial(3)), ss), net.params) <= 1e-5


@pytest.fixture(scope="module")
def post_qnet():
    spec = ChannelSpec.post(0.5)
    net, losses = train_qnet(spec, FixedPolicy([0.5, 0.5]), QNetConfig(iterations=150, lanes=32), False, seed=0)
    return spec, net, losses


def test_post_qnet_tracks_the_output(post_qnet):
    spec, net, losses = post_qnet
    assert losses[-1] < losses[0]
    tr = sample_trajectory(spec, FixedPolicy([0.5, 0.5]), 2000, False, np.random.default_rng(3), batch=5)
    qs = net.run(tr.y)
    picked = np.take_along_axis(qs, tr.y[..., None], -1)[..., 0]
    assert np.all(tr.s == tr.y)
    assert picked.min() >= 0.99


def test_post_extraction_k2(post_qnet):
    spec, net, _ = post_qnet
    g = extract_qgraph(net, spec, FixedPolicy([0.5, 0.5]), 100_000, 2, seed=1, feedback=False)
    assert g.is_deterministic_complete() and g.purity >= 0.99
    # node j is the one whose centroid puts its mass on state j
    node_of = {int(np.argmax(c)): j for j, c in enumerate(g.centroids)}
    for i in range(2):
        for y in range(2):
            assert g.succ[i, y] == node_of[y]
    with pytest.raises(QGraphError):
        extract_qgraph(net, spec, FixedPolicy([0.5, 0.5]), 99_999, 2)


# graphs ---------------------------------------------------------------------------


def test_graph_invariants_and_serialization():
    g = QGraph(np.array([[1, 0], [2, 1], [0, 2]]), np.array([[0.1, 0.9], [0.5, 0.5], [0.8, 0.2]]), 0.995)
    assert g.is_deterministic_complete()
    assert g.adjacency.shape == (3, 3, 2) and g.adjacency.sum() == 6
    assert g.reachable() == {0, 1, 2}
    back = QGraph.from_json(g.to_json())
    assert np.array_equal(back.succ, g.succ) and np.allclose(back.centroids, g.centroids)
    assert back.purity == g.purity
    d = json.loads(g.to_json())
    assert sorted(map(tuple, d["edges"])) == sorted((i, int(g.succ[i, y]), y) for i in range(3) for y in range(2))
    dot = g.to_dot()
    assert dot.startswith("digraph") and dot.count("->") == 6 and 'q2 -> q0 [label="0"]' in dot
    dup = json.loads(g.to_json())
    dup["edges"].append([0, 2, 0])
    with pytest.raises(QGraphError):
        QGraph.from_json(json.dumps(dup))
    with pytest.raises(QGraphError):
        QGraph(np.array([[0, 3]]), np.ones((1, 1)))


def test_trivial_graph_is_self_loops():
    g = trivial_graph(3)
    assert g.n_nodes == 1 and np.all(g.succ == 0) and g.is_deterministic_complete()


def test_graph_from_exact_beliefs():
    # beliefs copied from the output, as for POST
    rng = np.random.default_rng(0)
    ys = rng.integers(0, 2, (3000, 4))
    qs = np.eye(2)[ys]
    g = graph_from_beliefs(qs, ys, 2)
    node_of = {int(np.argmax(c)): j for j, c in enumerate(g.centroids)}
    assert all(g.succ[i, y] == node_of[y] for i in range(2) for y in range(2))
    assert g.purity == 1.0
    with pytest.raises(QGraphError, match="increase the trajectory length"):
        graph_from_beliefs(qs, np.zeros_like(ys), 2, ny=2)


def test_select_qgraph_prefers_smallest_pure_k():
    rng = np.random.default_rng(1)
    ys = rng.integers(0, 2, (4000, 3))
    qs = np.eye(2)[ys] * 0.9 + 0.05
    g, table = select_qgraph(qs, ys, 4, k_min=1)
    # k=1 is complete with purity 1 (a single node), so it wins
    assert g.n_nodes == 1 and table[0][0] == 1
    g, table = select_qgraph(qs, ys, 4, k_min=2)
    assert g.n_nodes == 2 and g.purity == 1.0


# stationary chain -------------------------------------------------------------------


def test_symmetric_chain_uniform():
    P = np.array([[0.3, 0.7], [0.7, 0.3]])
    assert np.allclose(stationary_vector(P), [0.5, 0.5], atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31))
def test_stationary_residual(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n), size=n)
    pi = stationary_vector(P)
    assert abs(pi.sum() - 1) <= 1e-12 and np.all(pi >= 0)
    assert np.abs(pi @ P - pi).max() <= 1e-12


def test_periodic_chain_residual():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    pi = stationary_vector(P)
    assert np.abs(pi @ P - pi).max() <= 1e-12 and np.allclose(pi, 1 / 3)


def test_reducible_chain_not_in_pq():
    P = np.eye(2)
    with pytest.raises(NotInPQ):
        stationary_vector(P)
    # transient state plus a single closed class is fine
    P = np.array([[0.5, 0.5, 0.0], [0.0, 0.2, 0.8], [0.0, 0.6, 0.4]])
    pi = stationary_vector(P)
    assert pi[0] == pytest.approx(0.0, abs=1e-12)


def test_joint_transition_is_stochastic():
    rng = np.random.default_rng(2)
    spec = ChannelSpec.ising()
    g = QGraph(np.array([[1, 0], [2, 1], [0, 2]]), np.ones((3, 2)) / 2)
    pxsq = rng.dirichlet(np.ones(2), size=(2, 3))
    P = joint_transition(spec, g, pxsq)
    assert P.shape == (6, 6) and np.allclose(P.sum(1), 1)
    with pytest.raises(QGraphError):
        joint_transition(spec, g, pxsq[:, :2])
    with pytest.raises(QGraphError):
        joint_transition(spec, g, pxsq * 2)


def test_post_stationary_matches_simulation():
    spec = ChannelSpec.post(0.5)
    pxsq = np.full((2, 2, 2), 0.5)
    pi = stationary_joint(spec, POST_GRAPH, pxsq)
    rng = np.random.default_rng(0)
    lanes, steps = 100, 10_000
    s = initial_states(spec, lanes, rng)
    q = np.zeros(lanes, dtype=int)
    occ = np.zeros((2, 2))
    for _ in range(steps):
        np.add.at(occ, (s, q), 1)
        x = rng.integers(0, 2, lanes)
        y, s = channel_step(spec, s, x, rng)
        q = POST_GRAPH.succ[q, y]
    occ /= occ.sum()
    assert np.abs(occ - pi).max() <= 0.005


def test_unreachable_input_law_flagged():
    # Ising with x = 0 always: the state freezes at 0 while node 1 is never left
    spec = ChannelSpec.ising()
    g = QGraph(np.array([[0, 1], [1, 1]]), np.eye(2))
    pxsq = np.zeros((2, 2, 2))
    pxsq[..., 0] = 1.0
    with pytest.raises(NotInPQ):
        stationary_joint(spec, g, pxsq)


# bounds ---------------------------------------------------------------------------


def test_bsc_trivial_graph_bound():
    res = qgraph_bound(ChannelSpec.bsc(0.1), trivial_graph(2), BoundConfig(restarts=3))
    assert abs(res.c_ub - (1 - h2(0.1))) <= 0.005
    assert np.allclose(res.pxsq[0, 0], 0.5, atol=0.01)


def test_conditional_mi_degenerates_to_mi():
    spec = ChannelSpec.z_channel(0.5)
    px = np.array([[[0.6, 0.4]]])
    from dicap.channels import mutual_information, output_law

    assert conditional_mi(spec, trivial_graph(2), px) / math.log(2) == pytest.approx(
        mutual_information(output_law(spec)[0], [0.6, 0.4]), abs=1e-12
    )


@pytest.mark.parametrize("spec", [ChannelSpec.ising(), ChannelSpec.trapdoor(), ChannelSpec.post(0.5)], ids=lambda s: s.kind)
def test_bound_never_exceeds_output_entropy(spec):
    g = QGraph(np.array([[1, 0], [0, 1]]), np.eye(2) * 0.5 + 0.25)
    res = qgraph_bound(spec, g, BoundConfig(restarts=3), c_lb_proxy=0.1)
    assert 0 < res.c_ub <= 1.0 and len(res.restarts) == 3
    assert res.gap == res.c_ub - 0.1
    assert res.as_dict()["c_ub_bits"] == res.c_ub
    # a larger graph refines the bound: the POST graph is tight for POST (its capacity is the Z value)


def test_bound_seeded_determinism():
    spec = ChannelSpec.ising()
    a = qgraph_bound(spec, POST_GRAPH, BoundConfig(restarts=4), seed=3)
    b = qgraph_bound(spec, POST_GRAPH, BoundConfig(restarts=4), seed=3)
    assert a.c_ub == b.c_ub and np.array_equal(a.pxsq, b.pxsq)


# Lemma 2 -------------------------------------------------------------------------


def test_lemma2_spot_values():
    c = count_qgraphs(1, 2)
    assert c.value == 1 and c.holds and c.log_value == pytest.approx(c.log_bound, abs=1e-15)
    assert count_qgraphs(2, 2).value == 8 and math.exp(count_qgraphs(2, 2).log_bound) == pytest.approx(4)
    assert count_qgraphs(3, 2).value == Fraction(243, 2)
    assert float(count_qgraphs(3, 2).value) == 121.5
    with pytest.raises(ValueError):
        count_qgraphs(0, 2)
    with pytest.raises(ValueError):
        count_qgraphs(2, 1)


@pytest.mark.parametrize("ny", [2, 3, 4])
def test_lemma2_inequality(ny):
    for m in range(1, 21):
        c = count_qgraphs(m, ny)
        assert c.holds
        assert c.log_value == pytest.approx(math.log(c.value.numerator) - math.log(c.value.denominator), rel=1e-12)


def test_lemma2_large_m_log_space():
    c = count_qgraphs(60, 4)
    assert c.holds and math.isfinite(c.log_value)


# k-means ---------------------------------------------------------------------------


def test_kmeans_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    centers = np.array([[0.0, 0.0], [5.0, 5.0], [0.0, 6.0]])
    pts = np.concatenate([c + 0.1 * rng.normal(size=(200, 2)) for c in centers])
    res = kmeans(pts, 3, seed=1)
    assert np.allclose(np.sort(res.centroids, axis=0), np.sort(centers, axis=0), atol=0.05)
    assert len(set(res.labels[:200])) == 1 and len(set(res.labels)) == 3


def test_kmeans_seeded_and_best_of_restarts():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(500, 3))
    a, b = kmeans(pts, 5, seed=4), kmeans(pts, 5, seed=4)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.labels, b.labels)
    assert kmeans(pts, 5, seed=4, restarts=10).inertia <= kmeans(pts, 5, seed=4, restarts=1).inertia + 1e-9


def test_kmeans_errors_and_duplicates():
    with pytest.raises(ValueError):
        kmeans(np.zeros((10, 2)), 2)
    with pytest.raises(ValueError):
        kmeans(np.zeros((10, 2)), 0)
    pts = np.array([[0.0], [0.0], [0.0], [1.0]])
    res = kmeans(pts, 2)
    assert res.inertia == 0.0 and np.allclose(res.centroids.ravel(), [0, 1])
