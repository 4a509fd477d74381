import numpy as np
import pytest

from geomherd.curvature import (
    CurvatureConfig,
    DistanceTable,
    LazyKernel,
    edge_curvature,
    edge_curvatures,
    lazy_kernel,
    read_series,
    shortest_path_metric,
    snapshot_summary,
    summarize,
    wasserstein1,
    write_series,
)
from geomherd.agent_graph import AgentGraphSnapshot
from geomherd.transport import (
    SinkhornConvergenceError,
    TransportError,
    certify,
    sinkhorn_w1,
    transport_cost,
    w1_metric,
)

from oracles import dijkstra_pairs, orc_bruteforce, transport_vertices_min


def graph(n, edges, t=0):
    return AgentGraphSnapshot.from_edges(t, n, edges)


def stored(g):
    return [(int(i), int(j), float(w)) for i, j, w in zip(g.src, g.dst, g.weight)]


def complete(n, w=1.0):
    return [(i, j, w) for i in range(n) for j in range(i + 1, n)]


def dumbbell(k=4, w=1.0, bridge=1.0):
    left = [(i, j, w) for i in range(k) for j in range(i + 1, k)]
    right = [(i + k, j + k, w) for i in range(k) for j in range(i + 1, k)]
    return 2 * k, left + right + [(k - 1, k, bridge)]


LINE3 = np.abs(np.subtract.outer(np.arange(3.0), np.arange(3.0)))


# ---------------------------------------------------------------- transport


def test_three_point_line_example():
    assert w1_metric([0.5, 0.3, 0.2], [0.2, 0.3, 0.5], LINE3) == pytest.approx(0.6, abs=1e-12)
    assert transport_vertices_min([0.5, 0.3, 0.2], [0.2, 0.3, 0.5], LINE3) == pytest.approx(0.6, abs=1e-12)


def test_identical_and_point_masses():
    D = np.array([[0.0, 0.7], [0.7, 0.0]])
    assert w1_metric([0.4, 0.6], [0.4, 0.6], D) == 0.0
    assert w1_metric([1.0, 0.0], [0.0, 1.0], D) == pytest.approx(0.7)


def test_transport_cost_certificate_and_plan():
    rng = np.random.default_rng(3)
    a = rng.dirichlet(np.ones(5))
    b = rng.dirichlet(np.ones(4))
    C = rng.random((5, 4))
    res = transport_cost(a, b, C)
    assert np.allclose(res.plan.sum(1), a) and np.allclose(res.plan.sum(0), b)
    assert certify(a, b, C, res.plan, res.u, res.v) < 1e-9
    assert res.cost == pytest.approx(transport_vertices_min(a, b, C), abs=1e-9)


def test_transport_rejects_bad_input():
    with pytest.raises(ValueError):
        transport_cost([0.5, 0.5], [0.2, 0.3], np.ones((2, 2)))
    with pytest.raises(ValueError):
        transport_cost([-0.1, 1.1], [0.5, 0.5], np.ones((2, 2)))
    with pytest.raises(ValueError):
        transport_cost([0.5, 0.5], [0.5, 0.5], np.ones((3, 2)))


def test_certificate_detects_wrong_plan():
    a = b = np.array([0.5, 0.5])
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    bad = np.array([[0.0, 0.5], [0.5, 0.0]])
    with pytest.raises(TransportError):
        certify(a, b, C, bad, np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("seed", range(20))
def test_w1_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 5, size=2)
    a = rng.dirichlet(np.ones(m))
    b = rng.dirichlet(np.ones(n))
    pts = rng.random((m + n, 2))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    C = D[:m, m:]
    assert transport_cost(a, b, C).cost == pytest.approx(transport_vertices_min(a, b, C), abs=1e-9)


def test_sinkhorn_close_at_small_reg():
    assert sinkhorn_w1([0.5, 0.3, 0.2], [0.2, 0.3, 0.5], LINE3, 1e-3) == pytest.approx(0.6, abs=1e-2)


def test_sinkhorn_identical_kernels_near_zero():
    a = np.array([0.25, 0.25, 0.5])
    reg = 0.05
    assert sinkhorn_w1(a, a, LINE3, reg, tol=1e-8) <= reg * np.log(3) + 1e-12


def test_sinkhorn_nonconvergence_raises():
    with pytest.raises(SinkhornConvergenceError):
        sinkhorn_w1([0.5, 0.3, 0.2], [0.2, 0.3, 0.5], LINE3, 1e-3, max_iter=2)


# ---------------------------------------------------------------- kernels and metric


def test_lazy_kernel_examples():
    g = graph(2, [(0, 1, 0.8)])
    k = lazy_kernel(g, 0)
    assert dict(zip(k.support.tolist(), k.mass.tolist())) == {0: 0.5, 1: 0.5}
    star = graph(5, [(0, j, 0.7) for j in range(1, 5)])
    k = lazy_kernel(star, 0)
    assert dict(zip(k.support.tolist(), k.mass.tolist())) == pytest.approx({0: 0.5, 1: 0.125, 2: 0.125, 3: 0.125, 4: 0.125})
    g = graph(3, [(0, 1, 0.6), (0, 2, 0.9)])
    assert lazy_kernel(g, 0).mass == pytest.approx([0.5, 0.2, 0.3])


def test_isolated_node_kernel_raises():
    with pytest.raises(ValueError):
        lazy_kernel(graph(3, [(0, 1, 1.0)]), 2)


def test_shortest_path_lengths_are_weights():
    g = graph(3, [(0, 1, 0.6), (1, 2, 0.7)])
    assert shortest_path_metric(g).dist(0, 2) == pytest.approx(1.3)
    assert shortest_path_metric(graph(2, [(0, 1, 0.8)])).dist(0, 1) == pytest.approx(0.8)
    tri = [(0, 1, 0.9), (1, 2, 0.6), (0, 2, 0.6)]
    D = shortest_path_metric(graph(3, tri))
    assert D.dist(0, 1) == pytest.approx(0.9)
    assert np.allclose(D(np.arange(3), np.arange(3)), dijkstra_pairs(3, tri))


def test_wasserstein1_on_kernels_matches_oracle():
    rng = np.random.default_rng(7)
    pts = rng.random((6, 2))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    metric = DistanceTable(np.arange(6), D, 6)
    for _ in range(20):
        sa = np.sort(rng.choice(6, size=rng.integers(1, 5), replace=False))
        sb = np.sort(rng.choice(6, size=rng.integers(1, 5), replace=False))
        mu = LazyKernel(int(sa[0]), sa, rng.dirichlet(np.ones(sa.size)))
        nu = LazyKernel(int(sb[0]), sb, rng.dirichlet(np.ones(sb.size)))
        got = wasserstein1(mu, nu, metric)
        want = transport_vertices_min(mu.mass, nu.mass, D[np.ix_(sa, sb)])
        assert got == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------- curvature


@pytest.mark.parametrize("w", [0.3, 0.8, 1.0])
def test_single_edge_is_one(w):
    assert edge_curvatures(graph(2, [(0, 1, w)]))[0] == 1.0


def test_complete_graph_value():
    # closed form for uniform K_m: kappa = 1/2 + 1/(2(m-1))
    for m in (4, 5, 6):
        k = edge_curvatures(graph(m, complete(m, 0.9)))
        assert np.allclose(k, 0.5 + 0.5 / (m - 1), atol=1e-12)


def test_dumbbell_matches_bruteforce():
    n, edges = dumbbell(3)
    g = graph(n, edges)
    got = edge_curvatures(g)
    assert np.allclose(got, orc_bruteforce(n, stored(g)), atol=1e-9)
    is_bridge = (g.src == 2) & (g.dst == 3)
    assert got[is_bridge][0] < got[~is_bridge].min()


@pytest.mark.parametrize("seed", range(5))
def test_random_weighted_graph_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = 7
    edges = [(i, j, float(rng.uniform(0.3, 1.0))) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    if not edges:
        pytest.skip("empty draw")
    g = graph(n, edges)
    got = edge_curvatures(g)
    want = orc_bruteforce(n, stored(g))
    assert np.allclose(got, want, atol=1e-9)


def test_single_edge_function_and_twin_shortcut_agree():
    n, edges = dumbbell(4, w=0.9, bridge=0.6)
    g = graph(n, edges)
    fast = edge_curvatures(g)
    slow = [edge_curvature(g, (i, j)).kappa for i, j, _ in stored(g)]
    assert np.allclose(fast, slow, atol=1e-12)


def test_sinkhorn_transport_close_to_exact():
    n, edges = dumbbell(4)
    g = graph(n, edges)
    exact = edge_curvatures(g)
    approx = edge_curvatures(g, transport="sinkhorn", reg=1e-3)
    assert np.max(np.abs(exact - approx)) < 2e-2


def test_weight_override_equals_rebuilt_graph():
    n, edges = dumbbell(3)
    g = graph(n, edges)
    w = np.linspace(0.4, 1.0, len(edges))
    rebuilt = graph(n, [(i, j, float(x)) for (i, j, _), x in zip(stored(g), w)])
    assert np.allclose(edge_curvatures(g, weight=w), edge_curvatures(rebuilt))


# ---------------------------------------------------------------- summaries


def test_summary_examples():
    s = summarize(0, [1.0, 1.0])
    assert s.frac_neg == 0 and s.mean_pos == 1
    s = summarize(0, [-0.5, -0.5])
    assert s.frac_neg == 1 and np.isnan(s.mean_pos)
    s = summarize(0, [0.5, 0.05, -0.3])
    assert (s.n_pos, s.n_zero, s.n_neg) == (1, 1, 1)
    assert s.frac_neg == pytest.approx(1 / 3) and s.mean_pos == 0.5


def test_summary_threshold_is_strict_and_nan_excluded():
    s = summarize(0, [0.1, -0.1, np.nan])
    assert (s.n_pos, s.n_zero, s.n_neg, s.n_undefined) == (0, 2, 0, 1)


def test_empty_snapshot_is_missing():
    s = snapshot_summary(AgentGraphSnapshot.empty(5, 4))
    assert s.degenerate and np.isnan(s.mean_all)


def test_series_roundtrip(tmp_path):
    rows = [summarize(10, [0.5, -0.3]), snapshot_summary(AgentGraphSnapshot.empty(20, 3))]
    p = write_series(tmp_path / "s.csv", rows, {"tau_sing": [4, -1]})
    tab = read_series(p)
    assert tab["t"].tolist() == [10, 20]
    assert tab["tau_sing"].tolist() == [4, -1]
    assert np.isnan(tab["mean_all"][1])


def test_config_validation():
    with pytest.raises(ValueError):
        CurvatureConfig(alpha=1.0).validate()
    with pytest.raises(ValueError):
        CurvatureConfig(transport="greedy").validate()
