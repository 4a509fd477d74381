import numpy as np
import pytest

from geomherd.agent_graph import AgentGraphSnapshot, GraphConfig
from geomherd.ricci_flow import NOT_REACHED, FlowConfig, ricci_flow_tau, tau_sing_series
from geomherd.substrates import CwsConfig, simulate_cws
from geomherd.veff import FsqCodebook, behavioral_features, entropy_exp, lagged_xcorr, veff_at, veff_series

from oracles import orc_bruteforce


def dumbbell(k=4, w=1.0, bridge=1.0):
    left = [(i, j, w) for i in range(k) for j in range(i + 1, k)]
    right = [(i + k, j + k, w) for i in range(k) for j in range(i + 1, k)]
    return 2 * k, left + right + [(k - 1, k, bridge)]


# ---------------------------------------------------------------- Ricci flow


def test_two_node_graph_never_pinches():
    g = AgentGraphSnapshot.from_edges(0, 2, [(0, 1, 0.7)])
    tr = ricci_flow_tau(g, FlowConfig(max_iters=50))
    assert tr.tau_sing == NOT_REACHED and not tr.reached
    assert tr.stationary
    assert tr.weights[0] == pytest.approx(0.7)


def test_flow_matches_bruteforce_iterates():
    n, edges = dumbbell(3)
    g = AgentGraphSnapshot.from_edges(0, n, edges)
    cfg = FlowConfig(max_iters=6, step_size=0.1)
    tr = ricci_flow_tau(g, cfg)
    # replay the same update with the brute-force curvature
    pairs = list(zip(g.src.tolist(), g.dst.tolist()))
    w = g.weight.astype(float).copy()
    total = w.sum()
    mins = []
    for _ in range(cfg.max_iters + 1):
        k = orc_bruteforce(n, [(i, j, x) for (i, j), x in zip(pairs, w)])
        mins.append(k.min())
        w = w * (1 - cfg.step_size * k)
        w *= total / w.sum()
    assert np.allclose(tr.min_curvature, mins[: len(tr.min_curvature)], atol=1e-9)
    assert tr.total_weight[-1] == pytest.approx(total)


def test_dumbbell_pinches_by_weight_collapse():
    n, edges = dumbbell(4)
    g = AgentGraphSnapshot.from_edges(0, n, edges)
    tr = ricci_flow_tau(g, FlowConfig(max_iters=500))
    assert tr.reached and tr.pinch_reason == "weight"
    bridge = int(np.flatnonzero((g.src == 3) & (g.dst == 4))[0])
    # positively curved clique edges shrink, the bridge carries the freed weight
    assert tr.pinch_edge != bridge
    assert tr.weights[bridge] > 1.0


def test_flow_degenerate_and_validation():
    tr = ricci_flow_tau(AgentGraphSnapshot.empty(3, 5))
    assert tr.degenerate and tr.tau_sing == NOT_REACHED
    with pytest.raises(ValueError):
        FlowConfig(step_size=0.6, pinch_curvature=-2.0).validate()
    with pytest.raises(ValueError):
        FlowConfig(pinch_curvature=0.5).validate()
    assert tau_sing_series([AgentGraphSnapshot.empty(3, 5)]) == [NOT_REACHED]


# ---------------------------------------------------------------- V_eff


def test_veff_all_identical_is_one():
    codes = np.tile(np.array([[0], [1], [2], [1]] * 25), (1, 30))
    assert veff_at(codes, 3) == pytest.approx(1.0)


def test_veff_four_equal_groups():
    cb = FsqCodebook()
    f = np.repeat(np.array([[0.1, 0.1, 0.1], [0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]]), 5, axis=0)
    assert entropy_exp(cb.quantize(f)) == pytest.approx(4.0)


def test_veff_full_codebook_is_64():
    cb = FsqCodebook()
    centers = np.array([0.1, 0.3, 0.6, 0.9])
    grid = np.array(np.meshgrid(centers, centers, centers, indexing="ij")).reshape(3, -1).T
    codes = cb.quantize(grid)
    assert sorted(codes.tolist()) == list(range(64))
    assert entropy_exp(codes) == pytest.approx(64.0)


def test_veff_range_and_permutation_invariance():
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 3, size=(100, 66))
    v = veff_at(codes, 3)
    assert 1.0 <= v <= 64.0
    assert veff_at(codes[:, rng.permutation(66)], 3) == pytest.approx(v)


def test_behavioral_features_values():
    codes = np.array([[0, 2], [2, 2], [0, 2], [2, 2]])
    f = behavioral_features(codes, 3)
    assert f[:, 0].tolist() == [0.5, 1.0]
    assert f[:, 1].tolist() == [1.0, 0.0]
    assert np.all((f >= 0) & (f <= 1))


def test_veff_series_grid():
    tr = simulate_cws(CwsConfig(horizon=400, seed=3))
    t, v = veff_series(tr, GraphConfig())
    assert t[0] == 100 and t[-1] == 400 and v.size == t.size
    assert np.all((v >= 1) & (v <= 64))


def test_codebook_validation():
    with pytest.raises(ValueError):
        FsqCodebook(edges=(0.5, 0.25, 0.75))
    with pytest.raises(ValueError):
        FsqCodebook().quantize(np.zeros((3, 2)))


def test_lagged_xcorr_peak_at_shift():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(300)
    y = np.r_[np.zeros(4), x[:-4]]
    lags, c = lagged_xcorr(x, y, 8)
    assert lags[np.nanargmax(c)] == 4
    assert c[lags == 4][0] == pytest.approx(1.0)
