import json

import numpy as np
import pytest

from geomherd.agent_graph import (
    AgentGraphSnapshot,
    GraphConfig,
    agreement_matrix,
    agreement_weight,
    build_jaccard_snapshots,
    build_snapshot,
    build_snapshots,
    cosine_matrix,
    edge_density,
    heading_features,
    knn_graph,
    read_snapshots,
    snapshot_times,
    write_snapshots,
)
from geomherd.substrates import (
    SUBCRITICAL,
    SUPERCRITICAL,
    ActionTrajectory,
    CwsConfig,
    SimulationError,
    VicsekConfig,
    build_sweep,
    config_from_dict,
    derive_seed,
    first_crossing,
    polarization,
    quantize_headings,
    read_trajectory,
    simulate_cws,
    simulate_vicsek,
    sweep_specs,
    tanh_slope,
    write_trajectory,
)


def traj_from_codes(codes, symbols=(-1, 0, 1)):
    codes = np.asarray(codes)
    acts = np.asarray(symbols)[codes]
    T = codes.shape[0]
    return ActionTrajectory(acts, np.ones((T, 0)), np.zeros(T), SUBCRITICAL, None, {"symbols": list(symbols)})


# ---------------------------------------------------------------- CWS


def test_cws_quiet_fixed_point():
    cfg = CwsConfig(coupling=0.0, noise_std=0.0, signal_std=0.0, group_signal_std=0.0, bias_std=0.0,
                    price_noise=0.0, horizon=200)
    tr = simulate_cws(cfg)
    assert np.all(tr.actions == 0)
    assert np.all(tr.order_param == 0)
    assert tr.event_time is None
    assert tr.label == SUBCRITICAL


def test_cws_shapes_and_labels():
    tr = simulate_cws(CwsConfig(coupling=2.5, horizon=400, ramp_start=0, ramp_steps=100, seed=1))
    assert tr.actions.shape == (400, 66)
    assert tr.prices.shape == (400, 4)
    assert set(np.unique(tr.actions)) <= {-1, 0, 1}
    assert tr.label == SUPERCRITICAL
    assert tr.event_time is not None
    # event time is the direct threshold scan of the order parameter
    assert tr.event_time == int(np.argmax(tr.order_param > 0.5)) + 1


def test_cws_event_time_median_finite_at_18():
    taus = [simulate_cws(CwsConfig(coupling=1.8, seed=derive_seed(0, 3, r))).event_time for r in range(20)]
    found = [t for t in taus if t is not None]
    assert len(found) >= 10


def test_cws_seed_determinism():
    a = simulate_cws(CwsConfig(seed=11, horizon=300))
    b = simulate_cws(CwsConfig(seed=11, horizon=300))
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.prices, b.prices)


def test_cws_validation():
    with pytest.raises(ValueError):
        CwsConfig(coupling=-1).validate()
    with pytest.raises(ValueError):
        CwsConfig(n_groups=0).validate()
    with pytest.raises(ValueError):
        CwsConfig(event_threshold=1.5).validate()


def test_cws_nonfinite_state_raises():
    with pytest.raises(SimulationError):
        simulate_cws(CwsConfig(coupling=2.5, ramp_steps=None, impact_coeff=50.0, horizon=100, seed=0))


def test_tanh_slope_limits():
    assert tanh_slope(0.0) == 1.0
    z = np.random.default_rng(0).normal(0, 0.8, 400_000)
    assert tanh_slope(0.8) == pytest.approx(np.mean(1 - np.tanh(z) ** 2), abs=2e-3)


def test_first_crossing_rules():
    s = np.array([0.1, 0.6, 0.2, 0.6, 0.7, 0.8, 0.9])
    assert first_crossing(s, 0.5) == 2
    assert first_crossing(s, 0.5, consecutive=3) == 4
    assert first_crossing(s, 0.5, start=2) == 4
    assert first_crossing(s, 0.95) is None


# ---------------------------------------------------------------- Vicsek


def test_vicsek_zero_noise_aligns():
    tr = simulate_vicsek(VicsekConfig(eta=0.0, n_particles=100, box_size=5, horizon=300, seed=2))
    assert tr.order_param[-1] > 0.99
    assert tr.event_time is not None
    assert tr.label == SUPERCRITICAL


def test_vicsek_high_noise_disordered_at_low_density():
    tr = simulate_vicsek(VicsekConfig(eta=2.5, box_size=20, horizon=600, seed=1))
    codes = tr.actions
    assert codes.min() >= 0 and codes.max() < 8
    assert np.median(tr.order_param[-200:]) < 0.5
    assert tr.label == SUBCRITICAL


def test_polarization_and_quantization():
    assert polarization(np.zeros(10)) == pytest.approx(1.0)
    assert polarization(np.array([0.0, np.pi])) == pytest.approx(0.0, abs=1e-12)
    q = quantize_headings(np.array([0.0, np.pi / 4 - 1e-9, -1e-9, 2 * np.pi]), 8)
    assert q.tolist() == [0, 0, 7, 0]


# ---------------------------------------------------------------- sweeps and I/O


def test_sweep_counts_and_ids():
    specs = sweep_specs("cws", [0.5, 0.8, 1.2, 1.8, 2.5], 80)
    assert len(specs) == 400
    labels = [c.label for _, c in specs]
    assert labels.count(SUPERCRITICAL) == 240 and labels.count(SUBCRITICAL) == 160
    assert len(sweep_specs("vicsek", [0.5, 1.0, 1.6, 2.0, 2.5], 20)) == 100
    ids = [tid for tid, _ in specs]
    assert len(set(ids)) == len(ids)
    assert len({c.seed for _, c in specs}) == 400


def test_derive_seed_is_stable():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)


def test_sweep_rejects_bad_input():
    with pytest.raises(ValueError):
        sweep_specs("cws", [], 3)
    with pytest.raises(ValueError):
        sweep_specs("lattice", [1.0], 1)
    with pytest.raises(ValueError):
        config_from_dict("cws", {"temperature": 1})


def test_trajectory_roundtrip_byte_identical(tmp_path):
    (tr,) = build_sweep("cws", [1.2], 1, params={"horizon": 250})
    d1, s1 = write_trajectory(tr, tmp_path / "a")
    back = read_trajectory(tmp_path / "a")
    assert np.array_equal(back.actions, tr.actions)
    assert np.allclose(back.prices, tr.prices, rtol=0, atol=0)
    assert back.event_time == tr.event_time and back.label == tr.label
    (again,) = build_sweep("cws", [1.2], 1, params={"horizon": 250})
    d2, s2 = write_trajectory(again, tmp_path / "b")
    assert d1.read_bytes() == d2.read_bytes()
    first = json.loads(d1.read_text().splitlines()[0])
    assert set(first) == {"step", "actions", "prices", "V_a"} and first["step"] == 1


# ---------------------------------------------------------------- graph


def test_agreement_weight_examples():
    assert agreement_weight([1, 0, -1], [1, 0, -1]) == 1.0
    assert agreement_weight([1, 1, 1], [0, 0, 0]) == 0.0
    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, size=(100, 200))
    A = agreement_matrix(x, 3)
    iu = np.triu_indices(200, 1)
    assert A[iu].mean() == pytest.approx(1 / 3, abs=0.02)
    assert A[0, 1] == agreement_weight(x[:, 0], x[:, 1])


def test_unanimous_window_gives_complete_unit_graph():
    tr = traj_from_codes(np.full((100, 6), 2))
    g = build_snapshot(tr, 100, GraphConfig())
    assert g.n_edges == 15 and np.all(g.weight == 1.0)


def test_subcritical_cws_graph_is_sparse():
    for seed in range(5):
        tr = simulate_cws(CwsConfig(coupling=0.0, seed=seed, horizon=300))
        snaps = build_snapshots(tr, GraphConfig(), until=300)
        dens = np.mean([edge_density(g) for g in snaps])
        codes = tr.symbol_codes()[200:300]
        direct = np.mean([np.mean(codes[:, i] == codes[:, j]) > 0.5
                          for i in range(66) for j in range(i + 1, 66)])
        assert dens < 0.05
        assert edge_density(snaps[-1]) == pytest.approx(direct)


def test_snapshot_grid():
    times = snapshot_times(350, GraphConfig())
    assert times[0] == 100 and times[-1] == 350 and np.all(np.diff(times) == 10)
    assert snapshot_times(350, GraphConfig(), until=205)[-1] == 200


def test_snapshot_window_excludes_future():
    codes = np.zeros((200, 4), dtype=int)
    codes[150:, 0] = 1
    tr = traj_from_codes(codes)
    g = build_snapshot(tr, 150, GraphConfig(window=100))
    assert g.n_edges == 6  # step 151 onwards is not visible at t = 150


def test_cosine_mode_is_complete():
    rng = np.random.default_rng(1)
    tr = traj_from_codes(rng.integers(0, 3, size=(100, 8)))
    g = build_snapshot(tr, 100, GraphConfig(edge_mode="cosine"))
    assert g.n_edges == 28
    C = cosine_matrix(tr.symbol_codes(), 3)
    assert np.allclose(C, agreement_matrix(tr.symbol_codes(), 3))


def test_knn_heading_graph_binary_and_symmetric():
    rng = np.random.default_rng(2)
    f = heading_features(rng.integers(0, 8, size=(50, 30)), 8)
    g = knn_graph(50, f, 5)
    assert np.all(g.weight == 1.0)
    assert np.all(g.degree() >= 5)


def test_jaccard_snapshots():
    holdings = [[{1, 2}, {3}], [{2}, {4}]]
    snaps = build_jaccard_snapshots(holdings, window=1)
    assert snaps[0].degenerate and snaps[0].n_edges == 0
    snaps = build_jaccard_snapshots([[{1, 2}, {2, 3}]], window=1)
    assert snaps[0].weight[0] == pytest.approx(1 / 3)


def test_snapshot_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        GraphConfig(threshold=1.0).validate()
    with pytest.raises(ValueError):
        GraphConfig(stride=200).validate()
    with pytest.raises(ValueError):
        AgentGraphSnapshot.from_edges(0, 3, [(0, 0, 1.0)])
    with pytest.raises(ValueError):
        AgentGraphSnapshot.from_edges(0, 3, [(0, 1, 1.0), (1, 0, 0.5)])
    g = AgentGraphSnapshot.from_edges(7, 4, [(0, 1, 0.6), (2, 3, 0.7)])
    write_snapshots([g], tmp_path)
    (back,) = read_snapshots(tmp_path)
    assert back.edges == g.edges and back.t == 7
