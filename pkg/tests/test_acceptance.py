"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Desk-scale pools are simulated once into a content-hashed cache under
``.cache/acceptance`` (override with ``GEOMHERD_ACCEPTANCE_CACHE``); a
cold first run takes tens of minutes, later runs reuse the cached
stages. Criteria with a runtime bound always run cold.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from geomherd import cli_pipeline as P
from geomherd.baselines import adjustment_factor, bridge_prediction, csad, lsv_from_counts, mean_field_sample
from geomherd.curvature import DistanceTable, LazyKernel, edge_curvatures, wasserstein1
from geomherd.detectors import DriftConfig, arl_benchmark, stylized_drift_benchmark
from geomherd.eval_harness import count_inversions
from geomherd.agent_graph import AgentGraphSnapshot
from geomherd.transport import sinkhorn_w1, transport_cost

from oracles import transport_vertices_min

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("GEOMHERD_ACCEPTANCE_CACHE", ROOT / ".cache" / "acceptance"))


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Headline desk-scale CWS run (10 seeds per coupling level)."""
    cfg = P.preset("headline-desk")
    cfg["cache_dir"] = str(CACHE)
    out = tmp_path_factory.mktemp("desk")
    cfg["output_dir"] = str(out)
    P.run_pipeline(cfg)
    return cfg, out


# ---------------------------------------------------------------- 1-3 transport and curvature


def test_c01_ot_oracle(report):
    rng = np.random.default_rng(2024)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(200):
        n = 8
        pts = rng.random((n, 2))
        D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        metric = DistanceTable(np.arange(n), D, n)
        sa = np.sort(rng.choice(n, size=rng.integers(1, 5), replace=False))
        sb = np.sort(rng.choice(n, size=rng.integers(1, 5), replace=False))
        mu = LazyKernel(int(sa[0]), sa, rng.dirichlet(np.ones(sa.size)))
        nu = LazyKernel(int(sb[0]), sb, rng.dirichlet(np.ones(sb.size)))
        got = wasserstein1(mu, nu, metric)
        worst = max(worst, abs(got - transport_vertices_min(mu.mass, nu.mass, D[np.ix_(sa, sb)])))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 10
    report(1, ok, f"max |W1 - oracle| = {worst:.2e} over 200 instances in {dt:.2f} s")
    assert ok


def test_c02_curvature_identities(report):
    single = edge_curvatures(AgentGraphSnapshot.from_edges(0, 2, [(0, 1, 0.8)]))[0]
    spreads = []
    for m in (4, 5):
        k = edge_curvatures(AgentGraphSnapshot.from_edges(0, m, [(i, j, 1.0) for i in range(m)
                                                                  for j in range(i + 1, m)]))
        spreads.append(float(k.max() - k.min()))
    left = [(i, j, 1.0) for i in range(4) for j in range(i + 1, 4)]
    right = [(i + 4, j + 4, 1.0) for i in range(4) for j in range(i + 1, 4)]
    g = AgentGraphSnapshot.from_edges(0, 8, left + right + [(3, 4, 1.0)])
    k = edge_curvatures(g)
    bridge = (g.src == 3) & (g.dst == 4)
    ok = single == 1.0 and max(spreads) <= 1e-9 and k[bridge][0] < k[~bridge].min()
    report(2, ok, f"single edge {single}, K4/K5 spread {max(spreads):.1e}, "
                  f"bridge {k[bridge][0]:.3f} < clique min {k[~bridge].min():.3f}")
    assert ok


def test_c03_sinkhorn_convergence(report):
    rng = np.random.default_rng(7)
    regs = (1.0, 0.1, 0.01, 0.001)
    monotone, final = 0, []
    for _ in range(50):
        m, n = rng.integers(2, 6, size=2)
        pts = rng.random((m + n, 2))
        C = np.linalg.norm(pts[:m, None] - pts[None, m:], axis=-1)
        a, b = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        exact = transport_cost(a, b, C).cost
        gaps = [abs(sinkhorn_w1(a, b, C, r) - exact) for r in regs]
        # once the plan sits on the LP vertex the gap is solver noise, bounded by tol * max cost
        floor = 1e-10 * C.max()
        monotone += all(y <= x + floor for x, y in zip(gaps, gaps[1:]))
        final.append(gaps[-1])
    ok = monotone == 50 and max(final) < 1e-2
    report(3, ok, f"monotone on {monotone}/50 instances; max final gap {max(final):.2e}")
    assert ok


# ---------------------------------------------------------------- 4 mean-field bridge


def test_c04_mean_field_bridge(report):
    t0 = time.perf_counter()
    sigma = 0.02
    rows = []
    for i, M in enumerate((0.0, 0.3, 0.6)):
        d = mean_field_sample(1000, 500, M, sigma, np.random.default_rng(100 + i))
        c, _ = csad(d["returns"])
        kbar = float(d["kappa"].mean())
        rows.append((kbar, float(c.mean()), float(bridge_prediction(kbar, sigma))))
    errs = [abs(m - p) / p for _, m, p in rows]
    decreasing = all(b[1] < a[1] for a, b in zip(rows, rows[1:])) and all(b[0] > a[0] for a, b in zip(rows, rows[1:]))
    dt = time.perf_counter() - t0
    ok = max(errs) < 0.05 and decreasing and dt < 60
    report(4, ok, "rel. errors " + ", ".join(f"{e:.4f}" for e in errs)
           + f"; CSAD decreasing in kappa: {decreasing}; {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 5-6 detector benchmarks


def test_c05_detector_arl(report):
    t0 = time.perf_counter()
    r = arl_benchmark(n_paths=10_000, seed=0)
    dt = time.perf_counter() - t0
    ok = abs(r.shewhart_arl - 44) <= 0.15 * 44 and r.cusum_arl <= 12 and dt < 60
    report(5, ok, f"Shewhart ARL {r.shewhart_arl:.1f}, CUSUM ARL {r.cusum_arl:.1f} (h = {r.cusum_h:.3f}); {dt:.1f} s")
    assert ok


def test_c06_stylized_drift(report):
    t0 = time.perf_counter()
    r = stylized_drift_benchmark(DriftConfig())
    dt = time.perf_counter() - t0
    ok = (abs(r.cusum_far - 0.10) <= 0.02 and abs(r.shewhart_far - 0.10) <= 0.02
          and abs(r.cusum_median_delay - 28) <= 0.2 * 28 and abs(r.shewhart_median_delay - 49) <= 0.2 * 49
          and abs(r.ratio - 1.75) <= 0.2 * 1.75 and r.cusum_detection == 1.0 and r.shewhart_detection == 1.0
          and dt < 60)
    report(6, ok, f"FAR {r.cusum_far:.3f}/{r.shewhart_far:.3f}, delays {r.cusum_median_delay:g}/"
                  f"{r.shewhart_median_delay:g}, ratio {r.ratio:.2f}, detection {r.cusum_detection:g}/"
                  f"{r.shewhart_detection:g}; {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 7-8 desk-scale sweep and ablation


def _sweep(out):
    import csv

    with open(out / "tables" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    return {(float(r["k_sigma"]), float(r["h_sigma"])): r for r in rows}


@pytest.mark.slow
def test_c07_sweep_shape(report, desk):
    cfg, out = desk
    cells = _sweep(out)
    ks = sorted({k for k, _ in cells})
    hs = sorted({h for _, h in cells})
    worst = {}
    for metric in ("recall_lead", "far_sub"):
        val = {c: float(r[metric]) for c, r in cells.items()}
        along_h = sum(count_inversions([val[(k, h)] for h in hs]) for k in ks)
        along_k = sum(count_inversions([val[(k, h)] for k in ks]) for h in hs)
        worst[metric] = (along_h, along_k)
    ok = len(cells) == 25 and all(max(v) <= 1 for v in worst.values())
    report(7, ok, "inversions (along h, along k): " + ", ".join(f"{m} {v}" for m, v in worst.items()))
    assert ok


@pytest.mark.slow
def test_c08_cosine_ablation(report, desk):
    cfg, _ = desk
    res = P.run_ablation(cfg, [{"edge_mode": "cosine"}], labels=["supercritical"], point="recall")
    (_, binary, _), (_, cosine, _) = res
    ok = binary.n_super == 30 and cosine.n_tp == 0 and binary.n_tp >= 1
    report(8, ok, f"leading fires at (k, h) = {tuple(cfg['detectors']['operating_points']['recall'])}: "
                  f"cosine {cosine.n_tp}/{cosine.n_super}, binary {binary.n_tp}/{binary.n_super}")
    assert ok


# ---------------------------------------------------------------- 9 Vicsek transfer


@pytest.mark.slow
def test_c09_vicsek_transfer(report, tmp_path):
    cfg = P.preset("vicsek-transfer")
    cfg["output_dir"] = str(tmp_path / "vicsek")
    t0 = time.perf_counter()
    P.run_pipeline(cfg)
    dt = time.perf_counter() - t0
    s = json.loads((tmp_path / "vicsek" / "summary.json").read_text())
    med = [row["median_kappa"] for row in s["levels"]]
    lo, hi = s["auroc_ci"]
    ok = s["strictly_decreasing"] and (lo > 0.5 or hi < 0.5) and dt < 300
    report(9, ok, "median kappa(tau*) by eta " + ", ".join(f"{m:.3f}" for m in med)
           + f"; AUROC {s['auroc']:.3f} CI [{lo:.3f}, {hi:.3f}]; {dt:.0f} s cold")
    assert ok


# ---------------------------------------------------------------- 10-12 desk-scale summaries


@pytest.mark.slow
def test_c10_veff_contraction(report, desk):
    _, out = desk
    v = json.loads((out / "summary.json").read_text())["veff_contraction"]
    ok = v["n"] > 0 and v["fraction_contracted"] >= 0.70 and v["all_in_range"]
    report(10, ok, f"contracted on {v['fraction_contracted']:.2f} of {v['n']} supercritical trajectories "
                   f"(need >= 0.70); all V_eff in [1, 64]: {v['all_in_range']}")
    assert ok


def test_c11_manifest_purity(report, tmp_path, monkeypatch):
    blobs = []
    for name, workers in (("a", "1"), ("b", "1"), ("c", "2")):
        monkeypatch.setenv(P.WORKERS_ENV, workers)
        cfg = P.preset("smoke")
        cfg["output_dir"] = str(tmp_path / name)
        P.run_pipeline(cfg)
        blobs.append((tmp_path / name / "manifest.json").read_bytes())
    ok = blobs[0] == blobs[1] == blobs[2]
    report(11, ok, f"manifests byte-identical across 2 reruns and workers 1 vs 2: {ok}")
    assert ok


@pytest.mark.slow
def test_c12_beta_minus_directionality(report, desk):
    _, out = desk
    b = json.loads((out / "summary.json").read_text())["beta_minus_margin"]
    lo, hi = b["ci"]
    ok = lo > 0 or hi < 0
    report(12, ok, f"recall - FAR = {b['recall_minus_far']:.3f}, 95% CI [{lo:.3f}, {hi:.3f}] "
                   f"at (k, h) = {tuple(b['operating_point'])}")
    assert ok


# ---------------------------------------------------------------- 13 LSV


def test_c13_lsv_degenerate(report):
    unanimous = lsv_from_counts([1], [12], [0]).h[0]
    bal = lsv_from_counts([1, 2], [3, 5], [3, 1], p_bar=0.5)
    af4 = adjustment_factor(4, 0.5)
    ok = (unanimous == 0.0 and math.isclose(bal.h[0], -bal.af[0], abs_tol=1e-15)
          and af4 == 0.1875)
    report(13, ok, f"unanimity H = {unanimous}, balanced H = {bal.h[0]:.4f} = -AF, AF(4, 0.5) = {af4!r}")
    assert ok
