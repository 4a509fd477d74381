"""Command-line entry point: ``geomherd <subcommand>``.

Exit codes: 0 success, 2 invalid input or config, 3 runtime failure.
The worker count comes from the ``GEOMHERD_WORKERS`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import cli_pipeline as P
from .agent_graph import GraphConfig, build_snapshots, read_snapshots, write_snapshots
from .baselines import aa_mi_series, lsv_series, price_corr_curvature, windowed_csad
from .curvature import CurvatureConfig, read_series, snapshot_summary, write_series
from .detectors import (
    ALARM_COLUMNS,
    AlarmRecord,
    DetectorConfig,
    DriftConfig,
    arl_benchmark,
    stylized_drift_benchmark,
)
from .eval_harness import (
    N_BOOT,
    calibration_sweep,
    emit_tables,
    pooled_metrics,
    report_json,
    score_trajectory,
)
from .io import write_csv, write_json
from .ricci_flow import FlowConfig, ricci_flow_tau
from .substrates import config_from_dict, read_trajectory, simulate, sweep_specs, write_trajectory
from .veff import FsqCodebook, veff_series

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _experiment(args) -> dict:
    if bool(args.config) == bool(args.preset):
        raise UsageError("give exactly one of --config or --preset")
    cfg = P.load_config(args.config) if args.config else P.preset(args.preset)
    if getattr(args, "out", None):
        cfg["output_dir"] = str(args.out)
    return cfg


# ---------------------------------------------------------------- per-stage commands


def cmd_simulate(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    out = Path(args.out)
    if "levels" in doc:
        specs = sweep_specs(args.kind, doc["levels"], int(doc.get("seeds_per_level", 1)), int(doc.get("seed", 0)),
                            doc.get("params", {}))
    else:
        cfg = config_from_dict(args.kind, doc)
        cfg.validate()
        specs = [(args.traj_id or f"{args.kind}-single", cfg)]
    for tid, cfg in specs:
        traj = simulate(cfg, tid)
        write_trajectory(traj, out / tid)
        print(f"{tid} label={traj.label} event_time={traj.event_time}")
    return EXIT_OK


def _graph_config(args) -> GraphConfig:
    g = GraphConfig(window=args.window, threshold=args.threshold, stride=args.stride, edge_mode=args.mode,
                    knn_k=args.knn_k)
    g.validate()
    return g


def cmd_graph(args) -> int:
    traj = read_trajectory(args.traj)
    snaps = build_snapshots(traj, _graph_config(args))
    write_snapshots(snaps, args.out)
    print(f"wrote {len(snaps)} snapshots to {args.out}")
    return EXIT_OK


def cmd_curvature(args) -> int:
    snaps = read_snapshots(args.snapshots)
    if not snaps:
        raise UsageError(f"no snapshot files in {args.snapshots}")
    ccfg = CurvatureConfig(alpha=args.alpha, transport=args.transport)
    ccfg.validate()
    sums = [snapshot_summary(g, ccfg) for g in snaps]
    extra = {}
    if args.flow:
        fcfg = FlowConfig(alpha=args.alpha)
        extra["tau_sing"] = [ricci_flow_tau(g, fcfg).tau_sing for g in snaps]
    if args.veff:
        if not args.traj:
            raise UsageError("--veff needs --traj")
        traj = read_trajectory(args.traj)
        gcfg = GraphConfig(window=args.window, stride=args.stride)
        t, v = veff_series(traj, gcfg, FsqCodebook())
        lookup = dict(zip(t.tolist(), v.tolist()))
        extra["v_eff"] = [lookup.get(g.t, float("nan")) for g in snaps]
    write_series(args.out, sums, extra)
    print(f"wrote {len(sums)} rows to {args.out}")
    return EXIT_OK


def _series_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
    else:
        files = [path]
    if not files:
        raise UsageError(f"no series CSV files under {path}")
    return files


def cmd_detect(args) -> int:
    grid = _read_json(args.grid) if args.grid else {}
    unknown = set(grid) - {"signal", "k_sigma", "h_sigma", "baseline_window", "kendall_window", "kendall_thresh",
                           "min_cv", "skip_initial", "ewma_lambda"}
    if unknown:
        raise UsageError(f"unknown grid keys: {sorted(unknown)}")
    signal = grid.get("signal", "kappa_pos")
    if signal not in P.SIGNALS:
        raise UsageError(f"unknown signal {signal!r}")
    _, column, _, _ = P.SIGNALS[signal]
    base = DetectorConfig(**{k: grid[k] for k in ("baseline_window", "kendall_window", "kendall_thresh", "min_cv",
                                                  "skip_initial", "ewma_lambda") if k in grid})
    ks = grid.get("k_sigma", [base.k_sigma])
    hs = grid.get("h_sigma", [base.h_sigma])
    rows = []
    for f in _series_files(Path(args.series)):
        tab = read_series(f)
        if column not in tab:
            raise UsageError(f"{f} has no column {column!r}")
        vals = tab[column].copy()
        if signal == "tau_sing":
            vals[vals < 0] = np.nan
        trace = P.TraceSet(f.stem, "", None, tab["t"].astype(np.int64), vals)
        for k in ks:
            for h in hs:
                cfg = replace(base, k_sigma=float(k), h_sigma=float(h))
                cfg.validate()
                rows.append([f.stem, *P.detect_signal(trace, signal, cfg).to_row()])
    write_csv(args.out, ["traj_id"] + ALARM_COLUMNS, rows)
    print(f"wrote {len(rows)} alarms to {args.out}")
    return EXIT_OK


def cmd_baselines(args) -> int:
    which = [w.strip() for w in args.which.split(",") if w.strip()]
    bad = set(which) - set(P.BASELINE_SOURCES)
    if bad:
        raise UsageError(f"unknown baselines: {sorted(bad)}")
    traj = read_trajectory(args.traj)
    gcfg = GraphConfig(window=args.window, stride=args.stride)
    out = Path(args.out)
    if "csad" in which:
        s = windowed_csad(traj, gcfg)
        write_csv(out / "csad.csv", ["t", "csad", "rm"], zip(s.t.tolist(), s.csad.tolist(), s.rm.tolist()))
    if "lsv" in which:
        L = lsv_series(traj, gcfg)
        write_csv(out / "lsv.csv", ["t", "h", "p", "af"], zip(L.t.tolist(), L.h.tolist(), L.p.tolist(), L.af.tolist()))
    if "pcg" in which:
        pg = price_corr_curvature(traj, gcfg)
        write_csv(out / "pcg.csv", ["t", "mean_all", "mean_pos", "frac_neg", "mean_abs_rho"],
                  [[s.t, s.mean_all, s.mean_pos, s.frac_neg, m] for s, m in zip(pg.summaries, pg.mean_abs_rho.tolist())])
    if "aami" in which:
        A = aa_mi_series(traj, gcfg)
        write_csv(out / "aami.csv", ["t", "mi"], zip(A.t.tolist(), A.mi.tolist()))
    print(f"wrote {', '.join(which)} to {out}")
    return EXIT_OK


def _read_alarms(path: Path) -> list[tuple[str, AlarmRecord]]:
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    out = []
    for f in files:
        with open(f) as fh:
            for row in csv.DictReader(fh):
                ft = row["fire_time"]
                out.append((row["traj_id"], AlarmRecord(
                    detector=row["detector"], k_sigma=float(row["k_sigma"]), h_sigma=float(row["h_sigma"]),
                    fired=row["fired"] == "1", fire_time=int(float(ft)) if ft else None,
                    score=float(row["score"]) if row["score"] else float("nan"),
                    flags=[x for x in row.get("flags", "").split(";") if x])))
    return out


def cmd_evaluate(args) -> int:
    meta = {}
    for side in sorted(Path(args.trajs).glob("*.json")):
        d = json.loads(side.read_text())
        if "label" in d:
            meta[d["traj_id"] or side.stem] = d
    groups: dict = {}
    for tid, a in _read_alarms(Path(args.alarms)):
        if tid not in meta:
            raise UsageError(f"alarm for unknown trajectory {tid!r}")
        m = meta[tid]
        o = score_trajectory(a, label=m["label"], event_time=m["event_time"], traj_id=tid)
        groups.setdefault((a.detector, a.k_sigma, a.h_sigma), []).append(o)
    profile = [pooled_metrics(outs, det, (k, h), args.n_boot, args.seed)
               for (det, k, h), outs in sorted(groups.items())]
    out = Path(args.out)
    emit_tables(out, profile)
    report_json(out / "report.json", profile)
    print(f"evaluated {len(groups)} detector settings; tables in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- experiment commands


def cmd_run(args) -> int:
    cfg = _experiment(args)
    m = P.run_pipeline(cfg)
    print(f"{cfg['name']}: {m['status']}; manifest at {Path(cfg['output_dir']) / 'manifest.json'}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _experiment(args)
    cache = Path(cfg["cache_dir"]) if cfg["cache_dir"] else Path(cfg["output_dir"]) / "cache"
    trajs = P.run_stages(cfg, cache, P.n_workers(), stages=("simulate", "series"))
    traces = [tr for tr in (P.signal_trace(trajs, tid, args.signal) for tid in trajs.ids) if tr is not None]
    _, _, kind, direction = P.SIGNALS[args.signal]
    if kind not in ("cusum", "cusum_two_sided"):
        raise UsageError(f"calibration sweeps CUSUM signals only, {args.signal!r} uses {kind}")
    base = replace(P.detector_config(cfg, *cfg["detectors"]["operating_points"]["recall"]), kind=kind,
                   direction=direction)
    grid = cfg["detectors"]["grid"]
    rows = calibration_sweep(traces, base, grid["k_sigma"], grid["h_sigma"], args.signal,
                             int(cfg["eval"]["n_boot"]), int(cfg["eval"]["seed"]))
    emit_tables(Path(cfg["output_dir"]) / "calibration", sweep=rows)
    print(f"wrote {len(rows)}-cell sweep to {Path(cfg['output_dir']) / 'calibration'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    rows = _read_json(args.rows)
    if not isinstance(rows, list):
        raise UsageError("--rows must hold a JSON list of single-key objects")
    labels = ["supercritical"] if args.supercritical_only else None
    results = P.run_ablation(cfg, rows, labels=labels)
    path = P.write_ablation(Path(cfg["output_dir"]) / "ablation.csv", results)
    for name, m, _ in results:
        print(f"{name}: recall_lead={m.recall_lead:.3f} fires={m.n_tp + m.n_late}/{m.n_super}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bench_drift(args) -> int:
    dc = DriftConfig(n_paths=args.n_paths, seed=args.seed)
    r = stylized_drift_benchmark(dc)
    a = arl_benchmark(n_paths=args.n_paths, seed=args.seed)
    out = Path(args.out)
    write_csv(out / "drift.csv", ["detector", "threshold", "far", "median_delay", "detection_rate"], r.as_rows())
    write_json(out / "arl.json", asdict(a))
    print(f"drift: cusum delay {r.cusum_median_delay:g}, shewhart delay {r.shewhart_median_delay:g}, "
          f"ratio {r.ratio:.2f}")
    print(f"arl: shewhart {a.shewhart_arl:.1f}, cusum {a.cusum_arl:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_graph_args(p, mode=True):
    d = GraphConfig()
    if mode:
        p.add_argument("--mode", default=d.edge_mode)
        p.add_argument("--threshold", type=float, default=d.threshold)
        p.add_argument("--knn-k", type=int, default=d.knn_k)
    p.add_argument("--window", type=int, default=d.window)
    p.add_argument("--stride", type=int, default=d.stride)


def _add_experiment_args(p):
    p.add_argument("--config")
    p.add_argument("--preset", choices=P.PRESETS)
    p.add_argument("--out", help="override the config's output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geomherd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one trajectory or a sweep")
    p.add_argument("--kind", choices=("cws", "vicsek"), default="cws")
    p.add_argument("--config", help="substrate parameters, or {levels, seeds_per_level, seed, params}")
    p.add_argument("--traj-id")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("graph", help="build agent-graph snapshots")
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    _add_graph_args(p)
    p.set_defaults(fn=cmd_graph)

    p = sub.add_parser("curvature", help="curvature series from snapshots")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--transport", choices=("exact", "sinkhorn"), default="exact")
    p.add_argument("--flow", action="store_true", help="append tau_sing")
    p.add_argument("--veff", action="store_true", help="append v_eff (needs --traj)")
    p.add_argument("--traj")
    _add_graph_args(p, mode=False)
    p.set_defaults(fn=cmd_curvature)

    p = sub.add_parser("detect", help="run a detector grid over series files")
    p.add_argument("--series", required=True, help="series CSV or a directory of them")
    p.add_argument("--grid", help="JSON with signal, k_sigma, h_sigma lists and detector options")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("baselines", help="baseline signals for one trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--which", default="csad,lsv,pcg,aami")
    p.add_argument("--out", required=True)
    _add_graph_args(p, mode=False)
    p.set_defaults(fn=cmd_baselines)

    p = sub.add_parser("evaluate", help="score alarms against trajectory labels")
    p.add_argument("--alarms", required=True)
    p.add_argument("--trajs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-boot", type=int, default=N_BOOT)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("calibrate", help="k_sigma x h_sigma sweep")
    _add_experiment_args(p)
    p.add_argument("--signal", default="kappa_pos", choices=sorted(P.SIGNALS))
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("ablate", help="single-axis ablation table")
    _add_experiment_args(p)
    p.add_argument("--rows", required=True, help='JSON list, e.g. [{"edge_mode": "cosine"}]')
    p.add_argument("--supercritical-only", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench-drift", help="ARL and stylized drift benchmarks")
    p.add_argument("--out", required=True)
    p.add_argument("--n-paths", type=int, default=DriftConfig().n_paths)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_drift)

    p = sub.add_parser("run", help="full pipeline")
    _add_experiment_args(p)
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, P.ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except P.PipelineError as exc:
        print(f"error: {exc} (partial manifest written)", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
