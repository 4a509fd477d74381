"""Experiment orchestration: config, stage cache, manifest, presets.

A run goes simulate -> series (graph, curvature, optional flow) -> veff
-> baselines -> detect -> evaluate. Per-trajectory stage outputs live in
a content-addressed cache keyed by the hash of the stage config and of
the upstream keys, so editing a downstream block never reruns upstream
stages. The manifest records every output file with its hash and holds
nothing that depends on wall-clock time or worker count.
"""
from __future__ import annotations

import copy
import json
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .agent_graph import GraphConfig, build_snapshot, build_snapshots
from .baselines import aa_mi_series, cck_regress, lsv_series, price_corr_curvature, windowed_csad
from .curvature import CurvatureConfig, CurvatureSummary, edge_curvatures, read_series, summarize, write_series
from .detectors import DetectorConfig, beta_minus_alarm, run_detector
from .eval_harness import (
    RECALL_POINT,
    PRECISION_POINT,
    SWEEP_H,
    SWEEP_K,
    Outcome,
    TraceSet,
    auroc_ci,
    calibration_sweep,
    emit_tables,
    paired_bootstrap_lead,
    pooled_metrics,
    recall_far_margin,
    score_trajectory,
    write_outcomes,
)
from .io import atomic_write_text, sha256_file, sha256_json, write_csv, write_json
from .ricci_flow import FlowConfig, ricci_flow_tau
from .substrates import (
    SUBCRITICAL,
    SUPERCRITICAL,
    ActionTrajectory,
    config_from_dict,
    read_trajectory,
    simulate,
    sweep_specs,
    write_trajectory,
)
from .veff import FsqCodebook, veff_series

SCHEMA_VERSION = 1
WORKERS_ENV = "GEOMHERD_WORKERS"


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class PipelineError(RuntimeError):
    """A stage failed; ``manifest`` holds the partial record (CLI exit code 3)."""

    def __init__(self, message: str, manifest: dict | None = None):
        super().__init__(message)
        self.manifest = manifest


# ---------------------------------------------------------------- config

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "seed": 0,
    "output_dir": "runs/experiment",
    "cache_dir": None,
    "substrate": {"kind": "cws", "levels": [0.5, 0.8, 1.2, 1.8, 2.5], "seeds_per_level": 10, "params": {}},
    "graph": asdict(GraphConfig()),
    "curvature": asdict(CurvatureConfig()),
    "flow": {"enabled": False, **asdict(FlowConfig())},
    "veff": {"enabled": True},
    "detectors": {
        "signals": ["kappa_pos", "beta_minus", "kappa_all", "v_eff", "csad", "lsv", "price_graph", "aa_mi"],
        "operating_points": {"recall": list(RECALL_POINT), "precision": list(PRECISION_POINT)},
        "grid": {"k_sigma": list(SWEEP_K), "h_sigma": list(SWEEP_H)},
        "baseline_window": 35,
        "kendall_window": 20,
        "kendall_thresh": 0.6,
        "skip_initial": 0,
        "ewma_lambda": 0.2,
        "min_cv": 0.02,
        "beta_minus_point": "precision",
    },
    "baselines": {"csad": True, "lsv": True, "pcg": True, "aami": True, "csad_over": "assets"},
    "eval": {"n_boot": 5000, "seed": 0, "horizon": "event", "contrasts": ["beta_minus", "price_graph", "csad", "aa_mi"]},
}

# signal name -> (source table, column, detector kind, direction)
SIGNALS = {
    "kappa_pos": ("series", "mean_pos", "cusum", "up"),
    "kappa_all": ("series", "mean_all", "cusum", "up"),
    "kappa_abs": ("series", "mean_all", "cusum_two_sided", "up"),
    "beta_minus": ("series", "frac_neg", "beta_minus", "up"),
    "tau_sing": ("series", "tau_sing", "cusum", "down"),
    "v_eff": ("veff", "v_eff", "cusum", "down"),
    "csad": ("csad", "csad", "cusum", "down"),
    "lsv": ("lsv", "h", "cusum", "up"),
    "price_graph": ("pcg", "mean_all", "cusum_two_sided", "up"),
    "aa_mi": ("aami", "mi", "cusum", "up"),
}
BASELINE_SOURCES = {"csad": "csad", "lsv": "lsv", "pcg": "pcg", "aami": "aami"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[k], dict) and k != "params" and isinstance(v, dict):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    cfg = _merge(DEFAULTS, raw)
    try:
        sub = cfg["substrate"]
        if sub["kind"] not in ("cws", "vicsek"):
            raise ConfigError(f"unknown substrate kind {sub['kind']!r}")
        if not sub["levels"]:
            raise ConfigError("substrate.levels must be nonempty")
        if int(sub["seeds_per_level"]) < 1:
            raise ConfigError("substrate.seeds_per_level must be >= 1")
        probe = config_from_dict(sub["kind"], {**sub["params"]})
        probe.validate()
        GraphConfig(**cfg["graph"]).validate()
        CurvatureConfig(**cfg["curvature"]).validate()
        flow = dict(cfg["flow"])
        flow.pop("enabled")
        FlowConfig(**flow).validate()
        for s in cfg["detectors"]["signals"]:
            if s not in SIGNALS:
                raise ConfigError(f"unknown detector signal {s!r}")
        for name, op in cfg["detectors"]["operating_points"].items():
            if len(op) != 2:
                raise ConfigError(f"operating point {name!r} must be [k_sigma, h_sigma]")
        if cfg["detectors"]["beta_minus_point"] not in cfg["detectors"]["operating_points"]:
            raise ConfigError("detectors.beta_minus_point must name an operating point")
        detector_config(cfg, *cfg["detectors"]["operating_points"]["recall"]).validate()
        if cfg["eval"]["horizon"] not in ("event", "full"):
            raise ConfigError("eval.horizon must be 'event' or 'full'")
        if cfg["baselines"]["csad_over"] not in ("assets", "agents"):
            raise ConfigError("baselines.csad_over must be 'assets' or 'agents'")
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_config(raw)


def detector_config(cfg: dict, k_sigma: float, h_sigma: float, kind: str = "cusum",
                    direction: str = "up") -> DetectorConfig:
    d = cfg["detectors"]
    return DetectorConfig(kind=kind, direction=direction, baseline_window=int(d["baseline_window"]),
                          k_sigma=float(k_sigma), h_sigma=float(h_sigma), kendall_window=int(d["kendall_window"]),
                          kendall_thresh=float(d["kendall_thresh"]), skip_initial=int(d["skip_initial"]),
                          ewma_lambda=float(d["ewma_lambda"]), min_cv=float(d["min_cv"]))


# ---------------------------------------------------------------- presets


def _cws_preset(name: str, seeds: int, **over) -> dict:
    return validate_config({"name": name, "output_dir": f"runs/{name}",
                            "substrate": {"kind": "cws", "seeds_per_level": seeds}, **over})


def preset(name: str) -> dict:
    """Named desk-scale experiment configs."""
    if name == "headline-desk":
        return _cws_preset(name, 10)
    if name == "smoke":
        return validate_config({
            "name": name,
            "output_dir": "runs/smoke",
            "substrate": {"kind": "cws", "levels": [0.5, 2.5], "seeds_per_level": 2,
                          "params": {"horizon": 700, "ramp_start": 100, "ramp_steps": 500}},
            "detectors": {"baseline_window": 20},
            "eval": {"n_boot": 500},
        })
    if name == "vicsek-transfer":
        return validate_config({
            "name": name,
            "output_dir": "runs/vicsek-transfer",
            "substrate": {"kind": "vicsek", "levels": [0.5, 1.0, 1.6, 2.0, 2.5], "seeds_per_level": 10},
            "graph": {"edge_mode": "knn_heading", "window": 50, "stride": 50, "knn_k": 10},
            "veff": {"enabled": False},
            "baselines": {"csad": False, "lsv": False, "pcg": False, "aami": False},
        })
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("headline-desk", "smoke", "vicsek-transfer")


# ---------------------------------------------------------------- cache


def n_workers(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=1))


def _unit_dir(cache: Path, stage: str, key: str) -> Path:
    return cache / stage / key[:2] / key


def _run_unit(cache: Path, stage: str, key: str, build: Callable[[Path], None]) -> Path:
    """Return the cached unit directory, building it atomically if absent."""
    final = _unit_dir(cache, stage, key)
    if (final / "done.json").exists():
        return final
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{key[:8]}."))
    try:
        build(tmp)
        files = {p.name: sha256_file(p) for p in sorted(tmp.iterdir()) if p.is_file()}
        write_json(tmp / "done.json", {"stage": stage, "key": key, "files": files})
        try:
            os.replace(tmp, final)
        except OSError:
            if not (final / "done.json").exists():
                raise
            shutil.rmtree(tmp, ignore_errors=True)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


def _unit_files(unit: Path) -> dict[str, str]:
    return json.loads((unit / "done.json").read_text())["files"]


# ---------------------------------------------------------------- stage workers


def _sim_key(kind: str, cfg) -> str:
    return sha256_json({"stage": "simulate", "kind": kind, "config": asdict(cfg), "version": __version__})


def _simulate_unit(args) -> str:
    cache, key, tid, kind, cfg_dict = args
    cfg = config_from_dict(kind, cfg_dict)

    def build(d: Path):
        write_trajectory(simulate(cfg, tid), d / "traj")

    return str(_run_unit(Path(cache), "simulate", key, build))


def _until(traj: ActionTrajectory, horizon: str) -> int | None:
    if horizon == "event" and traj.label == SUPERCRITICAL and traj.event_time is not None:
        return int(traj.event_time)
    return None


def _series_unit(args) -> str:
    cache, key, sim_dir, graph, curv, flow, horizon = args

    def build(d: Path):
        traj = read_trajectory(Path(sim_dir) / "traj")
        gcfg = GraphConfig(**graph)
        ccfg = CurvatureConfig(**curv)
        snaps = build_snapshots(traj, gcfg, until=_until(traj, horizon))
        sums = []
        for g in snaps:
            if g.degenerate or g.n_edges == 0:
                sums.append(CurvatureSummary.missing(g.t))
                continue
            k = edge_curvatures(g, ccfg.alpha, ccfg.transport, ccfg.reg, ccfg.certify)
            sums.append(summarize(g.t, k, ccfg.kappa_plus, ccfg.kappa_minus))
        extra = {}
        if flow is not None:
            fcfg = FlowConfig(**flow)
            extra["tau_sing"] = [ricci_flow_tau(g, fcfg).tau_sing for g in snaps]
        write_series(d / "series.csv", sums, extra)

    return str(_run_unit(Path(cache), "series", key, build))


def _veff_unit(args) -> str:
    cache, key, sim_dir, graph = args

    def build(d: Path):
        traj = read_trajectory(Path(sim_dir) / "traj")
        t, v = veff_series(traj, GraphConfig(**graph), FsqCodebook())
        write_csv(d / "veff.csv", ["t", "v_eff"], zip(t.tolist(), v.tolist()))

    return str(_run_unit(Path(cache), "veff", key, build))


def _baselines_unit(args) -> str:
    cache, key, sim_dir, graph, which, horizon, over = args

    def build(d: Path):
        traj = read_trajectory(Path(sim_dir) / "traj")
        gcfg = GraphConfig(**graph)
        until = _until(traj, horizon)
        if "csad" in which:
            s = windowed_csad(traj, gcfg, over, until)
            write_csv(d / "csad.csv", ["t", "csad", "rm"], zip(s.t.tolist(), s.csad.tolist(), s.rm.tolist()))
        if "lsv" in which:
            L = lsv_series(traj, gcfg, until)
            write_csv(d / "lsv.csv", ["t", "h", "p", "af"], zip(L.t.tolist(), L.h.tolist(), L.p.tolist(), L.af.tolist()))
        if "pcg" in which:
            P = price_corr_curvature(traj, gcfg, until=until)
            rows = [[s.t, s.mean_all, s.mean_pos, s.frac_neg, m] for s, m in zip(P.summaries, P.mean_abs_rho.tolist())]
            write_csv(d / "pcg.csv", ["t", "mean_all", "mean_pos", "frac_neg", "mean_abs_rho"], rows)
        if "aami" in which:
            A = aa_mi_series(traj, gcfg, until=until)
            write_csv(d / "aami.csv", ["t", "mi"], zip(A.t.tolist(), A.mi.tolist()))
            write_json(d / "aami_flags.json", {"degenerate": A.degenerate})

    return str(_run_unit(Path(cache), "baselines", key, build))


# ---------------------------------------------------------------- run


def _stage_cfgs(cfg: dict) -> dict:
    flow = None
    if cfg["flow"]["enabled"]:
        flow = {k: v for k, v in cfg["flow"].items() if k != "enabled"}
    which = sorted(k for k, on in cfg["baselines"].items() if k in BASELINE_SOURCES and on)
    return {"graph": cfg["graph"], "curvature": cfg["curvature"], "flow": flow, "which": which,
            "horizon": cfg["eval"]["horizon"], "over": cfg["baselines"]["csad_over"]}


class Trajectories:
    """Per-trajectory stage directories for one run."""

    def __init__(self):
        self.ids: list[str] = []
        self.meta: dict[str, dict] = {}
        self.dirs: dict[str, dict[str, Path]] = {}
        self.keys: dict[str, dict[str, str]] = {}

    def table(self, tid: str, source: str) -> dict[str, np.ndarray] | None:
        stage = {"series": "series", "veff": "veff"}.get(source, "baselines")
        d = self.dirs[tid].get(stage)
        if d is None:
            return None
        p = d / f"{source}.csv"
        return read_series(p) if p.exists() else None


def run_stages(cfg: dict, cache: Path, workers: int, stages: Sequence[str] = ("simulate", "series", "veff", "baselines"),
               labels: Sequence[str] | None = None, record: dict | None = None) -> Trajectories:
    """Run the per-trajectory stages (cached) and return their locations."""
    sub = cfg["substrate"]
    sc = _stage_cfgs(cfg)
    specs = sweep_specs(sub["kind"], sub["levels"], int(sub["seeds_per_level"]), int(cfg["seed"]), sub["params"])
    if labels is not None:
        specs = [(tid, c) for tid, c in specs if c.label in labels]
    out = Trajectories()
    status = record if record is not None else {}

    def mark(stage, ok, err=None):
        status[stage] = "complete" if ok else f"failed: {err}"

    sim_args = []
    for tid, c in specs:
        key = _sim_key(sub["kind"], c)
        out.ids.append(tid)
        out.keys[tid] = {"simulate": key}
        sim_args.append((str(cache), key, tid, sub["kind"], asdict(c)))
    try:
        sim_dirs = _map(_simulate_unit, sim_args, workers)
    except Exception as exc:
        mark("simulate", False, exc)
        raise PipelineError(f"simulate stage failed: {exc}", status) from exc
    mark("simulate", True)
    for tid, d in zip(out.ids, sim_dirs):
        out.dirs[tid] = {"simulate": Path(d)}
        side = json.loads((Path(d) / "traj.json").read_text())
        out.meta[tid] = {"label": side["label"], "event_time": side["event_time"],
                         "control": side["meta"]["control"]}

    plan = []
    if "series" in stages:
        def series_args(tid):
            key = sha256_json({"stage": "series", "sim": out.keys[tid]["simulate"], "graph": sc["graph"],
                               "curvature": sc["curvature"], "flow": sc["flow"], "horizon": sc["horizon"]})
            return key, (str(cache), key, str(out.dirs[tid]["simulate"]), sc["graph"], sc["curvature"],
                         sc["flow"], sc["horizon"])
        plan.append(("series", series_args, _series_unit))
    if "veff" in stages and cfg["veff"]["enabled"]:
        def veff_args(tid):
            key = sha256_json({"stage": "veff", "sim": out.keys[tid]["simulate"], "graph": sc["graph"],
                               "codebook": FsqCodebook().metadata()})
            return key, (str(cache), key, str(out.dirs[tid]["simulate"]), sc["graph"])
        plan.append(("veff", veff_args, _veff_unit))
    if "baselines" in stages and sc["which"] and sub["kind"] == "cws":
        def base_args(tid):
            key = sha256_json({"stage": "baselines", "sim": out.keys[tid]["simulate"], "graph": sc["graph"],
                               "which": sc["which"], "horizon": sc["horizon"], "over": sc["over"]})
            return key, (str(cache), key, str(out.dirs[tid]["simulate"]), sc["graph"], sc["which"],
                         sc["horizon"], sc["over"])
        plan.append(("baselines", base_args, _baselines_unit))

    for stage, make, fn in plan:
        keyed = [make(tid) for tid in out.ids]
        try:
            dirs = _map(fn, [a for _, a in keyed], workers)
        except Exception as exc:
            mark(stage, False, exc)
            raise PipelineError(f"{stage} stage failed: {exc}", status) from exc
        mark(stage, True)
        for tid, (key, _), d in zip(out.ids, keyed, dirs):
            out.keys[tid][stage] = key
            out.dirs[tid][stage] = Path(d)
    return out


def signal_trace(trajs: Trajectories, tid: str, signal: str) -> TraceSet | None:
    source, col, _, _ = SIGNALS[signal]
    tab = trajs.table(tid, source)
    if tab is None or col not in tab:
        return None
    vals = tab[col].copy()
    if signal == "tau_sing":
        vals[vals < 0] = np.nan
    m = trajs.meta[tid]
    return TraceSet(tid, m["label"], m["event_time"], tab["t"].astype(np.int64), vals)


def detect_signal(trace: TraceSet, signal: str, config: DetectorConfig):
    _, _, kind, direction = SIGNALS[signal]
    if kind == "beta_minus":
        return beta_minus_alarm(trace.t, trace.values, config, signal)
    from dataclasses import replace

    return run_detector(trace.t, trace.values, replace(config, kind=kind, direction=direction), signal)


def evaluate_signal(cfg: dict, traces: Sequence[TraceSet], signal: str, point: Sequence[float],
                    n_boot: int, seed: int):
    dc = detector_config(cfg, *point)
    outs: list[Outcome] = []
    alarms = []
    for tr in traces:
        a = detect_signal(tr, signal, dc)
        alarms.append((tr.traj_id, a))
        outs.append(score_trajectory(a, label=tr.label, event_time=tr.event_time, traj_id=tr.traj_id))
    return pooled_metrics(outs, signal, tuple(point), n_boot, seed), outs, alarms


def _veff_contraction(trajs: Trajectories, baseline_window: int) -> dict:
    rows = []
    for tid in trajs.ids:
        m = trajs.meta[tid]
        if m["label"] != SUPERCRITICAL or m["event_time"] is None:
            continue
        tab = trajs.table(tid, "veff")
        if tab is None:
            continue
        t, v = tab["t"], tab["v_eff"]
        post = v[t > m["event_time"]]
        head = v[:baseline_window]
        if post.size == 0 or head.size == 0:
            continue
        rows.append({"traj_id": tid, "pre": float(np.median(head)), "post": float(np.median(post)),
                     "contracted": bool(np.median(post) < np.median(head)),
                     "in_range": bool(np.all((v >= 1 - 1e-12) & (v <= 64 + 1e-12)))})
    n = len(rows)
    return {"n": n, "fraction_contracted": (sum(r["contracted"] for r in rows) / n) if n else float("nan"),
            "all_in_range": all(r["in_range"] for r in rows), "rows": rows}


def _cck_summary(trajs: Trajectories) -> dict:
    out = []
    for tid in trajs.ids:
        m = trajs.meta[tid]
        if m["label"] != SUPERCRITICAL:
            continue
        cs, se = trajs.table(tid, "csad"), trajs.table(tid, "series")
        if cs is None or se is None:
            continue
        from .baselines import CsadSeries, align_to_grid

        kappa = align_to_grid(se["t"], se["mean_all"], cs["t"])
        series = CsadSeries(cs["t"], cs["csad"], cs["rm"])
        try:
            base = cck_regress(series, augment=False)
            aug = cck_regress(series, kappa, augment=True)
        except ValueError:
            continue
        out.append({"traj_id": tid, "gamma2": base.coef("gamma2"), "gamma2_aug": aug.coef("gamma2"),
                    "gamma3": aug.coef("gamma3"), "gamma3_se": aug.stderr("gamma3"), "lag": aug.lag})
    if not out:
        return {"n": 0}
    return {"n": len(out),
            "median_abs_gamma2": float(np.median([abs(r["gamma2"]) for r in out])),
            "median_abs_gamma2_aug": float(np.median([abs(r["gamma2_aug"]) for r in out])),
            "median_gamma3": float(np.median([r["gamma3"] for r in out])),
            "rows": out}


def _file_entries(out_dir: Path, paths: dict[str, Path]) -> dict:
    return {name: sha256_file(p) for name, p in sorted(paths.items())}


def run_pipeline(cfg: dict, workers: int | None = None, out_dir: str | Path | None = None) -> dict:
    """Run every stage and write tables plus ``manifest.json`` under the output directory."""
    cfg = validate_config(cfg)
    workers = n_workers(workers)
    out = Path(out_dir or cfg["output_dir"])
    cache = Path(cfg["cache_dir"]) if cfg["cache_dir"] else out / "cache"
    manifest: dict = {"schema_version": SCHEMA_VERSION, "version": __version__, "name": cfg["name"],
                      "config": cfg, "config_hash": sha256_json(_portable_config(cfg)), "stages": {}, "files": {}}
    try:
        if cfg["substrate"]["kind"] == "vicsek":
            result = _run_vicsek(cfg, cache, workers, out, manifest)
        else:
            result = _run_cws(cfg, cache, workers, out, manifest)
    except PipelineError as exc:
        manifest["stages"].update(exc.manifest or {})
        manifest["status"] = "partial"
        write_json(out / "manifest.json", _portable(manifest, out, cache))
        exc.manifest = manifest
        raise
    manifest["status"] = "complete"
    manifest["result"] = result
    write_json(out / "manifest.json", _portable(manifest, out, cache))
    return manifest


def _portable_config(cfg: dict) -> dict:
    """Config with run locations masked, so relocated runs hash alike."""
    c = copy.deepcopy(cfg)
    c["output_dir"] = "<output_dir>"
    if c.get("cache_dir"):
        c["cache_dir"] = "<cache_dir>"
    return c


def _portable(manifest: dict, out: Path, cache: Path) -> dict:
    m = copy.deepcopy(manifest)
    m["config"] = _portable_config(m["config"])
    return m


def _run_cws(cfg: dict, cache: Path, workers: int, out: Path, manifest: dict) -> dict:
    trajs = run_stages(cfg, cache, workers, record=manifest["stages"])
    for tid in trajs.ids:
        for stage, d in trajs.dirs[tid].items():
            for name, h in _unit_files(d).items():
                manifest["files"][f"{stage}/{tid}/{name}"] = h

    ev = cfg["eval"]
    n_boot, seed = int(ev["n_boot"]), int(ev["seed"])
    points = cfg["detectors"]["operating_points"]
    profile, all_outcomes, alarm_rows = [], {}, []
    for signal in cfg["detectors"]["signals"]:
        traces = [tr for tr in (signal_trace(trajs, tid, signal) for tid in trajs.ids) if tr is not None]
        if not traces:
            continue
        for pname in sorted(points):
            row, outs, alarms = evaluate_signal(cfg, traces, signal, points[pname], n_boot, seed)
            profile.append(row)
            all_outcomes[(signal, pname)] = outs
            alarm_rows += [[tid, *a.to_row(), pname] for tid, a in alarms]
    manifest["stages"]["detect"] = "complete"

    contrasts = []
    head = all_outcomes.get(("kappa_pos", "recall"))
    if head:
        for other in ev["contrasts"]:
            if (other, "recall") in all_outcomes:
                contrasts.append(paired_bootstrap_lead(head, all_outcomes[(other, "recall")], n_boot, seed))

    sweep = []
    traces = [tr for tr in (signal_trace(trajs, tid, "kappa_pos") for tid in trajs.ids) if tr is not None]
    labels = {tr.label for tr in traces}
    if labels == {SUPERCRITICAL, SUBCRITICAL}:
        base = detector_config(cfg, *points["recall"])
        grid = cfg["detectors"]["grid"]
        sweep = calibration_sweep(traces, base, grid["k_sigma"], grid["h_sigma"], "kappa_pos", n_boot, seed)

    tables = out / "tables"
    paths = emit_tables(tables, profile, contrasts, sweep)
    paths["alarms.csv"] = write_csv(out / "alarms.csv", ["traj_id", "detector", "k_sigma", "h_sigma", "fired",
                                                         "fire_time", "score", "flags", "operating_point"], alarm_rows)
    bm_point = cfg["detectors"]["beta_minus_point"]
    extras: dict = {}
    if ("beta_minus", bm_point) in all_outcomes:
        outs = all_outcomes[("beta_minus", bm_point)]
        diff, ci = recall_far_margin(outs, n_boot, seed, leading=True)
        extras["beta_minus_margin"] = {"operating_point": points[bm_point], "recall_minus_far": diff,
                                       "ci": list(ci)}
        paths["outcomes_beta_minus.csv"] = write_outcomes(out / "outcomes_beta_minus.csv", outs)
    if ("kappa_pos", "recall") in all_outcomes:
        paths["outcomes_kappa_pos.csv"] = write_outcomes(out / "outcomes_kappa_pos.csv",
                                                         all_outcomes[("kappa_pos", "recall")])
    if cfg["veff"]["enabled"]:
        extras["veff_contraction"] = _veff_contraction(trajs, int(cfg["detectors"]["baseline_window"]))
    if cfg["baselines"]["csad"]:
        extras["cck"] = _cck_summary(trajs)
    paths["summary.json"] = write_json(out / "summary.json", extras)
    manifest["stages"]["evaluate"] = "complete"
    for name, p in paths.items():
        manifest["files"][f"output/{p.relative_to(out)}"] = sha256_file(p)
    return {"profile_rows": len(profile), "contrasts": len(contrasts), "sweep_cells": len(sweep), **{
        k: v for k, v in extras.items() if k == "beta_minus_margin"}}


# ---------------------------------------------------------------- Vicsek


def _vicsek_unit(args) -> str:
    cache, key, sim_dir, graph, curv = args

    def build(d: Path):
        traj = read_trajectory(Path(sim_dir) / "traj")
        gcfg = GraphConfig(**graph)
        ccfg = CurvatureConfig(**curv)
        rec = {"traj_id": traj.traj_id, "label": traj.label, "event_time": traj.event_time,
               "control": traj.meta["control"], "kappa_at_event": None, "kappa_final": None}
        if traj.event_time is not None and traj.event_time >= gcfg.window:
            g = build_snapshot(traj, int(traj.event_time), gcfg)
            s = summarize(g.t, edge_curvatures(g, ccfg.alpha, ccfg.transport, ccfg.reg, ccfg.certify))
            rec["kappa_at_event"] = s.mean_all
        g = build_snapshot(traj, traj.n_steps, gcfg)
        rec["kappa_final"] = summarize(g.t, edge_curvatures(g, ccfg.alpha)).mean_all
        tail = traj.order_param[-200:]
        rec["tail_median_polarization"] = float(np.median(tail))
        write_json(d / "event.json", rec)

    return str(_run_unit(Path(cache), "vicsek_event", key, build))


def _run_vicsek(cfg: dict, cache: Path, workers: int, out: Path, manifest: dict) -> dict:
    trajs = run_stages(cfg, cache, workers, stages=("simulate",), record=manifest["stages"])
    args = []
    for tid in trajs.ids:
        key = sha256_json({"stage": "vicsek_event", "sim": trajs.keys[tid]["simulate"], "graph": cfg["graph"],
                           "curvature": cfg["curvature"]})
        args.append((str(cache), key, str(trajs.dirs[tid]["simulate"]), cfg["graph"], cfg["curvature"]))
    try:
        dirs = _map(_vicsek_unit, args, workers)
    except Exception as exc:
        manifest["stages"]["vicsek_event"] = f"failed: {exc}"
        raise PipelineError(f"vicsek_event stage failed: {exc}", manifest["stages"]) from exc
    manifest["stages"]["vicsek_event"] = "complete"
    recs = [json.loads((Path(d) / "event.json").read_text()) for d in dirs]
    for tid, d in zip(trajs.ids, dirs):
        manifest["files"][f"vicsek_event/{tid}/event.json"] = sha256_file(Path(d) / "event.json")
    summary = vicsek_summary(recs, int(cfg["eval"]["seed"]))
    rows = [[r["control"], r["n"], r["n_events"], r["median_kappa"]] for r in summary["levels"]]
    p1 = write_csv(out / "tables" / "vicsek_levels.csv", ["eta", "n", "n_events", "median_kappa_at_event"], rows)
    p2 = write_csv(out / "tables" / "vicsek_trajectories.csv",
                   ["traj_id", "eta", "label", "event_time", "kappa_at_event", "kappa_final", "tail_median_polarization"],
                   [[r["traj_id"], r["control"], r["label"], r["event_time"], r["kappa_at_event"], r["kappa_final"],
                     r["tail_median_polarization"]] for r in recs])
    p3 = write_json(out / "summary.json", summary)
    for p in (p1, p2, p3):
        manifest["files"][f"output/{p.relative_to(out)}"] = sha256_file(p)
    manifest["stages"]["evaluate"] = "complete"
    return {"auroc": summary["auroc"], "auroc_ci": summary["auroc_ci"]}


def vicsek_summary(recs: Sequence[dict], seed: int = 0) -> dict:
    """Per-level median curvature at the event and ordered-vs-disordered AUROC."""
    levels = sorted({r["control"] for r in recs})
    table = []
    for lv in levels:
        rs = [r for r in recs if r["control"] == lv]
        ks = [r["kappa_at_event"] for r in rs if r["kappa_at_event"] is not None]
        table.append({"control": lv, "n": len(rs), "n_events": len(ks),
                      "median_kappa": float(np.median(ks)) if ks else float("nan")})
    scored = [r for r in recs if r["kappa_at_event"] is not None]
    y = np.array([r["label"] == SUPERCRITICAL for r in scored])
    s = np.array([r["kappa_at_event"] for r in scored], dtype=float)
    if y.any() and (~y).any():
        auc, ci = auroc_ci(s, y, seed=seed)
    else:
        auc, ci = float("nan"), (float("nan"), float("nan"))
    medians = [row["median_kappa"] for row in table]
    return {"levels": table, "auroc": auc, "auroc_ci": list(ci), "n_scored": len(scored),
            "strictly_decreasing": bool(all(b < a for a, b in zip(medians, medians[1:])))}


# ---------------------------------------------------------------- ablation

ABLATION_AXES = ("detector_kind", "edge_mode", "window", "transport", "sign_pooling", "tau_sing")


def apply_override(cfg: dict, row: dict) -> tuple[dict, str, str]:
    """Return ``(config, signal, detector kind)`` for a single-axis override."""
    if len(row) != 1:
        raise ConfigError(f"ablation row must override exactly one axis, got {sorted(row)}")
    (axis, value), = row.items()
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    new = copy.deepcopy(cfg)
    signal, kind = "kappa_pos", "cusum"
    if axis == "detector_kind":
        if value not in ("cusum", "zscore", "ewma", "kendall"):
            raise ConfigError(f"unsupported detector kind {value!r}")
        kind = value
    elif axis == "edge_mode":
        new["graph"]["edge_mode"] = value
    elif axis == "window":
        new["graph"]["window"] = int(value)
    elif axis == "transport":
        new["curvature"]["transport"] = value
    elif axis == "sign_pooling":
        if value:
            raise ConfigError("sign_pooling ablation only supports false")
        signal = "kappa_abs"
    elif axis == "tau_sing":
        if value:
            raise ConfigError("tau_sing ablation only supports false (drop)")
        new["flow"]["enabled"] = False
    return validate_config(new), signal, kind


def run_ablation(cfg: dict, rows: Sequence[dict], workers: int | None = None, labels: Sequence[str] | None = None,
                 point: str = "recall") -> list:
    """Headline row plus one profile row per single-axis override.

    ``labels`` restricts the pool (e.g. to supercritical trajectories
    when only leading fires are of interest).
    """
    cfg = validate_config(cfg)
    workers = n_workers(workers)
    cache = Path(cfg["cache_dir"]) if cfg["cache_dir"] else Path(cfg["output_dir"]) / "cache"
    n_boot, seed = int(cfg["eval"]["n_boot"]), int(cfg["eval"]["seed"])
    op = cfg["detectors"]["operating_points"][point]
    results = []
    for name, row in [("headline", None)] + [(json.dumps(r, sort_keys=True), r) for r in rows]:
        if row is None:
            c, signal, kind = cfg, "kappa_pos", "cusum"
        else:
            c, signal, kind = apply_override(cfg, row)
        trajs = run_stages(c, cache, workers, stages=("simulate", "series"), labels=labels)
        traces = [tr for tr in (signal_trace(trajs, tid, signal) for tid in trajs.ids) if tr is not None]
        dc = detector_config(c, *op)
        outs = []
        for tr in traces:
            if kind == "cusum":
                a = detect_signal(tr, signal, dc)
            else:
                from dataclasses import replace

                a = run_detector(tr.t, tr.values, replace(dc, kind=kind, direction="up"), signal)
            outs.append(score_trajectory(a, label=tr.label, event_time=tr.event_time, traj_id=tr.traj_id))
        m = pooled_metrics(outs, name, tuple(op), n_boot, seed)
        results.append((name, m, outs))
    return results


def write_ablation(path: str | Path, results) -> Path:
    header = ["row", "n_super", "n_tp", "n_late", "recall_lead", "far_sub", "median_lead", "lead_lo", "lead_hi"]
    rows = [[name, m.n_super, m.n_tp, m.n_late, m.recall_lead, m.far_sub, m.median_lead, m.lead_lo, m.lead_hi]
            for name, m, _ in results]
    return write_csv(path, header, rows)
