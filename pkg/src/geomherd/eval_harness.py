"""Scoring alarms against herding events and pooling the results.

Outcome classes per trajectory:

* supercritical, fired before the event: true positive with a lead
* supercritical, fired at or after the event: late fire
* supercritical, not fired: miss
* subcritical, fired: false alarm
* subcritical, not fired: true negative

``recall_lead`` counts true positives only; ``recall_fire`` also counts
late fires. Precision counts every fire on a supercritical trajectory
as correct.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .detectors import AlarmRecord, DetectorConfig, run_detector
from .io import atomic_write_text, write_csv, write_json
from .substrates import SUBCRITICAL, SUPERCRITICAL, ActionTrajectory

TP, LATE, MISS, FA, TN, EXCLUDED = "tp", "late", "miss", "false_alarm", "tn", "excluded"
N_BOOT = 5000
SWEEP_K = (0.25, 0.5, 1.0, 1.5, 2.0)
SWEEP_H = (3.0, 4.0, 5.0, 6.0, 8.0)
RECALL_POINT = (0.5, 4.0)
PRECISION_POINT = (2.0, 4.0)


@dataclass
class Outcome:
    traj_id: str
    detector: str
    label: str
    event_time: int | None
    fired: bool
    fire_time: int | None
    score: float
    kind: str
    lead: int | None = None


def score_trajectory(alarm: AlarmRecord, traj: ActionTrajectory | None = None, *, label: str | None = None,
                     event_time: int | None = None, traj_id: str | None = None) -> Outcome:
    """Classify one alarm against its trajectory's label and event time."""
    if traj is not None:
        label, event_time, traj_id = traj.label, traj.event_time, traj.traj_id
    if label not in (SUPERCRITICAL, SUBCRITICAL):
        raise ValueError(f"unknown label {label!r}")
    fired, ft = bool(alarm.fired), alarm.fire_time
    lead = None
    if label == SUPERCRITICAL:
        if event_time is None:
            kind = EXCLUDED
        elif not fired:
            kind = MISS
        elif ft < event_time:
            kind, lead = TP, int(event_time - ft)
        else:
            kind = LATE
    else:
        kind = FA if fired else TN
    return Outcome(traj_id or "", alarm.detector, label, event_time, fired, ft, float(alarm.score), kind, lead)


# ---------------------------------------------------------------- ranking metrics


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties; NaN scores rank lowest."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        return float("nan")
    s = np.where(np.isfinite(s), s, -np.inf)
    r = rankdata(s)
    return float((r[y].sum() - npos * (npos + 1) / 2) / (npos * nneg))


def auprc(scores, labels) -> float:
    """Average precision (step interpolation over distinct thresholds)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    npos = int(y.sum())
    if npos == 0:
        return float("nan")
    s = np.where(np.isfinite(s), s, -np.inf)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    prec = tp / (tp + fp)
    rec = tp / npos
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


# ---------------------------------------------------------------- bootstrap


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def bootstrap_median_ci(values, n_boot: int = N_BOOT, seed: int = 0, level: float = 0.95):
    """Percentile bootstrap CI of the median; ``(nan, nan)`` for empty input."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    idx = _rng(seed).integers(0, x.size, size=(n_boot, x.size))
    med = np.median(x[idx], axis=1)
    a = (1 - level) / 2
    return float(np.quantile(med, a)), float(np.quantile(med, 1 - a))


def rate_difference_ci(hits_a, hits_b, n_boot: int = N_BOOT, seed: int = 0, level: float = 0.95):
    """Difference of two proportions with a stratified percentile bootstrap CI."""
    a = np.asarray(hits_a, dtype=float)
    b = np.asarray(hits_b, dtype=float)
    if a.size == 0 or b.size == 0:
        return float("nan"), (float("nan"), float("nan"))
    rng = _rng(seed)
    ma = a[rng.integers(0, a.size, size=(n_boot, a.size))].mean(axis=1)
    mb = b[rng.integers(0, b.size, size=(n_boot, b.size))].mean(axis=1)
    d = ma - mb
    q = (1 - level) / 2
    return float(a.mean() - b.mean()), (float(np.quantile(d, q)), float(np.quantile(d, 1 - q)))


def auroc_ci(scores, labels, n_boot: int = 2000, seed: int = 0, level: float = 0.95):
    """Stratified percentile bootstrap CI for AUROC."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)
    rng = _rng(seed)
    vals = np.empty(n_boot)
    for b in range(n_boot):
        ip = pos[rng.integers(0, pos.size, pos.size)]
        ineg = neg[rng.integers(0, neg.size, neg.size)]
        idx = np.r_[ip, ineg]
        vals[b] = auroc(s[idx], y[idx])
    q = (1 - level) / 2
    return auroc(s, y), (float(np.quantile(vals, q)), float(np.quantile(vals, 1 - q)))


# ---------------------------------------------------------------- pooled metrics


@dataclass
class MetricsRow:
    detector: str
    k_sigma: float | None
    h_sigma: float | None
    n_super: int
    n_sub: int
    n_excluded: int
    n_tp: int
    n_late: int
    n_miss: int
    n_fa: int
    n_fired: int
    precision: float
    recall_lead: float
    recall_fire: float
    far_sub: float
    auroc: float
    auprc: float
    median_lead: float
    lead_lo: float
    lead_hi: float

    def as_dict(self) -> dict:
        return asdict(self)


PROFILE_COLUMNS = list(MetricsRow.__dataclass_fields__)


def _ratio(a: int, b: int) -> float:
    return a / b if b else float("nan")


def pooled_metrics(outcomes: Sequence[Outcome], detector: str | None = None,
                   operating_point: tuple[float, float] | None = None,
                   n_boot: int = N_BOOT, seed: int = 0) -> MetricsRow:
    """Pool per-trajectory outcomes into one profile row.

    Empty classes yield NaN (rendered as n/a).
    """
    outs = [o for o in outcomes if o.kind != EXCLUDED]
    n_exc = len(outcomes) - len(outs)
    kinds = [o.kind for o in outs]
    n_tp, n_late, n_miss = kinds.count(TP), kinds.count(LATE), kinds.count(MISS)
    n_fa = kinds.count(FA)
    n_super = n_tp + n_late + n_miss
    n_sub = n_fa + kinds.count(TN)
    n_fired = n_tp + n_late + n_fa
    leads = [o.lead for o in outs if o.kind == TP]
    lo, hi = bootstrap_median_ci(leads, n_boot, seed)
    labels = [o.label == SUPERCRITICAL for o in outs]
    scores = [o.score for o in outs]
    k, h = operating_point if operating_point else (None, None)
    return MetricsRow(
        detector=detector or (outs[0].detector if outs else ""),
        k_sigma=k,
        h_sigma=h,
        n_super=n_super,
        n_sub=n_sub,
        n_excluded=n_exc,
        n_tp=n_tp,
        n_late=n_late,
        n_miss=n_miss,
        n_fa=n_fa,
        n_fired=n_fired,
        precision=_ratio(n_tp + n_late, n_fired),
        recall_lead=_ratio(n_tp, n_super),
        recall_fire=_ratio(n_tp + n_late, n_super),
        far_sub=_ratio(n_fa, n_sub),
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        median_lead=float(np.median(leads)) if leads else float("nan"),
        lead_lo=lo,
        lead_hi=hi,
    )


def recall_far_margin(outcomes: Sequence[Outcome], n_boot: int = N_BOOT, seed: int = 0,
                      leading: bool = True):
    """``recall - FAR`` with a stratified bootstrap CI.

    ``leading`` selects recall over true positives only (otherwise late
    fires also count).
    """
    ok = (TP,) if leading else (TP, LATE)
    sup = [o.kind in ok for o in outcomes if o.label == SUPERCRITICAL and o.kind != EXCLUDED]
    sub = [o.kind == FA for o in outcomes if o.label == SUBCRITICAL]
    return rate_difference_ci(sup, sub, n_boot, seed)


# ---------------------------------------------------------------- paired contrasts


@dataclass
class PairedContrast:
    detector_a: str
    detector_b: str
    n_paired: int
    median_diff: float
    ci_lo: float
    ci_hi: float
    p_value: float


CONTRAST_COLUMNS = list(PairedContrast.__dataclass_fields__)


def paired_bootstrap_lead(a: Sequence[Outcome], b: Sequence[Outcome], n_boot: int = N_BOOT,
                          seed: int = 0) -> PairedContrast:
    """Median lead difference ``a - b`` over trajectories where both lead."""
    la = {o.traj_id: o.lead for o in a if o.kind == TP}
    lb = {o.traj_id: o.lead for o in b if o.kind == TP}
    common = sorted(set(la) & set(lb))
    name_a = a[0].detector if a else ""
    name_b = b[0].detector if b else ""
    nan = float("nan")
    if len(common) < 2:
        return PairedContrast(name_a, name_b, len(common), nan, nan, nan, nan)
    d = np.array([la[k] - lb[k] for k in common], dtype=float)
    idx = _rng(seed).integers(0, d.size, size=(n_boot, d.size))
    med = np.median(d[idx], axis=1)
    p = min(1.0, 2 * min(float(np.mean(med <= 0)), float(np.mean(med >= 0))))
    return PairedContrast(name_a, name_b, len(common), float(np.median(d)),
                          float(np.quantile(med, 0.025)), float(np.quantile(med, 0.975)), p)


# ---------------------------------------------------------------- sweep


@dataclass
class TraceSet:
    """Detector input for one trajectory: times, values and labels."""

    traj_id: str
    label: str
    event_time: int | None
    t: np.ndarray
    values: np.ndarray


def evaluate_detector(traces: Sequence[TraceSet], config: DetectorConfig, detector: str,
                      n_boot: int = N_BOOT, seed: int = 0) -> tuple[MetricsRow, list[Outcome]]:
    outs = []
    for tr in traces:
        alarm = run_detector(tr.t, tr.values, config, detector)
        outs.append(score_trajectory(alarm, label=tr.label, event_time=tr.event_time, traj_id=tr.traj_id))
    return pooled_metrics(outs, detector, config.operating_point, n_boot, seed), outs


def calibration_sweep(traces: Sequence[TraceSet], base: DetectorConfig = DetectorConfig(),
                      k_grid: Iterable[float] = SWEEP_K, h_grid: Iterable[float] = SWEEP_H,
                      detector: str = "kappa_pos", n_boot: int = N_BOOT, seed: int = 0) -> list[MetricsRow]:
    """One profile row per ``(k_sigma, h_sigma)`` cell, ``k`` outermost."""
    labels = {t.label for t in traces}
    if labels != {SUPERCRITICAL, SUBCRITICAL}:
        raise ValueError("calibration pool must contain both labels")
    rows = []
    for k in k_grid:
        for h in h_grid:
            cfg = DetectorConfig(**{**asdict(base), "k_sigma": float(k), "h_sigma": float(h)})
            rows.append(evaluate_detector(traces, cfg, detector, n_boot, seed)[0])
    return rows


def count_inversions(values: Sequence[float]) -> int:
    """Adjacent increases in a sequence that should be non-increasing (NaN skipped)."""
    v = [x for x in values if x == x]
    return sum(1 for a, b in zip(v, v[1:]) if b > a + 1e-12)


# ---------------------------------------------------------------- tables

SWEEP_COLUMNS = ["k_sigma", "h_sigma", "recall_lead", "far_sub", "median_lead", "lead_lo", "lead_hi"]


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.3f}" if abs(v) < 10 else f"{v:.1f}"
    return str(v)


def render_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    lines = ["  ".join(s.rjust(w) for s, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_tables(out_dir: str | Path, profile: Sequence[MetricsRow] = (), contrasts: Sequence[PairedContrast] = (),
                sweep: Sequence[MetricsRow] = ()) -> dict[str, Path]:
    """Write detector-profile, paired-contrast and sweep tables as CSV and aligned text."""
    out_dir = Path(out_dir)
    paths = {}
    tables = {
        "profile": (PROFILE_COLUMNS, [[getattr(r, c) for c in PROFILE_COLUMNS] for r in profile]),
        "contrasts": (CONTRAST_COLUMNS, [[getattr(c, k) for k in CONTRAST_COLUMNS] for c in contrasts]),
        "sweep": (SWEEP_COLUMNS, [[getattr(r, c) for c in SWEEP_COLUMNS] for r in sweep]),
    }
    for name, (header, rows) in tables.items():
        paths[f"{name}.csv"] = write_csv(out_dir / f"{name}.csv", header, rows)
        paths[f"{name}.txt"] = atomic_write_text(out_dir / f"{name}.txt", render_text(header, rows))
    return paths


def write_outcomes(path: str | Path, outcomes: Sequence[Outcome]) -> Path:
    cols = list(Outcome.__dataclass_fields__)
    return write_csv(path, cols, [[getattr(o, c) for c in cols] for o in outcomes])


def report_json(path: str | Path, profile: Sequence[MetricsRow], extra: dict | None = None) -> Path:
    doc = {"profile": [r.as_dict() for r in profile], **(extra or {})}
    return write_json(path, doc)
