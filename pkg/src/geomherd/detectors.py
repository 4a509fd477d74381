"""Sequential change detectors on subsampled scalar series.

All detectors take ``times`` (simulator steps of each sample) and
``values`` (NaN marks a missing sample, e.g. a degenerate snapshot).
Baseline mean and standard deviation come from the first
``baseline_window`` valid samples after ``skip_initial``; monitoring
starts at the next valid sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

KINDS = ("cusum", "zscore", "ewma", "kendall", "cusum_or_kendall", "cusum_two_sided")


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "cusum"
    direction: str = "up"
    baseline_window: int = 35
    k_sigma: float = 0.5
    h_sigma: float = 4.0
    kendall_window: int = 20
    kendall_thresh: float = 0.6
    skip_initial: int = 0
    ewma_lambda: float = 0.2
    min_cv: float = 0.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")
        if self.baseline_window < 2:
            raise ValueError("baseline_window must be >= 2")
        if not self.h_sigma > 0:
            raise ValueError("h_sigma must be > 0")
        if self.k_sigma < 0:
            raise ValueError("k_sigma must be >= 0")
        if self.kendall_window < 3:
            raise ValueError("kendall_window must be >= 3")
        if not 0 < self.ewma_lambda <= 1:
            raise ValueError("ewma_lambda must lie in (0, 1]")
        if self.skip_initial < 0:
            raise ValueError("skip_initial must be >= 0")
        if self.min_cv < 0:
            raise ValueError("min_cv must be >= 0")

    @property
    def operating_point(self) -> tuple[float, float]:
        return (self.k_sigma, self.h_sigma)


@dataclass
class AlarmRecord:
    detector: str
    k_sigma: float
    h_sigma: float
    fired: bool
    fire_time: int | None
    score: float
    flags: list[str] = field(default_factory=list)
    fire_index: int | None = None

    def to_row(self) -> list:
        return [self.detector, self.k_sigma, self.h_sigma, self.fired, self.fire_time, self.score,
                ";".join(self.flags)]


ALARM_COLUMNS = ["detector", "k_sigma", "h_sigma", "fired", "fire_time", "score", "flags"]


@dataclass
class Baseline:
    mean: float
    std: float
    monitor: np.ndarray  # indices of valid samples after the baseline


def baseline(values: np.ndarray, config: DetectorConfig) -> Baseline | None:
    """Head-of-trace baseline; ``None`` if too few valid samples.

    The standard deviation is floored at ``min_cv * |mean|`` so that a
    series whose head is nearly constant relative to its level is not
    monitored at a vanishing scale.
    """
    v = np.asarray(values, dtype=float)
    valid = np.flatnonzero(np.isfinite(v))
    valid = valid[valid >= config.skip_initial]
    if valid.size < config.baseline_window:
        return None
    head = v[valid[: config.baseline_window]]
    mu, sd = float(head.mean()), float(head.std(ddof=1))
    if sd <= 1e-12 * max(1.0, abs(mu)):
        sd = 0.0  # rounding noise of a constant head
    else:
        sd = max(sd, config.min_cv * abs(mu))
    return Baseline(mu, sd, valid[config.baseline_window:])


def _name(config: DetectorConfig, detector: str | None) -> str:
    return detector or f"{config.kind}_{config.direction}"


def _record(config, detector, fired_at, times, score, flags) -> AlarmRecord:
    if fired_at is None:
        return AlarmRecord(_name(config, detector), config.k_sigma, config.h_sigma, False, None,
                           score, flags, None)
    return AlarmRecord(_name(config, detector), config.k_sigma, config.h_sigma, True,
                       int(times[fired_at]), score, flags, int(fired_at))


def _prepare(times, values, config):
    config.validate()
    times = np.asarray(times)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise ValueError("times and values must have equal length")
    flags: list[str] = []
    if not np.any(np.isfinite(values)):
        return times, values, None, ["all_missing"]
    base = baseline(values, config)
    if base is None:
        return times, values, None, ["short_baseline"]
    if not base.std > 0:
        return times, values, None, ["zero_baseline_variance"]
    return times, values, base, flags


def cusum_statistic(x: np.ndarray, mean: float, k: float, direction: str = "up") -> np.ndarray:
    """Page CUSUM path ``S_t = max(0, S_{t-1} + (x_t - mean) - k)`` (sign-flipped for down)."""
    sgn = 1.0 if direction == "up" else -1.0
    S = np.empty(x.size)
    s = 0.0
    for i, xi in enumerate(x):
        s = max(0.0, s + sgn * (xi - mean) - k)
        S[i] = s
    return S


def cusum(times, values, config: DetectorConfig, detector: str | None = None) -> AlarmRecord:
    """One-sided CUSUM with drift ``k_sigma*sigma`` and threshold ``h_sigma*sigma``.

    Missing samples are skipped without resetting the statistic. The
    score is the maximum standardised statistic ``max S / sigma``.
    """
    times, values, base, flags = _prepare(times, values, config)
    if base is None:
        return _record(config, detector, None, times, 0.0, flags)
    idx = base.monitor
    if idx.size == 0:
        return _record(config, detector, None, times, 0.0, flags)
    S = cusum_statistic(values[idx], base.mean, config.k_sigma * base.std, config.direction)
    h = config.h_sigma * base.std
    hit = np.flatnonzero(S > h)
    fired_at = int(idx[hit[0]]) if hit.size else None
    return _record(config, detector, fired_at, times, float(S.max() / base.std), flags)


def zscore_detector(times, values, config: DetectorConfig, detector: str | None = None) -> AlarmRecord:
    """One-sided Shewhart rule: fire when the deviation exceeds ``k_sigma*sigma``."""
    times, values, base, flags = _prepare(times, values, config)
    if base is None:
        return _record(config, detector, None, times, 0.0, flags)
    idx = base.monitor
    sgn = 1.0 if config.direction == "up" else -1.0
    z = sgn * (values[idx] - base.mean) / base.std
    hit = np.flatnonzero(z > config.k_sigma)
    fired_at = int(idx[hit[0]]) if hit.size else None
    return _record(config, detector, fired_at, times, float(z.max()) if z.size else 0.0, flags)


def ewma_detector(times, values, config: DetectorConfig, detector: str | None = None) -> AlarmRecord:
    """EWMA chart with asymptotic limit ``h_sigma*sigma*sqrt(lam/(2-lam))``."""
    times, values, base, flags = _prepare(times, values, config)
    if base is None:
        return _record(config, detector, None, times, 0.0, flags)
    idx = base.monitor
    lam = config.ewma_lambda
    sgn = 1.0 if config.direction == "up" else -1.0
    z = base.mean
    limit = config.h_sigma * base.std * math.sqrt(lam / (2 - lam))
    dev = np.empty(idx.size)
    for n, i in enumerate(idx):
        z = lam * values[i] + (1 - lam) * z
        dev[n] = sgn * (z - base.mean)
    hit = np.flatnonzero(dev > limit)
    fired_at = int(idx[hit[0]]) if hit.size else None
    score = float(dev.max() / (base.std * math.sqrt(lam / (2 - lam)))) if dev.size else 0.0
    return _record(config, detector, fired_at, times, score, flags)


# ---------------------------------------------------------------- Kendall


def kendall_tau_b(x, y) -> float:
    """Kendall tau-b; NaN when either variable is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 2:
        return float("nan")
    iu, ju = np.triu_indices(n, k=1)
    sx = np.sign(x[ju] - x[iu])
    sy = np.sign(y[ju] - y[iu])
    s = float(np.sum(sx * sy))
    n0 = iu.size
    tx = float(np.sum(sx == 0))
    ty = float(np.sum(sy == 0))
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    if denom == 0:
        return float("nan")
    return s / denom


def rolling_kendall(values: np.ndarray, window: int) -> np.ndarray:
    """Kendall tau-b of the last ``window`` valid samples against their order.

    Entry ``i`` is NaN unless sample ``i`` is valid and preceded by at
    least ``window - 1`` valid samples.
    """
    v = np.asarray(values, dtype=float)
    out = np.full(v.size, np.nan)
    valid = np.flatnonzero(np.isfinite(v))
    ranks = np.arange(window, dtype=float)
    for n in range(window - 1, valid.size):
        seg = v[valid[n - window + 1 : n + 1]]
        out[valid[n]] = kendall_tau_b(ranks, seg)
    return out


def kendall_slope(times, values, config: DetectorConfig, detector: str | None = None) -> AlarmRecord:
    """Trend alarm: rolling Kendall tau above ``kendall_thresh`` (below its negative for down).

    Alarms are considered only after the baseline window, so the rule
    shares its monitoring period with the CUSUM.
    """
    config.validate()
    times = np.asarray(times)
    values = np.asarray(values, dtype=float)
    flags: list[str] = []
    valid = np.flatnonzero(np.isfinite(values))
    valid = valid[valid >= config.skip_initial]
    if valid.size <= config.baseline_window:
        return _record(config, detector or "kendall", None, times, float("nan"), ["short_baseline"])
    start = valid[config.baseline_window]
    tau = rolling_kendall(values, config.kendall_window)
    if config.direction == "down":
        tau = -tau
    mon = tau[start:]
    hit = np.flatnonzero(mon > config.kendall_thresh)
    fired_at = int(start + hit[0]) if hit.size else None
    score = float(np.nanmax(mon)) if np.any(np.isfinite(mon)) else float("nan")
    return _record(config, detector or "kendall", fired_at, times, score, flags)


def combine_or(a: AlarmRecord, b: AlarmRecord, detector: str) -> AlarmRecord:
    """OR-fusion: fired if either fires, at the earlier fire time."""
    fired = [r for r in (a, b) if r.fired]
    flags = sorted(set(a.flags) | set(b.flags))
    score = a.score
    if not fired:
        return AlarmRecord(detector, a.k_sigma, a.h_sigma, False, None, score, flags)
    first = min(fired, key=lambda r: (r.fire_time, r.fire_index))
    return AlarmRecord(detector, a.k_sigma, a.h_sigma, True, first.fire_time, score, flags, first.fire_index)


def beta_minus_alarm(times, values, config: DetectorConfig, detector: str = "beta_minus") -> AlarmRecord:
    """Contagion-bridge alarm: upward CUSUM OR Kendall slope on the beta_- trace."""
    up = replace(config, direction="up")
    return combine_or(cusum(times, values, replace(up, kind="cusum")),
                      kendall_slope(times, values, replace(up, kind="kendall")), detector)


def run_detector(times, values, config: DetectorConfig, detector: str | None = None) -> AlarmRecord:
    kind = config.kind
    if kind == "cusum":
        return cusum(times, values, config, detector)
    if kind == "zscore":
        return zscore_detector(times, values, config, detector)
    if kind == "ewma":
        return ewma_detector(times, values, config, detector)
    if kind == "kendall":
        return kendall_slope(times, values, config, detector)
    if kind == "cusum_or_kendall":
        return combine_or(cusum(times, values, replace(config, kind="cusum")),
                          kendall_slope(times, values, replace(config, kind="kendall")),
                          detector or "cusum_or_kendall")
    if kind == "cusum_two_sided":
        up = cusum(times, values, replace(config, kind="cusum", direction="up"))
        down = cusum(times, values, replace(config, kind="cusum", direction="down"))
        rec = combine_or(up, down, detector or "cusum_two_sided")
        rec.score = max(up.score, down.score)
        return rec
    raise ValueError(f"unknown detector kind {kind!r}")


# ---------------------------------------------------------------- ARL benchmark


@dataclass
class ArlResult:
    shewhart_arl: float
    cusum_arl: float
    cusum_h: float
    in_control_arl: float
    n_paths: int


def cusum_arl_integral(h: float, k: float, shift: float = 0.0, n_nodes: int = 64) -> float:
    """Zero-state ARL of a one-sided standard-normal CUSUM (Fredholm equation).

    Solves ``L(u) = 1 + L(0) Phi(k - u - shift) + int_0^h L(y) phi(y + k - u - shift) dy``
    with Gauss-Legendre quadrature.
    """
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    y = 0.5 * h * (x + 1)
    wy = 0.5 * h * w
    # rows: u = y_i (and u = 0 appended as last row)
    u = np.concatenate([y, [0.0]])
    A = np.zeros((n_nodes + 1, n_nodes + 1))
    A[:, :n_nodes] = -wy[None, :] * norm.pdf(y[None, :] - u[:, None] + k - shift)
    A[:, n_nodes] = -norm.cdf(k - u - shift)
    A[np.arange(n_nodes + 1), np.arange(n_nodes + 1)] += 1.0
    L = np.linalg.solve(A, np.ones(n_nodes + 1))
    return float(L[-1])


def calibrate_cusum_h(target_arl0: float, k: float) -> float:
    """Threshold ``h`` at which the in-control ARL equals ``target_arl0``."""
    lo, hi = 0.1, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if cusum_arl_integral(mid, k) < target_arl0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def run_lengths_shewhart(rng, n_paths: int, shift: float, limit: float, max_len: int = 100_000) -> np.ndarray:
    """Run lengths of a one-sided Shewhart rule (geometric, simulated directly)."""
    out = np.zeros(n_paths, dtype=np.int64)
    alive = np.arange(n_paths)
    t = 0
    while alive.size and t < max_len:
        t += 1
        x = rng.standard_normal(alive.size) + shift
        hit = x > limit
        out[alive[hit]] = t
        alive = alive[~hit]
    out[alive] = max_len
    return out


def run_lengths_cusum(rng, n_paths: int, shift: float, k: float, h: float, max_len: int = 100_000) -> np.ndarray:
    out = np.zeros(n_paths, dtype=np.int64)
    S = np.zeros(n_paths)
    alive = np.arange(n_paths)
    t = 0
    while alive.size and t < max_len:
        t += 1
        x = rng.standard_normal(alive.size) + shift
        S = np.maximum(0.0, S + x - k)
        hit = S > h
        out[alive[hit]] = t
        alive = alive[~hit]
        S = S[~hit]
    out[alive] = max_len
    return out


def arl_benchmark(n_paths: int = 10_000, shift: float = 1.0, shewhart_limit: float = 3.0,
                  cusum_k: float = 0.5, seed: int = 0) -> ArlResult:
    """Out-of-control ARL of a Shewhart rule and a CUSUM at matched false-alarm rate.

    The CUSUM threshold is set so its in-control ARL equals that of the
    one-sided Shewhart rule, ``1 / P(Z > limit)``.
    """
    rng = np.random.default_rng(seed)
    arl0 = 1.0 / norm.sf(shewhart_limit)
    h = calibrate_cusum_h(arl0, cusum_k)
    sh = run_lengths_shewhart(rng, n_paths, shift, shewhart_limit)
    cu = run_lengths_cusum(rng, n_paths, shift, cusum_k, h)
    return ArlResult(float(sh.mean()), float(cu.mean()), h, arl0, n_paths)


# ---------------------------------------------------------------- drift benchmark


@dataclass(frozen=True)
class DriftConfig:
    n_paths: int = 5000
    horizon: int = 420
    change_point: int = 300
    drift: float = 0.04
    cusum_k: float = 0.45
    far_target: float = 0.10
    seed: int = 0


@dataclass
class DriftResult:
    cusum_h: float
    shewhart_limit: float
    cusum_far: float
    shewhart_far: float
    cusum_median_delay: float
    shewhart_median_delay: float
    cusum_detection: float
    shewhart_detection: float

    @property
    def ratio(self) -> float:
        return self.shewhart_median_delay / self.cusum_median_delay

    def as_rows(self) -> list[list]:
        return [
            ["cusum", self.cusum_h, self.cusum_far, self.cusum_median_delay, self.cusum_detection],
            ["shewhart", self.shewhart_limit, self.shewhart_far, self.shewhart_median_delay,
             self.shewhart_detection],
        ]


class CalibrationError(RuntimeError):
    pass


def _cusum_max_paths(X: np.ndarray, k: float) -> np.ndarray:
    S = np.zeros(X.shape[0])
    out = np.zeros_like(X)
    for t in range(X.shape[1]):
        S = np.maximum(0.0, S + X[:, t] - k)
        out[:, t] = S
    return out


def _quantile_threshold(stat_max: np.ndarray, far: float) -> float:
    """Smallest threshold whose exceedance fraction is at most ``far``."""
    return float(np.quantile(stat_max, 1.0 - far, method="higher"))


def _first_above(paths: np.ndarray, thr: float, start: int) -> np.ndarray:
    above = paths[:, start:] > thr
    hit = above.any(axis=1)
    first = np.where(hit, above.argmax(axis=1), -1)
    return first


def stylized_drift_benchmark(config: DriftConfig = DriftConfig()) -> DriftResult:
    """CUSUM vs Shewhart on a linear mean drift after a change point.

    Both thresholds are calibrated on independent null paths so that the
    fraction of null paths with any alarm over the horizon equals
    ``far_target``. Delays are counted from the change point to the first
    alarm at or after it.
    """
    c = config
    if not 0 < c.far_target < 1:
        raise CalibrationError("far_target must lie in (0, 1)")
    rng = np.random.default_rng(c.seed)
    null = rng.standard_normal((c.n_paths, c.horizon))
    h = _quantile_threshold(_cusum_max_paths(null, c.cusum_k).max(axis=1), c.far_target)
    lim = _quantile_threshold(null.max(axis=1), c.far_target)
    if not (np.isfinite(h) and h > 0):
        raise CalibrationError("CUSUM threshold could not be calibrated")

    check = rng.standard_normal((c.n_paths, c.horizon))
    far_c = float((_cusum_max_paths(check, c.cusum_k).max(axis=1) > h).mean())
    far_s = float((check.max(axis=1) > lim).mean())

    mean = np.zeros(c.horizon)
    mean[c.change_point:] = c.drift * np.arange(1, c.horizon - c.change_point + 1)
    alt = rng.standard_normal((c.n_paths, c.horizon)) + mean
    dc = _first_above(_cusum_max_paths(alt, c.cusum_k), h, c.change_point)
    ds = _first_above(alt, lim, c.change_point)
    delay_c = dc[dc >= 0] + 1
    delay_s = ds[ds >= 0] + 1
    return DriftResult(
        cusum_h=h,
        shewhart_limit=lim,
        cusum_far=far_c,
        shewhart_far=far_s,
        cusum_median_delay=float(np.median(delay_c)) if delay_c.size else float("nan"),
        shewhart_median_delay=float(np.median(delay_s)) if delay_s.size else float("nan"),
        cusum_detection=float((dc >= 0).mean()),
        shewhart_detection=float((ds >= 0).mean()),
    )
