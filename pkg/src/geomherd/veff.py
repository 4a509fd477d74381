"""Effective behavioural vocabulary size from a fixed scalar-quantization codebook.

Every agent is summarised per window by three bounded features (mean
action, switch rate, agreement with the cross-sectional mode). Each
feature is binned on fixed quartile edges, giving one of 64 codes. The
effective vocabulary is ``exp(H)`` of the code histogram over agents.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent_graph import GraphConfig, snapshot_times
from .substrates import ActionTrajectory

FEATURES = ("mean_action", "switch_rate", "majority_agreement")


@dataclass(frozen=True)
class FsqCodebook:
    dims: int = 3
    levels: int = 4
    edges: tuple = field(default=(0.25, 0.5, 0.75))

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.size != self.levels - 1:
            raise ValueError("need levels - 1 bin edges")
        if np.any(np.diff(e) <= 0) or e[0] <= 0 or e[-1] >= 1:
            raise ValueError("bin edges must be strictly increasing inside (0, 1)")

    @property
    def size(self) -> int:
        return self.levels**self.dims

    def quantize(self, features: np.ndarray) -> np.ndarray:
        """Map ``[n, dims]`` features in [0, 1] to integer codes in ``[0, size)``."""
        f = np.asarray(features, dtype=float)
        if f.ndim != 2 or f.shape[1] != self.dims:
            raise ValueError(f"features must have shape (n, {self.dims})")
        lv = np.searchsorted(np.asarray(self.edges), f, side="right")
        weights = self.levels ** np.arange(self.dims - 1, -1, -1)
        return lv @ weights

    def metadata(self) -> dict:
        return {"dims": self.dims, "levels": self.levels, "edges": list(self.edges),
                "features": list(FEATURES), "entropy": "natural log"}


def behavioral_features(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """Per-agent feature triple for a ``[T_w, N]`` window of symbol codes."""
    codes = np.asarray(codes)
    T, N = codes.shape
    mean_action = codes.mean(axis=0) / (n_symbols - 1) if n_symbols > 1 else np.zeros(N)
    if T > 1:
        switch = (codes[1:] != codes[:-1]).mean(axis=0)
    else:
        switch = np.zeros(N)
    counts = np.stack([(codes == q).sum(axis=1) for q in range(n_symbols)], axis=1)
    mode = counts.argmax(axis=1)
    agree = (codes == mode[:, None]).mean(axis=0)
    return np.column_stack([mean_action, switch, agree])


def entropy_exp(labels: np.ndarray) -> float:
    """``exp`` of the plug-in Shannon entropy of a label multiset."""
    _, c = np.unique(np.asarray(labels), return_counts=True)
    p = c / c.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def veff_at(codes: np.ndarray, n_symbols: int, codebook: FsqCodebook = FsqCodebook()) -> float:
    return entropy_exp(codebook.quantize(behavioral_features(codes, n_symbols)))


def veff_series(traj: ActionTrajectory, graph_config: GraphConfig = GraphConfig(),
                codebook: FsqCodebook = FsqCodebook(), until: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(t, V_eff)`` on the snapshot grid of ``graph_config``."""
    if traj.n_steps < graph_config.window:
        raise ValueError("trajectory shorter than the graph window")
    codes = traj.symbol_codes()
    q = len(traj.symbols)
    times = snapshot_times(traj.n_steps, graph_config, until)
    vals = [veff_at(codes[t - graph_config.window : t], q, codebook) for t in times]
    return np.asarray(times, dtype=np.int64), np.asarray(vals)


def lagged_xcorr(x: np.ndarray, y: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation of ``x[s]`` with ``y[s + lag]`` for lag in ``[-max_lag, max_lag]``.

    A peak at positive lag means ``x`` leads ``y``.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    lags = np.arange(-max_lag, max_lag + 1)
    out = np.full(lags.size, np.nan)
    for k, lag in enumerate(lags):
        a, b = (x[: x.size - lag], y[lag:]) if lag >= 0 else (x[-lag:], y[: y.size + lag])
        ok = np.isfinite(a) & np.isfinite(b)
        if ok.sum() > 2 and a[ok].std() > 0 and b[ok].std() > 0:
            out[k] = np.corrcoef(a[ok], b[ok])[0, 1]
    return lags, out
