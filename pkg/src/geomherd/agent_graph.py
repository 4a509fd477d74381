"""Dynamic agent-interaction graphs built from windowed action streams."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .io import atomic_write_text
from .substrates import ActionTrajectory

EDGE_MODES = ("binary_agreement", "cosine", "knn_heading", "jaccard_holdings")


@dataclass(frozen=True)
class GraphConfig:
    window: int = 100
    threshold: float = 0.5
    stride: int = 10
    edge_mode: str = "binary_agreement"
    knn_k: int = 10

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not 1 <= self.stride <= self.window:
            raise ValueError("stride must satisfy 1 <= stride <= window")
        if self.edge_mode not in EDGE_MODES:
            raise ValueError(f"edge_mode must be one of {EDGE_MODES}")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")


@dataclass
class AgentGraphSnapshot:
    """Undirected weighted graph at step ``t``.

    Edges are stored once with ``i < j``, sorted lexicographically.
    """

    t: int
    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    degenerate: bool = False
    _adj: dict | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_edges(cls, t: int, n: int, edges: Sequence[tuple[int, int, float]]) -> "AgentGraphSnapshot":
        if len(edges) == 0:
            return cls.empty(t, n)
        e = np.asarray(edges, dtype=float)
        i, j, w = e[:, 0].astype(np.int64), e[:, 1].astype(np.int64), e[:, 2]
        if np.any(i == j):
            raise ValueError("self-loops are not allowed")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("edge weights must be positive and finite")
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        if np.any(hi >= n) or np.any(lo < 0):
            raise ValueError("edge endpoint out of range")
        order = np.lexsort((hi, lo))
        lo, hi, w = lo[order], hi[order], w[order]
        if np.any((np.diff(lo) == 0) & (np.diff(hi) == 0)):
            raise ValueError("duplicate edge")
        return _finish(cls(t, n, lo, hi, w))

    @classmethod
    def from_matrix(cls, t: int, W: np.ndarray, keep: np.ndarray | None = None) -> "AgentGraphSnapshot":
        """Build from a symmetric weight matrix; ``keep`` masks retained pairs."""
        n = W.shape[0]
        iu, ju = np.triu_indices(n, k=1)
        mask = W[iu, ju] > 0
        if keep is not None:
            mask &= keep[iu, ju]
        return _finish(cls(t, n, iu[mask], ju[mask], W[iu, ju][mask].astype(float)))

    @classmethod
    def empty(cls, t: int, n: int) -> "AgentGraphSnapshot":
        z = np.zeros(0, dtype=np.int64)
        return cls(t, n, z, z.copy(), np.zeros(0), degenerate=True)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.src, self.dst, self.weight)]

    def neighbors(self, node: int) -> dict[int, float]:
        if self._adj is None:
            adj: dict[int, dict[int, float]] = {}
            for i, j, w in zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()):
                adj.setdefault(i, {})[j] = w
                adj.setdefault(j, {})[i] = w
            self._adj = adj
        return self._adj.get(int(node), {})

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n) + np.bincount(self.dst, minlength=self.n)

    def weight_matrix(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        W[self.src, self.dst] = self.weight
        W[self.dst, self.src] = self.weight
        return W

    def with_weights(self, weight: np.ndarray) -> "AgentGraphSnapshot":
        return AgentGraphSnapshot(self.t, self.n, self.src, self.dst, np.asarray(weight, float), self.degenerate)

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "n": self.n,
            "degenerate": self.degenerate,
            "edges": [[i, j, w] for i, j, w in self.edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AgentGraphSnapshot":
        g = cls.from_edges(d["t"], d["n"], [tuple(e) for e in d["edges"]])
        g.degenerate = bool(d.get("degenerate", g.degenerate))
        return g


def _finish(g: AgentGraphSnapshot) -> AgentGraphSnapshot:
    touched = np.unique(np.concatenate([g.src, g.dst]))
    g.degenerate = touched.size < 2
    if g.degenerate:
        return AgentGraphSnapshot.empty(g.t, g.n)
    return g


# ---------------------------------------------------------------- weights


def agreement_weight(actions_i, actions_j) -> float:
    """Fraction of steps on which two action windows agree."""
    a = np.asarray(actions_i)
    b = np.asarray(actions_j)
    if a.shape != b.shape:
        raise ValueError("windows must have equal length")
    if a.size == 0:
        raise ValueError("empty window")
    return float(np.mean(a == b))


def _one_hot(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """[T, N] codes -> [N, T * n_symbols] indicator rows."""
    T, N = codes.shape
    O = np.zeros((N, T, n_symbols))
    O[np.arange(N)[:, None], np.arange(T)[None, :], codes.T] = 1.0
    return O.reshape(N, T * n_symbols)


def agreement_matrix(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """All-pairs agreement frequency for a ``[T_w, N]`` window of codes."""
    O = _one_hot(codes, n_symbols)
    A = O @ O.T / codes.shape[0]
    np.fill_diagonal(A, 0.0)
    return A


def cosine_matrix(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """Cosine similarity of one-hot-lifted action windows."""
    O = _one_hot(codes, n_symbols)
    norms = np.linalg.norm(O, axis=1)
    C = O @ O.T / np.outer(norms, norms)
    np.fill_diagonal(C, 0.0)
    return C


def heading_features(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """Embed each symbol as its bin-centre unit vector; rows are agents."""
    ang = (codes.astype(float) + 0.5) * (2 * np.pi / n_symbols)
    return np.concatenate([np.cos(ang).T, np.sin(ang).T], axis=1)


def knn_graph(t: int, features: np.ndarray, k: int) -> AgentGraphSnapshot:
    """Symmetrised k-nearest-neighbour graph with unit weights."""
    n = features.shape[0]
    k = min(k, n - 1)
    if k < 1:
        return AgentGraphSnapshot.empty(t, n)
    _, idx = cKDTree(features).query(features, k=k + 1)
    keep = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k + 1)
    keep[rows, idx.ravel()] = True
    np.fill_diagonal(keep, False)
    keep |= keep.T
    return AgentGraphSnapshot.from_matrix(t, keep.astype(float))


def jaccard_matrix(sets: Sequence[set]) -> np.ndarray:
    n = len(sets)
    J = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            u = len(sets[i] | sets[j])
            if u:
                J[i, j] = J[j, i] = len(sets[i] & sets[j]) / u
    return J


# ---------------------------------------------------------------- snapshots


def snapshot_times(n_steps: int, config: GraphConfig, until: int | None = None) -> list[int]:
    last = n_steps if until is None else min(n_steps, until)
    return list(range(config.window, last + 1, config.stride))


def build_snapshot(traj: ActionTrajectory, t: int, config: GraphConfig) -> AgentGraphSnapshot:
    """Snapshot whose window covers steps ``t - T_w + 1 .. t``."""
    if t < config.window or t > traj.n_steps:
        raise ValueError(f"snapshot time {t} outside [{config.window}, {traj.n_steps}]")
    codes = traj.symbol_codes()[t - config.window : t]
    q = len(traj.symbols)
    mode = config.edge_mode
    if mode == "binary_agreement":
        A = agreement_matrix(codes, q)
        return AgentGraphSnapshot.from_matrix(t, A, A > config.threshold)
    if mode == "cosine":
        return AgentGraphSnapshot.from_matrix(t, cosine_matrix(codes, q))
    if mode == "knn_heading":
        return knn_graph(t, heading_features(codes, q), config.knn_k)
    raise ValueError(f"edge_mode {mode!r} needs holdings input, use build_jaccard_snapshots")


def build_snapshots(traj: ActionTrajectory, config: GraphConfig, until: int | None = None) -> list[AgentGraphSnapshot]:
    """Snapshots at ``t = T_w, T_w + stride, ...`` (optionally only ``t <= until``)."""
    config.validate()
    if traj.n_steps < config.window:
        raise ValueError("trajectory shorter than the graph window")
    return [build_snapshot(traj, t, config) for t in snapshot_times(traj.n_steps, config, until)]


def build_jaccard_snapshots(holdings: Sequence[Sequence[set]], window: int = 4) -> list[AgentGraphSnapshot]:
    """Fund-overlap graphs from per-period position sets.

    ``holdings[p][i]`` is the set of positions of fund ``i`` in period ``p``.
    A fund's position set at period ``p`` is the union over the last
    ``window`` periods; edges carry the Jaccard overlap and disjoint pairs
    are dropped.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for p in range(window - 1, len(holdings)):
        n = len(holdings[p])
        sets = [set().union(*(holdings[q][i] for q in range(p - window + 1, p + 1))) for i in range(n)]
        out.append(AgentGraphSnapshot.from_matrix(p + 1, jaccard_matrix(sets)))
    return out


def edge_density(g: AgentGraphSnapshot) -> float:
    return g.n_edges / (g.n * (g.n - 1) / 2) if g.n > 1 else 0.0


def write_snapshots(snaps: Sequence[AgentGraphSnapshot], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for g in snaps:
        p = out_dir / f"snapshot_{g.t:06d}.json"
        atomic_write_text(p, json.dumps(g.to_json(), separators=(",", ":")) + "\n")
        paths.append(p)
    return paths


def read_snapshots(in_dir: str | Path) -> list[AgentGraphSnapshot]:
    return [AgentGraphSnapshot.from_json(json.loads(p.read_text()))
            for p in sorted(Path(in_dir).glob("snapshot_*.json"))]
